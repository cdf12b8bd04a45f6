#include "taps/event_loop.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <csignal>
#include <cstring>

#include "taps/error.hpp"

namespace taps {

TimerId SimLoop::call_after(Duration delay, Task task) {
  const TimerId id = next_id_++;
  queue_.push(Entry{now_ + std::max(delay, Duration::zero()), next_seq_++, id});
  tasks_.emplace(id, std::move(task));
  return id;
}

void SimLoop::cancel(TimerId id) {
  if (tasks_.count(id) != 0) cancelled_.insert(id);
}

bool SimLoop::step(TimePoint limit) {
  while (!queue_.empty()) {
    Entry e = queue_.top();
    if (e.at > limit) return false;
    queue_.pop();
    auto node = tasks_.extract(e.id);
    if (cancelled_.erase(e.id) != 0) continue;
    now_ = e.at;
    ++processed_;
    node.mapped()();
    return true;
  }
  return false;
}

void SimLoop::clear() {
  while (!tasks_.empty()) {
    auto doomed = std::move(tasks_);
    tasks_.clear();
    queue_ = {};
    cancelled_.clear();
    doomed.clear();
  }
  queue_ = {};
  cancelled_.clear();
}

void SimLoop::run() {
  stopped_ = false;
  while (!stopped_ && step(TimePoint::max())) {
  }
}

void SimLoop::run_until(TimePoint deadline) {
  stopped_ = false;
  while (!stopped_ && step(deadline)) {
  }
  if (!stopped_ && deadline > now_) now_ = deadline;
}

namespace {
// Written from signal handlers; one process-wide pipe per RealLoop instance
// that registered signals (the latest registration wins).
std::atomic<int> g_signal_fd{-1};

extern "C" void forward_signal(int signo) {
  const int fd = g_signal_fd.load();
  if (fd >= 0) {
    const unsigned char b = static_cast<unsigned char>(signo);
    [[maybe_unused]] auto n = ::write(fd, &b, 1);
  }
}
}  // namespace

RealLoop::RealLoop() : epoch_(std::chrono::steady_clock::now()) {
  wake_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
  if (wake_fd_ < 0) throw Error(Errc::config_error, std::strerror(errno));
}

RealLoop::~RealLoop() {
  if (signal_pipe_[1] >= 0 && g_signal_fd.load() == signal_pipe_[1]) g_signal_fd.store(-1);
  for (int fd : signal_pipe_)
    if (fd >= 0) ::close(fd);
  if (wake_fd_ >= 0) ::close(wake_fd_);
}

TimePoint RealLoop::now() const {
  return std::chrono::duration_cast<TimePoint>(std::chrono::steady_clock::now() - epoch_);
}

TimerId RealLoop::call_after(Duration delay, Task task) {
  const TimerId id = next_id_++;
  const TimePoint at = now() + std::max(delay, Duration::zero());
  timers_.emplace(std::pair{at, id}, std::move(task));
  timer_index_.emplace(id, at);
  return id;
}

void RealLoop::cancel(TimerId id) {
  auto it = timer_index_.find(id);
  if (it == timer_index_.end()) return;
  timers_.erase({it->second, id});
  timer_index_.erase(it);
}

void RealLoop::post(Task task) {
  {
    std::lock_guard lock(mutex_);
    posted_.push_back(std::move(task));
  }
  wake();
}

bool RealLoop::in_loop_thread() const {
  return !running_ || std::this_thread::get_id() == loop_thread_;
}

void RealLoop::wake() {
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof one);
}

void RealLoop::stop() {
  {
    std::lock_guard lock(mutex_);
    stopped_ = true;
  }
  wake();
}

void RealLoop::watch(int fd, short events, FdCallback cb) { watches_[fd] = Watch{events, std::move(cb)}; }

void RealLoop::update_watch(int fd, short events) {
  if (auto it = watches_.find(fd); it != watches_.end()) it->second.events = events;
}

void RealLoop::unwatch(int fd) { watches_.erase(fd); }

void RealLoop::on_signal(int signo, Task task) {
  if (signal_pipe_[0] < 0) {
    if (::pipe2(signal_pipe_, O_NONBLOCK | O_CLOEXEC) != 0) throw Error(Errc::config_error, std::strerror(errno));
    g_signal_fd.store(signal_pipe_[1]);
    watch(signal_pipe_[0], readable, [this](short) {
      unsigned char b;
      while (::read(signal_pipe_[0], &b, 1) == 1) {
        if (auto it = signal_tasks_.find(b); it != signal_tasks_.end()) it->second();
      }
    });
  }
  signal_tasks_[signo] = std::move(task);
  struct sigaction sa {};
  sa.sa_handler = forward_signal;
  sigemptyset(&sa.sa_mask);
  ::sigaction(signo, &sa, nullptr);
}

void RealLoop::drain_posted() {
  std::vector<Task> batch;
  {
    std::lock_guard lock(mutex_);
    batch.swap(posted_);
  }
  for (auto& t : batch) t();
}

void RealLoop::run() {
  loop_thread_ = std::this_thread::get_id();
  running_ = true;
  {
    std::lock_guard lock(mutex_);
    stopped_ = false;
  }
  std::vector<pollfd> fds;
  for (;;) {
    drain_posted();
    // Due timers; each may schedule more.
    while (!timers_.empty() && timers_.begin()->first.first <= now()) {
      auto node = timers_.extract(timers_.begin());
      timer_index_.erase(node.key().second);
      node.mapped()();
      drain_posted();
    }
    {
      std::lock_guard lock(mutex_);
      if (stopped_) break;
    }
    int timeout_ms = -1;
    if (!timers_.empty()) {
      const auto wait = timers_.begin()->first.first - now();
      timeout_ms = static_cast<int>(std::max<std::int64_t>(
          0, std::chrono::ceil<std::chrono::milliseconds>(wait).count()));
    }
    {
      std::lock_guard lock(mutex_);
      if (!posted_.empty()) timeout_ms = 0;
    }
    fds.clear();
    fds.push_back(pollfd{wake_fd_, POLLIN, 0});
    for (const auto& [fd, w] : watches_) {
      short ev = 0;
      if (w.events & readable) ev |= POLLIN;
      if (w.events & writable) ev |= POLLOUT;
      fds.push_back(pollfd{fd, ev, 0});
    }
    const int n = ::poll(fds.data(), fds.size(), timeout_ms);
    if (n < 0 && errno != EINTR) break;
    if (n <= 0) continue;
    if (fds[0].revents & POLLIN) {
      std::uint64_t v;
      [[maybe_unused]] auto r = ::read(wake_fd_, &v, sizeof v);
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      if (fds[i].revents == 0) continue;
      auto it = watches_.find(fds[i].fd);
      if (it == watches_.end()) continue;  // unwatched by an earlier callback
      short rev = 0;
      if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) rev |= readable;
      if (fds[i].revents & (POLLOUT | POLLERR)) rev |= writable;
      auto cb = it->second.cb;  // callback may unwatch itself
      cb(rev);
    }
  }
  running_ = false;
}

}  // namespace taps
