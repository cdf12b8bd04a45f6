#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <queue>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace taps {

using Duration = std::chrono::nanoseconds;
/// Time since the owning loop's epoch.
using TimePoint = std::chrono::nanoseconds;
using Task = std::function<void()>;
using TimerId = std::uint64_t;

inline double to_seconds(Duration d) { return std::chrono::duration<double>(d).count(); }
inline Duration from_seconds(double s) {
  return std::chrono::duration_cast<Duration>(std::chrono::duration<double>(s));
}

/// Clock + timer + task queue consumed by racing and connections. All
/// callbacks run serially on the loop.
class EventLoop {
 public:
  virtual ~EventLoop() = default;

  virtual TimePoint now() const = 0;
  virtual TimerId call_after(Duration delay, Task task) = 0;
  virtual void cancel(TimerId id) = 0;
  /// Thread-safe for RealLoop; runs the task on the loop after pending work.
  virtual void post(Task task) { call_after(Duration::zero(), std::move(task)); }
  virtual bool in_loop_thread() const { return true; }
  virtual void run() = 0;
  virtual void stop() = 0;

  void dispatch(Task task) {
    if (in_loop_thread()) {
      task();
    } else {
      post(std::move(task));
    }
  }
};

/// Discrete-event loop with a virtual clock. run() returns when no work is
/// left or stop() was called.
class SimLoop final : public EventLoop {
 public:
  TimePoint now() const override { return now_; }
  TimerId call_after(Duration delay, Task task) override;
  void cancel(TimerId id) override;
  void run() override;
  void stop() override { stopped_ = true; }

  /// Runs events scheduled at or before `deadline`, then advances the clock to it.
  void run_until(TimePoint deadline);
  void run_for(Duration d) { run_until(now_ + d); }
  bool idle() const { return queue_.size() == cancelled_.size(); }
  /// Drops every pending task without running it. Tasks scheduled by the
  /// destructors of dropped tasks are dropped as well.
  void clear();
  std::uint64_t events_processed() const { return processed_; }

 private:
  struct Entry {
    TimePoint at;
    std::uint64_t seq;
    TimerId id;
    bool operator>(const Entry& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  bool step(TimePoint limit);

  TimePoint now_{0};
  std::uint64_t next_seq_ = 0;
  TimerId next_id_ = 1;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue_;
  std::unordered_map<TimerId, Task> tasks_;
  std::unordered_set<TimerId> cancelled_;
  bool stopped_ = false;
  std::uint64_t processed_ = 0;
};

/// poll(2)-based loop over real file descriptors and a steady clock.
class RealLoop final : public EventLoop {
 public:
  static constexpr short readable = 0x1;
  static constexpr short writable = 0x4;
  using FdCallback = std::function<void(short revents)>;

  RealLoop();
  ~RealLoop() override;
  RealLoop(const RealLoop&) = delete;
  RealLoop& operator=(const RealLoop&) = delete;

  TimePoint now() const override;
  TimerId call_after(Duration delay, Task task) override;
  void cancel(TimerId id) override;
  void post(Task task) override;
  bool in_loop_thread() const override;
  void run() override;
  void stop() override;

  void watch(int fd, short events, FdCallback cb);
  void update_watch(int fd, short events);
  void unwatch(int fd);

  /// Installs a handler that runs `task` on the loop when `signo` arrives.
  void on_signal(int signo, Task task);

 private:
  void wake();
  void drain_posted();

  std::chrono::steady_clock::time_point epoch_;
  int wake_fd_ = -1;
  int signal_pipe_[2] = {-1, -1};
  std::map<std::pair<TimePoint, TimerId>, Task> timers_;
  std::unordered_map<TimerId, TimePoint> timer_index_;
  TimerId next_id_ = 1;
  struct Watch {
    short events;
    FdCallback cb;
  };
  std::map<int, Watch> watches_;
  std::map<int, Task> signal_tasks_;
  std::mutex mutex_;
  std::vector<Task> posted_;
  std::thread::id loop_thread_{};
  std::atomic<bool> running_{false};
  bool stopped_ = false;
};

}  // namespace taps
