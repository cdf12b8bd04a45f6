#include "taps/socket_backend.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

namespace taps {

std::string Endpoint::to_string() const {
  if (address.find(':') != std::string::npos) return "[" + address + "]:" + std::to_string(port);
  return address + ":" + std::to_string(port);
}

namespace {

constexpr std::size_t read_chunk = 64 * 1024;

std::string errno_text(int err) { return std::strerror(err); }

bool to_sockaddr(const Endpoint& ep, sockaddr_storage& ss, socklen_t& len) {
  std::memset(&ss, 0, sizeof ss);
  auto* v4 = reinterpret_cast<sockaddr_in*>(&ss);
  if (::inet_pton(AF_INET, ep.address.c_str(), &v4->sin_addr) == 1) {
    v4->sin_family = AF_INET;
    v4->sin_port = htons(ep.port);
    len = sizeof(sockaddr_in);
    return true;
  }
  auto* v6 = reinterpret_cast<sockaddr_in6*>(&ss);
  if (::inet_pton(AF_INET6, ep.address.c_str(), &v6->sin6_addr) == 1) {
    v6->sin6_family = AF_INET6;
    v6->sin6_port = htons(ep.port);
    len = sizeof(sockaddr_in6);
    return true;
  }
  return false;
}

Endpoint from_sockaddr(const sockaddr_storage& ss) {
  char buf[INET6_ADDRSTRLEN] = {};
  if (ss.ss_family == AF_INET) {
    const auto* v4 = reinterpret_cast<const sockaddr_in*>(&ss);
    ::inet_ntop(AF_INET, &v4->sin_addr, buf, sizeof buf);
    return Endpoint{buf, ntohs(v4->sin_port)};
  }
  const auto* v6 = reinterpret_cast<const sockaddr_in6*>(&ss);
  if (IN6_IS_ADDR_V4MAPPED(&v6->sin6_addr)) {
    ::inet_ntop(AF_INET, &v6->sin6_addr.s6_addr[12], buf, sizeof buf);
  } else {
    ::inet_ntop(AF_INET6, &v6->sin6_addr, buf, sizeof buf);
  }
  return Endpoint{buf, ntohs(v6->sin6_port)};
}

// IPv4 destinations on a dual-stack IPv6 socket need the mapped form.
void map_v4(sockaddr_storage& ss, socklen_t& len) {
  if (ss.ss_family != AF_INET) return;
  const sockaddr_in v4 = *reinterpret_cast<sockaddr_in*>(&ss);
  std::memset(&ss, 0, sizeof ss);
  auto* v6 = reinterpret_cast<sockaddr_in6*>(&ss);
  v6->sin6_family = AF_INET6;
  v6->sin6_port = v4.sin_port;
  v6->sin6_addr.s6_addr[10] = 0xff;
  v6->sin6_addr.s6_addr[11] = 0xff;
  std::memcpy(&v6->sin6_addr.s6_addr[12], &v4.sin_addr, 4);
  len = sizeof *v6;
}

void apply_dscp(int fd, int family, std::uint8_t dscp) {
  const int tos = dscp << 2;
  if (family == AF_INET6) {
    ::setsockopt(fd, IPPROTO_IPV6, IPV6_TCLASS, &tos, sizeof tos);
  } else {
    ::setsockopt(fd, IPPROTO_IP, IP_TOS, &tos, sizeof tos);
  }
}

class TcpCarrier final : public StreamCarrier, public std::enable_shared_from_this<TcpCarrier> {
 public:
  TcpCarrier(RealLoop& loop, int fd, int family, Endpoint remote, bool connected)
      : loop_(loop), fd_(fd), family_(family), remote_(std::move(remote)), connected_(connected) {}

  ~TcpCarrier() override { release(); }

  void arm() {
    std::weak_ptr<TcpCarrier> weak = shared_from_this();
    loop_.watch(fd_, connected_ ? RealLoop::readable : RealLoop::writable, [weak](short rev) {
      if (auto self = weak.lock()) self->on_io(rev);
    });
  }

  void set_handlers(Handlers h) override { h_ = std::move(h); }

  /// Reports a connect() that failed synchronously through the handlers.
  void fail_async(int err) {
    std::weak_ptr<TcpCarrier> weak = shared_from_this();
    loop_.post([weak, err] {
      if (auto self = weak.lock()) self->fail(err);
    });
  }

  void write(ByteView bytes) override {
    if (fd_ < 0 || closing_) return;
    if (connected_ && out_.empty()) {
      const ssize_t n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
      if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK) {
        fail(errno);
        return;
      }
      const auto sent = static_cast<std::size_t>(std::max<ssize_t>(n, 0));
      out_.insert(out_.end(), bytes.begin() + static_cast<std::ptrdiff_t>(sent), bytes.end());
    } else {
      append(out_, bytes);
    }
    update_interest();
  }

  std::size_t pending_bytes() const override { return out_.size(); }

  void close() override {
    if (fd_ < 0 || closing_) return;
    closing_ = true;
    if (out_.empty() && connected_) release();
  }

  void abort() override {
    if (fd_ < 0) return;
    linger lg{1, 0};
    ::setsockopt(fd_, SOL_SOCKET, SO_LINGER, &lg, sizeof lg);
    release();
  }

  void set_dscp(std::uint8_t dscp) override {
    if (fd_ >= 0) apply_dscp(fd_, family_, dscp);
  }
  Endpoint remote() const override { return remote_; }
  bool is_open() const override { return fd_ >= 0; }

 private:
  void update_interest() {
    if (fd_ < 0) return;
    short ev = connected_ ? RealLoop::readable : 0;
    if (!connected_ || !out_.empty()) ev |= RealLoop::writable;
    loop_.update_watch(fd_, ev);
  }

  void release() {
    if (fd_ < 0) return;
    loop_.unwatch(fd_);
    ::close(fd_);
    fd_ = -1;
  }

  void fail(int err) {
    release();
    if (h_.on_closed) {
      const Errc code = err == ECONNREFUSED ? Errc::connection_refused
                        : err == ECONNRESET ? Errc::connection_reset
                        : err == ETIMEDOUT  ? Errc::timeout
                                            : Errc::carrier_closed;
      Error e(code, errno_text(err));
      auto cb = h_.on_closed;
      cb(&e);
    }
  }

  void on_io(short rev) {
    auto keep = shared_from_this();
    if (!connected_) {
      if (!(rev & RealLoop::writable)) return;
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) {
        fail(err);
        return;
      }
      connected_ = true;
      update_interest();
      if (h_.on_connected) h_.on_connected();
      if (fd_ >= 0 && !out_.empty()) flush();
      return;
    }
    if ((rev & RealLoop::writable) && fd_ >= 0) flush();
    if ((rev & RealLoop::readable) && fd_ >= 0) read_all();
  }

  void flush() {
    while (!out_.empty() && fd_ >= 0) {
      const ssize_t n = ::send(fd_, out_.data(), out_.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) break;
        fail(errno);
        return;
      }
      out_.erase(out_.begin(), out_.begin() + n);
    }
    if (fd_ < 0) return;
    if (out_.empty()) {
      if (closing_) {
        release();
        return;
      }
      update_interest();
      if (h_.on_writable) h_.on_writable();
    } else {
      update_interest();
    }
  }

  void read_all() {
    std::uint8_t buf[read_chunk];
    while (fd_ >= 0) {
      const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n > 0) {
        if (h_.on_data) h_.on_data(ByteView(buf, static_cast<std::size_t>(n)));
        continue;
      }
      if (n == 0) {
        release();
        if (h_.on_closed) h_.on_closed(nullptr);
        return;
      }
      if (errno == EAGAIN || errno == EWOULDBLOCK) return;
      if (errno == EINTR) continue;
      fail(errno);
      return;
    }
  }

  RealLoop& loop_;
  int fd_;
  int family_;
  Endpoint remote_;
  bool connected_;
  bool closing_ = false;
  Bytes out_;
  Handlers h_;
};

class TcpAcceptor final : public StreamAcceptor, public std::enable_shared_from_this<TcpAcceptor> {
 public:
  TcpAcceptor(RealLoop& loop, int fd, std::uint16_t port,
              std::function<void(std::shared_ptr<StreamCarrier>)> on_accept)
      : loop_(loop), fd_(fd), port_(port), on_accept_(std::move(on_accept)) {}
  ~TcpAcceptor() override { close(); }

  void arm() {
    std::weak_ptr<TcpAcceptor> weak = shared_from_this();
    loop_.watch(fd_, RealLoop::readable, [weak](short) {
      if (auto self = weak.lock()) self->accept_all();
    });
  }

  std::uint16_t port() const override { return port_; }
  void close() override {
    if (fd_ < 0) return;
    loop_.unwatch(fd_);
    ::close(fd_);
    fd_ = -1;
  }

 private:
  void accept_all() {
    auto keep = shared_from_this();
    while (fd_ >= 0) {
      sockaddr_storage ss{};
      socklen_t len = sizeof ss;
      const int cfd = ::accept4(fd_, reinterpret_cast<sockaddr*>(&ss), &len, SOCK_NONBLOCK | SOCK_CLOEXEC);
      if (cfd < 0) return;
      const int one = 1;
      ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto carrier = std::make_shared<TcpCarrier>(loop_, cfd, ss.ss_family, from_sockaddr(ss), true);
      carrier->arm();
      if (on_accept_) on_accept_(carrier);
    }
  }

  RealLoop& loop_;
  int fd_;
  std::uint16_t port_;
  std::function<void(std::shared_ptr<StreamCarrier>)> on_accept_;
};

class UdpSocket final : public DatagramSocket, public std::enable_shared_from_this<UdpSocket> {
 public:
  UdpSocket(RealLoop& loop, int fd, int family, std::uint16_t port)
      : loop_(loop), fd_(fd), family_(family), port_(port) {}
  ~UdpSocket() override { close(); }

  void arm() {
    std::weak_ptr<UdpSocket> weak = shared_from_this();
    loop_.watch(fd_, RealLoop::readable, [weak](short) {
      if (auto self = weak.lock()) self->read_all();
    });
  }

  void set_receive_handler(ReceiveHandler h) override { handler_ = std::move(h); }

  void send_to(const Endpoint& to, ByteView data, std::uint8_t dscp) override {
    if (fd_ < 0) throw Error(Errc::carrier_closed, "socket closed");
    sockaddr_storage ss;
    socklen_t len;
    if (!to_sockaddr(to, ss, len)) throw Error(Errc::carrier_closed, "bad address " + to.address);
    if (family_ == AF_INET6) map_v4(ss, len);
    if (dscp != last_dscp_) {
      apply_dscp(fd_, family_, dscp);
      last_dscp_ = dscp;
    }
    const ssize_t n = ::sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&ss), len);
    if (n < 0 && errno == EMSGSIZE) throw Error(Errc::message_too_large, errno_text(errno));
    // Other send failures are datagram loss.
  }

  std::uint16_t local_port() const override { return port_; }
  void close() override {
    if (fd_ < 0) return;
    loop_.unwatch(fd_);
    ::close(fd_);
    fd_ = -1;
  }

 private:
  void read_all() {
    auto keep = shared_from_this();
    std::vector<std::uint8_t> buf(65536);
    while (fd_ >= 0) {
      sockaddr_storage ss{};
      socklen_t len = sizeof ss;
      const ssize_t n = ::recvfrom(fd_, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&ss), &len);
      if (n < 0) return;
      if (handler_) handler_(from_sockaddr(ss), ByteView(buf.data(), static_cast<std::size_t>(n)));
    }
  }

  RealLoop& loop_;
  int fd_;
  int family_;
  std::uint16_t port_;
  std::uint8_t last_dscp_ = 0;
  ReceiveHandler handler_;
};

std::uint16_t bound_port(int fd) {
  sockaddr_storage ss{};
  socklen_t len = sizeof ss;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&ss), &len);
  return from_sockaddr(ss).port;
}

int bind_socket(int type, std::uint16_t port, int& family) {
  family = AF_INET6;
  int fd = ::socket(AF_INET6, type | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  if (fd >= 0) {
    const int zero = 0;
    ::setsockopt(fd, IPPROTO_IPV6, IPV6_V6ONLY, &zero, sizeof zero);
  } else {
    family = AF_INET;
    fd = ::socket(AF_INET, type | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  }
  if (fd < 0) throw Error(Errc::bind_failure, errno_text(errno));
  const int one = 1;
  if (type == SOCK_STREAM) ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_storage ss{};
  socklen_t len;
  if (family == AF_INET6) {
    auto* v6 = reinterpret_cast<sockaddr_in6*>(&ss);
    v6->sin6_family = AF_INET6;
    v6->sin6_addr = in6addr_any;
    v6->sin6_port = htons(port);
    len = sizeof *v6;
  } else {
    auto* v4 = reinterpret_cast<sockaddr_in*>(&ss);
    v4->sin_family = AF_INET;
    v4->sin_addr.s_addr = htonl(INADDR_ANY);
    v4->sin_port = htons(port);
    len = sizeof *v4;
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&ss), len) != 0) {
    const int err = errno;
    ::close(fd);
    throw Error(Errc::bind_failure, "port " + std::to_string(port) + ": " + errno_text(err));
  }
  return fd;
}

}  // namespace

std::vector<std::string> SocketBackend::resolve(const std::string& host) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  std::vector<std::string> out;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0) return out;
  for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
    sockaddr_storage ss{};
    std::memcpy(&ss, ai->ai_addr, ai->ai_addrlen);
    auto addr = from_sockaddr(ss).address;
    if (std::find(out.begin(), out.end(), addr) == out.end()) out.push_back(addr);
  }
  ::freeaddrinfo(res);
  return out;
}

std::shared_ptr<StreamCarrier> SocketBackend::connect_stream(const Endpoint& remote) {
  sockaddr_storage ss;
  socklen_t len;
  if (!to_sockaddr(remote, ss, len)) throw Error(Errc::connection_refused, "bad address " + remote.address);
  const int fd = ::socket(ss.ss_family, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
  if (fd < 0) throw Error(Errc::carrier_closed, errno_text(errno));
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  const int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&ss), len);
  const int err = rc != 0 && errno != EINPROGRESS ? errno : 0;
  auto carrier = std::make_shared<TcpCarrier>(loop_, fd, ss.ss_family, remote, false);
  carrier->arm();
  if (err != 0) carrier->fail_async(err);
  return carrier;
}

std::shared_ptr<StreamAcceptor> SocketBackend::listen_stream(
    std::uint16_t port, std::function<void(std::shared_ptr<StreamCarrier>)> on_accept) {
  int family;
  const int fd = bind_socket(SOCK_STREAM, port, family);
  if (::listen(fd, 128) != 0) {
    const int err = errno;
    ::close(fd);
    throw Error(Errc::bind_failure, errno_text(err));
  }
  auto acceptor = std::make_shared<TcpAcceptor>(loop_, fd, bound_port(fd), std::move(on_accept));
  acceptor->arm();
  return acceptor;
}

std::shared_ptr<DatagramSocket> SocketBackend::open_datagram(std::optional<std::uint16_t> port) {
  int family;
  const int fd = bind_socket(SOCK_DGRAM, port.value_or(0), family);
  auto sock = std::make_shared<UdpSocket>(loop_, fd, family, bound_port(fd));
  sock->arm();
  return sock;
}

}  // namespace taps
