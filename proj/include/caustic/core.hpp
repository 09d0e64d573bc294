// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace caustic {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when Snell's law admits no transmitted ray. `index` is the offending
// face where applicable, -1 otherwise.
class TotalInternalReflection : public Error {
 public:
  explicit TotalInternalReflection(int index = -1)
      : Error("total internal reflection" +
              (index >= 0 ? " at face " + std::to_string(index) : std::string())),
        index(index) {}
  int index;
};

class AssumptionViolation : public Error {
 public:
  using Error::Error;
};

class InvalidHeightField : public Error {
 public:
  explicit InvalidHeightField(int face = -1)
      : Error("non-positive projected signed area" +
              (face >= 0 ? " at face " + std::to_string(face) : std::string())),
        face(face) {}
  int face;
};

class ProjectionFailure : public Error {
 public:
  explicit ProjectionFailure(int face)
      : Error("outgoing ray parallel to receptive plane at face " + std::to_string(face)),
        face(face) {}
  int face;
};

class DegenerateFace : public Error {
 public:
  explicit DegenerateFace(int face)
      : Error("degenerate face " + std::to_string(face)), face(face) {}
  int face;
};

class DegenerateEdge : public Error {
 public:
  explicit DegenerateEdge(int edge)
      : Error("coincident centroids across edge " + std::to_string(edge)), edge(edge) {}
  int edge;
};

class ZeroTotalFlux : public Error {
 public:
  ZeroTotalFlux() : Error("target image has zero total flux") {}
  explicit ZeroTotalFlux(const std::string& what) : Error(what) {}
};

class ZeroFluxCell : public Error {
 public:
  explicit ZeroFluxCell(int cell) : Error("cell " + std::to_string(cell) + " has zero target flux"), cell(cell) {}
  int cell;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small vectors, templated on the scalar so the same formulas run on plain
// doubles and on dual numbers.

template <class S>
struct Vec2 {
  S x{}, y{};

  Vec2() = default;
  Vec2(S x, S y) : x(std::move(x)), y(std::move(y)) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(const S& s) const { return {x * s, y * s}; }
  Vec2 operator/(const S& s) const { return {x / s, y / s}; }
  Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
};

template <class S>
inline S dot(const Vec2<S>& a, const Vec2<S>& b) { return a.x * b.x + a.y * b.y; }
template <class S>
inline S cross(const Vec2<S>& a, const Vec2<S>& b) { return a.x * b.y - a.y * b.x; }
template <class S>
inline S norm2(const Vec2<S>& a) { return dot(a, a); }
template <class S>
inline S norm(const Vec2<S>& a) { using std::sqrt; return sqrt(dot(a, a)); }

template <class S>
struct Vec3 {
  S x{}, y{}, z{};

  Vec3() = default;
  Vec3(S x, S y, S z) : x(std::move(x)), y(std::move(y)), z(std::move(z)) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(const S& s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(const S& s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec2<S> xy() const { return {x, y}; }
};

template <class S>
inline S dot(const Vec3<S>& a, const Vec3<S>& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
template <class S>
inline Vec3<S> cross(const Vec3<S>& a, const Vec3<S>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
template <class S>
inline S norm2(const Vec3<S>& a) { return dot(a, a); }
template <class S>
inline S norm(const Vec3<S>& a) { using std::sqrt; return sqrt(dot(a, a)); }
template <class S>
inline Vec3<S> normalized(const Vec3<S>& a) { return a / norm(a); }
template <class S>
inline Vec2<S> normalized(const Vec2<S>& a) { return a / norm(a); }

using Vec2d = Vec2<double>;
using Vec3d = Vec3<double>;

// ---------------------------------------------------------------------------
// Forward-mode dual numbers with N tangent directions. Every branchy
// computation (clipping in particular) takes the same branches as the plain
// double evaluation, which is exactly the frozen-topology derivative the
// optimizer needs.

template <int N>
struct Dual {
  double v = 0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit from constants is intended
  static Dual seeded(double value, int slot) {
    Dual r(value);
    r.d[slot] = 1.0;
    return r;
  }

  Dual operator-() const {
    Dual r(-v);
    for (int i = 0; i < N; ++i) r.d[i] = -d[i];
    return r;
  }
  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
};

template <int N>
inline Dual<N> operator+(Dual<N> a, const Dual<N>& b) { return a += b; }
template <int N>
inline Dual<N> operator-(Dual<N> a, const Dual<N>& b) { return a -= b; }
template <int N>
inline Dual<N> operator*(Dual<N> a, const Dual<N>& b) { return a *= b; }
template <int N>
inline Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v / b.v);
  const double inv = 1.0 / b.v;
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
  return r;
}

template <int N>
inline Dual<N> sqrt(const Dual<N>& a) {
  Dual<N> r(std::sqrt(a.v));
  const double k = 0.5 / r.v;
  for (int i = 0; i < N; ++i) r.d[i] = k * a.d[i];
  return r;
}
template <int N>
inline Dual<N> exp(const Dual<N>& a) {
  Dual<N> r(std::exp(a.v));
  for (int i = 0; i < N; ++i) r.d[i] = r.v * a.d[i];
  return r;
}
template <int N>
inline Dual<N> fabs(const Dual<N>& a) {
  if (a.v < 0) return -a;
  return a;
}
// d/dx atan2(y, x) = (x dy - y dx) / (x^2 + y^2)
template <int N>
inline Dual<N> atan2(const Dual<N>& y, const Dual<N>& x) {
  Dual<N> r(std::atan2(y.v, x.v));
  const double k = 1.0 / (x.v * x.v + y.v * y.v);
  for (int i = 0; i < N; ++i) r.d[i] = k * (x.v * y.d[i] - y.v * x.d[i]);
  return r;
}

template <int N>
inline bool operator<(const Dual<N>& a, const Dual<N>& b) { return a.v < b.v; }
template <int N>
inline bool operator>(const Dual<N>& a, const Dual<N>& b) { return a.v > b.v; }
template <int N>
inline bool operator<=(const Dual<N>& a, const Dual<N>& b) { return a.v <= b.v; }
template <int N>
inline bool operator>=(const Dual<N>& a, const Dual<N>& b) { return a.v >= b.v; }

inline double value_of(double x) { return x; }
template <int N>
inline double value_of(const Dual<N>& x) { return x.v; }

// ---------------------------------------------------------------------------
// Deterministic RNG (xoshiro256**, split-mix seeded). Stable across standard
// libraries, unlike std distributions.

class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed + 0x9E3779B97F4A7C15ULL;
    for (auto& word : s_) {
      uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
      word = z ^ (z >> 31);
    }
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int n) { return static_cast<int>(next() % static_cast<uint64_t>(n)); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> s_;
};

// ---------------------------------------------------------------------------
// Chunked parallel loop with a machine-independent chunk grid. Callers that
// reduce must allocate one accumulator per chunk and merge in chunk order;
// floating-point results are then independent of the worker count.

int thread_count();

inline int chunk_count(std::size_t n, std::size_t min_grain = 256) {
  if (n == 0) return 0;
  const std::size_t by_grain = (n + min_grain - 1) / min_grain;
  return static_cast<int>(std::min<std::size_t>(64, by_grain));
}

namespace detail {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  // Runs fn(chunk) for chunk in [0, chunks). Blocks until all are done.
  void run(int chunks, const std::function<void(int)>& fn) {
    if (chunks <= 0) return;
    if (workers_.empty() || chunks == 1) {
      for (int c = 0; c < chunks; ++c) fn(c);
      return;
    }
    std::unique_lock<std::mutex> lk(m_);
    job_ = &fn;
    next_ = 0;
    total_ = chunks;
    done_ = 0;
    ++generation_;
    cv_start_.notify_all();
    work(lk);  // the calling thread participates
    cv_done_.wait(lk, [&] { return done_ == total_; });
    job_ = nullptr;
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

 private:
  ThreadPool() {
    int n = 0;
    if (const char* env = std::getenv("CAUSTIC_THREADS")) n = std::atoi(env);
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    for (int i = 0; i < n - 1; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
      cv_start_.notify_all();
    }
    for (auto& w : workers_) w.join();
  }

  void worker_loop() {
    std::unique_lock<std::mutex> lk(m_);
    uint64_t seen = 0;
    while (true) {
      cv_start_.wait(lk, [&] { return stop_ || (job_ && generation_ != seen); });
      if (stop_) return;
      seen = generation_;
      work(lk);
    }
  }

  void work(std::unique_lock<std::mutex>& lk) {
    const auto* job = job_;
    while (next_ < total_) {
      const int c = next_++;
      lk.unlock();
      (*job)(c);
      lk.lock();
      if (++done_ == total_) cv_done_.notify_all();
    }
  }

  std::mutex m_;
  std::condition_variable cv_start_, cv_done_;
  std::vector<std::thread> workers_;
  const std::function<void(int)>* job_ = nullptr;
  int next_ = 0, total_ = 0, done_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace detail

inline int thread_count() { return detail::ThreadPool::instance().size(); }

// fn(chunk_index, begin, end)
inline void parallel_for_chunked(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn,
                                 std::size_t min_grain = 256) {
  const int chunks = chunk_count(n, min_grain);
  if (chunks == 0) return;
  const std::size_t per = (n + chunks - 1) / chunks;
  detail::ThreadPool::instance().run(chunks, [&](int c) {
    const std::size_t b = static_cast<std::size_t>(c) * per;
    const std::size_t e = std::min(n, b + per);
    if (b < e) fn(c, b, e);
  });
}

}  // namespace caustic
