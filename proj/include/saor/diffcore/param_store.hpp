#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "saor/diffcore/tensor.hpp"

namespace saor::ad {

/// Portable uniform sampling on top of mt19937_64 (std distributions are
/// implementation-defined, which would break cross-platform determinism).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do x = engine_(); while (x >= limit);
    return x % n;
  }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * uniform());
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes seed components into one stream seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(a) ^ b) ^ c);
}

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named trainable tensors plus their Adam moments. Insertion order is the
/// serialization order.
template <typename T>
class ParamStore {
 public:
  BasicTensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto t = BasicTensor<T>::variable(std::move(shape), std::move(values));
    index_[name] = names_.size();
    names_.push_back(name);
    params_.push_back(t);
    AdamState<T> st;
    st.m.assign(t.size(), T(0));
    st.v.assign(t.size(), T(0));
    adam_.push_back(std::move(st));
    return t;
  }

  /// Kaiming-uniform: U(-b, b), b = sqrt(6 / fan_in).
  BasicTensor<T> add_kaiming(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng,
                             double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(v));
  }

  BasicTensor<T> add_zeros(const std::string& name, Shape shape) {
    const auto n = numel(shape);
    return add(name, std::move(shape), std::vector<T>(n, T(0)));
  }

  const BasicTensor<T>& get(const std::string& name) const { return params_.at(index_.at(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const BasicTensor<T>& param(std::size_t i) const { return params_[i]; }
  AdamState<T>& adam(std::size_t i) { return adam_[i]; }
  const AdamState<T>& adam(std::size_t i) const { return adam_[i]; }
  std::size_t index_of(const std::string& name) const { return index_.at(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// One Adam update with bias correction for every parameter that has a
  /// gradient; gradients are cleared afterwards. Returns the number of
  /// parameters skipped for lack of a gradient.
  std::size_t adam_step(const AdamConfig& cfg) {
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) {
        ++skipped;
        continue;
      }
      auto& st = adam_[i];
      ++st.step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
      auto value = p.mutable_values();
      const auto grad = p.grad();
      for (std::size_t k = 0; k < value.size(); ++k) {
        const double g = grad[k];
        const double m = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g * g;
        st.m[k] = static_cast<T>(m);
        st.v[k] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        value[k] = static_cast<T>(value[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
      }
      p.zero_grad();
    }
    if (skipped) log::debug("adam_step: %zu parameters without gradient left unchanged", skipped);
    return skipped;
  }

 private:
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> params_;
  std::vector<AdamState<T>> adam_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace saor::ad
