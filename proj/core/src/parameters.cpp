#include "cilmp/parameters.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "cilmp/errors.hpp"

namespace cilmp {

void ParameterList::add(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw Error("parameter '" + name + "' is undefined");
  items_.push_back({std::move(name), std::move(tensor)});
}

void ParameterList::extend(const ParameterList& other) {
  items_.insert(items_.end(), other.items_.begin(), other.items_.end());
}

std::size_t ParameterList::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

std::vector<Tensor> ParameterList::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.tensor);
  return out;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv_update(std::uint64_t h, const Tensor& t) {
  for (double v : t.values()) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFu;
      h *= kFnvPrime;
    }
  }
  return h;
}

void check_not_frozen(const ParameterList& params) {
  for (const auto& p : params) {
    if (p.tensor.frozen()) throw FrozenParameterError("optimizer step on frozen parameter '" + p.name + "'");
  }
}

}  // namespace

std::uint64_t checksum(const ParameterList& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params) h = fnv_update(h, p.tensor);
  return h;
}

std::uint64_t checksum(const Tensor& tensor) { return fnv_update(kFnvOffset, tensor); }

Sgd::Sgd(ParameterList params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  check_not_frozen(params_);
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
}

void Sgd::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void Sgd::step() {
  check_not_frozen(params_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    if (!t.has_grad()) continue;
    auto values = t.mutable_values();
    const auto grad = t.grad();
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      vel[i] = momentum_ * vel[i] + grad[i];
      values[i] -= lr_ * vel[i];
    }
  }
}

Adam::Adam(ParameterList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  check_not_frozen(params_);
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void Adam::step() {
  check_not_frozen(params_);
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    if (!t.has_grad()) continue;
    auto values = t.mutable_values();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * grad[i];
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * grad[i] * grad[i];
      values[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

double max_abs_grad(const ParameterList& params) {
  double worst = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) worst = std::max(worst, std::abs(g));
  }
  return worst;
}

}  // namespace cilmp
