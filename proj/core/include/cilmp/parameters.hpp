#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cilmp/tensor.hpp"

namespace cilmp {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Ordered registry of parameters. Registration order is the serialisation
// order of every checkpoint format.
class ParameterList {
 public:
  void add(std::string name, Tensor tensor);
  void extend(const ParameterList& other);

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  // Total number of scalar entries.
  std::size_t scalar_count() const;
  const NamedParameter& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::vector<Tensor> tensors() const;

 private:
  std::vector<NamedParameter> items_;
};

// FNV-1a over the little-endian bytes of every value, in registration order.
std::uint64_t checksum(const ParameterList& params);
std::uint64_t checksum(const Tensor& tensor);

// Plain SGD with classical momentum.
class Sgd {
 public:
  Sgd(ParameterList params, double lr, double momentum);

  void zero_grad();
  // Throws FrozenParameterError if any registered parameter has been frozen.
  void step();
  const ParameterList& parameters() const { return params_; }
  double lr() const { return lr_; }

 private:
  ParameterList params_;
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

class Adam {
 public:
  Adam(ParameterList params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  void step();

 private:
  ParameterList params_;
  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Largest absolute gradient entry across the list (0 when no gradients).
double max_abs_grad(const ParameterList& params);

}  // namespace cilmp
