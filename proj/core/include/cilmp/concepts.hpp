#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cilmp/tensor.hpp"

namespace cilmp {

// Frozen per-class, per-layer concept representations h_y: data is
// [C x L_h x D_h] in class-major, layer-major order.
struct ConceptBank {
  std::size_t num_classes = 0;
  std::size_t seq_len = 0;
  std::size_t width = 0;
  Tensor data;
  std::vector<std::string> class_names;
  std::string provenance;

  // [L_h x D_h] view (copy) of one class.
  Tensor class_sequence(std::size_t class_index) const;
  // [C x D_h] rows of one layer across classes.
  Tensor layer_across_classes(std::size_t layer) const;
  std::uint64_t checksum() const;
};

struct BankSpec {
  std::uint64_t seed = 0;
  std::size_t num_classes = 4;
  std::size_t seq_len = 8;
  std::size_t width = 96;
  double layer_drift = 0.5;
  double noise_std = 0.1;
};

// h_y^l = normalize(prototype_y + drift_y(l) + noise). drift_y is a
// class-specific random walk whose steps are scaled by layer_drift, so
// adjacent layers stay closer than distant ones. Deterministic in
// (spec, prototypes).
ConceptBank generate_bank(const BankSpec& spec, const Tensor& class_prototypes);

// Linear CKA between two representations of the same n samples.
// Throws DegenerateInputError when either input has zero variance.
double cka(const Tensor& x, const Tensor& y);

struct CkaMatrix {
  Tensor values;  // [L_h x L_h], symmetric, unit diagonal
};

// Pairwise CKA between the bank's layers; every layer is represented by its
// vectors across all bank classes (n = C, d = D_h).
CkaMatrix cka_heatmap(const ConceptBank& bank, std::size_t class_index);

// Mean CKA of adjacent layers minus mean CKA of the last layer against all
// earlier ones.
double cka_layer_margin(const CkaMatrix& m);

// "CILMPBANK1", u32 version, u32 C, u32 L_h, u32 D_h, f64 payload,
// u32-length-prefixed newline-separated UTF-8 class names. Little-endian.
void save_bank(const ConceptBank& bank, const std::filesystem::path& path);
ConceptBank load_bank(const std::filesystem::path& path);

}  // namespace cilmp
