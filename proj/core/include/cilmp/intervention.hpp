#pragma once

#include <vector>

#include "cilmp/rng.hpp"
#include "cilmp/tensor.hpp"

namespace cilmp {

// Learnable low-rank intervention {R, W, b}.
//
// Conditional variant: W is [r_sub x 2*D_h] and reads the relationship
// descriptor t. Unconditional variant: W is [r_sub x D_h] and reads h.
struct InterventionParams {
  Tensor R;  // [r_sub x D_h]
  Tensor W;
  Tensor b;  // [r_sub]

  std::size_t rank() const { return R.rows(); }
  std::size_t width() const { return R.cols(); }
  bool conditional() const { return W.cols() == 2 * width(); }
  std::size_t scalar_count() const { return R.numel() + W.numel() + b.numel(); }
};

// W_z = U . V, shared by the prefix and suffix interventions.
struct ZProjection {
  Tensor U;  // [D_h x r_z]
  Tensor V;  // [r_z x D_p]

  std::size_t scalar_count() const { return U.numel() + V.numel(); }
};

// Prefix covers positions {1..L_prefix}; suffix the last L_suffix positions.
struct PositionSets {
  std::size_t prefix = 4;
  std::size_t suffix = 4;

  // Throws ConfigError when the sets overlap or exceed seq_len.
  void validate(std::size_t seq_len) const;
  std::vector<std::size_t> prefix_positions() const;                       // 0-based
  std::vector<std::size_t> suffix_positions(std::size_t seq_len) const;    // 0-based
};

enum class InterventionMode {
  conditional,             // t = concat[h, h (.) W_z z]
  conditional_image_only,  // t = concat[h, W_z z]: image condition without the matching prior
  unconditional,           // W_h h + b_h
  identity,                // no intervention
};

// R has orthonormal rows at initialisation; W ~ U(-1/sqrt(in), 1/sqrt(in)); b = 0.
InterventionParams make_intervention_params(std::size_t rank, std::size_t width, bool conditional, Rng& rng);
ZProjection make_z_projection(std::size_t width, std::size_t rank, std::size_t prompt_dim, Rng& rng);

// Re-orthonormalises the rows of R in place (Gram-Schmidt via thin QR).
void orthonormalize_rows(Tensor& R);

// W_z z for a single image embedding, [D_h].
Tensor project_image(const Tensor& z, const ZProjection& proj);

// t = concat[h, h (.) W_z z], [2*D_h]. z is expected to be unit-norm.
Tensor relationship_descriptor(const Tensor& h, const Tensor& z, const ZProjection& proj);

// h + R^T (W_h h + b_h - R h)
Tensor intervene_unconditional(const Tensor& h, const InterventionParams& p);

// h + R^T (W_t t + b_t - R h), t from relationship_descriptor (or the
// image-only descriptor when mode is conditional_image_only).
Tensor intervene_conditional(const Tensor& h, const Tensor& z, const InterventionParams& p, const ZProjection& proj,
                             InterventionMode mode = InterventionMode::conditional);

// Row-batched form used by the prompt builder. Row i of `h` is edited with
// the condition row i of `condition` ([n x D_h] rows of W_z z; ignored for
// unconditional params).
Tensor intervene_rows(const Tensor& h, const Tensor& condition, const InterventionParams& p, InterventionMode mode);

// Applies the prefix and suffix interventions to a [L_h x D_h] sequence;
// rows outside both position sets are passed through untouched.
Tensor apply_bilateral(const Tensor& h_seq, const Tensor& z, const InterventionParams& prefix,
                       const InterventionParams& suffix, const ZProjection& proj, const PositionSets& pos,
                       InterventionMode mode);

struct SubspaceResidual {
  double residual = 0.0;
  bool rank_deficient = false;
};

// || (h_bar - h) - P_R (h_bar - h) ||, P_R the orthogonal projector onto rowspace(R).
SubspaceResidual subspace_residual(const Tensor& h, const Tensor& h_bar, const Tensor& R);

}  // namespace cilmp
