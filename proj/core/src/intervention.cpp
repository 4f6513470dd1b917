#include "cilmp/intervention.hpp"

#include <Eigen/Core>
#include <Eigen/QR>
#include <cmath>
#include <numeric>

#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"

namespace cilmp {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat to_eigen(const Tensor& t) {
  return Eigen::Map<const RowMat>(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                                  static_cast<Eigen::Index>(t.cols()));
}

Tensor as_row(const Tensor& v) { return ops::reshape(v, {1, v.numel()}); }

void check_width(const Tensor& h, const InterventionParams& p) {
  if (h.cols() != p.width()) {
    throw DimensionError("intervention: representation width " + std::to_string(h.cols()) + " vs R " +
                         shape_to_string(p.R.shape()));
  }
}

}  // namespace

void PositionSets::validate(std::size_t seq_len) const {
  if (prefix + suffix > seq_len) {
    throw ConfigError("prefix (" + std::to_string(prefix) + ") and suffix (" + std::to_string(suffix) +
                      ") positions overlap or exceed L_h = " + std::to_string(seq_len));
  }
}

std::vector<std::size_t> PositionSets::prefix_positions() const {
  std::vector<std::size_t> out(prefix);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

std::vector<std::size_t> PositionSets::suffix_positions(std::size_t seq_len) const {
  if (suffix > seq_len) throw ConfigError("suffix longer than sequence");
  std::vector<std::size_t> out(suffix);
  std::iota(out.begin(), out.end(), seq_len - suffix);
  return out;
}

InterventionParams make_intervention_params(std::size_t rank, std::size_t width, bool conditional, Rng& rng) {
  if (rank == 0 || width == 0) throw ConfigError("intervention rank and width must be positive");
  if (rank > width) throw ConfigError("intervention rank exceeds representation width");
  InterventionParams p;
  p.R = Tensor::parameter({rank, width}, rng.normal_vector(rank * width));
  orthonormalize_rows(p.R);
  const std::size_t in = conditional ? 2 * width : width;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(rank * in);
  for (double& x : w) x = rng.uniform(-bound, bound);
  p.W = Tensor::parameter({rank, in}, std::move(w));
  p.b = Tensor::parameter({rank}, std::vector<double>(rank, 0.0));
  return p;
}

ZProjection make_z_projection(std::size_t width, std::size_t rank, std::size_t prompt_dim, Rng& rng) {
  if (rank == 0) throw ConfigError("W_z rank must be positive");
  ZProjection z;
  z.U = Tensor::parameter({width, rank}, rng.normal_vector(width * rank, 1.0 / std::sqrt(static_cast<double>(rank))));
  z.V = Tensor::parameter({rank, prompt_dim}, rng.normal_vector(rank * prompt_dim, 1.0));
  return z;
}

void orthonormalize_rows(Tensor& R) {
  const std::size_t r = R.rows(), d = R.cols();
  const RowMat rt = to_eigen(R).transpose();  // d x r
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(rt);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r));
  // Keep the orientation of the original rows.
  const Eigen::MatrixXd upper = qr.matrixQR().topRows(static_cast<Eigen::Index>(r)).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(r); ++j) {
    if (upper(j, j) < 0) q.col(j) *= -1.0;
  }
  auto values = R.mutable_values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < d; ++j) values[i * d + j] = q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
  }
}

Tensor project_image(const Tensor& z, const ZProjection& proj) {
  if (z.numel() != proj.V.cols()) {
    throw DimensionError("project_image: z " + shape_to_string(z.shape()) + " vs V " + shape_to_string(proj.V.shape()));
  }
  // (U V z)^T = z^T V^T U^T
  return ops::reshape(ops::matmul_nt(ops::matmul_nt(as_row(z), proj.V), proj.U), {proj.U.rows()});
}

Tensor relationship_descriptor(const Tensor& h, const Tensor& z, const ZProjection& proj) {
  const Tensor u = project_image(z, proj);
  if (u.numel() != h.numel()) {
    throw DimensionError("relationship_descriptor: h " + shape_to_string(h.shape()) + " vs W_z z " +
                         shape_to_string(u.shape()));
  }
  const Tensor hv = ops::reshape(h, {h.numel()});
  return ops::concat({hv, ops::hadamard(hv, u)}, 1);
}

Tensor intervene_rows(const Tensor& h, const Tensor& condition, const InterventionParams& p, InterventionMode mode) {
  using namespace ops;
  check_width(h, p);
  if (mode == InterventionMode::identity) return h;
  const std::size_t d = p.width();
  // a = W_h h + b - R h, row form
  Tensor edit;
  if (!p.conditional()) {
    if (mode != InterventionMode::unconditional) throw ConfigError("conditional mode needs W_t of shape [r x 2*D_h]");
    edit = matmul_nt(h, p.W);
  } else if (mode == InterventionMode::unconditional) {
    // z is ignored: only the h half of W_t is read.
    edit = matmul_nt(h, slice(p.W, 1, 0, d));
  } else {
    if (condition.rows() != h.rows() || condition.cols() != d) {
      throw DimensionError("intervene_rows: condition " + shape_to_string(condition.shape()) + " vs h " +
                           shape_to_string(h.shape()));
    }
    const Tensor w_h = slice(p.W, 1, 0, d);
    const Tensor w_z = slice(p.W, 1, d, 2 * d);
    const Tensor second = mode == InterventionMode::conditional ? hadamard(h, condition) : condition;
    edit = add(matmul_nt(h, w_h), matmul_nt(second, w_z));
  }
  edit = sub(add_rowwise(edit, p.b), matmul_nt(h, p.R));
  return add(h, matmul(edit, p.R));
}

Tensor intervene_unconditional(const Tensor& h, const InterventionParams& p) {
  if (p.conditional()) throw ConfigError("intervene_unconditional needs W_h of shape [r x D_h]");
  const Tensor row = as_row(h);
  return ops::reshape(intervene_rows(row, Tensor(), p, InterventionMode::unconditional), h.shape());
}

Tensor intervene_conditional(const Tensor& h, const Tensor& z, const InterventionParams& p, const ZProjection& proj,
                             InterventionMode mode) {
  if (!p.conditional()) throw ConfigError("intervene_conditional needs W_t of shape [r x 2*D_h]");
  if (mode != InterventionMode::conditional && mode != InterventionMode::conditional_image_only) {
    throw ConfigError("intervene_conditional: mode must be conditional");
  }
  const Tensor u = as_row(project_image(z, proj));
  return ops::reshape(intervene_rows(as_row(h), u, p, mode), h.shape());
}

Tensor apply_bilateral(const Tensor& h_seq, const Tensor& z, const InterventionParams& prefix,
                       const InterventionParams& suffix, const ZProjection& proj, const PositionSets& pos,
                       InterventionMode mode) {
  using namespace ops;
  if (h_seq.rank() != 2) throw DimensionError("apply_bilateral: expected [L_h x D_h]");
  const std::size_t l_h = h_seq.rows();
  pos.validate(l_h);
  if (mode == InterventionMode::identity || (pos.prefix == 0 && pos.suffix == 0)) return h_seq;
  const bool conditional = mode != InterventionMode::unconditional;
  Tensor u_row;
  if (conditional) u_row = as_row(project_image(z, proj));

  std::vector<Tensor> pieces;
  std::vector<std::size_t> source(l_h);
  std::iota(source.begin(), source.end(), std::size_t{0});
  std::size_t next = l_h;
  pieces.push_back(h_seq);
  const auto edit = [&](const InterventionParams& p, const std::vector<std::size_t>& rows) {
    if (rows.empty()) return;
    const Tensor h = gather_rows(h_seq, rows);
    Tensor cond;
    if (conditional) cond = gather_rows(u_row, std::vector<std::size_t>(rows.size(), 0));
    pieces.push_back(intervene_rows(h, cond, p, mode));
    for (std::size_t i = 0; i < rows.size(); ++i) source[rows[i]] = next + i;
    next += rows.size();
  };
  edit(prefix, pos.prefix_positions());
  edit(suffix, pos.suffix_positions(l_h));
  return gather_rows(concat(std::span<const Tensor>(pieces), 0), source);
}

SubspaceResidual subspace_residual(const Tensor& h, const Tensor& h_bar, const Tensor& R) {
  if (h.numel() != h_bar.numel() || h.numel() != R.cols()) {
    throw DimensionError("subspace_residual: shapes " + shape_to_string(h.shape()) + ", " +
                         shape_to_string(h_bar.shape()) + ", R " + shape_to_string(R.shape()));
  }
  const Eigen::Index d = static_cast<Eigen::Index>(R.cols());
  Eigen::VectorXd delta(d);
  for (Eigen::Index i = 0; i < d; ++i) delta(i) = h_bar.values()[static_cast<std::size_t>(i)] - h.values()[static_cast<std::size_t>(i)];
  const Eigen::MatrixXd rt = to_eigen(R).transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(rt);
  qr.setThreshold(1e-10);
  const Eigen::Index rank = qr.rank();
  SubspaceResidual out;
  out.rank_deficient = rank < static_cast<Eigen::Index>(R.rows());
  if (rank == 0) {
    out.residual = delta.norm();
    return out;
  }
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, rank);
  out.residual = (delta - q * (q.transpose() * delta)).norm();
  return out;
}

}  // namespace cilmp
