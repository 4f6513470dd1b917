#include "cilmp/concepts.hpp"

#include <Eigen/Core>
#include <cmath>
#include <sstream>

#include "cilmp/binary_io.hpp"
#include "cilmp/errors.hpp"
#include "cilmp/parameters.hpp"
#include "cilmp/rng.hpp"

namespace cilmp {

namespace {

constexpr std::string_view kBankMagic = "CILMPBANK1";
constexpr std::uint32_t kBankVersion = 1;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMat centered(const Tensor& t) {
  RowMat m = Eigen::Map<const RowMat>(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                                      static_cast<Eigen::Index>(t.cols()));
  m.rowwise() -= m.colwise().mean();
  return m;
}

}  // namespace

Tensor ConceptBank::class_sequence(std::size_t class_index) const {
  if (class_index >= num_classes) {
    throw IndexError("class index " + std::to_string(class_index) + " outside bank of " + std::to_string(num_classes));
  }
  const auto v = data.values();
  const auto begin = v.begin() + static_cast<std::ptrdiff_t>(class_index * seq_len * width);
  return Tensor::from({seq_len, width}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(seq_len * width)));
}

Tensor ConceptBank::layer_across_classes(std::size_t layer) const {
  if (layer >= seq_len) throw IndexError("layer " + std::to_string(layer) + " outside bank");
  std::vector<double> out;
  out.reserve(num_classes * width);
  const auto v = data.values();
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto begin = v.begin() + static_cast<std::ptrdiff_t>((c * seq_len + layer) * width);
    out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(width));
  }
  return Tensor::from({num_classes, width}, std::move(out));
}

std::uint64_t ConceptBank::checksum() const { return cilmp::checksum(data); }

ConceptBank generate_bank(const BankSpec& spec, const Tensor& class_prototypes) {
  if (spec.num_classes < 2) throw ConfigError("concept bank needs at least 2 classes");
  if (spec.seq_len == 0 || spec.width == 0) throw ConfigError("concept bank extents must be positive");
  if (spec.layer_drift < 0.0 || spec.layer_drift > 1.0) throw ConfigError("layer_drift must lie in [0, 1]");
  if (spec.noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  if (class_prototypes.rows() != spec.num_classes || class_prototypes.cols() != spec.width) {
    throw DimensionError("class prototypes " + shape_to_string(class_prototypes.shape()) + " do not match bank [" +
                         std::to_string(spec.num_classes) + "x" + std::to_string(spec.width) + "]");
  }
  const std::size_t c_n = spec.num_classes, l_n = spec.seq_len, d = spec.width;
  const double step_sd = 1.0 / std::sqrt(static_cast<double>(d));
  Rng drift_rng = Rng(spec.seed).fork(21);
  Rng noise_rng = Rng(spec.seed).fork(22);
  const auto protos = class_prototypes.values();
  std::vector<double> data(c_n * l_n * d);
  std::vector<double> walk(d);
  for (std::size_t c = 0; c < c_n; ++c) {
    std::fill(walk.begin(), walk.end(), 0.0);
    for (std::size_t l = 0; l < l_n; ++l) {
      if (l > 0) {
        for (double& w : walk) w += spec.layer_drift * drift_rng.normal(0.0, step_sd);
      }
      double* row = data.data() + (c * l_n + l) * d;
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        row[j] = protos[c * d + j] + walk[j] + (spec.noise_std > 0.0 ? noise_rng.normal(0.0, spec.noise_std * step_sd) : 0.0);
        sq += row[j] * row[j];
      }
      const double norm = std::sqrt(sq);
      if (norm <= 1e-12) throw DegenerateInputError("generated concept row has zero norm");
      for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
    }
  }
  ConceptBank bank;
  bank.num_classes = c_n;
  bank.seq_len = l_n;
  bank.width = d;
  bank.data = Tensor::from({c_n, l_n, d}, std::move(data));
  for (std::size_t c = 0; c < c_n; ++c) bank.class_names.push_back("class_" + std::to_string(c));
  bank.provenance = "generated:seed=" + std::to_string(spec.seed);
  return bank;
}

double cka(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2) throw DimensionError("cka: inputs must be rank-2");
  if (x.rows() != y.rows()) {
    throw DimensionError("cka: sample counts differ, " + shape_to_string(x.shape()) + " vs " + shape_to_string(y.shape()));
  }
  if (x.rows() < 2) throw DimensionError("cka: need at least 2 samples");
  // Gram-matrix route: ||Yc^T Xc||_F^2 = <Kx, Ky>_F with K = Xc Xc^T.
  const RowMat xc = centered(x);
  const RowMat yc = centered(y);
  const RowMat kx = xc * xc.transpose();
  const RowMat ky = yc * yc.transpose();
  const double nx = kx.norm();
  const double ny = ky.norm();
  if (nx <= 1e-300 || ny <= 1e-300) throw DegenerateInputError("cka: zero-variance input");
  return kx.cwiseProduct(ky).sum() / (nx * ny);
}

CkaMatrix cka_heatmap(const ConceptBank& bank, std::size_t class_index) {
  if (class_index >= bank.num_classes) {
    throw IndexError("class index " + std::to_string(class_index) + " outside bank of " +
                     std::to_string(bank.num_classes));
  }
  const std::size_t l_n = bank.seq_len;
  std::vector<Tensor> layers;
  layers.reserve(l_n);
  for (std::size_t l = 0; l < l_n; ++l) layers.push_back(bank.layer_across_classes(l));
  std::vector<double> m(l_n * l_n, 1.0);
  for (std::size_t i = 0; i < l_n; ++i) {
    for (std::size_t j = i + 1; j < l_n; ++j) {
      const double v = cka(layers[i], layers[j]);
      m[i * l_n + j] = v;
      m[j * l_n + i] = v;
    }
  }
  return {Tensor::from({l_n, l_n}, std::move(m))};
}

double cka_layer_margin(const CkaMatrix& m) {
  const std::size_t n = m.values.rows();
  if (n < 2) throw DimensionError("cka_layer_margin: need at least 2 layers");
  double adjacent = 0.0, distant = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) adjacent += m.values.at(i, i + 1);
  for (std::size_t j = 0; j + 1 < n; ++j) distant += m.values.at(n - 1, j);
  return adjacent / static_cast<double>(n - 1) - distant / static_cast<double>(n - 1);
}

void save_bank(const ConceptBank& bank, const std::filesystem::path& path) {
  if (bank.data.numel() != bank.num_classes * bank.seq_len * bank.width) {
    throw DimensionError("save_bank: data does not match declared dimensions");
  }
  io::ByteWriter w;
  w.bytes(kBankMagic);
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.num_classes));
  w.u32(static_cast<std::uint32_t>(bank.seq_len));
  w.u32(static_cast<std::uint32_t>(bank.width));
  for (double v : bank.data.values()) w.f64(v);
  std::string names;
  for (std::size_t i = 0; i < bank.class_names.size(); ++i) {
    if (i) names.push_back('\n');
    names += bank.class_names[i];
  }
  w.u32(static_cast<std::uint32_t>(names.size()));
  w.bytes(names);
  w.write_file(path);
}

ConceptBank load_bank(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(kBankMagic);
  const std::uint32_t version = r.u32();
  if (version != kBankVersion) r.fail("unsupported bank version " + std::to_string(version));
  ConceptBank bank;
  bank.num_classes = r.u32();
  bank.seq_len = r.u32();
  bank.width = r.u32();
  if (bank.num_classes == 0 || bank.seq_len == 0 || bank.width == 0) r.fail("bank dimensions must be positive");
  const std::uint64_t count = static_cast<std::uint64_t>(bank.num_classes) * bank.seq_len * bank.width;
  if (count / bank.width / bank.seq_len != bank.num_classes || count > r.remaining() / 8) {
    r.fail("bank header C*L_h*D_h = " + std::to_string(count) + " does not match payload length");
  }
  std::vector<double> values;
  r.f64_array(values, static_cast<std::size_t>(count));
  for (double v : values) {
    if (!std::isfinite(v)) r.fail("non-finite bank value");
  }
  const std::uint32_t name_len = r.u32();
  const std::string names = r.bytes(name_len);
  r.expect_end();
  bank.data = Tensor::from({bank.num_classes, bank.seq_len, bank.width}, std::move(values));
  if (!names.empty()) {
    std::istringstream in(names);
    for (std::string line; std::getline(in, line);) bank.class_names.push_back(line);
  }
  if (bank.class_names.size() != bank.num_classes) r.fail("class name count does not match C");
  bank.provenance = "file:" + path.string();
  return bank;
}

}  // namespace cilmp
