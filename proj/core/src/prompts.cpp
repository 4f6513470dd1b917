#include "cilmp/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"

namespace cilmp {

namespace {

struct ModeName {
  PromptMode mode;
  const char* name;
};

constexpr ModeName kModeNames[] = {
    {PromptMode::cilmp, "cilmp"},
    {PromptMode::no_rd, "no_rd"},
    {PromptMode::no_conditional, "no_conditional"},
    {PromptMode::no_intervention, "no_intervention"},
    {PromptMode::coop_baseline, "coop_baseline"},
    {PromptMode::text_mode, "text_mode"},
};

Tensor normal_param(const Shape& shape, double stddev, Rng& rng) {
  return Tensor::parameter(shape, rng.normal_vector(shape_numel(shape), stddev));
}

double rms(const Tensor& t) {
  double sq = 0.0;
  for (double v : t.values()) sq += v * v;
  return std::sqrt(sq / static_cast<double>(t.numel()));
}

}  // namespace

std::string to_string(PromptMode mode) {
  for (const auto& m : kModeNames) {
    if (m.mode == mode) return m.name;
  }
  return "unknown";
}

PromptMode parse_prompt_mode(const std::string& name) {
  for (const auto& m : kModeNames) {
    if (name == m.name) return m.mode;
  }
  throw ConfigError("unknown mode '" + name + "'");
}

InterventionMode intervention_mode_for(PromptMode mode) {
  switch (mode) {
    case PromptMode::cilmp:
    case PromptMode::text_mode:
      return InterventionMode::conditional;
    case PromptMode::no_rd:
      return InterventionMode::conditional_image_only;
    case PromptMode::no_conditional:
      return InterventionMode::unconditional;
    default:
      return InterventionMode::identity;
  }
}

bool uses_concepts(PromptMode mode) { return mode != PromptMode::coop_baseline; }

bool is_conditional(PromptMode mode) {
  return mode == PromptMode::cilmp || mode == PromptMode::no_rd || mode == PromptMode::text_mode;
}

std::size_t TokenLayout::attribute_count(std::size_t vocab_size) const {
  const auto begin = static_cast<std::size_t>(attribute_begin());
  return vocab_size > begin ? vocab_size - begin : 0;
}

TokenLayout TokenLayout::for_classes(std::size_t num_classes, std::size_t vocab_size) {
  TokenLayout t;
  t.num_classes = num_classes;
  if (static_cast<std::size_t>(t.attribute_begin()) > vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small for " + std::to_string(num_classes) +
                      " class tokens");
  }
  return t;
}

std::size_t trainable_param_count(const PromptConfig& cfg, const EncoderConfig& enc, std::size_t bank_width) {
  const std::size_t d = enc.embed_dim, deep = enc.deep_prompt_layers;
  std::size_t n = deep * cfg.context_len * d + deep * cfg.image_prompt_len * d;
  if (!uses_concepts(cfg.mode)) return n;
  n += cfg.r_proj * bank_width + d * cfg.r_proj;
  const std::size_t r = cfg.r_sub;
  if (is_conditional(cfg.mode)) {
    n += 2 * (r * bank_width + r * 2 * bank_width + r);
    n += bank_width * cfg.r_z + cfg.r_z * d;
  } else if (cfg.mode == PromptMode::no_conditional) {
    n += 2 * (r * bank_width + r * bank_width + r);
  }
  return n;
}

int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw DimensionError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

PromptLearner::PromptLearner(const ClipModel& clip, ConceptBank bank, const TokenLayout& layout,
                             const PromptConfig& cfg, std::uint64_t seed)
    : clip_(clip), bank_(std::move(bank)), layout_(layout), cfg_(cfg) {
  const EncoderConfig& enc = clip.config();
  const std::size_t c_n = layout_.num_classes, d = enc.embed_dim;
  if (!clip.frozen()) throw ConfigError("prompt learning needs frozen encoders");
  if (c_n < 2) throw ConfigError("prompt learning needs at least 2 classes");
  if (cfg_.context_len == 0) throw ConfigError("context length L must be at least 1");
  if (uses_concepts(cfg_.mode)) {
    if (bank_.num_classes != c_n) {
      throw ConfigError("bank has " + std::to_string(bank_.num_classes) + " classes, expected " + std::to_string(c_n));
    }
    cfg_.positions.validate(bank_.seq_len);
    if (cfg_.r_proj == 0) throw ConfigError("r_proj must be positive");
  }
  if (sequence_length() > enc.text_max_len) {
    throw LengthError("prompt length " + std::to_string(sequence_length()) + " exceeds text_max_len " +
                      std::to_string(enc.text_max_len));
  }
  if (static_cast<std::size_t>(layout_.attribute_begin()) > enc.vocab_size) {
    throw ConfigError("vocabulary too small for the class tokens");
  }

  Rng rng = Rng(seed).fork(31);
  const TextEncoder& text = clip.text();
  const std::size_t deep = enc.deep_prompt_layers;
  for (std::size_t k = 0; k < deep; ++k) {
    std::vector<double> v = rng.normal_vector(cfg_.context_len * d, cfg_.prompt_init_std);
    if (k == 0) {
      const std::size_t init_rows = std::min(cfg_.context_len, layout_.template_len);
      const auto table = text.token_table().values();
      for (std::size_t r = 0; r < init_rows; ++r) {
        const std::size_t row = static_cast<std::size_t>(layout_.template_begin) + r;
        std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(row * d), d, v.begin() + static_cast<std::ptrdiff_t>(r * d));
      }
    }
    ctx_.text.push_back(Tensor::parameter({cfg_.context_len, d}, std::move(v)));
  }
  if (cfg_.image_prompt_len > 0) {
    for (std::size_t k = 0; k < deep; ++k) ctx_.image.push_back(normal_param({cfg_.image_prompt_len, d}, cfg_.prompt_init_std, rng));
  }
  std::vector<int> class_ids(c_n);
  for (std::size_t c = 0; c < c_n; ++c) class_ids[c] = layout_.class_token(c);
  ctx_.class_tokens = text.embed(class_ids).detach();
  const int eos[] = {layout_.eos};
  ctx_.eos_token = text.embed(eos).detach();

  if (uses_concepts(cfg_.mode)) {
    const std::size_t dh = bank_.width;
    // B scaled so projected rows match the token-embedding scale.
    const double token_scale = rms(text.token_table());
    proj_.A = normal_param({cfg_.r_proj, dh}, 1.0, rng);
    proj_.B = normal_param({d, cfg_.r_proj}, token_scale / std::sqrt(static_cast<double>(cfg_.r_proj)), rng);
    if (cfg_.mode != PromptMode::no_intervention) {
      const bool conditional = is_conditional(cfg_.mode);
      prefix_ = make_intervention_params(cfg_.r_sub, dh, conditional, rng);
      suffix_ = make_intervention_params(cfg_.r_sub, dh, conditional, rng);
      if (conditional) zproj_ = make_z_projection(dh, cfg_.r_z, d, rng);
    }
  }
  inv_tau_ = Tensor::scalar(clip.inverse_temperature());
}

std::size_t PromptLearner::sequence_length() const {
  const std::size_t concepts = uses_concepts(cfg_.mode) ? bank_.seq_len : 0;
  return concepts + cfg_.context_len + 2;
}

ParameterList PromptLearner::parameters() const {
  ParameterList out;
  for (std::size_t k = 0; k < ctx_.text.size(); ++k) out.add("prompt.text.ctx" + std::to_string(k), ctx_.text[k]);
  for (std::size_t k = 0; k < ctx_.image.size(); ++k) out.add("prompt.image.ctx" + std::to_string(k), ctx_.image[k]);
  if (proj_.A.node()) {
    out.add("proj.A", proj_.A);
    out.add("proj.B", proj_.B);
  }
  if (prefix_.R.node()) {
    out.add("prefix.R", prefix_.R);
    out.add("prefix.W", prefix_.W);
    out.add("prefix.b", prefix_.b);
    out.add("suffix.R", suffix_.R);
    out.add("suffix.W", suffix_.W);
    out.add("suffix.b", suffix_.b);
  }
  if (zproj_.U.node()) {
    out.add("wz.U", zproj_.U);
    out.add("wz.V", zproj_.V);
  }
  return out;
}

std::size_t PromptLearner::expected_parameter_count() const {
  return trainable_param_count(cfg_, clip_.config(), bank_.width);
}

void PromptLearner::set_inverse_temperature(double value) {
  if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError("inverse temperature must be positive");
  inv_tau_ = Tensor::scalar(value);
}

BasePrompt PromptLearner::build_base_prompt(std::size_t class_index) const {
  if (class_index >= layout_.num_classes) {
    throw IndexError("class index " + std::to_string(class_index) + " outside " + std::to_string(layout_.num_classes) +
                     " classes");
  }
  const std::size_t row[] = {class_index};
  return {ctx_.text[0], ops::gather_rows(ctx_.class_tokens, row)};
}

Tensor PromptLearner::project(const Tensor& h_bar_seq) const {
  if (!proj_.A.node()) throw ConfigError("mode " + to_string(cfg_.mode) + " has no concept projection");
  if (h_bar_seq.rank() != 2 || h_bar_seq.cols() != proj_.A.cols()) {
    throw DimensionError("project: expected [L_h x " + std::to_string(proj_.A.cols()) + "], got " +
                         shape_to_string(h_bar_seq.shape()));
  }
  return ops::matmul_nt(ops::matmul_nt(h_bar_seq, proj_.A), proj_.B);
}

AdaptivePrompt PromptLearner::assemble(const Tensor& h_tilde, std::size_t class_index) const {
  const BasePrompt base = build_base_prompt(class_index);
  const std::size_t d = clip_.config().embed_dim;
  if (h_tilde.rank() != 2 || h_tilde.cols() != d) {
    throw DimensionError("assemble: concept tokens " + shape_to_string(h_tilde.shape()) + " vs D_p " + std::to_string(d));
  }
  const std::size_t len = h_tilde.rows() + base.context.rows() + 2;
  if (len > clip_.config().text_max_len) {
    throw LengthError("assembled prompt length " + std::to_string(len) + " exceeds text_max_len " +
                      std::to_string(clip_.config().text_max_len));
  }
  return {ops::concat({h_tilde, base.context}, 0), h_tilde.rows()};
}

TextSequence PromptLearner::prompt_sequence(const AdaptivePrompt& prompt, std::size_t class_index) const {
  const BasePrompt base = build_base_prompt(class_index);
  Tensor tokens = ops::concat({prompt.tokens, base.class_embedding, ctx_.eos_token}, 0);
  const std::size_t eos = tokens.rows() - 1;
  return {std::move(tokens), eos};
}

Tensor PromptLearner::encode_images(const Tensor& images) const {
  return clip_.image().encode(images, ctx_.image);
}

Tensor PromptLearner::class_text_embeddings(const Tensor& z) const {
  using namespace ops;
  const std::size_t c_n = layout_.num_classes, l_ctx = cfg_.context_len;
  const TextEncoder& text = clip_.text();

  if (!uses_concepts(cfg_.mode)) {
    // [V, CLS_c, EOS]
    const Tensor source = concat({ctx_.text[0], ctx_.class_tokens, ctx_.eos_token}, 0);
    std::vector<std::size_t> index;
    for (std::size_t c = 0; c < c_n; ++c) {
      for (std::size_t j = 0; j < l_ctx; ++j) index.push_back(j);
      index.push_back(l_ctx + c);
      index.push_back(l_ctx + c_n);
    }
    TextBatch batch;
    batch.token_embeddings = gather_rows(source, index);
    batch.length = l_ctx + 2;
    batch.eos_index.assign(c_n, l_ctx + 1);
    batch.prompt_begin = 0;
    return text.encode(batch, ctx_.text);
  }

  const std::size_t l_h = bank_.seq_len, dh = bank_.width;
  const InterventionMode imode = intervention_mode_for(cfg_.mode);
  const bool conditional = is_conditional(cfg_.mode);
  const std::size_t n = conditional ? z.rows() : 1;
  if (conditional && (z.rank() != 2 || z.cols() != clip_.config().embed_dim)) {
    throw DimensionError("class_text_embeddings: z " + shape_to_string(z.shape()));
  }
  const std::size_t m = conditional ? n * c_n : c_n;
  const Tensor h_all = reshape(bank_.data, {c_n * l_h, dh});

  // slot[l] = (side, j): side 0 untouched, 1 prefix, 2 suffix.
  std::vector<std::pair<int, std::size_t>> slot(l_h, {0, 0});
  std::vector<std::size_t> side_pos[3];
  if (imode != InterventionMode::identity) {
    side_pos[1] = cfg_.positions.prefix_positions();
    side_pos[2] = cfg_.positions.suffix_positions(l_h);
  }
  for (int side = 1; side <= 2; ++side) {
    for (std::size_t j = 0; j < side_pos[side].size(); ++j) slot[side_pos[side][j]] = {side, j};
  }
  for (std::size_t l = 0; l < l_h; ++l) {
    if (slot[l].first == 0) {
      slot[l].second = side_pos[0].size();
      side_pos[0].push_back(l);
    }
  }

  Tensor u_rows;
  if (conditional) u_rows = matmul_nt(matmul_nt(z, zproj_.V), zproj_.U);  // [N x D_h] rows of W_z z

  std::vector<Tensor> pieces;
  std::size_t offset[3] = {0, 0, 0};
  bool per_image[3] = {false, false, false};
  std::size_t next = 0;
  for (int side = 0; side < 3; ++side) {
    const auto& pos = side_pos[side];
    if (pos.empty()) continue;
    const std::size_t k = pos.size();
    offset[side] = next;
    if (side == 0) {
      std::vector<std::size_t> rows;
      for (std::size_t c = 0; c < c_n; ++c) {
        for (std::size_t l : pos) rows.push_back(c * l_h + l);
      }
      pieces.push_back(project(gather_rows(h_all, rows)));
      next += c_n * k;
      continue;
    }
    const InterventionParams& p = side == 1 ? prefix_ : suffix_;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> cond_rows;
    const std::size_t images = conditional ? n : 1;
    for (std::size_t i = 0; i < images; ++i) {
      for (std::size_t c = 0; c < c_n; ++c) {
        for (std::size_t l : pos) {
          rows.push_back(c * l_h + l);
          cond_rows.push_back(i);
        }
      }
    }
    const Tensor h = gather_rows(h_all, rows);
    const Tensor cond = conditional ? gather_rows(u_rows, cond_rows) : Tensor();
    pieces.push_back(project(intervene_rows(h, cond, p, imode)));
    per_image[side] = conditional;
    next += images * c_n * k;
  }
  const std::size_t ctx_at = next;
  const std::size_t cls_at = ctx_at + l_ctx;
  const std::size_t eos_at = cls_at + c_n;
  pieces.push_back(ctx_.text[0]);
  pieces.push_back(ctx_.class_tokens);
  pieces.push_back(ctx_.eos_token);
  const Tensor source = concat(std::span<const Tensor>(pieces), 0);

  const std::size_t t = l_h + l_ctx + 2;
  std::vector<std::size_t> index;
  std::vector<std::size_t> concept_index;
  index.reserve(m * t);
  for (std::size_t s = 0; s < m; ++s) {
    const std::size_t i = conditional ? s / c_n : 0;
    const std::size_t c = s % c_n;
    for (std::size_t l = 0; l < l_h; ++l) {
      const auto [side, j] = slot[l];
      const std::size_t k = side_pos[side].size();
      const std::size_t block = per_image[side] ? i * c_n + c : c;
      index.push_back(offset[side] + block * k + j);
    }
    concept_index.insert(concept_index.end(), index.end() - static_cast<std::ptrdiff_t>(l_h), index.end());
    for (std::size_t j = 0; j < l_ctx; ++j) index.push_back(ctx_at + j);
    index.push_back(cls_at + c);
    index.push_back(eos_at);
  }
  TextBatch batch;
  batch.token_embeddings = gather_rows(source, index);
  batch.length = t;
  batch.eos_index.assign(m, t - 1);
  batch.prompt_begin = l_h;
  if (cfg_.reinject_concepts) {
    batch.reinject_rows = gather_rows(source, concept_index);
    batch.reinject_len = l_h;
  }
  return text.encode(batch, ctx_.text);
}

Tensor PromptLearner::class_logits(const Tensor& images) const {
  using namespace ops;
  const Tensor z = encode_images(images);
  const std::size_t n = z.rows(), c_n = layout_.num_classes;
  const Tensor w = class_text_embeddings(z);
  Tensor logits;
  if (is_conditional(cfg_.mode)) {
    std::vector<std::size_t> rows(n * c_n);
    for (std::size_t s = 0; s < rows.size(); ++s) rows[s] = s / c_n;
    logits = reshape(sum_cols(hadamard(gather_rows(z, rows), w)), {n, c_n});
  } else {
    logits = matmul_nt(z, w);
  }
  return mul_scalar(logits, inv_tau_);
}

Tensor PromptLearner::loss(const Tensor& images, std::span<const int> labels) const {
  const std::size_t n = images.rows() / clip_.config().image_tokens;
  if (labels.size() != n) {
    throw DimensionError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " images");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= layout_.num_classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(layout_.num_classes) + ")");
    }
  }
  return ops::softmax_cross_entropy(class_logits(images), labels);
}

std::vector<Prediction> PromptLearner::predict(const Tensor& images) const {
  const Tensor logits = class_logits(images);
  const std::size_t n = logits.rows(), c_n = logits.cols();
  const auto v = logits.values();
  std::vector<Prediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * c_n;
    const double top = *std::max_element(row, row + c_n);
    auto& p = out[i].probabilities;
    p.resize(c_n);
    double total = 0.0;
    for (std::size_t c = 0; c < c_n; ++c) total += p[c] = std::exp(row[c] - top);
    for (double& x : p) x /= total;
    out[i].label = argmax_lowest(std::span<const double>(row, c_n));
  }
  return out;
}

void PromptLearner::orthonormalize_subspaces() {
  if (prefix_.R.node()) {
    orthonormalize_rows(prefix_.R);
    orthonormalize_rows(suffix_.R);
  }
}

ConceptBank pooled_description_bank(const ConceptBank& bank, std::uint64_t seed, double word_noise) {
  if (word_noise < 0.0) throw ConfigError("word_noise must be non-negative");
  const std::size_t c_n = bank.num_classes, l_h = bank.seq_len, d = bank.width;
  Rng rng = Rng(seed).fork(41);
  const double sd = word_noise / std::sqrt(static_cast<double>(d));
  const auto src = bank.data.values();
  std::vector<double> data(c_n * l_h * d);
  std::vector<double> pooled(d);
  for (std::size_t c = 0; c < c_n; ++c) {
    std::fill(pooled.begin(), pooled.end(), 0.0);
    // One word per layer slot: a random layer's vector plus word noise.
    for (std::size_t k = 0; k < l_h; ++k) {
      const std::size_t l = rng.index(l_h);
      const double* row = src.data() + (c * l_h + l) * d;
      for (std::size_t j = 0; j < d; ++j) pooled[j] += row[j] + rng.normal(0.0, sd);
    }
    double sq = 0.0;
    for (double x : pooled) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm <= 1e-12) throw DegenerateInputError("pooled description vector has zero norm");
    for (std::size_t l = 0; l < l_h; ++l) {
      for (std::size_t j = 0; j < d; ++j) data[(c * l_h + l) * d + j] = pooled[j] / norm;
    }
  }
  ConceptBank out = bank;
  out.data = Tensor::from({c_n, l_h, d}, std::move(data));
  out.provenance = "pooled:" + bank.provenance;
  return out;
}

}  // namespace cilmp
