#include "cilmp/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cilmp/binary_io.hpp"
#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"

namespace cilmp {

namespace {

constexpr std::string_view kEncoderMagic = "CILMPENC1";

Tensor normal_param(const Shape& shape, double stddev, Rng& rng) {
  return Tensor::parameter(shape, rng.normal_vector(shape_numel(shape), stddev));
}

Tensor const_param(const Shape& shape, double value) {
  return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), value));
}

// Replaces rows [begin, begin + P) of every segment with the rows of `prompts`.
Tensor replace_prompt_slots(const Tensor& x, const Tensor& prompts, std::size_t segment_len, std::size_t begin) {
  const std::size_t total = x.rows();
  const std::size_t p = prompts.rows();
  if (begin + p > segment_len) throw DimensionError("deep prompts do not fit the sequence");
  std::vector<std::size_t> index(total);
  std::iota(index.begin(), index.end(), std::size_t{0});
  for (std::size_t s = 0; s < total / segment_len; ++s) {
    for (std::size_t j = 0; j < p; ++j) index[s * segment_len + begin + j] = total + j;
  }
  return ops::gather_rows(ops::concat({x, prompts}, 0), index);
}

// Row s*len + j of `rows` overwrites row j of segment s.
Tensor replace_leading_rows(const Tensor& x, const Tensor& rows, std::size_t segment_len, std::size_t len) {
  const std::size_t total = x.rows();
  const std::size_t segments = total / segment_len;
  if (len > segment_len || rows.rows() != segments * len) throw DimensionError("re-injected rows do not fit the batch");
  std::vector<std::size_t> index(total);
  std::iota(index.begin(), index.end(), std::size_t{0});
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t j = 0; j < len; ++j) index[s * segment_len + j] = total + s * len + j;
  }
  return ops::gather_rows(ops::concat({x, rows}, 0), index);
}

}  // namespace

void EncoderConfig::validate() const {
  if (embed_dim == 0 || num_layers == 0 || hidden_dim == 0 || image_tokens == 0 || text_max_len == 0 ||
      vocab_size == 0) {
    throw ConfigError("encoder extents must all be positive");
  }
  if (deep_prompt_layers < 1 || deep_prompt_layers > num_layers) {
    throw ConfigError("deep_prompt_layers must lie in [1, num_layers]");
  }
}

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t hidden, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  ln1_gain_ = const_param({dim}, 1.0);
  ln1_bias_ = const_param({dim}, 0.0);
  wq_ = normal_param({dim, dim}, sd, rng);
  wk_ = normal_param({dim, dim}, sd, rng);
  wv_ = normal_param({dim, dim}, sd, rng);
  wo_ = normal_param({dim, dim}, 0.5 * sd, rng);
  bo_ = const_param({dim}, 0.0);
  ln2_gain_ = const_param({dim}, 1.0);
  ln2_bias_ = const_param({dim}, 0.0);
  w1_ = normal_param({dim, hidden}, sd, rng);
  b1_ = const_param({hidden}, 0.0);
  w2_ = normal_param({hidden, dim}, 0.5 / std::sqrt(static_cast<double>(hidden)), rng);
  b2_ = const_param({dim}, 0.0);
}

Tensor TransformerBlock::forward(const Tensor& x, std::size_t segment_len, bool causal) const {
  using namespace ops;
  const Tensor h = layer_norm(x, ln1_gain_, ln1_bias_);
  const Tensor attn = segment_attention(matmul(h, wq_), matmul(h, wk_), matmul(h, wv_), segment_len, causal);
  const Tensor x1 = add(x, add_rowwise(matmul(attn, wo_), bo_));
  const Tensor h2 = layer_norm(x1, ln2_gain_, ln2_bias_);
  const Tensor mlp = add_rowwise(matmul(gelu(add_rowwise(matmul(h2, w1_), b1_)), w2_), b2_);
  return add(x1, mlp);
}

void TransformerBlock::register_parameters(ParameterList& out, const std::string& prefix) const {
  out.add(prefix + "ln1.gain", ln1_gain_);
  out.add(prefix + "ln1.bias", ln1_bias_);
  out.add(prefix + "attn.wq", wq_);
  out.add(prefix + "attn.wk", wk_);
  out.add(prefix + "attn.wv", wv_);
  out.add(prefix + "attn.wo", wo_);
  out.add(prefix + "attn.bo", bo_);
  out.add(prefix + "ln2.gain", ln2_gain_);
  out.add(prefix + "ln2.bias", ln2_bias_);
  out.add(prefix + "mlp.w1", w1_);
  out.add(prefix + "mlp.b1", b1_);
  out.add(prefix + "mlp.w2", w2_);
  out.add(prefix + "mlp.b2", b2_);
}

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::size_t d = cfg.embed_dim;
  cls_ = normal_param({1, d}, 0.02, rng);
  pos_ = normal_param({1 + cfg.image_tokens, d}, 0.01, rng);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) blocks_.emplace_back(d, cfg.hidden_dim, rng);
  ln_gain_ = const_param({d}, 1.0);
  ln_bias_ = const_param({d}, 0.0);
  proj_ = normal_param({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

Tensor ImageEncoder::encode(const Tensor& images, std::span<const Tensor> prompts) const {
  using namespace ops;
  const std::size_t d = cfg_.embed_dim, it = cfg_.image_tokens;
  if (images.cols() != d || images.rows() % it != 0) {
    throw DimensionError("encode_image: expected [(N*" + std::to_string(it) + ") x " + std::to_string(d) + "], got " +
                         shape_to_string(images.shape()));
  }
  for (double v : images.values()) {
    if (!std::isfinite(v)) throw EvaluationError("encode_image: non-finite input");
  }
  const std::size_t n = images.rows() / it;
  const std::size_t p = prompts.empty() ? 0 : prompts[0].rows();
  for (const Tensor& layer : prompts) {
    if (layer.rows() != p || layer.cols() != d) throw DimensionError("encode_image: inconsistent prompt shapes");
  }
  const std::size_t t = 1 + it + p;

  std::vector<std::size_t> pos_index(n * it);
  for (std::size_t i = 0; i < n * it; ++i) pos_index[i] = 1 + i % it;
  std::vector<Tensor> pieces{add(images, gather_rows(pos_, pos_index)), add(cls_, slice(pos_, 0, 0, 1))};
  if (p > 0) pieces.push_back(prompts[0]);
  const Tensor source = concat(std::span<const Tensor>(pieces), 0);

  std::vector<std::size_t> seq_index;
  seq_index.reserve(n * t);
  for (std::size_t s = 0; s < n; ++s) {
    seq_index.push_back(n * it);
    for (std::size_t j = 0; j < it; ++j) seq_index.push_back(s * it + j);
    for (std::size_t j = 0; j < p; ++j) seq_index.push_back(n * it + 1 + j);
  }
  Tensor x = gather_rows(source, seq_index);
  const std::size_t deep = std::min(prompts.size(), cfg_.deep_prompt_layers);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    if (k >= 1 && k < deep) x = replace_prompt_slots(x, prompts[k], t, 1 + it);
    x = blocks_[k].forward(x, t, /*causal=*/false);
  }
  std::vector<std::size_t> cls_rows(n);
  for (std::size_t s = 0; s < n; ++s) cls_rows[s] = s * t;
  const Tensor pooled = layer_norm(gather_rows(x, cls_rows), ln_gain_, ln_bias_);
  return normalize_rows(matmul(pooled, proj_));
}

void ImageEncoder::register_parameters(ParameterList& out) const {
  out.add("image.cls", cls_);
  out.add("image.pos", pos_);
  for (std::size_t k = 0; k < blocks_.size(); ++k) blocks_[k].register_parameters(out, "image.block" + std::to_string(k) + ".");
  out.add("image.ln_post.gain", ln_gain_);
  out.add("image.ln_post.bias", ln_bias_);
  out.add("image.proj", proj_);
}

TextEncoder::TextEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::size_t d = cfg.embed_dim;
  token_embedding_ = normal_param({cfg.vocab_size, d}, 0.02, rng);
  pos_ = normal_param({cfg.text_max_len, d}, 0.01, rng);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) blocks_.emplace_back(d, cfg.hidden_dim, rng);
  ln_gain_ = const_param({d}, 1.0);
  ln_bias_ = const_param({d}, 0.0);
  proj_ = normal_param({d, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

Tensor TextEncoder::embed(std::span<const int> ids) const {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg_.vocab_size) {
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return ops::gather_rows(token_embedding_, rows);
}

Tensor TextEncoder::encode(const TextBatch& batch, std::span<const Tensor> prompts) const {
  using namespace ops;
  const std::size_t d = cfg_.embed_dim, t = batch.length;
  if (t == 0) throw LengthError("encode_text: empty sequence");
  if (t > cfg_.text_max_len) {
    throw LengthError("encode_text: sequence length " + std::to_string(t) + " exceeds text_max_len " +
                      std::to_string(cfg_.text_max_len));
  }
  const Tensor& emb = batch.token_embeddings;
  if (emb.cols() != d || emb.rows() % t != 0) {
    throw DimensionError("encode_text: embeddings " + shape_to_string(emb.shape()) + " do not tile length " +
                         std::to_string(t));
  }
  const std::size_t count = emb.rows() / t;
  if (batch.eos_index.size() != count) throw DimensionError("encode_text: one eos index per sequence required");

  std::vector<std::size_t> pos_index(count * t);
  for (std::size_t i = 0; i < pos_index.size(); ++i) pos_index[i] = i % t;
  Tensor x = add(emb, gather_rows(pos_, pos_index));
  const std::size_t deep = std::min(prompts.size(), cfg_.deep_prompt_layers);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    if (k >= 1 && k < deep) x = replace_prompt_slots(x, prompts[k], t, batch.prompt_begin);
    if (k >= 1 && k < cfg_.deep_prompt_layers && batch.reinject_len > 0) {
      x = replace_leading_rows(x, batch.reinject_rows, t, batch.reinject_len);
    }
    x = blocks_[k].forward(x, t, /*causal=*/true);
  }
  std::vector<std::size_t> eos_rows(count);
  for (std::size_t s = 0; s < count; ++s) {
    if (batch.eos_index[s] >= t) throw IndexError("encode_text: eos index outside sequence");
    eos_rows[s] = s * t + batch.eos_index[s];
  }
  const Tensor pooled = layer_norm(gather_rows(x, eos_rows), ln_gain_, ln_bias_);
  return normalize_rows(matmul(pooled, proj_));
}

Tensor TextEncoder::encode(const TextSequence& seq, std::span<const Tensor> prompts, std::size_t prompt_begin) const {
  TextBatch batch{seq.token_embeddings, seq.token_embeddings.rows(), {seq.eos_index}, prompt_begin, Tensor(), 0};
  return encode(batch, prompts);
}

void TextEncoder::register_parameters(ParameterList& out) const {
  out.add("text.token_embedding", token_embedding_);
  out.add("text.pos", pos_);
  for (std::size_t k = 0; k < blocks_.size(); ++k) blocks_[k].register_parameters(out, "text.block" + std::to_string(k) + ".");
  out.add("text.ln_final.gain", ln_gain_);
  out.add("text.ln_final.bias", ln_bias_);
  out.add("text.proj", proj_);
}

InfoNceLoss info_nce(const Tensor& z, const Tensor& w, const Tensor& log_tau) {
  using namespace ops;
  if (z.shape() != w.shape()) {
    throw DimensionError("info_nce: " + shape_to_string(z.shape()) + " vs " + shape_to_string(w.shape()));
  }
  const std::size_t n = z.rows();
  if (n < 2) throw ConfigError("info_nce needs at least 2 pairs per batch");
  const Tensor inv_tau = exp(scale(log_tau, -1.0));
  const Tensor logits = mul_scalar(matmul_nt(z, w), inv_tau);
  std::vector<int> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  Tensor lv = softmax_cross_entropy(logits, diag);
  Tensor lt = softmax_cross_entropy(transpose(logits), diag);
  Tensor total = scale(add(lv, lt), 0.5);
  return {std::move(total), std::move(lv), std::move(lt)};
}

ClipModel::ClipModel(const EncoderConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      image_([&] {
        Rng rng = Rng(seed).fork(1);
        return ImageEncoder(cfg, rng);
      }()),
      text_([&] {
        Rng rng = Rng(seed).fork(2);
        return TextEncoder(cfg, rng);
      }()),
      log_tau_(Tensor::parameter({1}, {-std::log(20.0)})) {}

double ClipModel::inverse_temperature() const { return std::exp(-log_tau_.item()); }

ParameterList ClipModel::parameters() const {
  ParameterList out;
  image_.register_parameters(out);
  text_.register_parameters(out);
  out.add("log_tau", log_tau_);
  return out;
}

std::uint64_t ClipModel::checksum() const { return cilmp::checksum(parameters()); }

FrozenFlag ClipModel::freeze() {
  if (flag_.frozen) return flag_;
  for (const auto& p : parameters()) {
    Tensor t = p.tensor;
    t.freeze();
  }
  flag_ = {true, checksum()};
  return flag_;
}

void ClipModel::save(const std::filesystem::path& path) const {
  io::ByteWriter w;
  w.bytes(kEncoderMagic);
  for (std::size_t v : {cfg_.embed_dim, cfg_.num_layers, cfg_.hidden_dim, cfg_.image_tokens, cfg_.text_max_len,
                        cfg_.vocab_size, cfg_.deep_prompt_layers}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  for (const auto& p : parameters()) {
    for (double v : p.tensor.values()) w.f64(v);
  }
  w.write_file(path);
}

ClipModel ClipModel::load(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(kEncoderMagic);
  EncoderConfig cfg;
  cfg.embed_dim = r.u32();
  cfg.num_layers = r.u32();
  cfg.hidden_dim = r.u32();
  cfg.image_tokens = r.u32();
  cfg.text_max_len = r.u32();
  cfg.vocab_size = r.u32();
  cfg.deep_prompt_layers = r.u32();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid encoder config: ") + e.what());
  }
  if (cfg.embed_dim > 4096 || cfg.hidden_dim > 16384 || cfg.num_layers > 64 || cfg.vocab_size > 1'000'000 ||
      cfg.text_max_len > 4096 || cfg.image_tokens > 4096) {
    r.fail("encoder config dimension overflow");
  }
  ClipModel model(cfg, 0);
  std::vector<double> buf;
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    r.f64_array(buf, t.numel());
    std::copy(buf.begin(), buf.end(), t.mutable_values().begin());
  }
  r.expect_end();
  return model;
}

TextBatch make_text_batch(const TextEncoder& text, std::span<const std::vector<int>> sequences, int pad_token) {
  if (sequences.empty()) throw DimensionError("make_text_batch: no sequences");
  std::size_t length = 0;
  for (const auto& s : sequences) length = std::max(length, s.size());
  std::vector<int> ids;
  ids.reserve(sequences.size() * length);
  TextBatch batch;
  for (const auto& s : sequences) {
    if (s.empty()) throw LengthError("make_text_batch: empty sequence");
    ids.insert(ids.end(), s.begin(), s.end());
    ids.insert(ids.end(), length - s.size(), pad_token);
    batch.eos_index.push_back(s.size() - 1);
  }
  batch.token_embeddings = text.embed(ids);
  batch.length = length;
  return batch;
}

std::vector<double> pretrain_clip(ClipModel& model, std::span<const ImageTextPair> pairs, const PretrainOptions& opts) {
  if (model.frozen()) throw FrozenParameterError("pretrain_clip on frozen encoders");
  if (opts.batch_size < 2 || pairs.size() < 2) throw ConfigError("pretrain_clip needs at least 2 pairs per batch");
  const auto& cfg = model.config();
  Adam optimizer(model.parameters(), opts.lr);
  Rng rng = Rng(opts.seed).fork(11);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size();) {
      std::size_t end = std::min(order.size(), begin + opts.batch_size);
      if (order.size() - end == 1) ++end;  // never leave a singleton batch
      std::vector<double> pixels;
      std::vector<std::vector<int>> texts;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& pair = pairs[order[i]];
        if (pair.image.rows() != cfg.image_tokens || pair.image.cols() != cfg.embed_dim) {
          throw DimensionError("pretrain_clip: image shape " + shape_to_string(pair.image.shape()));
        }
        pixels.insert(pixels.end(), pair.image.values().begin(), pair.image.values().end());
        texts.push_back(pair.tokens);
      }
      const std::size_t n = end - begin;
      const Tensor images = Tensor::from({n * cfg.image_tokens, cfg.embed_dim}, std::move(pixels));
      const Tensor z = model.image().encode(images);
      const Tensor w = model.text().encode(make_text_batch(model.text(), texts, opts.pad_token));
      const InfoNceLoss loss = info_nce(z, w, model.log_tau());
      optimizer.zero_grad();
      backward(loss.total);
      optimizer.step();
      epoch_loss += loss.total.item();
      ++batches;
      begin = end;
    }
    trace.push_back(epoch_loss / static_cast<double>(batches));
  }
  return trace;
}

}  // namespace cilmp
