#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cilmp/parameters.hpp"
#include "cilmp/rng.hpp"
#include "cilmp/tensor.hpp"

namespace cilmp {

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 128;
  std::size_t image_tokens = 16;
  std::size_t text_max_len = 48;
  std::size_t vocab_size = 64;
  std::size_t deep_prompt_layers = 2;

  // Throws ConfigError on non-positive extents or deep_prompt_layers outside [1, num_layers].
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Pre-norm transformer block with single-head attention.
class TransformerBlock {
 public:
  TransformerBlock(std::size_t dim, std::size_t hidden, Rng& rng);

  // x is a stack of equal-length segments, [(segments*segment_len) x dim].
  Tensor forward(const Tensor& x, std::size_t segment_len, bool causal) const;
  void register_parameters(ParameterList& out, const std::string& prefix) const;

 private:
  Tensor ln1_gain_, ln1_bias_, wq_, wk_, wv_, wo_, bo_;
  Tensor ln2_gain_, ln2_bias_, w1_, b1_, w2_, b2_;
};

// A batch of token sequences that all have the same padded length.
struct TextBatch {
  Tensor token_embeddings;               // [(count*length) x D]
  std::size_t length = 0;                // padded length of every sequence
  std::vector<std::size_t> eos_index;    // one per sequence, < length
  std::size_t prompt_begin = 0;          // first deep-prompt slot
  // Optional rows re-inserted into slots [0, reinject_len) of every sequence
  // before each deep layer, [(count*reinject_len) x D].
  Tensor reinject_rows;
  std::size_t reinject_len = 0;
};

// Single sequence view: w is read at eos_index.
struct TextSequence {
  Tensor token_embeddings;  // [len x D]
  std::size_t eos_index = 0;
};

class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& cfg, Rng& rng);

  // images: [(N*image_tokens) x D]. prompts[k], when present, holds the
  // [P x D] prompt tokens of layer k: layer 0 appends them after the image
  // tokens, deeper layers (k < deep_prompt_layers) overwrite those slots.
  // Returns unit-norm embeddings [N x D].
  Tensor encode(const Tensor& images, std::span<const Tensor> prompts = {}) const;
  void register_parameters(ParameterList& out) const;

 private:
  EncoderConfig cfg_;
  Tensor cls_, pos_, ln_gain_, ln_bias_, proj_;
  std::vector<TransformerBlock> blocks_;
};

class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& cfg, Rng& rng);

  // Causal encoder over a batch. prompts[k] for 1 <= k < deep_prompt_layers
  // replaces rows [prompt_begin, prompt_begin + L) of every sequence before
  // layer k; prompts[0] is ignored (layer-0 prompts are already part of the
  // input embeddings). Returns unit-norm embeddings [count x D].
  Tensor encode(const TextBatch& batch, std::span<const Tensor> prompts = {}) const;
  Tensor encode(const TextSequence& seq, std::span<const Tensor> prompts = {}, std::size_t prompt_begin = 0) const;

  // Rows of the token table for the given ids, [ids.size() x D].
  Tensor embed(std::span<const int> ids) const;
  const Tensor& token_table() const { return token_embedding_; }
  void register_parameters(ParameterList& out) const;

 private:
  EncoderConfig cfg_;
  Tensor token_embedding_, pos_, ln_gain_, ln_bias_, proj_;
  std::vector<TransformerBlock> blocks_;
};

struct FrozenFlag {
  bool frozen = false;
  std::uint64_t checksum = 0;
  bool operator==(const FrozenFlag&) const = default;
};

struct InfoNceLoss {
  Tensor total;          // 0.5 * (image_to_text + text_to_image)
  Tensor image_to_text;  // L_v
  Tensor text_to_image;  // L_t
};

// Symmetric InfoNCE over matched rows of z and w (both [N x D], unit rows).
InfoNceLoss info_nce(const Tensor& z, const Tensor& w, const Tensor& log_tau);

// The dual encoder plus its learnable log-temperature.
class ClipModel {
 public:
  ClipModel(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  const ImageEncoder& image() const { return image_; }
  const TextEncoder& text() const { return text_; }
  const Tensor& log_tau() const { return log_tau_; }
  double inverse_temperature() const;

  // Registration order: image encoder, text encoder, log_tau.
  ParameterList parameters() const;
  std::uint64_t checksum() const;

  // Excludes every parameter from further optimisation. Idempotent.
  FrozenFlag freeze();
  const FrozenFlag& frozen_flag() const { return flag_; }
  bool frozen() const { return flag_.frozen; }

  // Checkpoint: "CILMPENC1", config as u32 LE, parameters as f64 LE.
  void save(const std::filesystem::path& path) const;
  static ClipModel load(const std::filesystem::path& path);

 private:
  EncoderConfig cfg_;
  ImageEncoder image_;
  TextEncoder text_;
  Tensor log_tau_;
  FrozenFlag flag_;
};

struct ImageTextPair {
  Tensor image;             // [image_tokens x D]
  std::vector<int> tokens;  // ends with the EOS token
};

struct PretrainOptions {
  std::size_t epochs = 30;
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  int pad_token = 0;
};

// Minimises L_CLIP with Adam over shuffled mini-batches; returns the mean
// loss of every epoch. Throws ConfigError when a batch would hold < 2 pairs.
std::vector<double> pretrain_clip(ClipModel& model, std::span<const ImageTextPair> pairs, const PretrainOptions& opts);

// Builds a padded TextBatch from token id sequences using the model's table.
TextBatch make_text_batch(const TextEncoder& text, std::span<const std::vector<int>> sequences, int pad_token);

}  // namespace cilmp
