#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cilmp/concepts.hpp"
#include "cilmp/encoders.hpp"
#include "cilmp/intervention.hpp"
#include "cilmp/parameters.hpp"

namespace cilmp {

enum class PromptMode {
  cilmp,            // conditional intervention with relationship descriptor
  no_rd,            // conditional on W_z z alone
  no_conditional,   // unconditional intervention
  no_intervention,  // projected concept tokens only
  coop_baseline,    // context tokens + class name, no concept tokens
  text_mode,        // cilmp wiring over a pooled description bank
};

std::string to_string(PromptMode mode);
PromptMode parse_prompt_mode(const std::string& name);
InterventionMode intervention_mode_for(PromptMode mode);
bool uses_concepts(PromptMode mode);
bool is_conditional(PromptMode mode);

// Reserved vocabulary rows: pad, EOS, the four "a photo of a" template
// tokens, one token per class name, then generic attribute words.
struct TokenLayout {
  int pad = 0;
  int eos = 1;
  int template_begin = 2;
  std::size_t template_len = 4;
  int class_begin = 6;
  std::size_t num_classes = 0;

  int class_token(std::size_t c) const { return class_begin + static_cast<int>(c); }
  int attribute_begin() const { return class_begin + static_cast<int>(num_classes); }
  std::size_t attribute_count(std::size_t vocab_size) const;
  static TokenLayout for_classes(std::size_t num_classes, std::size_t vocab_size);
};

struct PromptConfig {
  PromptMode mode = PromptMode::cilmp;
  std::size_t context_len = 4;       // L
  std::size_t image_prompt_len = 4;
  PositionSets positions{4, 4};
  std::size_t r_sub = 8;
  std::size_t r_proj = 8;
  std::size_t r_z = 8;
  bool reinject_concepts = false;    // re-insert concept tokens at every deep layer
  double prompt_init_std = 0.02;
};

// Learnable context tokens (one tensor per deep layer) plus the frozen
// class-name and EOS embeddings.
struct PromptContext {
  std::vector<Tensor> text;   // [L x D_p] per deep layer; text[0] starts from the template tokens
  std::vector<Tensor> image;  // [P x D_p] per deep layer (empty when P = 0)
  Tensor class_tokens;        // [C x D_p], frozen
  Tensor eos_token;           // [1 x D_p], frozen
};

// W = B . A maps concept rows from D_h to D_p.
struct ProjectionParams {
  Tensor A;  // [r_proj x D_h]
  Tensor B;  // [D_p x r_proj]
};

struct BasePrompt {
  Tensor context;          // [L x D_p], shared by every class
  Tensor class_embedding;  // [1 x D_p]
};

// [(L_h + L) x D_p]: projected concept rows followed by the context rows.
struct AdaptivePrompt {
  Tensor tokens;
  std::size_t concept_rows = 0;
};

struct Prediction {
  std::vector<double> probabilities;
  int label = 0;
};

// Frozen dual encoder + frozen concept bank + every trainable prompt,
// projection and intervention parameter.
class PromptLearner {
 public:
  PromptLearner(const ClipModel& clip, ConceptBank bank, const TokenLayout& layout, const PromptConfig& cfg,
                std::uint64_t seed);

  const PromptConfig& config() const { return cfg_; }
  const ConceptBank& bank() const { return bank_; }
  const ClipModel& clip() const { return clip_; }
  std::size_t num_classes() const { return layout_.num_classes; }
  std::size_t sequence_length() const;

  // Registry of trainable tensors in serialisation order.
  ParameterList parameters() const;
  // Closed-form count for the current mode; equals parameters().scalar_count().
  std::size_t expected_parameter_count() const;

  PromptContext& context() { return ctx_; }
  const PromptContext& context() const { return ctx_; }
  ProjectionParams& projection() { return proj_; }
  InterventionParams& prefix_params() { return prefix_; }
  InterventionParams& suffix_params() { return suffix_; }
  ZProjection& z_projection() { return zproj_; }
  // Overrides 1/tau (defaults to the frozen pre-trained value).
  void set_inverse_temperature(double value);

  BasePrompt build_base_prompt(std::size_t class_index) const;
  // [L_h x D_h] -> [L_h x D_p]
  Tensor project(const Tensor& h_bar_seq) const;
  AdaptivePrompt assemble(const Tensor& h_tilde, std::size_t class_index) const;
  // Full text input for one class: adaptive prompt, class token, EOS.
  TextSequence prompt_sequence(const AdaptivePrompt& prompt, std::size_t class_index) const;

  // Unit image embeddings [N x D_p]; images are [(N*image_tokens) x D_p].
  Tensor encode_images(const Tensor& images) const;
  // Text embeddings of every class prompt. Conditional modes return
  // [(N*C) x D_p] (row i*C + c is conditioned on z_i); other modes [C x D_p].
  Tensor class_text_embeddings(const Tensor& z) const;
  // z_i^T g(p_c) / tau, [N x C].
  Tensor class_logits(const Tensor& images) const;
  Tensor loss(const Tensor& images, std::span<const int> labels) const;
  std::vector<Prediction> predict(const Tensor& images) const;

  // Re-orthonormalise R of both interventions.
  void orthonormalize_subspaces();

 private:
  Tensor concept_rows_all() const;

  const ClipModel& clip_;
  ConceptBank bank_;
  TokenLayout layout_;
  PromptConfig cfg_;
  PromptContext ctx_;
  ProjectionParams proj_;
  InterventionParams prefix_, suffix_;
  ZProjection zproj_;
  Tensor inv_tau_;
};

// Number of trainable scalars implied by the configuration, computed without
// building any tensors.
std::size_t trainable_param_count(const PromptConfig& cfg, const EncoderConfig& enc, std::size_t bank_width);

// Text-mode bank: every class sequence is replaced by L_h copies of one
// pooled description vector, the normalised mean of L_h seeded "words"
// (random layer rows of the class plus N(0, word_noise^2/D_h) noise).
ConceptBank pooled_description_bank(const ConceptBank& bank, std::uint64_t seed, double word_noise = 1.0);

// Argmax with ties broken by the lowest index.
int argmax_lowest(std::span<const double> values);

}  // namespace cilmp
