#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cilmp/concepts.hpp"
#include "cilmp/encoders.hpp"
#include "cilmp/metrics.hpp"
#include "cilmp/prompts.hpp"

namespace cilmp {

struct DataConfig {
  std::size_t train_per_class = 8;
  std::size_t test_per_class = 50;
  double margin = 1.0;          // scale of the class signal in latent space
  double spread = 0.6;          // isotropic latent noise
  double token_noise = 0.3;     // per-token pixel noise
  double knowledge_corr = 0.8;  // 0 = bank independent of the world
  std::size_t attributes_per_caption = 2;
  double caption_class_prob = 0.5;
};

struct PretrainConfig {
  std::size_t pairs = 512;
  std::size_t epochs = 30;
  double lr = 3e-4;
  std::size_t batch_size = 32;
};

struct OptimConfig {
  std::string name = "sgd";
  double lr = 0.0025;
  double momentum = 0.9;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;  // clamped to the training set size
  bool orthonormalize_r = false;  // re-orthonormalise R after every step
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t num_classes = 4;
  DataConfig data;
  EncoderConfig encoder;
  BankSpec bank;  // bank.seed and bank.num_classes are derived from seed / num_classes
  PromptConfig prompt;
  OptimConfig optimizer;
  PretrainConfig pretrain;

  // Throws ConfigError naming the first offending field.
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Returns the dotted path of the first field that differs, or "" when equal.
std::string first_config_difference(const nlohmann::json& a, const nlohmann::json& b, const std::string& prefix = "");

struct SyntheticDataset {
  Tensor train_images;  // [(N_train*image_tokens) x D_p]
  std::vector<int> train_labels;
  Tensor test_images;
  std::vector<int> test_labels;
  Tensor class_prototypes;  // [C x D_h], unit rows
  Tensor prototype_images;  // [(C*image_tokens) x D_p], noise-free image of each prototype at the margin
  std::vector<ImageTextPair> pretrain_pairs;
};

struct World {
  SyntheticDataset data;
  ConceptBank bank;  // what the prompt learner sees
};

// Deterministic in the config; the concept bank is built from the same
// class prototypes as the images, mixed with an independent bank according
// to knowledge_corr.
World generate_dataset(const ExperimentConfig& cfg);

// Images of one split as a list of [image_tokens x D_p] tensors.
Tensor select_images(const Tensor& images, std::size_t image_tokens, std::span<const std::size_t> rows);

struct RunReport {
  std::uint64_t seed = 0;
  std::string mode;
  nlohmann::json config;
  std::vector<double> pretrain_loss;
  std::vector<double> loss_trace;
  MetricSet metrics;
  std::size_t trainable_param_count = 0;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
  std::uint64_t bank_checksum_before = 0;
  std::uint64_t bank_checksum_after = 0;
  double wall_time_seconds = 0.0;  // kept out of to_json so reports stay byte-identical

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
  std::string dump() const;  // canonical report JSON text
};

// Pretrained, frozen encoders keyed by the world that produced them.
class EncoderCache {
 public:
  std::shared_ptr<const ClipModel> get(const ExperimentConfig& cfg, const World& world,
                                       std::vector<double>* pretrain_loss = nullptr);
  std::size_t size() const;

 private:
  struct Entry {
    std::once_flag once;
    std::shared_ptr<const ClipModel> model;
    std::vector<double> loss;
  };
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
};

std::shared_ptr<ClipModel> pretrain_encoders(const ExperimentConfig& cfg, const World& world,
                                             std::vector<double>* loss = nullptr);

struct TrainResult {
  RunReport report;
  std::unique_ptr<PromptLearner> learner;
  std::shared_ptr<const ClipModel> encoders;
  World world;
};

// The bank the configured mode conditions on (pooled for text_mode).
ConceptBank learner_bank(const ExperimentConfig& cfg, const World& world);
// Freshly initialised learner, identical to the one `train` starts from.
std::unique_ptr<PromptLearner> make_learner(const ExperimentConfig& cfg, const ClipModel& encoders, const World& world);

// Phase 1 (pretrain, freeze) then prompt tuning of the configured mode.
// `encoders`, when given, must be frozen and is used instead of phase 1.
TrainResult train(const ExperimentConfig& cfg, std::shared_ptr<const ClipModel> encoders = nullptr,
                  EncoderCache* cache = nullptr);

// Evaluates a learner on the test split.
EvalBatch evaluate_learner(const PromptLearner& learner, const SyntheticDataset& data, std::size_t image_tokens);

// "CILMPCKPT1", u32 config-JSON length, config JSON, trainable parameters as
// little-endian f64 in registry order.
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg, const PromptLearner& learner);
// Loads into `learner`; throws FormatError naming the first config field
// that differs from `cfg`.
void load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg, PromptLearner& learner);

struct AblationRow {
  std::string label;  // mode name or sweep point
  bool skipped = false;
  std::vector<RunReport> runs;
  Summary accuracy, macro_f1, auc, kappa;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string csv() const;       // %.6f metrics, one row per mode / sweep point
  const AblationRow& row(const std::string& label) const;
  std::string runs_csv() const;  // every run, 17 significant digits
};

struct AblationOptions {
  std::vector<PromptMode> modes;
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 1;
  StdKind std_kind = StdKind::population;
};

// Paired design: every mode sees the same world and encoders for a seed.
AblationTable run_ablation(const ExperimentConfig& cfg, const AblationOptions& opts);

enum class SweepKind { positions, r_sub, context_len };
std::string to_string(SweepKind kind);
SweepKind parse_sweep_kind(const std::string& name);
std::vector<std::size_t> default_sweep_values(SweepKind kind);

// Varies one knob over `values` in the configured mode; points that do not
// fit the bank or the text length are skipped.
AblationTable run_sweep(const ExperimentConfig& cfg, SweepKind kind, std::span<const std::size_t> values,
                        const AblationOptions& opts);

// CILMP_THREADS, defaulting to 1.
std::size_t thread_budget();

std::string format_fixed6(double v);
std::string format_g17(double v);

}  // namespace cilmp
