#include "cilmp/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "cilmp/binary_io.hpp"
#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"
#include "cilmp/parameters.hpp"

namespace cilmp {

using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointMagic = "CILMPCKPT1";

// Reads fields from one JSON object and rejects keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config field '" + where() + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config field '" + name(key) + "' has the wrong type");
    }
  }

  void read_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("config field '" + name(key) + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }

  void read_double(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError("config field '" + name(key) + "' must be a number");
    out = v.get<double>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config field '" + name(key.c_str()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError("config field '" + field + "' " + rule);
}

Tensor unit_rows(std::size_t rows, std::size_t cols, Rng rng) {
  std::vector<double> v = rng.normal_vector(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sq += v[r * cols + j] * v[r * cols + j];
    const double norm = std::sqrt(sq);
    for (std::size_t j = 0; j < cols; ++j) v[r * cols + j] /= norm;
  }
  return Tensor::from({rows, cols}, std::move(v));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r = Rng(seed).fork(stream);
  return static_cast<std::uint64_t>(r.index(std::size_t{1} << 62));
}

struct WorldGeometry {
  std::size_t c_n, l_h, dh, d, it;
  std::vector<double> facets;      // [C x L_h x D_h], the true concept sequence of every class
  std::vector<double> mixing;      // [it x d x dh]
  std::vector<double> attributes;  // [A x dh]
  std::size_t num_attributes = 0;
};

std::vector<double> latent_sample(const WorldGeometry& g, const DataConfig& data, std::size_t c, Rng& rng) {
  const std::size_t l = rng.index(g.l_h);
  const double* facet = g.facets.data() + (c * g.l_h + l) * g.dh;
  const double sd = data.spread / std::sqrt(static_cast<double>(g.dh));
  std::vector<double> s(g.dh);
  for (std::size_t j = 0; j < g.dh; ++j) s[j] = data.margin * facet[j] + rng.normal(0.0, sd);
  return s;
}

void render(const WorldGeometry& g, std::span<const double> s, double token_noise, Rng* rng, std::vector<double>& out) {
  for (std::size_t t = 0; t < g.it; ++t) {
    for (std::size_t k = 0; k < g.d; ++k) {
      const double* row = g.mixing.data() + (t * g.d + k) * g.dh;
      double v = 0.0;
      for (std::size_t j = 0; j < g.dh; ++j) v += row[j] * s[j];
      if (rng && token_noise > 0.0) v += rng->normal(0.0, token_noise);
      out.push_back(v);
    }
  }
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const json& j) {
  const std::string s = j.get<std::string>();
  return std::stoull(s, nullptr, 16);
}

// Dotted-path lookup for error messages.
std::string value_at(const json& j, const std::string& dotted) {
  const json* cur = &j;
  std::istringstream in(dotted);
  for (std::string key; std::getline(in, key, '.');) {
    if (!cur->is_object() || !cur->contains(key)) return "<missing>";
    cur = &cur->at(key);
  }
  return cur->dump();
}

std::string grad_report(const ParameterList& params) {
  std::ostringstream out;
  bool first = true;
  for (const auto& p : params) {
    double sq = 0.0;
    if (p.tensor.has_grad()) {
      for (double g : p.tensor.grad()) sq += g * g;
    }
    out << (first ? "" : ", ") << p.name << "=" << std::sqrt(sq);
    first = false;
  }
  return out.str();
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  require(num_classes >= 2, "num_classes", "must be at least 2 (a single-class loss is undefined)");
  require(data.train_per_class >= 1, "data.train_per_class", "must be at least 1");
  require(data.test_per_class >= 1, "data.test_per_class", "must be at least 1");
  require(data.margin >= 0.0 && std::isfinite(data.margin), "data.margin", "must be finite and non-negative");
  require(data.spread >= 0.0 && std::isfinite(data.spread), "data.spread", "must be finite and non-negative");
  require(data.token_noise >= 0.0 && std::isfinite(data.token_noise), "data.token_noise", "must be finite and non-negative");
  require(data.knowledge_corr >= 0.0 && data.knowledge_corr <= 1.0, "data.knowledge_corr", "must lie in [0, 1]");
  require(data.caption_class_prob >= 0.0 && data.caption_class_prob <= 1.0, "data.caption_class_prob",
          "must lie in [0, 1]");
  try {
    encoder.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config field 'encoder': ") + e.what());
  }
  const TokenLayout layout{.num_classes = num_classes};
  require(layout.attribute_count(encoder.vocab_size) >= data.attributes_per_caption && layout.attribute_count(encoder.vocab_size) >= 1,
          "encoder.vocab_size", "leaves too few attribute tokens after the reserved and class tokens");
  require(layout.template_len + 3 + data.attributes_per_caption <= encoder.text_max_len, "encoder.text_max_len",
          "is too short for pretraining captions");
  require(bank.seq_len >= 1, "bank.seq_len", "must be at least 1");
  require(bank.width >= 1, "bank.width", "must be at least 1");
  require(bank.layer_drift >= 0.0 && bank.layer_drift <= 1.0, "bank.layer_drift", "must lie in [0, 1]");
  require(bank.noise_std >= 0.0, "bank.noise_std", "must be non-negative");
  require(prompt.context_len >= 1, "prompt.context_len", "must be at least 1");
  require(prompt.positions.prefix + prompt.positions.suffix <= bank.seq_len, "prompt.prefix",
          "plus prompt.suffix exceeds bank.seq_len");
  require(prompt.r_sub >= 1 && prompt.r_sub <= bank.width, "prompt.r_sub", "must lie in [1, bank.width]");
  require(prompt.r_proj >= 1, "prompt.r_proj", "must be at least 1");
  require(prompt.r_z >= 1, "prompt.r_z", "must be at least 1");
  require(prompt.prompt_init_std >= 0.0, "prompt.init_std", "must be non-negative");
  const std::size_t concept_rows = prompt.mode == PromptMode::coop_baseline ? 0 : bank.seq_len;
  require(concept_rows + prompt.context_len + 2 <= encoder.text_max_len, "prompt.context_len",
          "makes the prompt longer than encoder.text_max_len");
  require(optimizer.name == "sgd" || optimizer.name == "adam", "optimizer.name", "must be 'sgd' or 'adam'");
  require(optimizer.lr > 0.0 && std::isfinite(optimizer.lr), "optimizer.lr", "must be positive");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0, "optimizer.momentum", "must lie in [0, 1)");
  require(optimizer.epochs >= 1, "optimizer.epochs", "must be at least 1");
  require(optimizer.batch_size >= 1, "optimizer.batch_size", "must be at least 1");
  require(pretrain.pairs >= 2, "pretrain.pairs", "must be at least 2");
  require(pretrain.batch_size >= 2, "pretrain.batch_size", "must be at least 2");
  require(pretrain.lr > 0.0, "pretrain.lr", "must be positive");
}

json ExperimentConfig::to_json() const {
  return json{
      {"seed", seed},
      {"num_classes", num_classes},
      {"mode", to_string(prompt.mode)},
      {"data",
       {{"train_per_class", data.train_per_class},
        {"test_per_class", data.test_per_class},
        {"margin", data.margin},
        {"spread", data.spread},
        {"token_noise", data.token_noise},
        {"knowledge_corr", data.knowledge_corr},
        {"attributes_per_caption", data.attributes_per_caption},
        {"caption_class_prob", data.caption_class_prob}}},
      {"encoder",
       {{"embed_dim", encoder.embed_dim},
        {"num_layers", encoder.num_layers},
        {"hidden_dim", encoder.hidden_dim},
        {"image_tokens", encoder.image_tokens},
        {"text_max_len", encoder.text_max_len},
        {"vocab_size", encoder.vocab_size},
        {"deep_prompt_layers", encoder.deep_prompt_layers}}},
      {"bank",
       {{"seq_len", bank.seq_len},
        {"width", bank.width},
        {"layer_drift", bank.layer_drift},
        {"noise_std", bank.noise_std}}},
      {"prompt",
       {{"context_len", prompt.context_len},
        {"image_prompt_len", prompt.image_prompt_len},
        {"prefix", prompt.positions.prefix},
        {"suffix", prompt.positions.suffix},
        {"r_sub", prompt.r_sub},
        {"r_proj", prompt.r_proj},
        {"r_z", prompt.r_z},
        {"reinject_concepts", prompt.reinject_concepts},
        {"init_std", prompt.prompt_init_std}}},
      {"optimizer",
       {{"name", optimizer.name},
        {"lr", optimizer.lr},
        {"momentum", optimizer.momentum},
        {"epochs", optimizer.epochs},
        {"batch_size", optimizer.batch_size},
        {"orthonormalize_r", optimizer.orthonormalize_r}}},
      {"pretrain",
       {{"pairs", pretrain.pairs},
        {"epochs", pretrain.epochs},
        {"lr", pretrain.lr},
        {"batch_size", pretrain.batch_size}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  FieldReader root(j, "");
  std::uint64_t seed = cfg.seed;
  if (const json* s = root.child("seed")) {
    if (!s->is_number_unsigned() && !(s->is_number_integer() && s->get<long long>() >= 0)) {
      throw ConfigError("config field 'seed' must be a non-negative integer");
    }
    seed = s->get<std::uint64_t>();
  }
  cfg.seed = seed;
  root.read_size("num_classes", cfg.num_classes);
  std::string mode = to_string(cfg.prompt.mode);
  root.read("mode", mode);
  cfg.prompt.mode = parse_prompt_mode(mode);
  if (const json* d = root.child("data")) {
    FieldReader r(*d, "data");
    r.read_size("train_per_class", cfg.data.train_per_class);
    r.read_size("test_per_class", cfg.data.test_per_class);
    r.read_double("margin", cfg.data.margin);
    r.read_double("spread", cfg.data.spread);
    r.read_double("token_noise", cfg.data.token_noise);
    r.read_double("knowledge_corr", cfg.data.knowledge_corr);
    r.read_size("attributes_per_caption", cfg.data.attributes_per_caption);
    r.read_double("caption_class_prob", cfg.data.caption_class_prob);
    r.finish();
  }
  if (const json* e = root.child("encoder")) {
    FieldReader r(*e, "encoder");
    r.read_size("embed_dim", cfg.encoder.embed_dim);
    r.read_size("num_layers", cfg.encoder.num_layers);
    r.read_size("hidden_dim", cfg.encoder.hidden_dim);
    r.read_size("image_tokens", cfg.encoder.image_tokens);
    r.read_size("text_max_len", cfg.encoder.text_max_len);
    r.read_size("vocab_size", cfg.encoder.vocab_size);
    r.read_size("deep_prompt_layers", cfg.encoder.deep_prompt_layers);
    r.finish();
  }
  if (const json* b = root.child("bank")) {
    FieldReader r(*b, "bank");
    r.read_size("seq_len", cfg.bank.seq_len);
    r.read_size("width", cfg.bank.width);
    r.read_double("layer_drift", cfg.bank.layer_drift);
    r.read_double("noise_std", cfg.bank.noise_std);
    r.finish();
  }
  if (const json* p = root.child("prompt")) {
    FieldReader r(*p, "prompt");
    r.read_size("context_len", cfg.prompt.context_len);
    r.read_size("image_prompt_len", cfg.prompt.image_prompt_len);
    r.read_size("prefix", cfg.prompt.positions.prefix);
    r.read_size("suffix", cfg.prompt.positions.suffix);
    r.read_size("r_sub", cfg.prompt.r_sub);
    r.read_size("r_proj", cfg.prompt.r_proj);
    r.read_size("r_z", cfg.prompt.r_z);
    r.read("reinject_concepts", cfg.prompt.reinject_concepts);
    r.read_double("init_std", cfg.prompt.prompt_init_std);
    r.finish();
  }
  if (const json* o = root.child("optimizer")) {
    FieldReader r(*o, "optimizer");
    r.read("name", cfg.optimizer.name);
    r.read_double("lr", cfg.optimizer.lr);
    r.read_double("momentum", cfg.optimizer.momentum);
    r.read_size("epochs", cfg.optimizer.epochs);
    r.read_size("batch_size", cfg.optimizer.batch_size);
    r.read("orthonormalize_r", cfg.optimizer.orthonormalize_r);
    r.finish();
  }
  if (const json* p = root.child("pretrain")) {
    FieldReader r(*p, "pretrain");
    r.read_size("pairs", cfg.pretrain.pairs);
    r.read_size("epochs", cfg.pretrain.epochs);
    r.read_double("lr", cfg.pretrain.lr);
    r.read_size("batch_size", cfg.pretrain.batch_size);
    r.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string first_config_difference(const json& a, const json& b, const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& [k, v] : a.items()) keys.insert(k);
    for (const auto& [k, v] : b.items()) keys.insert(k);
    for (const auto& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!a.contains(k) || !b.contains(k)) return path;
      std::string diff = first_config_difference(a.at(k), b.at(k), path);
      if (!diff.empty()) return diff;
    }
    return "";
  }
  return a == b ? "" : (prefix.empty() ? "<root>" : prefix);
}

// ---------------------------------------------------------------- data

World generate_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  WorldGeometry g;
  g.c_n = cfg.num_classes;
  g.l_h = cfg.bank.seq_len;
  g.dh = cfg.bank.width;
  g.d = cfg.encoder.embed_dim;
  g.it = cfg.encoder.image_tokens;

  const Tensor prototypes = unit_rows(g.c_n, g.dh, root.fork(51));
  BankSpec truth_spec = cfg.bank;
  truth_spec.num_classes = g.c_n;
  truth_spec.seed = derive_seed(cfg.seed, 52);
  const ConceptBank truth = generate_bank(truth_spec, prototypes);
  g.facets.assign(truth.data.values().begin(), truth.data.values().end());

  // The learner's bank mixes the true concepts with an unrelated bank.
  BankSpec other_spec = truth_spec;
  other_spec.seed = derive_seed(cfg.seed, 54);
  const ConceptBank other = generate_bank(other_spec, unit_rows(g.c_n, g.dh, root.fork(53)));
  const double rho = cfg.data.knowledge_corr;
  const double rest = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  std::vector<double> mixed(g.c_n * g.l_h * g.dh);
  for (std::size_t r = 0; r < g.c_n * g.l_h; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < g.dh; ++j) {
      const std::size_t k = r * g.dh + j;
      mixed[k] = rho * truth.data.values()[k] + rest * other.data.values()[k];
      sq += mixed[k] * mixed[k];
    }
    const double norm = std::sqrt(sq);
    if (norm <= 1e-12) throw DegenerateInputError("mixed concept row has zero norm");
    for (std::size_t j = 0; j < g.dh; ++j) mixed[r * g.dh + j] /= norm;
  }
  World world;
  world.bank = truth;
  world.bank.data = Tensor::from({g.c_n, g.l_h, g.dh}, std::move(mixed));
  world.bank.provenance = "synthetic:seed=" + std::to_string(cfg.seed) + ",knowledge_corr=" + format_g17(rho);

  g.mixing = Rng(root.fork(55)).normal_vector(g.it * g.d * g.dh, 1.0 / std::sqrt(static_cast<double>(g.dh)));
  const TokenLayout layout = TokenLayout::for_classes(g.c_n, cfg.encoder.vocab_size);
  g.num_attributes = layout.attribute_count(cfg.encoder.vocab_size);
  const Tensor attrs = unit_rows(g.num_attributes, g.dh, root.fork(59));
  g.attributes.assign(attrs.values().begin(), attrs.values().end());

  SyntheticDataset& data = world.data;
  data.class_prototypes = prototypes;
  std::vector<double> proto_pixels;
  for (std::size_t c = 0; c < g.c_n; ++c) {
    std::vector<double> s(g.dh);
    for (std::size_t j = 0; j < g.dh; ++j) s[j] = cfg.data.margin * prototypes.values()[c * g.dh + j];
    render(g, s, 0.0, nullptr, proto_pixels);
  }
  data.prototype_images = Tensor::from({g.c_n * g.it, g.d}, std::move(proto_pixels));

  const auto split = [&](std::size_t per_class, std::uint64_t stream, Tensor& images, std::vector<int>& labels) {
    Rng rng = root.fork(stream);
    std::vector<double> pixels;
    pixels.reserve(g.c_n * per_class * g.it * g.d);
    for (std::size_t k = 0; k < per_class; ++k) {
      for (std::size_t c = 0; c < g.c_n; ++c) {
        const std::vector<double> s = latent_sample(g, cfg.data, c, rng);
        render(g, s, cfg.data.token_noise, &rng, pixels);
        labels.push_back(static_cast<int>(c));
      }
    }
    images = Tensor::from({labels.size() * g.it, g.d}, std::move(pixels));
  };
  split(cfg.data.train_per_class, 56, data.train_images, data.train_labels);
  split(cfg.data.test_per_class, 57, data.test_images, data.test_labels);

  Rng rng = root.fork(58);
  data.pretrain_pairs.reserve(cfg.pretrain.pairs);
  std::vector<std::pair<double, std::size_t>> scored(g.num_attributes);
  for (std::size_t i = 0; i < cfg.pretrain.pairs; ++i) {
    const std::size_t c = rng.index(g.c_n);
    const std::vector<double> s = latent_sample(g, cfg.data, c, rng);
    std::vector<double> pixels;
    render(g, s, cfg.data.token_noise, &rng, pixels);
    ImageTextPair pair;
    pair.image = Tensor::from({g.it, g.d}, std::move(pixels));
    for (std::size_t k = 0; k < layout.template_len; ++k) pair.tokens.push_back(layout.template_begin + static_cast<int>(k));
    if (rng.uniform() < cfg.data.caption_class_prob) pair.tokens.push_back(layout.class_token(c));
    for (std::size_t a = 0; a < g.num_attributes; ++a) {
      double v = 0.0;
      for (std::size_t j = 0; j < g.dh; ++j) v += g.attributes[a * g.dh + j] * s[j];
      scored[a] = {-v, a};
    }
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(cfg.data.attributes_per_caption),
                      scored.end());
    for (std::size_t k = 0; k < cfg.data.attributes_per_caption; ++k) {
      pair.tokens.push_back(layout.attribute_begin() + static_cast<int>(scored[k].second));
    }
    pair.tokens.push_back(layout.eos);
    data.pretrain_pairs.push_back(std::move(pair));
  }
  return world;
}

Tensor select_images(const Tensor& images, std::size_t image_tokens, std::span<const std::size_t> rows) {
  std::vector<std::size_t> index;
  index.reserve(rows.size() * image_tokens);
  for (std::size_t r : rows) {
    for (std::size_t t = 0; t < image_tokens; ++t) index.push_back(r * image_tokens + t);
  }
  const auto v = images.values();
  const std::size_t d = images.cols();
  std::vector<double> out;
  out.reserve(index.size() * d);
  for (std::size_t i : index) {
    if ((i + 1) * d > v.size()) throw IndexError("select_images: image row outside split");
    out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(i * d), v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return Tensor::from({index.size(), d}, std::move(out));
}

// ---------------------------------------------------------------- reports

json RunReport::to_json() const {
  return json{
      {"seed", seed},
      {"mode", mode},
      {"config", config},
      {"pretrain_loss", pretrain_loss},
      {"loss_trace", loss_trace},
      {"metrics",
       {{"accuracy", metrics.accuracy}, {"macro_f1", metrics.macro_f1}, {"auc", metrics.auc}, {"kappa", metrics.kappa}}},
      {"trainable_param_count", trainable_param_count},
      {"encoder_checksum_before", hex64(encoder_checksum_before)},
      {"encoder_checksum_after", hex64(encoder_checksum_after)},
      {"bank_checksum_before", hex64(bank_checksum_before)},
      {"bank_checksum_after", hex64(bank_checksum_after)},
  };
}

RunReport RunReport::from_json(const json& j) {
  try {
    RunReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mode = j.at("mode").get<std::string>();
    r.config = j.at("config");
    r.pretrain_loss = j.at("pretrain_loss").get<std::vector<double>>();
    r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
    const json& m = j.at("metrics");
    r.metrics = {m.at("accuracy").get<double>(), m.at("macro_f1").get<double>(), m.at("auc").get<double>(),
                 m.at("kappa").get<double>()};
    r.trainable_param_count = j.at("trainable_param_count").get<std::size_t>();
    r.encoder_checksum_before = parse_hex64(j.at("encoder_checksum_before"));
    r.encoder_checksum_after = parse_hex64(j.at("encoder_checksum_after"));
    r.bank_checksum_before = parse_hex64(j.at("bank_checksum_before"));
    r.bank_checksum_after = parse_hex64(j.at("bank_checksum_after"));
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed run report: ") + e.what());
  }
}

std::string RunReport::dump() const { return to_json().dump(2) + "\n"; }

// ---------------------------------------------------------------- training

std::shared_ptr<ClipModel> pretrain_encoders(const ExperimentConfig& cfg, const World& world, std::vector<double>* loss) {
  auto model = std::make_shared<ClipModel>(cfg.encoder, derive_seed(cfg.seed, 71));
  PretrainOptions opts;
  opts.epochs = cfg.pretrain.epochs;
  opts.lr = cfg.pretrain.lr;
  opts.batch_size = std::min(cfg.pretrain.batch_size, world.data.pretrain_pairs.size());
  opts.seed = derive_seed(cfg.seed, 72);
  opts.pad_token = TokenLayout{}.pad;
  std::vector<double> trace = pretrain_clip(*model, world.data.pretrain_pairs, opts);
  for (double v : trace) {
    if (!std::isfinite(v)) throw NumericalAbort("pretraining produced a non-finite loss");
  }
  model->freeze();
  if (loss) *loss = std::move(trace);
  return model;
}

std::shared_ptr<const ClipModel> EncoderCache::get(const ExperimentConfig& cfg, const World& world,
                                                   std::vector<double>* pretrain_loss) {
  json key = cfg.to_json();
  key.erase("mode");
  key.erase("prompt");
  key.erase("optimizer");
  key["data"].erase("knowledge_corr");
  std::shared_ptr<Entry> entry;
  {
    std::lock_guard lock(mutex_);
    auto& slot = entries_[key.dump()];
    if (!slot) slot = std::make_shared<Entry>();
    entry = slot;
  }
  std::call_once(entry->once, [&] { entry->model = pretrain_encoders(cfg, world, &entry->loss); });
  if (pretrain_loss) *pretrain_loss = entry->loss;
  return entry->model;
}

std::size_t EncoderCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

EvalBatch evaluate_learner(const PromptLearner& learner, const SyntheticDataset& data, std::size_t image_tokens) {
  const std::size_t n = data.test_labels.size();
  std::vector<std::vector<double>> scores;
  scores.reserve(n);
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    std::vector<std::size_t> rows(std::min(kChunk, n - begin));
    std::iota(rows.begin(), rows.end(), begin);
    for (auto& p : learner.predict(select_images(data.test_images, image_tokens, rows))) {
      scores.push_back(std::move(p.probabilities));
    }
  }
  return EvalBatch::from_scores(data.test_labels, std::move(scores));
}

ConceptBank learner_bank(const ExperimentConfig& cfg, const World& world) {
  if (cfg.prompt.mode == PromptMode::text_mode) return pooled_description_bank(world.bank, derive_seed(cfg.seed, 81));
  return world.bank;
}

std::unique_ptr<PromptLearner> make_learner(const ExperimentConfig& cfg, const ClipModel& encoders, const World& world) {
  const TokenLayout layout = TokenLayout::for_classes(cfg.num_classes, cfg.encoder.vocab_size);
  return std::make_unique<PromptLearner>(encoders, learner_bank(cfg, world), layout, cfg.prompt,
                                         derive_seed(cfg.seed, 82));
}

TrainResult train(const ExperimentConfig& cfg, std::shared_ptr<const ClipModel> encoders, EncoderCache* cache) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  TrainResult result;
  result.world = generate_dataset(cfg);
  RunReport& report = result.report;
  if (encoders) {
    if (!encoders->frozen()) throw ConfigError("supplied encoders must be frozen");
    if (!(encoders->config() == cfg.encoder)) throw ConfigError("supplied encoders do not match config field 'encoder'");
  } else if (cache) {
    encoders = cache->get(cfg, result.world, &report.pretrain_loss);
  } else {
    encoders = pretrain_encoders(cfg, result.world, &report.pretrain_loss);
  }
  result.encoders = encoders;

  result.learner = make_learner(cfg, *encoders, result.world);
  PromptLearner& learner = *result.learner;

  report.seed = cfg.seed;
  report.mode = to_string(cfg.prompt.mode);
  report.config = cfg.to_json();
  report.encoder_checksum_before = encoders->checksum();
  report.bank_checksum_before = learner.bank().checksum();
  const ParameterList params = learner.parameters();
  report.trainable_param_count = params.scalar_count();

  std::unique_ptr<Sgd> sgd;
  std::unique_ptr<Adam> adam;
  if (cfg.optimizer.name == "adam") {
    adam = std::make_unique<Adam>(params, cfg.optimizer.lr);
  } else {
    sgd = std::make_unique<Sgd>(params, cfg.optimizer.lr, cfg.optimizer.momentum);
  }
  const SyntheticDataset& data = result.world.data;
  const std::size_t n = data.train_labels.size();
  const std::size_t batch = std::min(cfg.optimizer.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(cfg.seed).fork(61);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.optimizer.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += batch, ++step) {
      const std::span<const std::size_t> rows(order.data() + begin, std::min(batch, n - begin));
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (std::size_t r : rows) labels.push_back(data.train_labels[r]);
      Tensor loss;
      try {
        loss = learner.loss(select_images(data.train_images, cfg.encoder.image_tokens, rows), labels);
      } catch (const EvaluationError& e) {
        throw NumericalAbort("non-finite forward pass at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + " (" + e.what() + "); grad norms of the previous step: " +
                             grad_report(params));
      }
      if (sgd) sgd->zero_grad(); else adam->zero_grad();
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalAbort("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                             "; grad norms of the previous step: " + grad_report(params));
      }
      backward(loss);
      if (!std::isfinite(max_abs_grad(params))) {
        throw NumericalAbort("non-finite gradient at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + "; grad norms: " + grad_report(params));
      }
      if (sgd) sgd->step(); else adam->step();
      if (cfg.optimizer.orthonormalize_r) learner.orthonormalize_subspaces();
      total += value;
      ++batches;
    }
    report.loss_trace.push_back(total / static_cast<double>(batches));
  }
  report.metrics = evaluate(evaluate_learner(learner, data, cfg.encoder.image_tokens));
  report.encoder_checksum_after = encoders->checksum();
  report.bank_checksum_after = learner.bank().checksum();
  report.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg, const PromptLearner& learner) {
  const std::string blob = cfg.to_json().dump();
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob);
  for (const auto& p : learner.parameters()) {
    for (double v : p.tensor.values()) w.f64(v);
  }
  w.write_file(path);
}

void load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg, PromptLearner& learner) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t len = r.u32();
  if (len > r.remaining()) r.fail("config blob length " + std::to_string(len) + " exceeds file size");
  json stored;
  try {
    stored = json::parse(r.bytes(len));
  } catch (const json::parse_error&) {
    r.fail("config blob is not valid JSON");
  }
  json expected = cfg.to_json();
  // The seed only selects data and initialisation; parameters stay compatible.
  stored.erase("seed");
  expected.erase("seed");
  const std::string diff = first_config_difference(stored, expected);
  if (!diff.empty()) {
    throw FormatError("checkpoint " + path.string() + ": config field '" + diff + "' differs (stored " +
                      value_at(stored, diff) + ", expected " + value_at(expected, diff) + ")");
  }
  std::vector<double> buf;
  std::vector<std::vector<double>> values;
  const ParameterList params = learner.parameters();
  for (const auto& p : params) {
    r.f64_array(buf, p.tensor.numel());
    values.push_back(buf);
  }
  r.expect_end();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(values[i].begin(), values[i].end(), t.mutable_values().begin());
  }
}

// ---------------------------------------------------------------- ablation

std::size_t thread_budget() {
  const char* env = std::getenv("CILMP_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("CILMP_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const AblationRow& AblationTable::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw IndexError("no ablation row '" + label + "'");
}

std::string AblationTable::csv() const {
  std::string out = "label,status,runs,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,auc_mean,auc_std,kappa_mean,kappa_std\n";
  for (const auto& r : rows) {
    out += r.label + "," + (r.skipped ? "skipped" : "ok") + "," + std::to_string(r.runs.size());
    for (const Summary* s : {&r.accuracy, &r.macro_f1, &r.auc, &r.kappa}) {
      out += "," + (r.skipped ? std::string() : format_fixed6(s->mean));
      out += "," + (r.skipped ? std::string() : format_fixed6(s->std));
    }
    out += "\n";
  }
  return out;
}

std::string AblationTable::runs_csv() const {
  std::string out = "label,seed,accuracy,macro_f1,auc,kappa,trainable_params,final_loss\n";
  for (const auto& r : rows) {
    for (const auto& run : r.runs) {
      out += r.label + "," + std::to_string(run.seed) + "," + format_g17(run.metrics.accuracy) + "," +
             format_g17(run.metrics.macro_f1) + "," + format_g17(run.metrics.auc) + "," + format_g17(run.metrics.kappa) +
             "," + std::to_string(run.trainable_param_count) + "," +
             format_g17(run.loss_trace.empty() ? 0.0 : run.loss_trace.back()) + "\n";
    }
  }
  return out;
}

namespace {

struct Job {
  std::size_t row;
  ExperimentConfig cfg;
};

void summarise(AblationRow& row, StdKind kind) {
  std::sort(row.runs.begin(), row.runs.end(), [](const RunReport& a, const RunReport& b) { return a.seed < b.seed; });
  std::vector<double> acc, f1, auc, kappa;
  for (const auto& run : row.runs) {
    acc.push_back(run.metrics.accuracy);
    f1.push_back(run.metrics.macro_f1);
    auc.push_back(run.metrics.auc);
    kappa.push_back(run.metrics.kappa);
  }
  row.accuracy = aggregate(acc, kind);
  row.macro_f1 = aggregate(f1, kind);
  row.auc = aggregate(auc, kind);
  row.kappa = aggregate(kappa, kind);
}

void run_jobs(std::vector<Job>& jobs, std::vector<AblationRow>& rows, std::size_t threads) {
  EncoderCache cache;
  std::vector<RunReport> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = train(jobs[i].cfg, nullptr, &cache).report;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t count = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < count; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < jobs.size(); ++i) rows[jobs[i].row].runs.push_back(std::move(results[i]));
}

void require_seeds(const AblationOptions& opts) {
  if (opts.seeds.size() < 2) throw ConfigError("ablation needs at least 2 seeds");
  std::set<std::uint64_t> unique(opts.seeds.begin(), opts.seeds.end());
  if (unique.size() != opts.seeds.size()) throw ConfigError("ablation seeds must be distinct");
}

}  // namespace

AblationTable run_ablation(const ExperimentConfig& cfg, const AblationOptions& opts) {
  if (opts.modes.empty()) throw ConfigError("ablation needs at least 1 mode");
  require_seeds(opts);
  AblationTable table;
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < opts.modes.size(); ++m) {
    table.rows.push_back({to_string(opts.modes[m]), false, {}, {}, {}, {}, {}});
    for (std::uint64_t seed : opts.seeds) {
      ExperimentConfig c = cfg;
      c.seed = seed;
      c.prompt.mode = opts.modes[m];
      c.validate();
      jobs.push_back({m, std::move(c)});
    }
  }
  run_jobs(jobs, table.rows, opts.threads);
  for (auto& row : table.rows) summarise(row, opts.std_kind);
  return table;
}

std::string to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::positions: return "positions";
    case SweepKind::r_sub: return "r_sub";
    case SweepKind::context_len: return "context_len";
  }
  return "unknown";
}

SweepKind parse_sweep_kind(const std::string& name) {
  for (SweepKind k : {SweepKind::positions, SweepKind::r_sub, SweepKind::context_len}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown sweep '" + name + "'");
}

std::vector<std::size_t> default_sweep_values(SweepKind kind) {
  switch (kind) {
    case SweepKind::positions: return {2, 4, 8, 16};
    case SweepKind::r_sub: return {1, 4, 8, 16};
    case SweepKind::context_len: return {1, 4, 8, 16};
  }
  return {};
}

AblationTable run_sweep(const ExperimentConfig& cfg, SweepKind kind, std::span<const std::size_t> values,
                        const AblationOptions& opts) {
  require_seeds(opts);
  AblationTable table;
  std::vector<Job> jobs;
  for (std::size_t v : values) {
    ExperimentConfig point = cfg;
    std::string label;
    switch (kind) {
      case SweepKind::positions:
        point.prompt.positions = {v, v};
        label = "prefix=suffix=" + std::to_string(v);
        break;
      case SweepKind::r_sub:
        point.prompt.r_sub = v;
        label = "r_sub=" + std::to_string(v);
        break;
      case SweepKind::context_len:
        point.prompt.context_len = v;
        label = "L=" + std::to_string(v);
        break;
    }
    AblationRow row;
    row.label = label;
    try {
      point.validate();
    } catch (const ConfigError&) {
      row.skipped = true;
    }
    const std::size_t index = table.rows.size();
    table.rows.push_back(std::move(row));
    if (table.rows.back().skipped) continue;
    for (std::uint64_t seed : opts.seeds) {
      ExperimentConfig c = point;
      c.seed = seed;
      jobs.push_back({index, std::move(c)});
    }
  }
  run_jobs(jobs, table.rows, opts.threads);
  for (auto& row : table.rows) {
    if (!row.skipped) summarise(row, opts.std_kind);
  }
  return table;
}

}  // namespace cilmp
