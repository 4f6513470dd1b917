// cilmp: command-line front end for pretraining, concept banks, prompt
// tuning, evaluation, ablations and report aggregation.
//
// Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
// 3 numerical abort.

#include <CLI11.hpp>
#include <cilmp/harness.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "cilmp/errors.hpp"

namespace fs = std::filesystem;
using namespace cilmp;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON experiment config (defaults when omitted)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "override the config seed");
  app->add_option("--mode", o.mode, "override the prompt mode");
}

ExperimentConfig resolve(const Overrides& o) {
  json j;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open config " + o.config);
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + o.config + " is not valid JSON: " + e.what());
    }
  } else {
    j = json::object();
  }
  if (o.seed) j["seed"] = *o.seed;
  if (!o.mode.empty()) j["mode"] = o.mode;
  return ExperimentConfig::from_json(j);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string metrics_csv(const MetricSet& m) {
  return "metric,value\naccuracy," + format_fixed6(m.accuracy) + "\nmacro_f1," + format_fixed6(m.macro_f1) + "\nauc," +
         format_fixed6(m.auc) + "\nkappa," + format_fixed6(m.kappa) + "\n";
}

std::string trace_csv(const std::vector<double>& trace) {
  std::string out = "epoch,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out += std::to_string(i + 1) + "," + format_g17(trace[i]) + "\n";
  return out;
}

std::string matrix_csv(const Tensor& m) {
  std::string out;
  for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? ",layer_" : "layer_") + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? "," : "") + format_fixed6(m.at(i, j));
    out += "\n";
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::shared_ptr<const ClipModel> load_encoders(const std::string& path) {
  if (path.empty()) return nullptr;
  auto model = std::make_shared<ClipModel>(ClipModel::load(path));
  model->freeze();
  return model;
}

// ------------------------------------------------------------ subcommands

int cmd_pretrain(const Overrides& o, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  const World world = generate_dataset(cfg);
  std::vector<double> loss;
  const auto model = pretrain_encoders(cfg, world, &loss);
  model->save(out);
  write_text(fs::path(out).replace_extension(".loss.csv"), trace_csv(loss));
  std::printf("pretrained encoders -> %s (loss %.6f -> %.6f, checksum %016llx)\n", out.c_str(), loss.front(),
              loss.back(), static_cast<unsigned long long>(model->checksum()));
  return 0;
}

int cmd_bank_generate(const Overrides& o, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  const World world = generate_dataset(cfg);
  save_bank(world.bank, out);
  std::printf("bank [%zu x %zu x %zu] -> %s\n", world.bank.num_classes, world.bank.seq_len, world.bank.width, out.c_str());
  return 0;
}

int cmd_bank_inspect(const std::string& path) {
  const ConceptBank bank = load_bank(path);
  char sum[17];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(bank.checksum()));
  const json j{{"num_classes", bank.num_classes}, {"seq_len", bank.seq_len}, {"width", bank.width},
               {"class_names", bank.class_names}, {"checksum", sum}, {"provenance", bank.provenance}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bank_cka(const Overrides& o, const std::string& bank_path, std::size_t class_index, const std::string& out) {
  const ConceptBank bank = bank_path.empty() ? generate_dataset(resolve(o)).bank : load_bank(bank_path);
  const CkaMatrix m = cka_heatmap(bank, class_index);
  const std::string csv = matrix_csv(m.values);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  std::fprintf(stderr, "adjacent-minus-last-row CKA margin: %.6f\n", cka_layer_margin(m));
  return 0;
}

int cmd_train(const Overrides& o, const std::string& encoders, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  const TrainResult r = train(cfg, load_encoders(encoders));
  const fs::path dir(out);
  fs::create_directories(dir);
  write_text(dir / "report.json", r.report.dump());
  write_text(dir / "metrics.csv", metrics_csv(r.report.metrics));
  write_text(dir / "loss.csv", trace_csv(r.report.loss_trace));
  write_text(dir / "timing.json", json{{"wall_time_seconds", r.report.wall_time_seconds}}.dump(2) + "\n");
  save_checkpoint(dir / "checkpoint.bin", cfg, *r.learner);
  std::printf("%s seed %llu: accuracy %.6f macro_f1 %.6f auc %.6f kappa %.6f (%zu trainable) -> %s\n",
              r.report.mode.c_str(), static_cast<unsigned long long>(cfg.seed), r.report.metrics.accuracy,
              r.report.metrics.macro_f1, r.report.metrics.auc, r.report.metrics.kappa, r.report.trainable_param_count,
              dir.c_str());
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint, const std::string& encoders, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  const World world = generate_dataset(cfg);
  auto enc = load_encoders(encoders);
  if (!enc) enc = pretrain_encoders(cfg, world);
  auto learner = make_learner(cfg, *enc, world);
  load_checkpoint(checkpoint, cfg, *learner);
  const MetricSet m = evaluate(evaluate_learner(*learner, world.data, cfg.encoder.image_tokens));
  const std::string csv = metrics_csv(m);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return 0;
}

int cmd_ablate(const Overrides& o, const std::string& modes, const std::string& seeds, const std::string& sweeps,
               bool sample_std, const std::string& out) {
  const ExperimentConfig cfg = resolve(o);
  AblationOptions opts;
  for (const auto& m : split_list(modes)) opts.modes.push_back(parse_prompt_mode(m));
  for (const auto& s : split_list(seeds)) {
    try {
      opts.seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("seed '" + s + "' is not an integer");
    }
  }
  opts.threads = thread_budget();
  opts.std_kind = sample_std ? StdKind::sample : StdKind::population;
  const fs::path dir(out);
  if (!opts.modes.empty()) {
    const AblationTable table = run_ablation(cfg, opts);
    write_text(dir / "ablation.csv", table.csv());
    write_text(dir / "ablation_runs.csv", table.runs_csv());
    std::cout << table.csv();
  }
  for (const auto& name : split_list(sweeps)) {
    const SweepKind kind = parse_sweep_kind(name);
    const auto values = default_sweep_values(kind);
    const AblationTable table = run_sweep(cfg, kind, values, opts);
    write_text(dir / ("sweep_" + name + ".csv"), table.csv());
    write_text(dir / ("sweep_" + name + "_runs.csv"), table.runs_csv());
    std::cout << table.csv();
  }
  if (opts.modes.empty() && sweeps.empty()) throw ConfigError("ablate needs --modes or --sweeps");
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, bool sample_std, const std::string& out) {
  std::map<std::string, AblationRow> rows;
  for (const auto& in : inputs) {
    std::vector<fs::path> files;
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.path().filename() == "report.json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(in);
    }
    for (const auto& f : files) {
      std::ifstream s(f);
      json j;
      try {
        s >> j;
      } catch (const json::parse_error&) {
        throw FormatError(f.string() + " is not valid JSON");
      }
      RunReport r = RunReport::from_json(j);
      auto& row = rows[r.mode];
      row.label = r.mode;
      row.runs.push_back(std::move(r));
    }
  }
  if (rows.empty()) throw ConfigError("report found no run reports");
  AblationTable table;
  const StdKind kind = sample_std ? StdKind::sample : StdKind::population;
  for (auto& [mode, row] : rows) {
    std::vector<double> acc, f1, auc, kappa;
    for (const auto& r : row.runs) {
      acc.push_back(r.metrics.accuracy);
      f1.push_back(r.metrics.macro_f1);
      auc.push_back(r.metrics.auc);
      kappa.push_back(r.metrics.kappa);
    }
    row.accuracy = aggregate(acc, kind);
    row.macro_f1 = aggregate(f1, kind);
    row.auc = aggregate(auc, kind);
    row.kappa = aggregate(kappa, kind);
    table.rows.push_back(row);
  }
  if (out.empty()) {
    std::cout << table.csv();
  } else {
    write_text(out, table.csv());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional intervention of concept representations for prompt learning"};
  app.require_subcommand(1);

  Overrides pre_o;
  std::string pre_out = "encoders.bin";
  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of the dual encoder");
  add_overrides(pre, pre_o);
  pre->add_option("--out", pre_out, "encoder file (CILMPENC1)");

  auto* bank = app.add_subcommand("bank", "concept bank tools");
  bank->require_subcommand(1);
  Overrides gen_o;
  std::string gen_out = "bank.bin";
  auto* gen = bank->add_subcommand("generate", "write the concept bank of a config");
  add_overrides(gen, gen_o);
  gen->add_option("--out", gen_out, "bank file (CILMPBANK1)");
  std::string inspect_path;
  auto* inspect = bank->add_subcommand("inspect", "summarise a bank file");
  inspect->add_option("--bank", inspect_path, "bank file")->required()->check(CLI::ExistingFile);
  Overrides cka_o;
  std::string cka_bank, cka_out;
  std::size_t cka_class = 0;
  auto* cka = bank->add_subcommand("cka", "layer-by-layer CKA heatmap as CSV");
  add_overrides(cka, cka_o);
  cka->add_option("--bank", cka_bank, "bank file")->check(CLI::ExistingFile);
  cka->add_option("--class", cka_class, "class index");
  cka->add_option("--out", cka_out, "CSV path (stdout when omitted)");

  Overrides train_o;
  std::string train_enc, train_out = "cilmp_out";
  auto* tr = app.add_subcommand("train", "pretrain, freeze and tune prompts");
  add_overrides(tr, train_o);
  tr->add_option("--encoders", train_enc, "pretrained encoder file")->check(CLI::ExistingFile);
  tr->add_option("--out", train_out, "output directory");

  Overrides eval_o;
  std::string eval_ckpt, eval_enc, eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_overrides(ev, eval_o);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file (CILMPCKPT1)")->required()->check(CLI::ExistingFile);
  ev->add_option("--encoders", eval_enc, "pretrained encoder file")->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "metrics CSV (stdout when omitted)");

  Overrides abl_o;
  std::string abl_modes, abl_seeds = "1,2,3", abl_sweeps, abl_out = "ablation_out";
  bool abl_sample = false;
  auto* abl = app.add_subcommand("ablate", "paired-seed ablation table and sweeps");
  add_overrides(abl, abl_o);
  abl->add_option("--modes", abl_modes, "comma-separated modes");
  abl->add_option("--seeds", abl_seeds, "comma-separated seeds");
  abl->add_option("--sweeps", abl_sweeps, "comma-separated sweeps: positions,r_sub,context_len");
  abl->add_flag("--sample-std", abl_sample, "n-1 standard deviation");
  abl->add_option("--out", abl_out, "output directory");

  std::vector<std::string> rep_in;
  std::string rep_out;
  bool rep_sample = false;
  auto* rep = app.add_subcommand("report", "aggregate run reports per mode");
  rep->add_option("inputs", rep_in, "report.json files or directories")->required();
  rep->add_flag("--sample-std", rep_sample, "n-1 standard deviation");
  rep->add_option("--out", rep_out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*pre) return cmd_pretrain(pre_o, pre_out);
    if (*gen) return cmd_bank_generate(gen_o, gen_out);
    if (*inspect) return cmd_bank_inspect(inspect_path);
    if (*cka) return cmd_bank_cka(cka_o, cka_bank, cka_class, cka_out);
    if (*tr) return cmd_train(train_o, train_enc, train_out);
    if (*ev) return cmd_eval(eval_o, eval_ckpt, eval_enc, eval_out);
    if (*abl) return cmd_ablate(abl_o, abl_modes, abl_seeds, abl_sweeps, abl_sample, abl_out);
    if (*rep) return cmd_report(rep_in, rep_sample, rep_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
