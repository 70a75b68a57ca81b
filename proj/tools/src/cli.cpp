#include "tcaf/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "tcaf/checkpoint.hpp"
#include "tcaf/config_json.hpp"
#include "tcaf/grad_suite.hpp"

namespace tcaf::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw ConfigError("config: expected an object at the top level");
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    if (key == "arch") {
      c.arch = arch_from_json(item.value(), c.arch);
    } else if (key == "train") {
      c.train = train_from_json(item.value(), c.train);
    } else if (key == "synth") {
      c.synth = synth_from_json(item.value(), c.synth);
    } else if (key == "paths") {
      if (!item.value().is_object()) throw ConfigError("paths: expected an object");
      for (const auto& p : item.value().items()) {
        if (!p.value().is_string()) throw ConfigError("config key 'paths." + p.key() + "': expected a string");
        if (p.key() == "dataset") {
          c.dataset = fs::path(p.value().get<std::string>());
        } else if (p.key() == "out") {
          c.out = fs::path(p.value().get<std::string>());
        } else {
          throw ConfigError("unknown config key 'paths." + p.key() + "'");
        }
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return c;
}

json to_json(const RunConfig& c) {
  json paths = json::object();
  if (c.dataset) paths["dataset"] = c.dataset->string();
  if (c.out) paths["out"] = c.out->string();
  return {{"arch", tcaf::to_json(c.arch)},
          {"train", tcaf::to_json(c.train)},
          {"synth", tcaf::to_json(c.synth)},
          {"paths", paths}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

DatasetBundle resolve_bundle(const RunConfig& config) {
  return config.dataset ? load_bundle(*config.dataset) : synth_generate(config.synth);
}

namespace {

EvalOptions eval_options_for(const TrainConfig& train) {
  EvalOptions o;
  o.max_len = train.eval_max_len;
  o.modality = train.modality;
  o.noise_seed = train.seed;
  return o;
}

}  // namespace

CellResult run_ablation_cell(const DatasetBundle& bundle, const ArchConfig& arch, const TrainConfig& train,
                             bool full_protocol) {
  const ArchConfig a = arch_for_bundle(arch, bundle);
  if (full_protocol) {
    TwoStageResult r = two_stage_train(bundle, a, train);
    return {std::move(r.test), std::move(r.model), std::move(r.final_seen_classes)};
  }
  StageSpec spec;
  spec.stage = 1;
  spec.train_splits = {Split::train_seen};
  spec.seen_classes = stage1_seen_classes(bundle);
  spec.val_seen_splits = {Split::val_seen};
  spec.val_unseen_splits = {Split::val_unseen};
  spec.epochs = train.epochs;
  StageResult r = train_stage(bundle, spec, a, train);
  const Split seen_test[] = {Split::test_seen};
  const Split unseen_test[] = {Split::test_unseen};
  EvalReport report = evaluate_gzsl(r.best_model, bundle, seen_test, unseen_test, spec.seen_classes,
                                    r.history.best_gamma, eval_options_for(train));
  return {std::move(report), std::move(r.best_model), std::move(spec.seen_classes)};
}

const std::vector<double>& noise_fractions() {
  static const std::vector<double> f = {0.0, 0.25, 0.5, 0.75, 1.0};
  return f;
}

std::vector<EvalReport> noise_sweep(TcafModel<float>& model, const DatasetBundle& bundle,
                                    std::span<const int> seen_classes, double gamma,
                                    std::span<const double> fractions, const EvalOptions& base) {
  const Split seen_test[] = {Split::test_seen};
  const Split unseen_test[] = {Split::test_unseen};
  std::vector<EvalReport> out;
  for (double f : fractions) {
    EvalOptions o = base;
    o.noise_fraction = f;
    out.push_back(evaluate_gzsl(model, bundle, seen_test, unseen_test, seen_classes, gamma, o));
  }
  return out;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "axis" << std::setw(16) << "cell" << std::right << std::setw(8) << "S"
     << std::setw(8) << "U" << std::setw(8) << "HM" << std::setw(8) << "ZSL" << std::setw(7) << "gamma" << '\n';
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.axis << std::setw(16) << r.cell << std::right << std::setprecision(2)
       << std::setw(8) << r.report.seen << std::setw(8) << r.report.unseen << std::setw(8) << r.report.hm
       << std::setw(8) << r.report.zsl << std::setprecision(1) << std::setw(7) << r.report.gamma << '\n';
  }
  return os.str();
}

std::string format_ablation_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "axis\tcell\tseen\tunseen\thm\tzsl\tgamma\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.axis << '\t' << r.cell << '\t' << r.report.seen << '\t' << r.report.unseen << '\t' << r.report.hm
       << '\t' << r.report.zsl << '\t' << r.report.gamma << '\n';
  }
  return os.str();
}

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> gamma;
  std::string variant;
  std::optional<double> noise_fraction;
  std::string loss;
  std::string modality;
  std::string dataset;
  std::string checkpoint;
  std::string axis = "all";
  std::string split;
  bool full_protocol = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

RunConfig effective_config(const Flags& flags) {
  RunConfig c = flags.config.empty() ? RunConfig{} : load_run_config(flags.config);
  if (flags.seed) {
    c.train.seed = *flags.seed;
    c.synth.seed = *flags.seed;
  }
  if (!flags.variant.empty()) c.arch.variant = AttentionVariant::parse(flags.variant);
  if (!flags.loss.empty()) c.train.loss = LossConfig::parse(flags.loss);
  if (!flags.modality.empty()) c.train.modality = parse_input_modality(flags.modality);
  if (!flags.dataset.empty()) c.dataset = fs::path(flags.dataset);
  if (!flags.out.empty()) c.out = fs::path(flags.out);
  c.arch.validate();
  c.train.validate();
  return c;
}

fs::path run_dir(const RunConfig& c) {
  if (c.out) return *c.out;
  if (const char* env = std::getenv(kRunDirEnv); env && *env) return fs::path(env);
  return fs::path("runs");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

json epoch_json(const EpochRecord& r) {
  json j = {{"stage", r.stage},   {"epoch", r.epoch}, {"l_ce", r.l_ce}, {"l_reg", r.l_reg},
            {"l_rec", r.l_rec},   {"total", r.total}, {"lr", r.lr},     {"steps", r.steps},
            {"validated", r.validated}};
  if (r.validated) {
    j["val_seen"] = r.val_seen;
    j["val_unseen"] = r.val_unseen;
    j["val_hm"] = r.val_hm;
    j["val_zsl"] = r.val_zsl;
    j["val_gamma"] = r.val_gamma;
  }
  return j;
}

json report_json(const EvalReport& r) {
  return {{"seen", r.seen}, {"unseen", r.unseen}, {"hm", r.hm}, {"zsl", r.zsl}, {"gamma", r.gamma}};
}

int cmd_synth(const Flags& flags, std::ostream& out) {
  const RunConfig c = effective_config(flags);
  const fs::path dir = run_dir(c);
  const DatasetBundle bundle = synth_generate(c.synth);
  write_bundle(bundle, dir);
  out << "wrote " << bundle.samples.size() << " samples, " << bundle.class_names.size() << " classes to "
      << dir.string() << '\n';
  return 0;
}

int cmd_train(const Flags& flags, std::ostream& out) {
  RunConfig c = effective_config(flags);
  const fs::path dir = run_dir(c);
  ensure_dir(dir);
  const DatasetBundle bundle = resolve_bundle(c);
  if (!c.dataset) write_bundle(bundle, dir / "bundle");
  c.arch = arch_for_bundle(c.arch, bundle);
  c.out = dir;
  write_text(dir / "config.json", to_json(c).dump(2) + "\n");

  std::ofstream history(dir / "history.jsonl", std::ios::binary | std::ios::trunc);
  if (!history) throw IoError("cannot write '" + (dir / "history.jsonl").string() + "'");
  auto on_epoch = [&](const EpochRecord& r) {
    history << epoch_json(r).dump() << '\n';
    history.flush();
    out << "stage " << r.stage << " epoch " << r.epoch << " loss " << r.total;
    if (r.validated) out << " val_hm " << r.val_hm << " gamma " << r.val_gamma;
    out << '\n';
  };
  TwoStageResult r = two_stage_train(bundle, c.arch, c.train, on_epoch);

  save_checkpoint(r.stage1_best, dir / "stage1_best.tcaf");
  save_checkpoint(r.model, dir / "final.tcaf");
  write_text(dir / "report.txt", r.test.to_table("test"));
  write_text(dir / "report.kv", r.test.to_kv());
  const json summary = {{"gamma", r.gamma},
                        {"epochs", r.epochs},
                        {"stage1_best_epoch", r.stage1.best_epoch},
                        {"stage1_best_val_hm", r.stage1.best_hm},
                        {"stage1_seen_classes", stage1_seen_classes(bundle)},
                        {"final_seen_classes", r.final_seen_classes},
                        {"test", report_json(r.test)}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << r.test.to_table("test");
  return 0;
}

// Gamma from --gamma, else the summary.json written next to the checkpoint, else 0.
double resolve_gamma(const Flags& flags) {
  if (flags.gamma) return *flags.gamma;
  const fs::path summary = fs::path(flags.checkpoint).parent_path() / "summary.json";
  std::ifstream in(summary);
  if (!in) return 0.0;
  try {
    return json::parse(in).at("gamma").get<double>();
  } catch (const json::exception& e) {
    throw DataError("summary '" + summary.string() + "': " + e.what());
  }
}

int cmd_eval(const Flags& flags, std::ostream& out) {
  const RunConfig c = effective_config(flags);
  const DatasetBundle bundle = resolve_bundle(c);
  TcafModel<float> model = load_checkpoint<float>(flags.checkpoint);
  EvalOptions opts = eval_options_for(c.train);
  if (flags.noise_fraction) opts.noise_fraction = *flags.noise_fraction;
  const double gamma = resolve_gamma(flags);

  EvalReport report;
  if (flags.split == "val") {
    const Split s[] = {Split::val_seen};
    const Split u[] = {Split::val_unseen};
    report = evaluate_gzsl(model, bundle, s, u, stage1_seen_classes(bundle), gamma, opts);
  } else {
    const Split s[] = {Split::test_seen};
    const Split u[] = {Split::test_unseen};
    report = evaluate_gzsl(model, bundle, s, u, stage2_seen_classes(bundle), gamma, opts);
  }
  const std::string title = flags.split.empty() ? "test" : flags.split;
  out << report.to_table(title);
  if (c.out) {
    ensure_dir(*c.out);
    write_text(*c.out / "report.txt", report.to_table(title));
    write_text(*c.out / "report.kv", report.to_kv());
  }
  return 0;
}

int cmd_gradcheck(const Flags& flags, std::ostream& out) {
  constexpr double kTolerance = 1e-4;
  const std::uint64_t seed = flags.seed.value_or(0);
  std::ostringstream os;
  double worst = 0.0;
  os << std::left << std::setw(32) << "primitive" << std::right << std::setw(14) << "max_rel_err" << '\n';
  for (const auto& [name, report] : primitive_grad_checks(seed)) {
    os << std::left << std::setw(32) << name << std::right << std::scientific << std::setprecision(3)
       << std::setw(14) << report.max_rel_err << std::defaultfloat << '\n';
    worst = std::max(worst, report.max_rel_err);
  }
  os << '\n' << "model (1 layer, all losses)\n";
  const GradCheckReport model = model_grad_check(seed);
  os << model.table();
  worst = std::max(worst, model.max_rel_err);
  out << os.str();
  if (!flags.out.empty()) {
    ensure_dir(flags.out);
    write_text(fs::path(flags.out) / "gradcheck.txt", os.str());
  }
  if (!(worst < kTolerance)) {
    std::ostringstream msg;
    msg << "gradcheck: max relative error " << std::scientific << worst << " is not below " << kTolerance;
    throw NumericError(msg.str());
  }
  out << "gradcheck passed\n";
  return 0;
}

std::vector<std::string> axes_for(const std::string& axis) {
  if (axis == "all") return {"attention", "loss", "modality", "temporal", "ff", "noise"};
  return {axis};
}

int cmd_ablate(const Flags& flags, std::ostream& out) {
  const RunConfig c = effective_config(flags);
  const DatasetBundle bundle = resolve_bundle(c);
  std::vector<AblationRow> rows;
  auto cell = [&](const std::string& axis, const std::string& name, const ArchConfig& a, const TrainConfig& t) {
    out << "running " << axis << " / " << name << '\n';
    rows.push_back({axis, name, run_ablation_cell(bundle, a, t, flags.full_protocol).report});
  };

  for (const std::string& axis : axes_for(flags.axis)) {
    if (axis == "attention") {
      for (const char* v : {"cross", "self", "full"}) {
        for (bool token : {true, false}) {
          ArchConfig a = c.arch;
          a.variant = AttentionVariant::parse(v);
          a.variant.class_block = token;
          cell(axis, a.variant.name(), a, c.train);
        }
      }
    } else if (axis == "loss") {
      for (const char* l : {"reg", "reg+ce", "full"}) {
        TrainConfig t = c.train;
        t.loss = LossConfig::parse(l);
        cell(axis, l, c.arch, t);
      }
    } else if (axis == "modality") {
      for (InputModality m : {InputModality::audio, InputModality::visual, InputModality::both}) {
        TrainConfig t = c.train;
        t.modality = m;
        cell(axis, std::string(to_string(m)), c.arch, t);
      }
    } else if (axis == "temporal") {
      for (bool on : {true, false}) {
        ArchConfig a = c.arch;
        a.use_temporal_embeddings = on;
        cell(axis, on ? "on" : "off", a, c.train);
      }
    } else if (axis == "ff") {
      for (bool on : {true, false}) {
        ArchConfig a = c.arch;
        a.use_feed_forward = on;
        cell(axis, on ? "on" : "off", a, c.train);
      }
    } else if (axis == "noise") {
      std::optional<TcafModel<float>> model;
      std::vector<int> seen;
      double gamma = 0.0;
      if (!flags.checkpoint.empty()) {
        model = load_checkpoint<float>(flags.checkpoint);
        seen = stage2_seen_classes(bundle);
        gamma = resolve_gamma(flags);
      } else {
        out << "running noise / base model\n";
        CellResult base = run_ablation_cell(bundle, c.arch, c.train, flags.full_protocol);
        model = std::move(base.model);
        seen = std::move(base.seen_classes);
        gamma = base.report.gamma;
      }
      const auto reports = noise_sweep(*model, bundle, seen, gamma, noise_fractions(), eval_options_for(c.train));
      for (std::size_t i = 0; i < reports.size(); ++i) {
        std::ostringstream name;
        name << "noise=" << noise_fractions()[i];
        rows.push_back({axis, name.str(), reports[i]});
      }
    }
  }

  const std::string table = format_ablation_table(rows);
  out << table;
  if (c.out || std::getenv(kRunDirEnv)) {
    const fs::path dir = run_dir(c);
    ensure_dir(dir);
    write_text(dir / "ablation.txt", table);
    write_text(dir / "ablation.tsv", format_ablation_tsv(rows));
  }
  return 0;
}

int cmd_export(const Flags& flags, std::ostream& out) {
  RunConfig c = effective_config(flags);
  const DatasetBundle bundle = resolve_bundle(c);
  TcafModel<float> model = load_checkpoint<float>(flags.checkpoint);
  const Split split = parse_split(flags.split.empty() ? "test_unseen" : flags.split);
  const fs::path path = flags.out.empty() ? run_dir(c) / "embeddings.txt" : fs::path(flags.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  const std::size_t n = export_embeddings(model, bundle, split, path, eval_options_for(c.train));
  out << "wrote " << n << " records to " << path.string() << '\n';
  return 0;
}

std::string error_category(const std::exception& e) {
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const MaskError*>(&e)) return "mask";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const Error*>(&e)) return "tcaf";
  return "internal";
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Audio-visual generalized zero-shot learning with a temporal cross-modal transformer.", "tcaf"};
  app.require_subcommand(1);
  app.footer(std::string("Outputs go to --out, else paths.out from --config, else $") + kRunDirEnv +
             ", else ./runs. --seed sets both the training and the synthetic-data seed.");
  Flags flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON config with arch/train/synth/paths sections")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "Seed for training and synthetic data");
    sub->add_option("--dataset", flags.dataset, "Bundle directory (default: synthesize from config)");
  };
  auto add_model_flags = [&](CLI::App* sub) {
    sub->add_option("--variant", flags.variant, "Attention variant: cross, self, full, optional -notoken");
    sub->add_option("--loss", flags.loss, "Loss terms")->check(CLI::IsMember({"reg", "reg+ce", "full"}));
    sub->add_option("--modality", flags.modality, "Input modality")
        ->check(CLI::IsMember({"audio", "visual", "both"}));
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset bundle");
  synth->add_option("--config", flags.config, "JSON config")->check(CLI::ExistingFile);
  synth->add_option("--seed", flags.seed, "Synthetic-data seed");
  synth->add_option("--out", flags.out, "Bundle directory");

  CLI::App* train = app.add_subcommand("train", "Two-stage training and test evaluation");
  add_common(train);
  add_model_flags(train);
  train->add_option("--out", flags.out, "Run directory");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a bundle");
  add_common(eval);
  add_model_flags(eval);
  eval->add_option("--checkpoint", flags.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--gamma", flags.gamma, "Calibration (default: summary.json next to the checkpoint, else 0)");
  eval->add_option("--noise-fraction", flags.noise_fraction, "Fraction of audio tokens replaced by noise")
      ->check(CLI::Range(0.0, 1.0));
  eval->add_option("--split", flags.split, "test (final models) or val (stage-1 models)")
      ->check(CLI::IsMember({"test", "val"}));
  eval->add_option("--out", flags.out, "Directory for report.txt and report.kv");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--seed", flags.seed, "Seed for the random inputs");
  gradcheck->add_option("--out", flags.out, "Directory for gradcheck.txt");

  CLI::App* ablate = app.add_subcommand("ablate", "Ablation sweeps with one combined table");
  add_common(ablate);
  add_model_flags(ablate);
  ablate->add_option("--axis", flags.axis, "Sweep axis")
      ->check(CLI::IsMember({"attention", "loss", "modality", "temporal", "ff", "noise", "all"}));
  ablate->add_flag("--full-protocol", flags.full_protocol, "Run the two-stage protocol per cell");
  ablate->add_option("--checkpoint", flags.checkpoint, "Model for the noise axis (default: train one)")
      ->check(CLI::ExistingFile);
  ablate->add_option("--gamma", flags.gamma, "Calibration for --checkpoint");
  ablate->add_option("--out", flags.out, "Directory for ablation.txt and ablation.tsv");

  CLI::App* exporter = app.add_subcommand("export-embeddings", "Write theta_o and theta_w in word-embedding format");
  add_common(exporter);
  exporter->add_option("--checkpoint", flags.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  exporter->add_option("--split", flags.split, "Split whose samples are exported (default test_unseen)")
      ->check(CLI::IsMember({"train_seen", "val_seen", "val_unseen", "test_seen", "test_unseen"}));
  exporter->add_option("--out", flags.out, "Output file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(flags, out);
    if (train->parsed()) return cmd_train(flags, out);
    if (eval->parsed()) return cmd_eval(flags, out);
    if (gradcheck->parsed()) return cmd_gradcheck(flags, out);
    if (ablate->parsed()) return cmd_ablate(flags, out);
    if (exporter->parsed()) return cmd_export(flags, out);
  } catch (const std::exception& e) {
    err << "error [" << error_category(e) << "]: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace tcaf::cli
