#include "pforge_cli/commands.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <ostream>

#include "pforge/eval.hpp"
#include "pforge/parallel.hpp"
#include "pforge_cli/run_config.hpp"

namespace pforge::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Flags {
  std::optional<std::string> config, seed, checkpoint, corpus, out, norm, epsilon, max_iters, mode, jobs, payload,
      split, limit;
  bool trace = false;
  bool no_normalize = false;
  std::vector<std::string> overrides;
  std::vector<std::string> files;
};

RunConfig build_config(const Flags& f) {
  RunConfig cfg;
  if (f.config) {
    for (const auto& [k, v] : read_config_file(*f.config)) cfg.set(k, v);
  }
  const std::pair<const char*, const std::optional<std::string>*> direct[] = {
      {"seed", &f.seed},       {"checkpoint", &f.checkpoint}, {"corpus", &f.corpus}, {"out", &f.out},
      {"norm", &f.norm},       {"epsilon", &f.epsilon},       {"max_iters", &f.max_iters},
      {"mode", &f.mode},       {"jobs", &f.jobs},             {"payload", &f.payload},
      {"split", &f.split},     {"limit", &f.limit},
  };
  for (const auto& [key, value] : direct) {
    if (*value) cfg.set(key, **value);
  }
  if (f.trace) cfg.set("trace", "true");
  if (f.no_normalize) cfg.set("normalize_l2", "false");
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.resolve();
  return cfg;
}

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required ") + flag);
  return value;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path with_suffix(const fs::path& p, const char* suffix) {
  auto out = p;
  out += suffix;
  return out;
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

model::ModelParams load_model(const RunConfig& cfg) {
  auto params = model::load_checkpoint(require(cfg.checkpoint, "--checkpoint"));
  spdlog::debug("loaded checkpoint {} (D={}, c={}, F={}, H={})", cfg.checkpoint, params.cfg.embed_dim,
                params.cfg.window, params.cfg.filters, params.cfg.hidden);
  return params;
}

corpus::Manifest load_split(const RunConfig& cfg) {
  const fs::path dir = require(cfg.corpus, "--corpus");
  const fs::path path = dir / (cfg.split == "all" ? std::string("manifest.jsonl") : cfg.split + ".jsonl");
  return corpus::read_manifest(path);
}

struct Eligible {
  std::vector<eval::NamedFile> files;
  std::size_t candidates = 0;
  std::size_t undetected = 0;

  json to_json() const { return {{"candidates", candidates}, {"undetected", undetected}, {"used", files.size()}}; }
};

// Malicious files of the chosen split that the detector currently flags.
Eligible eligible_files(const model::ModelParams& params, const RunConfig& cfg) {
  const auto manifest = load_split(cfg);
  Eligible el;
  for (const auto& e : manifest.entries) {
    if (e.label != corpus::Label::malicious) continue;
    ++el.candidates;
    auto bytes = read_file(manifest.resolve(e));
    if (!model::is_malicious(model::predict_file(params, bytes))) {
      ++el.undetected;
      continue;
    }
    el.files.push_back({e.path, std::move(bytes), e.family});
    if (cfg.limit != 0 && el.files.size() == cfg.limit) break;
  }
  if (el.files.empty()) throw Error("no detected malicious files in split '" + cfg.split + "'");
  spdlog::info("{} eligible files ({} candidates, {} undetected)", el.files.size(), el.candidates, el.undetected);
  return el;
}

void finish_report(eval::EvalReport& report, const RunConfig& cfg, const Eligible* el) {
  report.config["run"] = cfg.to_json();
  if (el) report.config["files"] = el->to_json();
  const fs::path prefix = require(cfg.out, "--out");
  report.write(prefix);
  spdlog::info("wrote {}.json and {}.csv", prefix.string(), prefix.string());
}

// ---- subcommands ----

int cmd_gen_corpus(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require(cfg.out, "--out");
  const auto manifest = corpus::gen_corpus(cfg.corpus_spec, dir, cfg.jobs);
  const auto splits = corpus::split(manifest, cfg.split_ratios, cfg.seed);
  corpus::write_manifest(splits.train, dir / "train.jsonl");
  corpus::write_manifest(splits.val, dir / "val.jsonl");
  corpus::write_manifest(splits.test, dir / "test.jsonl");
  write_json(dir / "corpus.json", {{"config", cfg.to_json()},
                                   {"files", manifest.entries.size()},
                                   {"train", splits.train.entries.size()},
                                   {"val", splits.val.entries.size()},
                                   {"test", splits.test.entries.size()}});
  out << "generated " << manifest.entries.size() << " files (train " << splits.train.entries.size() << ", val "
      << splits.val.entries.size() << ", test " << splits.test.entries.size() << ") in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require(cfg.corpus, "--corpus");
  const fs::path ckpt = require(cfg.out, "--out");
  const auto train_m = corpus::read_manifest(dir / "train.jsonl");
  const auto val_m = corpus::read_manifest(dir / "val.jsonl");
  const auto test_m = corpus::read_manifest(dir / "test.jsonl");

  spdlog::info("training on {} files, validating on {}", train_m.entries.size(), val_m.entries.size());
  auto result = model::train(model::init_params(cfg.model, cfg.seed), train_m, val_m, cfg.hyper);
  for (const auto& s : result.history) {
    spdlog::info("epoch {}: train_loss {:.4f} train_acc {:.4f} val_acc {:.4f}", s.epoch, s.train_loss, s.train_acc,
                 s.val_acc);
  }
  model::save_checkpoint(result.params, ckpt);
  model::write_history_csv(result.history, with_suffix(ckpt, ".history.csv"));

  const auto test = model::evaluate(result.params, model::load_samples(test_m), cfg.jobs);
  json history = json::array();
  for (const auto& s : result.history) {
    history.push_back({{"epoch", s.epoch},
                       {"train_loss", s.train_loss},
                       {"train_acc", s.train_acc},
                       {"val_loss", s.val_loss},
                       {"val_acc", s.val_acc}});
  }
  write_json(with_suffix(ckpt, ".json"), {{"config", cfg.to_json()},
                                         {"epochs", result.history.size()},
                                         {"history", history},
                                         {"test_accuracy", test.accuracy},
                                         {"test_loss", test.loss},
                                         {"test_count", test.count},
                                         {"parameters", result.params.parameter_count()}});
  out << "trained " << result.history.size() << " epochs; test accuracy " << fmt_real(test.accuracy) << " on "
      << test.count << " files\n";
  return kExitOk;
}

int cmd_score(const RunConfig& cfg, const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty()) throw UsageError("score needs at least one file");
  const auto params = load_model(cfg);
  for (const auto& f : files) {
    const double s = model::predict_file(params, read_file(f));
    out << fmt_real(s) << "\t" << (model::is_malicious(s) ? "malicious" : "benign") << "\t" << f << "\n";
  }
  return kExitOk;
}

int cmd_attack(const RunConfig& cfg, const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty()) throw UsageError("attack needs at least one file");
  const fs::path dir = require(cfg.out, "--out");
  const auto params = load_model(cfg);

  std::vector<json> records(files.size());
  parallel_for(files.size(), cfg.jobs, [&](std::size_t i) {
    const fs::path src = files[i];
    const auto bytes = read_file(src);
    auto result = attack::generate(params, bytes, cfg.attack, cfg.mode);

    const fs::path adv = dir / with_suffix(src.filename(), ".adv");
    write_file(adv, result.modified);
    // Score what actually landed on disk.
    const auto written = read_file(adv);
    if (cfg.mode != pe::InjectionMode::overlay) pe::parse(written);
    result.score_after = model::predict_file(params, written);
    result.evaded = result.score_after < 0.5;

    auto rec = attack::to_json(result, files[i], cfg.mode, cfg.attack, eval::entropy(result.payload));
    rec["output"] = adv.string();
    rec["config"] = cfg.to_json();
    write_json(dir / with_suffix(src.filename(), ".json"), rec);
    if (cfg.trace) attack::write_trace_csv(result, dir / with_suffix(src.filename(), ".trace.csv"));
    records[i] = std::move(rec);
  });
  for (const auto& r : records) {
    out << (r["evaded"].get<bool>() ? "evaded" : "detected") << "\t" << fmt_real(r["score_before"].get<double>())
        << " -> " << fmt_real(r["score_after"].get<double>()) << "\t" << r["iterations"].get<std::size_t>()
        << " iterations\t" << r["output"].get<std::string>() << "\n";
  }
  return kExitOk;
}

int cmd_inject(const RunConfig& cfg, const std::vector<std::string>& files, std::ostream& out) {
  if (files.size() != 1) throw UsageError("inject takes exactly one input file");
  const auto bytes = read_file(files[0]);
  const auto payload = read_file(require(cfg.payload, "--payload"));
  const fs::path dst = require(cfg.out, "--out");

  pe::InjectedBytes injected;
  switch (cfg.mode) {
    case pe::InjectionMode::overlay:
      injected = pe::append_overlay(bytes, payload);
      break;
    case pe::InjectionMode::new_section: {
      auto r = pe::append_section(pe::parse(bytes), payload);
      injected = {pe::serialize(r.layout), r.record};
      break;
    }
    case pe::InjectionMode::slack: {
      const auto layout = pe::parse(bytes);
      const auto regions = pe::find_slack(layout);
      if (regions.empty() || regions.front().length < payload.size()) {
        throw pe::PeError(pe::PeError::Kind::PayloadTooLarge,
                          "no slack region can hold a " + std::to_string(payload.size()) + "-byte payload");
      }
      auto r = pe::inject_slack(layout, payload, regions.front());
      injected = {pe::serialize(r.layout), r.record};
      break;
    }
  }
  write_file(dst, injected.bytes);
  auto rec = attack::to_json(injected.record);
  rec["input"] = files[0];
  rec["output"] = dst.string();
  rec["config"] = cfg.to_json();
  write_json(with_suffix(dst, ".json"), rec);
  out << pe::to_string(cfg.mode) << "\toffset " << injected.record.file_offset << "\tlength "
      << injected.record.length << "\t" << dst.string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& experiment, const std::vector<std::string>& files,
             std::ostream& out) {
  const auto params = load_model(cfg);
  const auto c = static_cast<std::size_t>(params.cfg.window);

  if (experiment == "trace") {
    if (files.size() != 1) throw UsageError("eval trace takes exactly one input file");
    const auto bytes = read_file(files[0]);
    const fs::path prefix = require(cfg.out, "--out");
    const auto before = eval::activation_trace(params, bytes);
    const auto result = attack::generate(params, bytes, cfg.attack, cfg.mode);
    const auto after = eval::activation_trace(params, result.modified, result.injection);
    eval::write_trace_csv(before, with_suffix(prefix, ".before.csv"));
    eval::write_trace_csv(after, with_suffix(prefix, ".after.csv"));
    write_json(with_suffix(prefix, ".json"), {{"experiment", "trace"},
                                              {"file", files[0]},
                                              {"config", cfg.to_json()},
                                              {"score_before", result.score_before},
                                              {"score_after", result.score_after},
                                              {"evaded", result.evaded},
                                              {"argmax_before", before.argmax_window},
                                              {"argmax_after", after.argmax_window},
                                              {"payload_windows", {after.payload_begin, after.payload_end}},
                                              {"filter_argmax_before", before.filter_argmax},
                                              {"filter_argmax_after", after.filter_argmax},
                                              {"attention_shifted", after.attention_shifted()}});
    out << "argmax window " << before.argmax_window << " -> " << after.argmax_window << "; payload windows ["
        << after.payload_begin << ", " << after.payload_end << ")\n";
    return kExitOk;
  }
  if (!files.empty()) throw UsageError("eval " + experiment + " reads its files from --corpus");

  const auto el = eligible_files(params, cfg);
  eval::EvalReport report;
  if (experiment == "evasion") {
    report = eval::evasion_rate(params, el.files, cfg.attack, cfg.mode, cfg.jobs).report;
    out << "evasion rate " << fmt_real(report.aggregates["rate"].get<double>()) << " ("
        << report.aggregates["evaded"].get<std::size_t>() << "/" << report.aggregates["total"].get<std::size_t>()
        << ")\n";
  } else if (experiment == "invariance") {
    const auto run = eval::evasion_rate(params, el.files, cfg.attack, pe::InjectionMode::overlay, cfg.jobs);
    report = eval::spatial_invariance(params, run.attacked);
    out << "invariance rate " << fmt_real(report.aggregates["invariance_rate"].get<double>()) << " over "
        << report.aggregates["files"].get<std::size_t>() << " files; literal "
        << fmt_real(report.aggregates["literal_rate"].get<double>()) << ", off by one "
        << fmt_real(report.aggregates["off_by_one_rate"].get<double>()) << "\n";
  } else if (experiment == "transfer") {
    const std::size_t n_donors = std::min(cfg.donors, el.files.size());
    const std::span<const eval::NamedFile> donor_files(el.files.data(), n_donors);
    const auto run = eval::evasion_rate(params, donor_files, cfg.attack, pe::InjectionMode::overlay, cfg.jobs);
    std::vector<eval::AttackedFile> donors;
    for (const auto& a : run.attacked) {
      if (a.result.evaded) donors.push_back(a);
    }
    if (donors.empty()) throw Error("no donor attack evaded; nothing to transfer");
    report = eval::transfer_matrix(params, donors, el.files, cfg.seed);
    report.config["donors_attacked"] = n_donors;
    out << "transfer rate " << fmt_real(report.aggregates["transfer_rate"].get<double>()) << " vs random baseline "
        << fmt_real(report.aggregates["baseline_rate"].get<double>()) << " over "
        << report.aggregates["cross_pairs"].get<std::size_t>() << " cross pairs\n";
  } else if (experiment == "size-sweep") {
    auto sizes = cfg.sizes.empty() ? eval::default_sweep_sizes(c) : cfg.sizes;
    report = eval::size_sweep(params, el.files, sizes, cfg.attack, cfg.jobs);
    for (const auto& s : report.aggregates["sizes"]) {
      out << "size " << s["size"].get<std::size_t>() << ": rate " << fmt_real(s["rate"].get<double>()) << "\n";
    }
    out << "spread " << fmt_real(report.aggregates["spread"].get<double>()) << "\n";
  } else if (experiment == "entropy") {
    const auto run = eval::evasion_rate(params, el.files, cfg.attack, cfg.mode, cfg.jobs);
    report = eval::entropy_suite(run.attacked);
    out << "mean payload entropy " << fmt_real(report.aggregates["mean_payload"].get<double>())
        << "; whole file " << fmt_real(report.aggregates["mean_whole_before"].get<double>()) << " -> "
        << fmt_real(report.aggregates["mean_whole_after"].get<double>()) << "\n";
  } else {
    throw UsageError("unknown experiment '" + experiment + "'");
  }
  finish_report(report, cfg, &el);
  return kExitOk;
}

}  // namespace

void setup_logging() {
  auto logger = spdlog::stderr_logger_st("payload_forge");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::level::level_enum level = spdlog::level::warn;
  if (const char* env = std::getenv("PAYLOAD_FORGE_LOG")) {
    const auto parsed = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept "off" when asked for.
    if (parsed != spdlog::level::off || std::string(env) == "off") level = parsed;
  }
  spdlog::set_level(level);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Raw-byte malware detector and embedding-space payload attack toolkit", "payload_forge"};
  app.require_subcommand(1);
  Flags f;

  app.add_option("--config", f.config, "key=value config file (flags override it)");
  app.add_option("--seed", f.seed, "Seed for every random choice in the pipeline");
  app.add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  app.add_option("--corpus", f.corpus, "Corpus directory (from gen-corpus)");
  app.add_option("--out", f.out, "Output path (directory, file or report prefix)");
  app.add_option("--norm", f.norm, "Attack norm: inf or two");
  app.add_option("--epsilon", f.epsilon, "Attack step size");
  app.add_option("--max-iters", f.max_iters, "Attack iterations per round");
  app.add_option("--mode", f.mode, "Injection mode: slack, section or overlay");
  app.add_option("--jobs", f.jobs, "Parallel files in batch commands");
  app.add_option("--payload", f.payload, "Payload file for inject");
  app.add_option("--split", f.split, "Corpus split for eval: train, val, test or all");
  app.add_option("--limit", f.limit, "Use at most this many files in eval (0: all)");
  app.add_option("--set", f.overrides, "Override any config key: --set key=value");
  app.add_flag("--trace", f.trace, "Write per-iteration score traces");
  app.add_flag("--no-normalize", f.no_normalize, "p=2: use the raw gradient step");

  auto* gen = app.add_subcommand("gen-corpus", "Generate a labelled synthetic corpus with splits");
  auto* train = app.add_subcommand("train", "Train the detector and save a checkpoint");
  auto* score = app.add_subcommand("score", "Score files with a checkpoint");
  auto* attack = app.add_subcommand("attack", "Craft an adversarial payload for each file");
  auto* inject = app.add_subcommand("inject", "Inject a payload file into a binary");
  auto* evalc = app.add_subcommand("eval", "Run one evaluation experiment");
  for (auto* sub : {gen, train, score, attack, inject, evalc}) sub->fallthrough();
  for (auto* sub : {score, attack, inject}) sub->add_option("files", f.files, "Input files");

  std::string experiment;
  evalc->require_subcommand(1);
  for (const char* name : {"evasion", "invariance", "transfer", "size-sweep", "entropy", "trace"}) {
    auto* sub = evalc->add_subcommand(name);
    sub->fallthrough();
    sub->callback([&experiment, name] { experiment = name; });
    if (std::string(name) == "trace") sub->add_option("file", f.files, "Input file");
  }

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    const RunConfig cfg = build_config(f);
    spdlog::debug("resolved config: {}", cfg.to_json().dump());
    if (gen->parsed()) return cmd_gen_corpus(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out);
    if (score->parsed()) return cmd_score(cfg, f.files, out);
    if (attack->parsed()) return cmd_attack(cfg, f.files, out);
    if (inject->parsed()) return cmd_inject(cfg, f.files, out);
    return cmd_eval(cfg, experiment, f.files, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace pforge::cli
