// lookback: command-line front end for scoring, curation, simulation and analysis.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lookback/annotator.hpp"
#include "lookback/annotator_http.hpp"
#include "lookback/attention.hpp"
#include "lookback/config.hpp"
#include "lookback/curation.hpp"
#include "lookback/reward.hpp"
#include "lookback/sim_env.hpp"

namespace lb = lookback;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kValidation = 3, kAnnotator = 4 };

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, end) : std::to_string(v);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  lb::GlobalConfig load() const {
    lb::GlobalConfig cfg = config_path.empty() ? lb::config_from_json(lb::json::object()) : lb::load_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.sim.seed = *seed;
    }
    return cfg;
  }
};

std::ostream& open_or_stdout(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file = lb::open_output(path);
  return file;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string rollouts;
  std::string ground_truth;
  std::string out;
};

/// Rollout lines: {"id", "text", optional "ground_truth"}. Ground-truth
/// lines: {"id", "ground_truth"}.
int cmd_score(const Common& common, const ScoreArgs& a) {
  const auto cfg = common.load();
  std::map<std::string, std::string> truth;
  std::size_t skipped = 0;
  if (!a.ground_truth.empty()) {
    auto in = lb::open_input(a.ground_truth);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = lb::json::parse(line);
        truth[lb::string_field(j, "id", n)] = lb::string_field(j, "ground_truth", n);
      } catch (const std::exception& e) {
        std::cerr << a.ground_truth << ": line " << n << ": " << e.what() << " (skipped)\n";
        ++skipped;
      }
    }
  }

  auto in = lb::open_input(a.rollouts);
  std::ofstream file;
  std::ostream& out = open_or_stdout(a.out, file);
  out << "line,id,format_class,r_format,r_accuracy,r_total\n";
  std::string line;
  std::size_t scored = 0;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      lb::json j;
      try {
        j = lb::json::parse(line);
      } catch (const lb::json::parse_error&) {
        throw lb::FormatError(n, "invalid JSON");
      }
      const std::string id = lb::string_field(j, "id", n);
      const std::string text = lb::string_field(j, "text", n);
      std::string gt;
      if (j.contains("ground_truth")) {
        gt = lb::string_field(j, "ground_truth", n);
      } else if (auto it = truth.find(id); it != truth.end()) {
        gt = it->second;
      } else {
        throw lb::FormatError(n, "no ground truth for id " + id);
      }
      const auto r = lb::score_text(text, gt, cfg.grammar, cfg.reward);
      out << n << ',' << csv_field(id) << ',' << lb::to_string(r.format_class) << ',' << num(r.r_format) << ','
          << num(r.r_accuracy) << ',' << num(r.r_total) << '\n';
      ++scored;
    } catch (const std::exception& e) {
      std::cerr << a.rollouts << ": " << e.what() << " (skipped)\n";
      ++skipped;
    }
  }
  out.flush();
  if (!out) throw lb::IoError("write failed: " + a.out);
  std::cerr << "scored " << scored << ", skipped " << skipped << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct CurateArgs {
  std::string dump;
  std::string out;
  std::string report;
  std::optional<std::string> mode;
  std::optional<double> rr;
  std::optional<std::size_t> size;
  std::optional<std::size_t> top_k;
  bool stub = false;
};

int cmd_curate(const Common& common, const CurateArgs& a) {
  auto cfg = common.load();
  auto in = lb::open_input(a.dump);
  const auto loaded = lb::load_rollout_dump(in, cfg.grammar, cfg.reward);
  for (const auto& e : loaded.errors) std::cerr << a.dump << ": " << e << " (skipped)\n";

  lb::CurationConfig ccfg;
  ccfg.mode = a.mode ? lb::annotation_mode_from_string(*a.mode) : cfg.mode;
  ccfg.selection = cfg.selection;
  if (a.top_k) ccfg.selection.top_k = *a.top_k;
  ccfg.reflection_rate = a.rr.value_or(cfg.reflection_rate);
  ccfg.mix_size = a.size ? a.size : cfg.mix_size;
  ccfg.seed = cfg.seed;
  ccfg.grammar = cfg.grammar;
  ccfg.retries = cfg.annotator.retries;
  ccfg.max_in_flight = static_cast<std::size_t>(cfg.annotator.max_in_flight);

  std::unique_ptr<lb::Annotator> annotator;
  if (a.stub) {
    annotator = std::make_unique<lb::StubAnnotator>();
  } else {
    annotator = std::make_unique<lb::HttpAnnotator>(cfg.annotator);
  }

  lb::CurationOutput result;
  try {
    result = lb::run_curation(loaded.records, *annotator, ccfg);
  } catch (const lb::AnnotatorError& e) {
    std::cerr << "annotate: " << e.what() << '\n';
    return kAnnotator;
  }
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';

  lb::serialize_sft(result.dataset, ccfg.mode, a.out);

  std::ofstream file;
  std::ostream& rep = open_or_stdout(a.report, file);
  rep << "question_id,accuracy_mean,reward_variance,difficulty,selected,outcome,attempts\n";
  for (const auto& r : result.report) {
    rep << csv_field(r.stats.question_id) << ',' << num(r.stats.accuracy_mean) << ','
        << num(r.stats.reward_variance) << ',' << num(r.stats.difficulty) << ',' << (r.selected ? 1 : 0) << ','
        << r.outcome << ',' << r.attempts << '\n';
  }
  std::size_t corr = 0;
  for (const auto& s : result.dataset) corr += s.label == lb::SampleLabel::Correction;
  std::cerr << "accepted " << result.accepted.size() << ", dataset " << result.dataset.size() << " (corrections "
            << corr << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string out_dir;
  std::optional<double> lambda;
};

int cmd_train_sim(const Common& common, const TrainArgs& a) {
  auto cfg = common.load();
  if (a.lambda) cfg.sim.reward.lambda = *a.lambda;
  const std::filesystem::path dir = a.out_dir.empty() ? cfg.paths.output_dir : a.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw lb::IoError("cannot create " + dir.string() + ": " + ec.message());

  lb::RunArtifacts art;
  try {
    art = lb::run_pipeline(cfg.sim);
  } catch (const lb::StageError& e) {
    std::cerr << e.what() << '\n';
    return kValidation;
  }
  {
    auto f = lb::open_output((dir / "training.csv").string());
    lb::write_training_csv(f, art.grpo_log);
  }
  {
    auto f = lb::open_output((dir / "sft_loss.csv").string());
    f << "step,loss\n";
    for (std::size_t i = 0; i < art.sft_losses.size(); ++i) f << i << ',' << num(art.sft_losses[i]) << '\n';
  }
  {
    auto f = lb::open_output((dir / "traces.jsonl").string());
    lb::write_traces(f, art.traces);
  }
  {
    auto f = lb::open_output((dir / "summary.txt").string());
    lb::write_summary(f, art);
  }
  lb::write_summary(std::cout, art);
  return kOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string trigger;
  std::string split;
  std::string elevation;
  std::string aggregate;
  bool micro = false;
  std::size_t window = 1;
  double margin = 0.05;
  std::string csv_out;
  bool flat_average = false;
};

/// Lines: {"dataset", "text", optional "correct"}.
std::map<std::string, std::vector<lb::DatasetRollout>> read_dataset_rollouts(const std::string& path) {
  std::map<std::string, std::vector<lb::DatasetRollout>> out;
  auto in = lb::open_input(path);
  lb::for_each_jsonl(in, [&](std::size_t n, const lb::json& j) {
    lb::DatasetRollout r;
    r.text = lb::string_field(j, "text", n);
    if (j.contains("correct")) {
      const auto& c = j.at("correct");
      if (c.is_boolean()) {
        r.correct = c.get<bool>() ? 1.0 : 0.0;
      } else if (c.is_number()) {
        r.correct = c.get<double>();
      } else {
        throw lb::FormatError(n, "correct must be a boolean or number");
      }
    }
    out[lb::string_field(j, "dataset", n)].push_back(std::move(r));
  });
  return out;
}

std::string pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v << '%';
  return s.str();
}

int cmd_analyze(const Common& common, const AnalyzeArgs& a) {
  const auto cfg = common.load();
  bool did = false;
  if (!a.trigger.empty() || !a.split.empty()) {
    did = true;
    const auto rep = lb::trigger_stats(read_dataset_rollouts(a.trigger.empty() ? a.split : a.trigger), cfg.grammar);
    std::cout << std::left << std::setw(20) << "dataset" << std::setw(10) << "total" << std::setw(12) << "triggered"
              << std::setw(12) << "rate";
    if (!a.split.empty()) std::cout << std::setw(12) << "acc_back" << std::setw(12) << "acc_noback" << "delta";
    std::cout << '\n';
    for (const auto& d : rep.datasets) {
      std::cout << std::setw(20) << d.dataset << std::setw(10) << d.total << std::setw(12) << d.back_triggered
                << std::setw(12) << pct(d.trigger_rate());
      if (!a.split.empty()) {
        auto show = [](const std::optional<double>& v) { return v ? pct(*v) : std::string("-"); };
        if (d.accuracy) {
          std::cout << std::setw(12) << show(d.accuracy->acc_with_back) << std::setw(12)
                    << show(d.accuracy->acc_without_back) << show(d.accuracy->delta);
        } else {
          std::cout << "(no correctness labels)";
        }
      }
      std::cout << '\n';
    }
    std::cout << (a.micro ? "micro_average " : "macro_average ") << pct(a.micro ? rep.micro_rate() : rep.macro_rate())
              << '\n';
  }
  if (!a.elevation.empty()) {
    did = true;
    auto in = lb::open_input(a.elevation);
    const auto traces = lb::read_traces(in);
    std::cout << "trace,mean_in_back,mean_outside,difference,elevated\n";
    std::ofstream csv;
    if (!a.csv_out.empty()) csv = lb::open_output(a.csv_out);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto e = lb::back_elevation(traces[i], a.margin);
      std::cout << i << ',' << num(e.mean_in_back) << ',' << num(e.mean_outside) << ',' << num(e.difference) << ','
                << (e.elevated ? "true" : "false") << '\n';
      if (csv.is_open()) lb::write_trace_csv(csv, traces[i], a.window);
    }
  }
  if (!a.aggregate.empty()) {
    did = true;
    auto in = lb::open_input(a.aggregate);
    std::cout << "row,Avg_M,Avg_P,Avg_All\n";
    lb::for_each_jsonl(in, [&](std::size_t n, const lb::json& j) {
      std::vector<std::pair<std::string, double>> scores;
      if (!j.contains("scores") || !j.at("scores").is_object()) throw lb::FormatError(n, "missing scores object");
      for (const auto& [k, v] : j.at("scores").items()) {
        if (!v.is_number()) throw lb::FormatError(n, "score for " + k + " must be a number");
        scores.emplace_back(k, v.get<double>());
      }
      lb::AggregateScores s;
      try {
        s = lb::aggregate_scores(scores, lb::default_category_map(),
                                 a.flat_average ? lb::OverallAverage::OfBenchmarks : lb::OverallAverage::OfCategories);
      } catch (const std::invalid_argument& e) {
        throw lb::FormatError(n, e.what());
      }
      auto show = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
      std::cout << csv_field(j.value("row", std::to_string(n))) << ',' << show(s.avg_math) << ','
                << show(s.avg_perception) << ',' << num(s.avg_all) << '\n';
    });
  }
  if (!did) {
    std::cerr << "analyze: pass at least one of --trigger, --split, --elevation, --aggregate\n";
    return kUsage;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Back-token reasoning toolkit: rewards, curation, simulation and analysis"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_path, "JSON configuration file");
  app.add_option("--seed", common.seed, "Override the configured seed");

  ScoreArgs score;
  auto* sc = app.add_subcommand("score", "Score rollouts with format and accuracy rewards");
  sc->fallthrough();
  sc->add_option("rollouts", score.rollouts, "Rollout JSONL file")->required();
  sc->add_option("ground_truth", score.ground_truth, "Ground-truth JSONL file (id, ground_truth)");
  sc->add_option("-o,--out", score.out, "Output CSV (default stdout)");

  CurateArgs curate;
  auto* cu = app.add_subcommand("curate", "Build a back-annotated SFT dataset from a rollout dump");
  cu->fallthrough();
  cu->add_option("rollout_dump", curate.dump, "Rollout dump JSONL")->required();
  cu->add_option("out", curate.out, "Output SFT JSONL")->required();
  cu->add_option("--mode", curate.mode, "semantic or solution");
  cu->add_option("--rr", curate.rr, "Reflection rate (fraction of correction samples)");
  cu->add_option("--size", curate.size, "Dataset size (default: largest feasible)");
  cu->add_option("--top-k", curate.top_k, "Keep at most K selected questions");
  cu->add_option("--report", curate.report, "Selection report CSV (default stdout)");
  cu->add_flag("--stub", curate.stub, "Use the built-in rule-based annotator");

  TrainArgs train;
  auto* tr = app.add_subcommand("train-sim", "Run the synthetic SFT + GRPO pipeline");
  tr->fallthrough();
  tr->add_option("--out", train.out_dir, "Output directory (default paths.output_dir)");
  tr->add_option("--lambda", train.lambda, "Override the format-reward weight");

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "Trigger statistics, attention elevation and score aggregation");
  an->fallthrough();
  an->add_option("--trigger", analyze.trigger, "Rollout JSONL (dataset, text) for trigger rates");
  an->add_option("--split", analyze.split, "Rollout JSONL (dataset, text, correct) for the accuracy split");
  an->add_option("--elevation", analyze.elevation, "Attention trace JSONL");
  an->add_option("--aggregate", analyze.aggregate, "Score JSONL (row, scores{benchmark: value})");
  an->add_flag("--micro", analyze.micro, "Report the micro-averaged trigger rate");
  an->add_option("--window", analyze.window, "Smoothing window for --csv-out (odd)");
  an->add_option("--margin", analyze.margin, "Elevation margin");
  an->add_option("--csv-out", analyze.csv_out, "Plot-ready per-token CSV for --elevation");
  an->add_flag("--flat-average", analyze.flat_average, "Avg_All as the mean of every benchmark");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sc) return cmd_score(common, score);
    if (*cu) return cmd_curate(common, curate);
    if (*tr) return cmd_train_sim(common, train);
    if (*an) return cmd_analyze(common, analyze);
  } catch (const lb::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const lb::AnnotatorError& e) {
    std::cerr << "annotate: " << e.what() << '\n';
    return kAnnotator;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kUsage;
}
