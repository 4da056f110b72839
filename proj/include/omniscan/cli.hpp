// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Subcommand bodies for the `omniscan` tool. They live in a header so the
// tests can drive them without spawning processes.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "omniscan/bench.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/sepnet.hpp"
#include "omniscan/signal.hpp"
#include "omniscan/verify.hpp"

namespace omniscan::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::uint64_t kDefaultSeed = 17;

struct RunConfig {
  std::string config_path;  // JSON file with config keys; optional
  std::uint64_t seed = kDefaultSeed;
  std::string out_dir = "out";
  std::vector<std::string> overrides;  // key=value
  // eval
  std::string checkpoint;
  std::string data_dir;       // mix/, s1/, s2/, ... of paired WAVs
  std::string estimates_dir;  // s1/, s2/, ... scored instead of running a model
  // verify
  std::string fault = "none";
};

// ---------------------------------------------------------------------------
// Output helpers.

// RFC 4180: quote fields holding a comma, quote, CR or LF; double quotes.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

inline std::string fmt(double v, const char* f = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const fs::path& path) : path_(path), os_(path) {
    if (!os_) throw IoError("cannot write " + path.string());
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i)
      os_ << (i ? "," : "") << csv_field(fields[i]);
    os_ << "\r\n";
    if (!os_) throw IoError("write failed for " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream os_;
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

inline sepnet::SepNetConfig resolve_config(const RunConfig& rc,
                                           sepnet::SepNetConfig base = {}) {
  if (!rc.config_path.empty()) {
    std::ifstream is(rc.config_path);
    if (!is) throw IoError("cannot open config " + rc.config_path);
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) throw FormatError("config " + rc.config_path + " is not JSON");
    base = sepnet::from_json(j, base);
  }
  return sepnet::apply_overrides(base, rc.overrides);
}

// Calls fn.template operator()<T>() with T chosen by cfg.precision.
template <class Fn>
decltype(auto) with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f32") return fn.template operator()<float>();
  return fn.template operator()<double>();
}

// ---------------------------------------------------------------------------
// verify

inline int cmd_verify(const RunConfig& rc, std::ostream& out = std::cout) {
  const verify::Fault fault = verify::parse_fault(rc.fault);
  const auto results = verify::run_all(fault, rc.seed);
  bool ok = true;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %-6s %-12s %-10s %s\n", "suite",
                "result", "max_error", "tolerance", "detail");
  out << "seed " << rc.seed << ", fault " << rc.fault << '\n' << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-20s %-6s %-12.3e %-10.1e %s\n",
                  r.name.c_str(), r.passed ? "PASS" : "FAIL", r.max_error,
                  r.tolerance, r.detail.c_str());
    out << line;
    ok = ok && r.passed;
  }
  if (!ok) {
    out << "failed:";
    for (const auto& r : results)
      if (!r.passed) out << ' ' << r.name;
    out << '\n';
  }
  if (!rc.out_dir.empty()) {
    ensure_dir(rc.out_dir);
    CsvWriter csv(fs::path(rc.out_dir) / "verify.csv");
    csv.row({"suite", "passed", "max_error", "tolerance", "seed", "detail"});
    for (const auto& r : results)
      csv.row({r.name, r.passed ? "1" : "0", fmt(r.max_error, "%.6e"),
               fmt(r.tolerance, "%.1e"), std::to_string(rc.seed), r.detail});
  }
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  std::vector<sepnet::TrainRecord> log;
  std::string checkpoint;
};

inline TrainOutcome cmd_train(const RunConfig& rc, std::ostream& out = std::cout) {
  const sepnet::SepNetConfig cfg = resolve_config(rc);
  ensure_dir(rc.out_dir);
  const fs::path dir(rc.out_dir);
  json manifest = {{"seed", rc.seed}, {"config", sepnet::to_json(cfg)}};
  write_text(dir / "config.json", manifest.dump(2) + "\n");
  TrainOutcome res;
  res.checkpoint = (dir / "model.ckpt").string();
  with_precision(cfg.precision, [&]<class T>() {
    sepnet::TrainState<T> st(cfg, rc.seed);
    out << "train: seed " << rc.seed << ", " << st.params.count()
        << " parameters, " << cfg.steps << " steps, precision "
        << cfg.precision << '\n';
    CsvWriter csv(dir / "train_log.csv");
    csv.row({"step", "loss", "grad_norm", "lr", "valid_loss", "seed"});
    sepnet::TrainOptions opt;
    opt.checkpoint_path = res.checkpoint;
    opt.on_step = [&](const sepnet::TrainRecord& r) {
      // %.17g keeps the trace bitwise comparable between runs.
      csv.row({std::to_string(r.step), fmt(r.loss, "%.17g"),
               fmt(r.grad_norm, "%.17g"), fmt(r.lr, "%.17g"),
               std::isnan(r.valid_loss) ? "" : fmt(r.valid_loss, "%.17g"),
               std::to_string(rc.seed)});
      if (!std::isnan(r.valid_loss) || r.step == cfg.steps || r.step == 1)
        out << "step " << r.step << " loss " << fmt(r.loss, "%.4f") << " lr "
            << fmt(r.lr, "%.2e") << " valid "
            << (std::isnan(r.valid_loss) ? std::string("-")
                                         : fmt(r.valid_loss, "%.4f"))
            << " (" << fmt(r.seconds, "%.1f") << " s)\n"
            << std::flush;
    };
    res.log = sepnet::train(st, opt);
  });
  out << "checkpoint " << res.checkpoint << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// eval

inline void write_metrics_csv(const fs::path& path,
                              const std::vector<sepnet::UtteranceMetrics>& rows) {
  CsvWriter csv(path);
  csv.row({"utterance_id", "si_sdr", "si_sdri", "sdr", "sdri"});
  auto emit = [&](const sepnet::UtteranceMetrics& m) {
    csv.row({m.id, fmt(m.si_sdr), fmt(m.si_sdri), fmt(m.sdr), fmt(m.sdri)});
  };
  for (const auto& m : rows) emit(m);
  emit(sepnet::mean_metrics(rows));
}

// Paired WAV layout: <data>/mix/<id>.wav and <data>/s1/<id>.wav ... sS.
struct PairedSet {
  std::vector<std::string> ids;
  fs::path root;
};

inline PairedSet scan_paired(const std::string& data_dir, std::size_t S) {
  PairedSet p;
  p.root = data_dir;
  const fs::path mix = p.root / "mix";
  if (!fs::is_directory(mix)) throw IoError("eval: missing directory " + mix.string());
  for (const auto& e : fs::directory_iterator(mix))
    if (e.path().extension() == ".wav") p.ids.push_back(e.path().stem().string());
  std::sort(p.ids.begin(), p.ids.end());
  if (p.ids.empty()) throw IoError("eval: no .wav files in " + mix.string());
  std::vector<std::string> missing;
  for (const auto& id : p.ids)
    for (std::size_t s = 1; s <= S; ++s) {
      const fs::path f = p.root / ("s" + std::to_string(s)) / (id + ".wav");
      if (!fs::exists(f)) missing.push_back(f.string());
    }
  if (!missing.empty()) {
    std::string msg = "eval: missing reference files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IoError(msg);
  }
  return p;
}

inline std::vector<sepnet::UtteranceMetrics> eval_paired(
    const PairedSet& set, std::size_t S,
    const std::function<std::vector<signal::Waveform>(const std::string&,
                                                      const signal::Waveform&)>& estimate) {
  std::vector<sepnet::UtteranceMetrics> rows(set.ids.size());
  parallel_for(set.ids.size(), [&](std::size_t i) {
    const std::string& id = set.ids[i];
    const signal::Waveform mix = signal::wav_read((set.root / "mix" / (id + ".wav")).string());
    std::vector<signal::Waveform> refs;
    for (std::size_t s = 1; s <= S; ++s)
      refs.push_back(signal::wav_read(
          (set.root / ("s" + std::to_string(s)) / (id + ".wav")).string()));
    rows[i] = sepnet::score_utterance(id, estimate(id, mix), refs, mix);
  });
  return rows;
}

inline std::vector<sepnet::UtteranceMetrics> cmd_eval(const RunConfig& rc,
                                                      std::ostream& out = std::cout) {
  std::vector<sepnet::UtteranceMetrics> rows;
  if (!rc.estimates_dir.empty()) {
    // Score precomputed estimates; no model involved.
    if (rc.data_dir.empty())
      throw ContractError("eval: --estimates needs --data with references");
    std::size_t S = 0;
    while (fs::is_directory(fs::path(rc.data_dir) / ("s" + std::to_string(S + 1)))) ++S;
    if (S < 1) throw IoError("eval: no s1/ directory under " + rc.data_dir);
    const PairedSet set = scan_paired(rc.data_dir, S);
    std::vector<std::string> missing;
    for (const auto& id : set.ids)
      for (std::size_t s = 1; s <= S; ++s) {
        const fs::path f = fs::path(rc.estimates_dir) / ("s" + std::to_string(s)) / (id + ".wav");
        if (!fs::exists(f)) missing.push_back(f.string());
      }
    if (!missing.empty()) {
      std::string msg = "eval: missing estimate files:";
      for (const auto& m : missing) msg += "\n  " + m;
      throw IoError(msg);
    }
    rows = eval_paired(set, S, [&](const std::string& id, const signal::Waveform&) {
      std::vector<signal::Waveform> est;
      for (std::size_t s = 1; s <= S; ++s)
        est.push_back(signal::wav_read(
            (fs::path(rc.estimates_dir) / ("s" + std::to_string(s)) / (id + ".wav")).string()));
      return est;
    });
  } else {
    if (rc.checkpoint.empty()) throw ContractError("eval: --checkpoint is required");
    if (!fs::exists(rc.checkpoint)) throw IoError("eval: missing checkpoint " + rc.checkpoint);
    const sepnet::SepNetConfig stored = sepnet::read_checkpoint_config(rc.checkpoint);
    // Only evaluation keys may change what was trained.
    const sepnet::SepNetConfig cfg = resolve_config(rc, stored);
    with_precision(stored.precision, [&]<class T>() {
      sepnet::TrainState<T> st = sepnet::load_checkpoint<T>(rc.checkpoint);
      if (rc.data_dir.empty()) {
        rows = sepnet::evaluate_synthetic(st.params, st.plan, rc.seed,
                                          cfg.eval_utterances, cfg.eval_seconds);
      } else {
        const std::size_t S = st.plan.cfg.n_speakers;
        rows = eval_paired(scan_paired(rc.data_dir, S), S,
                           [&](const std::string&, const signal::Waveform& mix) {
                             return sepnet::separate(st.params, st.plan, mix);
                           });
      }
    });
  }
  ensure_dir(rc.out_dir);
  write_metrics_csv(fs::path(rc.out_dir) / "metrics.csv", rows);
  const auto m = sepnet::mean_metrics(rows);
  out << "eval: seed " << rc.seed << ", " << rows.size() << " utterances, mean si_sdr "
      << fmt(m.si_sdr, "%.3f") << " si_sdri " << fmt(m.si_sdri, "%.3f") << " sdr "
      << fmt(m.sdr, "%.3f") << " sdri " << fmt(m.sdri, "%.3f") << " dB\n";
  return rows;
}

// ---------------------------------------------------------------------------
// bench

inline bench::BenchConfig bench_config(const RunConfig& rc) {
  bench::BenchConfig c;
  c.seed = rc.seed;
  json j = json::object();
  if (!rc.config_path.empty()) {
    std::ifstream is(rc.config_path);
    if (!is) throw IoError("cannot open config " + rc.config_path);
    j = json::parse(is, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw FormatError("config " + rc.config_path + " is not a JSON object");
  }
  for (const std::string& s : rc.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ContractError("override '" + s + "' is not key=value");
    json v = json::parse(s.substr(eq + 1), nullptr, false);
    if (v.is_discarded()) v = s.substr(eq + 1);
    j[s.substr(0, eq)] = v;
  }
  auto size = [](const json& v, const std::string& k) {
    if (!v.is_number_unsigned()) throw ContractError("bench key '" + k + "': expected non-negative integer");
    return v.get<std::size_t>();
  };
  for (const auto& [k, v] : j.items()) {
    if (k == "B") c.B = size(v, k);
    else if (k == "C") c.C = size(v, k);
    else if (k == "F") c.F = size(v, k);
    else if (k == "H") c.H = size(v, k);
    else if (k == "attention_layers") c.attention_layers = size(v, k);
    else if (k == "attention_k") c.attention_k = size(v, k);
    else if (k == "warmup") c.warmup = size(v, k);
    else if (k == "repeats") c.repeats = size(v, k);
    else if (k == "direction_set") {
      if (!v.is_string()) throw ContractError("bench key 'direction_set': expected string");
      c.direction_set = v.get<std::string>();
    } else if (k == "timing") {
      if (!v.is_boolean()) throw ContractError("bench key 'timing': expected boolean");
      c.timing = v.get<bool>();
    } else if (k == "grid") {
      if (!v.is_array()) throw ContractError("bench key 'grid': expected array");
      c.grid.clear();
      for (const auto& t : v) c.grid.push_back(size(t, k));
    } else {
      throw ContractError("bench: unknown key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

struct BenchOutcome {
  std::vector<bench::BenchRow> rows;
  bench::BenchSummary summary;
};

inline BenchOutcome cmd_bench(const RunConfig& rc, std::ostream& out = std::cout) {
  const bench::BenchConfig cfg = bench_config(rc);
  BenchOutcome res;
  res.rows = bench::run_benchmark(cfg);
  res.summary = bench::summarize(cfg, res.rows);
  ensure_dir(rc.out_dir);
  {
    std::ofstream os(fs::path(rc.out_dir) / "bench.csv");
    bench::write_csv(os, res.rows);
    if (!os) throw IoError("cannot write bench.csv");
  }
  std::ostringstream s;
  s << "seed " << cfg.seed << "\n"
    << "B=" << cfg.B << " C=" << cfg.C << " F=" << cfg.F << " H=" << cfg.H
    << " directions=" << cfg.direction_set << " attention D=" << cfg.attention_width()
    << " layers=" << cfg.attention_layers << "\n"
    << "loglog MACs slope: oa " << fmt(res.summary.oa_slope, "%.4f")
    << ", self_attention " << fmt(res.summary.attention_slope, "%.4f") << "\n";
  for (const auto& [t, r] : res.summary.oa_wall_ratios)
    s << "oa wall ratio T=" << t << " -> 2T: " << fmt(r, "%.3f") << "\n";
  if (res.summary.crossover)
    s << "crossover: attention MACs exceed OA from T=" << *res.summary.crossover << "\n";
  else
    s << "crossover: none below the search limit\n";
  s << bench::formula_notes();
  write_text(fs::path(rc.out_dir) / "bench_summary.txt", s.str());
  out << "mechanism        T      macs            wall_ms\n";
  for (const auto& r : res.rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-15s %5zu  %-15llu %10.3f\n",
                  r.mechanism.c_str(), r.T, static_cast<unsigned long long>(r.macs),
                  r.wall_ms);
    out << line;
  }
  out << s.str();
  return res;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationCell {
  std::string configuration;  // row label
  std::string axis;           // "directions" or "placement"
  std::string direction_set, placement;
  std::size_t params = 0;
  bool ok = false;
  std::string error;
  double si_sdri = 0, sdri = 0;
};

inline constexpr const char* kAblationDisclaimer =
    "Toy ablation on synthetic two-source mixtures. Each cell trains the same "
    "short schedule from the same seed and data stream. The numbers check "
    "that every configuration trains and evaluates; they are not expected to "
    "rank configurations the way a full-scale speech benchmark would.";

// Analytic parameter increase of a direction set over 4d_tf for one OA
// block: transposed directions share mamba_tf, so only the channel branch
// adds parameters.
inline std::size_t expected_direction_delta(const sepnet::SepNetConfig& cfg,
                                            const std::string& set) {
  if (!DirectionSet::preset(set).channel_branch) return 0;
  const ssm::MambaConfig mc =
      ssm::mamba_config(1, cfg.ssm_hidden, kChannelBranchWidth);
  return ssm::mamba_param_count(mc);
}

struct AblationOutcome {
  std::vector<AblationCell> cells;
  bool deltas_ok = false;
};

inline AblationOutcome cmd_ablate(const RunConfig& rc, std::ostream& out = std::cout) {
  const sepnet::SepNetConfig base = resolve_config(rc);
  AblationOutcome res;
  for (const auto& set : DirectionSet::preset_names())
    res.cells.push_back({set, "directions", set, "both"});
  for (const char* pl : {"front", "back", "both"})
    res.cells.push_back({pl, "placement", "10d_tfc", pl});
  out << kAblationDisclaimer << "\n"
      << "data seed " << rc.seed << " shared by all cells; " << base.steps
      << " steps each\n";
  for (auto& cell : res.cells) {
    try {
      sepnet::SepNetConfig cfg = base;
      cfg.direction_set = cell.direction_set;
      cfg.oa_placement = cell.placement;
      cfg.validate();
      cell.params = sepnet::param_count(sepnet::ModelPlan(cfg));
      with_precision(cfg.precision, [&]<class T>() {
        sepnet::TrainState<T> st(cfg, rc.seed);
        if (st.params.count() != cell.params)
          throw ContractError("parameter count disagrees with the analytic count");
        sepnet::train(st);
        const auto m = sepnet::mean_metrics(sepnet::evaluate_synthetic(
            st.params, st.plan, rc.seed, cfg.eval_utterances, cfg.eval_seconds));
        cell.si_sdri = m.si_sdri;
        cell.sdri = m.sdri;
      });
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    out << cell.configuration << ": "
        << (cell.ok ? "si_sdri " + fmt(cell.si_sdri, "%.3f") + " sdri " +
                          fmt(cell.sdri, "%.3f")
                    : "FAILED " + cell.error)
        << ", " << cell.params << " params\n"
        << std::flush;
  }
  // Direction-set rows against 4d_tf.
  res.deltas_ok = true;
  std::ostringstream deltas;
  const std::size_t oa_blocks = base.n_blocks * 2;  // placement "both"
  for (std::size_t i = 1; i < 4; ++i) {
    const auto& cell = res.cells[i];
    const long long got = static_cast<long long>(cell.params) -
                          static_cast<long long>(res.cells[0].params);
    const long long want =
        static_cast<long long>(oa_blocks * expected_direction_delta(base, cell.direction_set));
    deltas << cell.direction_set << " - 4d_tf: " << got << " params (expected "
           << want << ")\n";
    res.deltas_ok = res.deltas_ok && got == want;
  }
  ensure_dir(rc.out_dir);
  {
    CsvWriter csv(fs::path(rc.out_dir) / "ablation.csv");
    csv.row({"configuration", "axis", "direction_set", "placement", "params",
             "si_sdri", "sdri", "status", "seed"});
    for (const auto& cell : res.cells)
      csv.row({cell.configuration, cell.axis, cell.direction_set, cell.placement,
               std::to_string(cell.params), cell.ok ? fmt(cell.si_sdri) : "",
               cell.ok ? fmt(cell.sdri) : "", cell.ok ? "ok" : "failed: " + cell.error,
               std::to_string(rc.seed)});
  }
  std::ostringstream summary;
  summary << kAblationDisclaimer << "\n\ndata seed " << rc.seed << "\nbase config "
          << sepnet::to_json(base).dump() << "\n\nparameter deltas\n"
          << deltas.str() << "delta check: " << (res.deltas_ok ? "ok" : "MISMATCH")
          << "\n";
  write_text(fs::path(rc.out_dir) / "ablation_summary.txt", summary.str());
  out << deltas.str() << "delta check: " << (res.deltas_ok ? "ok" : "MISMATCH") << '\n';
  return res;
}

}  // namespace omniscan::cli
