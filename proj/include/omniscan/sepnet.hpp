// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Desk-scale time-frequency separation network hosting OA blocks, plus its
// loss, optimizer, learning-rate schedule, checkpoints and training loop.
//
//   mixture -> centered STFT -> [re, im] -> conv1x1 to C channels
//           -> n_blocks x { [OA front] -> intra-F biMamba -> intra-T biMamba
//                           -> [OA back] }, each sub-module x + f(LN(x))
//           -> conv1x1 to 2 * n_speakers -> complex masks -> iSTFT

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/omniscan.hpp"
#include "omniscan/parallel.hpp"
#include "omniscan/params.hpp"
#include "omniscan/signal.hpp"
#include "omniscan/ssm.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan::sepnet {

using nlohmann::json;

enum class Placement { kNone, kFront, kBack, kBoth };

inline Placement parse_placement(const std::string& s) {
  if (s == "none") return Placement::kNone;
  if (s == "front") return Placement::kFront;
  if (s == "back") return Placement::kBack;
  if (s == "both") return Placement::kBoth;
  throw ContractError("unknown oa_placement '" + s +
                      "' (expected none, front, back or both)");
}

struct SepNetConfig {
  // Architecture.
  std::size_t n_blocks = 2;
  std::size_t channels = 24;
  std::size_t ssm_hidden = 16;
  std::size_t n_speakers = 2;
  std::string oa_placement = "both";
  std::string direction_set = "10d_tfc";
  std::size_t expand = 2;
  bool mamba_conv = true;
  bool mamba_gate = true;
  std::string scan_span = "row";
  bool oa_mean_sum = false;
  bool oa_sigmoid_gate = false;
  bool fold_transposed = false;
  // STFT.
  std::size_t stft_window = 256;
  std::size_t stft_hop = 128;
  std::string stft_window_type = "sqrt_hann";
  // Optimization.
  double lr = 1e-3;
  double clip_norm = 5.0;
  double weight_decay = 0.01;
  std::size_t batch = 1;
  double segment_seconds = 4.0;
  std::size_t steps = 20;
  std::size_t steps_per_epoch = 10;
  std::size_t valid_utterances = 4;
  std::size_t eval_utterances = 10;
  double eval_seconds = 4.0;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::string precision = "f64";

  bool uses_front() const {
    const Placement p = parse_placement(oa_placement);
    return p == Placement::kFront || p == Placement::kBoth;
  }
  bool uses_back() const {
    const Placement p = parse_placement(oa_placement);
    return p == Placement::kBack || p == Placement::kBoth;
  }

  signal::StftConfig stft() const {
    return signal::StftConfig{stft_window, stft_hop, true};
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ContractError("config: " + what);
    };
    need(n_blocks >= 1, "n_blocks must be >= 1");
    need(channels >= 1, "channels must be >= 1");
    need(ssm_hidden >= 1, "ssm_hidden must be >= 1");
    need(n_speakers >= 2, "n_speakers must be >= 2");
    need(expand >= 1, "expand must be >= 1");
    parse_placement(oa_placement);
    DirectionSet::preset(direction_set);
    need(scan_span == "row" || scan_span == "grid",
         "scan_span must be row or grid");
    need(stft_window_type == "sqrt_hann", "stft_window_type must be sqrt_hann");
    stft().validate();
    need(lr > 0 && std::isfinite(lr), "lr must be positive");
    need(clip_norm > 0, "clip_norm must be positive");
    need(weight_decay >= 0, "weight_decay must be >= 0");
    need(batch >= 1, "batch must be >= 1");
    need(segment_seconds > 0 && eval_seconds > 0, "durations must be positive");
    need(steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
    need(precision == "f64" || precision == "f32", "precision must be f64 or f32");
  }
};

// Field table shared by JSON conversion and --set overrides.
template <class F>
void for_each_field(SepNetConfig& c, F&& f) {
  f("n_blocks", c.n_blocks);
  f("channels", c.channels);
  f("ssm_hidden", c.ssm_hidden);
  f("n_speakers", c.n_speakers);
  f("oa_placement", c.oa_placement);
  f("direction_set", c.direction_set);
  f("expand", c.expand);
  f("mamba_conv", c.mamba_conv);
  f("mamba_gate", c.mamba_gate);
  f("scan_span", c.scan_span);
  f("oa_mean_sum", c.oa_mean_sum);
  f("oa_sigmoid_gate", c.oa_sigmoid_gate);
  f("fold_transposed", c.fold_transposed);
  f("stft_window", c.stft_window);
  f("stft_hop", c.stft_hop);
  f("stft_window_type", c.stft_window_type);
  f("lr", c.lr);
  f("clip_norm", c.clip_norm);
  f("weight_decay", c.weight_decay);
  f("batch", c.batch);
  f("segment_seconds", c.segment_seconds);
  f("steps", c.steps);
  f("steps_per_epoch", c.steps_per_epoch);
  f("valid_utterances", c.valid_utterances);
  f("eval_utterances", c.eval_utterances);
  f("eval_seconds", c.eval_seconds);
  f("checkpoint_every", c.checkpoint_every);
  f("precision", c.precision);
}

inline json to_json(const SepNetConfig& cfg) {
  json j = json::object();
  SepNetConfig c = cfg;
  for_each_field(c, [&](const char* k, const auto& v) { j[k] = v; });
  return j;
}

namespace detail {

template <class V>
void assign(const char* key, const json& v, V& dst) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ContractError("expected boolean");
      dst = v.get<bool>();
    } else if constexpr (std::is_same_v<V, std::size_t>) {
      if (!v.is_number_unsigned())
        throw ContractError("expected non-negative integer");
      dst = v.get<std::size_t>();
    } else if constexpr (std::is_same_v<V, double>) {
      if (!v.is_number()) throw ContractError("expected number");
      dst = v.get<double>();
    } else {
      if (!v.is_string()) throw ContractError("expected string");
      dst = v.get<std::string>();
    }
  } catch (const ContractError& e) {
    throw ContractError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

// Unknown keys are rejected; missing keys keep their defaults.
inline SepNetConfig from_json(const json& j, SepNetConfig base = {}) {
  if (!j.is_object()) throw ContractError("config: expected a JSON object");
  std::vector<std::string> known;
  for_each_field(base, [&](const char* k, auto&) { known.emplace_back(k); });
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ContractError("config: unknown key '" + k + "'");
  for_each_field(base, [&](const char* k, auto& dst) {
    if (j.contains(k)) detail::assign(k, j.at(k), dst);
  });
  base.validate();
  return base;
}

// Applies "key=value" overrides; values are parsed as JSON, falling back to
// a plain string.
inline SepNetConfig apply_overrides(const SepNetConfig& cfg,
                                    const std::vector<std::string>& sets) {
  json j = to_json(cfg);
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ContractError("override '" + s + "' is not key=value");
    const std::string key = s.substr(0, eq), text = s.substr(eq + 1);
    if (!j.contains(key)) throw ContractError("config: unknown key '" + key + "'");
    json v = json::parse(text, nullptr, false);
    if (v.is_discarded()) v = text;
    j[key] = v;
  }
  return from_json(j);
}

inline SepNetConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config " + path);
  json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw FormatError("config " + path + " is not JSON");
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Model.

struct ModelPlan {
  SepNetConfig cfg;
  OAConfig oa;
  ssm::MambaConfig dual_path;

  explicit ModelPlan(const SepNetConfig& c) : cfg(c) {
    c.validate();
    oa = oa_config(c.channels, c.ssm_hidden, DirectionSet::preset(c.direction_set));
    oa.span = c.scan_span == "grid" ? ScanSpan::kGrid : ScanSpan::kRow;
    oa.mean_sum = c.oa_mean_sum;
    oa.sigmoid_gate = c.oa_sigmoid_gate;
    oa.fold_transposed = c.fold_transposed;
    oa.mamba_tf.d_inner = c.expand * c.channels;
    oa.mamba_tf.use_conv = oa.mamba_c.use_conv = c.mamba_conv;
    oa.mamba_tf.use_gate = oa.mamba_c.use_gate = c.mamba_gate;
    dual_path = oa.mamba_tf;
  }
};

template <std::floating_point T>
void init_layer_norm(ParamStore<T>& store, const std::string& prefix,
                     std::size_t C) {
  store.add(prefix + ".g", Tensor<T>({C}, T(1)));
  store.add(prefix + ".b", Tensor<T>({C}));
}

template <std::floating_point T>
ParamStore<T> init_params(const ModelPlan& plan, std::uint64_t seed) {
  const SepNetConfig& c = plan.cfg;
  Rng rng(seed);
  ParamStore<T> s;
  const std::size_t C = c.channels, S = c.n_speakers;
  s.add("enc.w", init::fan_in_uniform<T>({C, 2}, 2, rng));
  s.add("enc.b", Tensor<T>({C}));
  for (std::size_t i = 0; i < c.n_blocks; ++i) {
    const std::string b = "blocks." + std::to_string(i);
    if (c.uses_front()) {
      init_layer_norm(s, b + ".ln_front", C);
      init_oa(s, b + ".oa_front", plan.oa, rng);
    }
    for (const char* sub : {"intra_f", "intra_t"}) {
      init_layer_norm(s, b + ".ln_" + std::string(sub), C);
      ssm::init_mamba(s, b + "." + sub + ".fwd", plan.dual_path, rng);
      ssm::init_mamba(s, b + "." + sub + ".bwd", plan.dual_path, rng);
    }
    if (c.uses_back()) {
      init_layer_norm(s, b + ".ln_back", C);
      init_oa(s, b + ".oa_back", plan.oa, rng);
    }
  }
  // Masks start near 1/S + 0i, so every estimate begins as a scaled mixture.
  Tensor<T> dw = init::fan_in_uniform<T>({2 * S, C}, C, rng);
  for (T& v : dw.data()) v *= T(0.1);
  Tensor<T> db({2 * S});
  for (std::size_t k = 0; k < S; ++k) db[2 * k] = T(1) / static_cast<T>(S);
  s.add("dec.w", std::move(dw));
  s.add("dec.b", std::move(db));
  return s;
}

inline std::size_t param_count(const ModelPlan& plan) {
  const SepNetConfig& c = plan.cfg;
  const std::size_t C = c.channels, S = c.n_speakers;
  std::size_t per_block = 2 * (2 * C + 2 * ssm::mamba_param_count(plan.dual_path));
  if (c.uses_front()) per_block += 2 * C + oa_param_count(plan.oa);
  if (c.uses_back()) per_block += 2 * C + oa_param_count(plan.oa);
  return 3 * C + c.n_blocks * per_block + 2 * S * C + 2 * S;
}

template <class T>
Var<T> layer_norm(const Scope<T>& p, const Var<T>& x) {
  return layer_norm_frames(x, p["g"], p["b"]);
}

// Forward and reversed Mamba along one grid axis, separate parameters,
// outputs summed.
template <class T>
Var<T> bidirectional_mamba(const Scope<T>& p, const ssm::MambaConfig& mc,
                           Axis axis, const Var<T>& x) {
  Var<T> total;
  bool first = true;
  for (Orientation o : {Orientation::kForward, Orientation::kBackward}) {
    Serialized<T> s = serialize_direction(x, ScanDirection{axis, o});
    Var<T> y = ssm::mamba_block(
        p.sub(o == Orientation::kForward ? "fwd" : "bwd"), mc, s.sequences);
    Var<T> back = deserialize_direction(y, s.map);
    total = first ? back : add(total, back);
    first = false;
  }
  return total;
}

template <class T>
Var<T> separator_block(const Scope<T>& p, const ModelPlan& plan,
                       const Var<T>& x) {
  Var<T> h = x;
  if (plan.cfg.uses_front())
    h = add(h, oa_forward(p.sub("oa_front"), plan.oa,
                          layer_norm(p.sub("ln_front"), h)));
  h = add(h, bidirectional_mamba(p.sub("intra_f"), plan.dual_path, Axis::kF,
                                 layer_norm(p.sub("ln_intra_f"), h)));
  h = add(h, bidirectional_mamba(p.sub("intra_t"), plan.dual_path, Axis::kT,
                                 layer_norm(p.sub("ln_intra_t"), h)));
  if (plan.cfg.uses_back())
    h = add(h, oa_forward(p.sub("oa_back"), plan.oa,
                          layer_norm(p.sub("ln_back"), h)));
  return h;
}

// Mixture spectra, normalized per utterance to unit RMS.
template <class T>
struct Analysis {
  Tensor<T> re, im;          // (B, F, T)
  std::vector<double> gain;  // multiply outputs by this to undo normalization
  std::size_t length = 0;
};

template <class T>
Analysis<T> analyze(const Tensor<double>& mix, const SepNetConfig& cfg) {
  if (mix.rank() != 2) throw ShapeError("encode: expected (B, N) mixtures");
  const std::size_t B = mix.dim(0), N = mix.dim(1);
  if (N < cfg.stft_window)
    throw ContractError("encode: mixture of " + std::to_string(N) +
                        " samples is shorter than one window (" +
                        std::to_string(cfg.stft_window) + ")");
  Tensor<double> x = mix;
  Analysis<T> a;
  a.length = N;
  for (std::size_t b = 0; b < B; ++b) {
    double e = 0;
    for (std::size_t i = 0; i < N; ++i) e += x[b * N + i] * x[b * N + i];
    const double r = std::sqrt(e / static_cast<double>(N));
    const double g = r > 0 ? r : 1.0;
    for (std::size_t i = 0; i < N; ++i) x[b * N + i] /= g;
    a.gain.push_back(g);
  }
  Tensor<double> re, im;
  signal::stft_batch(x, cfg.stft(), re, im);
  a.re = re.cast<T>();
  a.im = im.cast<T>();
  return a;
}

// (B, F, T) spectra -> (B, C, F, T) features.
template <class T>
Var<T> encode(const Scope<T>& p, const Tensor<T>& re, const Tensor<T>& im) {
  const Shape& s = re.shape();
  const Var<T> x = stack<T>({constant(re), constant(im)}, 1);
  return conv1x1(reshape(x, {s[0], 2, s[1], s[2]}), p["enc.w"], p["enc.b"]);
}

// Separated waveforms (B, S, N), still in normalized units.
template <class T>
Var<T> forward(const BoundParams<T>& params, const ModelPlan& plan,
               const Analysis<T>& a) {
  const Scope<T> root(params);
  const SepNetConfig& c = plan.cfg;
  const std::size_t B = a.re.dim(0), F = a.re.dim(1), TT = a.re.dim(2);
  Var<T> h = encode(root, a.re, a.im);
  for (std::size_t i = 0; i < c.n_blocks; ++i)
    h = separator_block(root.sub("blocks." + std::to_string(i)), plan, h);
  const Var<T> m = conv1x1(h, root["dec.w"], root["dec.b"]);
  const auto parts = split(m, 1, 2 * c.n_speakers);
  const Var<T> xr = constant(a.re), xi = constant(a.im);
  std::vector<Var<T>> waves;
  for (std::size_t s = 0; s < c.n_speakers; ++s) {
    const Var<T> mr = reshape(parts[2 * s], {B, F, TT});
    const Var<T> mi = reshape(parts[2 * s + 1], {B, F, TT});
    const Var<T> er = sub(mul(mr, xr), mul(mi, xi));
    const Var<T> ei = add(mul(mr, xi), mul(mi, xr));
    waves.push_back(signal::istft(er, ei, c.stft(), a.length));
  }
  return stack(std::span<const Var<T>>(waves), 1);
}

// ---------------------------------------------------------------------------
// Loss: utterance-level PIT over negative SI-SDR.
//
// Per pair, with s the projection of the estimate x on the reference r and
// e = x - s, the value is 10 log10((|s|^2 + eps) / (|e|^2 + tau |s|^2 + eps)).
// tau = 1e-6 caps it smoothly at the 60 dB clamp of the metric.

inline constexpr double kSdrTau = 1e-6;

struct PitResult {
  double loss = 0;
  std::vector<std::vector<std::size_t>> assignment;  // per utterance: est -> ref
};

template <class T>
Var<T> pit_si_sdr_loss(const Var<T>& est, const Tensor<T>& refs,
                       PitResult* info = nullptr) {
  if (est.shape().size() != 3 || refs.shape() != est.shape())
    throw ShapeError("pit loss: estimates " + shape_str(est.shape()) +
                     " vs references " + shape_str(refs.shape()));
  const std::size_t B = est.dim(0), S = est.dim(1), N = est.dim(2);
  const Tensor<T>& x = est.value();
  const double k10 = 10.0 / std::log(10.0);
  // Pair statistics in double: xr = <x, r>, xx = <x, x>, rr = <r, r>.
  std::vector<double> xr(B * S * S), xx(B * S), rr(B * S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < S; ++i) {
      const T* pi = x.ptr() + (b * S + i) * N;
      const T* qi = refs.ptr() + (b * S + i) * N;
      double a = 0, c = 0;
      for (std::size_t n = 0; n < N; ++n) {
        a += double(pi[n]) * pi[n];
        c += double(qi[n]) * qi[n];
      }
      if (c == 0) throw DomainError("pit loss: all-zero reference");
      xx[b * S + i] = a;
      rr[b * S + i] = c;
      for (std::size_t j = 0; j < S; ++j) {
        const T* qj = refs.ptr() + (b * S + j) * N;
        double d = 0;
        for (std::size_t n = 0; n < N; ++n) d += double(pi[n]) * qj[n];
        xr[(b * S + i) * S + j] = d;
      }
    }
  auto pair_value = [&](std::size_t b, std::size_t i, std::size_t j) {
    const double ps = xr[(b * S + i) * S + j] * xr[(b * S + i) * S + j] /
                      rr[b * S + j];
    const double pe = std::max(xx[b * S + i] - ps, 0.0);
    const double eps = 1e-12 * rr[b * S + j];
    return k10 * (std::log(ps + eps) - std::log(pe + kSdrTau * ps + eps));
  };
  std::vector<std::vector<std::size_t>> best(B);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> perm(S);
    std::iota(perm.begin(), perm.end(), 0);
    double best_v = -std::numeric_limits<double>::infinity();
    do {
      double v = 0;
      for (std::size_t i = 0; i < S; ++i) v += pair_value(b, i, perm[i]);
      v /= static_cast<double>(S);
      if (v > best_v) {
        best_v = v;
        best[b] = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    total += best_v;
  }
  const double loss = -total / static_cast<double>(B);
  if (!std::isfinite(loss)) throw NumericError("pit loss: non-finite value");
  if (info) {
    info->loss = loss;
    info->assignment = best;
  }
  auto saved_refs = std::make_shared<const Tensor<T>>(refs);
  return omniscan::detail::finish<T>(
      "pit_si_sdr", Tensor<T>::scalar(static_cast<T>(loss)), {&est},
      [ne = est.node(), vx = est.value_ptr(), saved_refs, best, xr, xx, rr, B,
       S, N, k10](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> gx(vx->shape());
        const double scale = -double(g[0]) / double(B * S);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < S; ++i) {
            const std::size_t j = best[b][i];
            const double r2 = rr[b * S + j], d = xr[(b * S + i) * S + j];
            const double alpha = d / r2, ps = d * alpha;
            const double pe = std::max(xx[b * S + i] - ps, 0.0);
            const double eps = 1e-12 * r2;
            const double den = pe + kSdrTau * ps + eps;
            // d ps = 2 alpha r, d pe = 2 e = 2 (x - alpha r).
            const double cr = 2 * alpha / (ps + eps) -
                              (kSdrTau * 2 * alpha - 2 * alpha) / den;
            const double cx = -2 / den;
            const T* px = vx->ptr() + (b * S + i) * N;
            const T* pr = saved_refs->ptr() + (b * S + j) * N;
            T* pg = gx.ptr() + (b * S + i) * N;
            for (std::size_t n = 0; n < N; ++n)
              pg[n] = static_cast<T>(scale * k10 * (cr * pr[n] + cx * px[n]));
          }
        tape.accumulate(ne, std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Optimization.

template <class T>
double global_norm(const std::vector<Tensor<T>>& grads) {
  double s = 0;
  for (const auto& g : grads)
    for (T v : g.data()) s += double(v) * v;
  return std::sqrt(s);
}

// Rescales to at most max_norm; returns the factor applied (<= 1).
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (!(n > max_norm)) return 1.0;
  const double f = max_norm / n;
  for (auto& g : grads)
    for (T& v : g.data()) v = static_cast<T>(v * f);
  return f;
}

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
};

template <std::floating_point T>
class AdamW {
 public:
  explicit AdamW(const ParamStore<T>& params, AdamWConfig cfg = {})
      : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.value.shape());
      v_.emplace_back(e.value.shape());
    }
  }

  // Decoupled decay: p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p).
  void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads,
            double lr) {
    if (grads.size() != m_.size())
      throw ContractError("adamw: gradient count does not match parameters");
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      Tensor<T>& p = params.entries()[i].value;
      const Tensor<T>& g = grads[i];
      if (g.shape() != p.shape())
        throw ShapeError("adamw: gradient shape for " +
                         params.entries()[i].name);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double m = cfg_.beta1 * m_[i][k] + (1 - cfg_.beta1) * gk;
        const double v = cfg_.beta2 * v_[i][k] + (1 - cfg_.beta2) * gk * gk;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        const double upd =
            (m / c1) / (std::sqrt(v / c2) + cfg_.eps) + cfg_.weight_decay * p[k];
        p[k] = static_cast<T>(p[k] - lr * upd);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// Halves the learning rate when the best validation loss is `patience`
// epochs old.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(double lr = 1e-3, std::size_t patience = 3)
      : lr_(lr), patience_(patience) {}

  double observe(double valid_loss) {
    ++epoch_;
    if (valid_loss < best_) {
      best_ = valid_loss;
      since_ = 0;
    } else if (++since_ >= patience_) {
      lr_ /= 2;
      since_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t since_best() const { return since_; }
  std::size_t epoch() const { return epoch_; }
  void restore(double lr, double best, std::size_t since, std::size_t epoch) {
    lr_ = lr;
    best_ = best;
    since_ = since;
    epoch_ = epoch;
  }

 private:
  double lr_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0, epoch_ = 0;
};

inline double lr_schedule(const std::vector<double>& valid_losses,
                          double lr0 = 1e-3) {
  PlateauSchedule s(lr0);
  for (double v : valid_losses) s.observe(v);
  return s.lr();
}

// ---------------------------------------------------------------------------
// Data.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t { kTrain = 1, kValid = 2, kTest = 3 };

inline std::uint64_t data_seed(std::uint64_t seed, Stream stream,
                               std::uint64_t index) {
  return splitmix64(splitmix64(seed * 4 + static_cast<std::uint64_t>(stream)) ^
                    index);
}

struct Batch {
  Tensor<double> mixture;  // (B, N)
  Tensor<double> sources;  // (B, S, N)
};

inline Batch make_batch(std::uint64_t seed, Stream stream, std::uint64_t first,
                        std::size_t count, double seconds,
                        std::size_t n_speakers) {
  signal::SynthConfig sc;
  sc.seconds = seconds;
  if (n_speakers != 2) {
    sc.f0_ranges.clear();
    for (std::size_t s = 0; s < n_speakers; ++s)
      sc.f0_ranges.push_back({90.0 * std::pow(1.8, double(s)),
                              150.0 * std::pow(1.8, double(s))});
  }
  std::vector<signal::Mixture> ms;
  for (std::size_t i = 0; i < count; ++i)
    ms.push_back(signal::synth_mixture(data_seed(seed, stream, first + i), sc));
  const std::size_t N = ms[0].mixture.size();
  Batch b{Tensor<double>({count, N}), Tensor<double>({count, n_speakers, N})};
  for (std::size_t i = 0; i < count; ++i) {
    std::copy(ms[i].mixture.samples.begin(), ms[i].mixture.samples.end(),
              b.mixture.ptr() + i * N);
    for (std::size_t s = 0; s < n_speakers; ++s)
      std::copy(ms[i].sources[s].samples.begin(), ms[i].sources[s].samples.end(),
                b.sources.ptr() + (i * n_speakers + s) * N);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training state, checkpoints, steps.

template <std::floating_point T>
struct TrainState {
  ModelPlan plan;
  std::uint64_t seed;
  ParamStore<T> params;
  AdamW<T> opt;
  PlateauSchedule schedule;
  std::uint64_t step = 0;

  TrainState(const SepNetConfig& cfg, std::uint64_t s)
      : plan(cfg),
        seed(s),
        params(init_params<T>(plan, s)),
        opt(params, AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
        schedule(cfg.lr) {}
};

inline constexpr char kCheckpointMagic[5] = {'O', 'A', 'S', 'E', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <std::floating_point T>
void save_checkpoint(const std::string& path, const TrainState<T>& st) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot write " + tmp);
    os.write(kCheckpointMagic, 5);
    io::put_u32(os, kCheckpointVersion);
    io::put_bytes(os, to_json(st.plan.cfg).dump());
    io::put_u64(os, st.seed);
    io::put_u64(os, st.step);
    io::put_u64(os, st.opt.steps());
    io::put_f64(os, st.schedule.lr());
    io::put_f64(os, st.schedule.best());
    io::put_u64(os, st.schedule.since_best());
    io::put_u64(os, st.schedule.epoch());
    const auto& es = st.params.entries();
    io::put_u32(os, static_cast<std::uint32_t>(es.size()));
    for (const auto& e : es) {
      io::put_bytes(os, e.name);
      write_tensor(os, e.value);
    }
    for (const auto& m : st.opt.first_moments()) write_tensor(os, m);
    for (const auto& v : st.opt.second_moments()) write_tensor(os, v);
    if (!os) throw FormatError("checkpoint: write failed for " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

inline SepNetConfig read_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  char magic[5];
  io::read_exact(is, magic, 5, "checkpoint magic");
  if (!std::equal(magic, magic + 5, kCheckpointMagic))
    throw FormatError("checkpoint: bad magic in " + path);
  const std::uint32_t version = io::get_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  const std::string text = io::get_bytes(is, 1 << 20, "checkpoint config");
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("checkpoint: corrupt config block");
  return from_json(j);
}

template <std::floating_point T>
TrainState<T> load_checkpoint(const std::string& path) {
  const SepNetConfig cfg = read_checkpoint_config(path);
  std::ifstream is(path, std::ios::binary);
  char magic[5];
  io::read_exact(is, magic, 5, "checkpoint magic");
  io::get_u32(is);
  io::get_bytes(is, 1 << 20, "checkpoint config");
  const std::uint64_t seed = io::get_u64(is, "seed");
  TrainState<T> st(cfg, seed);
  st.step = io::get_u64(is, "step");
  st.opt.set_steps(io::get_u64(is, "optimizer step"));
  const double lr = io::get_f64(is), best = io::get_f64(is);
  const std::uint64_t since = io::get_u64(is), epoch = io::get_u64(is);
  st.schedule.restore(lr, best, since, epoch);
  const std::uint32_t n = io::get_u32(is, "parameter count");
  auto& es = st.params.entries();
  if (n != es.size())
    throw FormatError("checkpoint: " + std::to_string(n) +
                      " tensors, model expects " + std::to_string(es.size()));
  for (auto& e : es) {
    const std::string name = io::get_bytes(is, 4096, "parameter name");
    if (name != e.name)
      throw FormatError("checkpoint: expected parameter '" + e.name +
                        "', found '" + name + "'");
    Tensor<double> t = read_tensor<double>(is);
    if (t.shape() != e.value.shape())
      throw FormatError("checkpoint: shape mismatch for " + name);
    e.value = t.cast<T>();
  }
  for (auto* moments : {&st.opt.first_moments(), &st.opt.second_moments()})
    for (auto& m : *moments) {
      Tensor<double> t = read_tensor<double>(is);
      if (t.shape() != m.shape())
        throw FormatError("checkpoint: optimizer moment shape mismatch");
      m = t.cast<T>();
    }
  return st;
}

struct StepResult {
  double loss = 0;
  double grad_norm = 0;  // before clipping
  double clip_scale = 1;
  double lr = 0;
};

template <std::floating_point T>
StepResult train_step(TrainState<T>& st, const Batch& batch) {
  const SepNetConfig& c = st.plan.cfg;
  Tape<T> tape;
  BoundParams<T> bound(st.params, &tape);
  const Analysis<T> a = analyze<T>(batch.mixture, c);
  const Var<T> est = forward(bound, st.plan, a);
  const Var<T> loss = pit_si_sdr_loss(est, batch.sources.cast<T>());
  StepResult r;
  r.loss = double(loss.value()[0]);
  if (!std::isfinite(r.loss))
    throw NumericError("train: non-finite loss at step " +
                       std::to_string(st.step));
  tape.backward(loss, false);
  std::vector<Tensor<T>> grads = bound.grads(tape);
  r.grad_norm = global_norm(grads);
  if (!std::isfinite(r.grad_norm))
    throw NumericError("train: non-finite gradient norm at step " +
                       std::to_string(st.step));
  r.clip_scale = clip_grad_norm(grads, c.clip_norm);
  r.lr = st.schedule.lr();
  st.opt.step(st.params, grads, r.lr);
  ++st.step;
  return r;
}

// The training loss is blind to output scale, so each estimate gets the
// scalar that best explains the mixture: alpha = argmin |x - sum_i a_i s_i|.
// SI-SDR is unchanged; SDR becomes meaningful.
inline void fit_to_mixture(Tensor<double>& est, const Tensor<double>& mixture) {
  const std::size_t B = est.dim(0), S = est.dim(1), N = est.dim(2);
  for (std::size_t b = 0; b < B; ++b) {
    const double* x = mixture.ptr() + b * N;
    double* e = est.ptr() + b * S * N;
    Eigen::MatrixXd g(S, S);
    Eigen::VectorXd r(S);
    for (std::size_t i = 0; i < S; ++i) {
      r(i) = std::inner_product(e + i * N, e + (i + 1) * N, x, 0.0);
      for (std::size_t j = 0; j <= i; ++j)
        g(i, j) = g(j, i) =
            std::inner_product(e + i * N, e + (i + 1) * N, e + j * N, 0.0);
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-12)) continue;
    const Eigen::VectorXd alpha = ldlt.solve(r);
    if (!alpha.allFinite()) continue;
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t n = 0; n < N; ++n) e[i * N + n] *= alpha(i);
  }
}

// Separated waveforms in input units, (B, S, N), no tape.
template <std::floating_point T>
Tensor<double> separate_batch(const ParamStore<T>& params,
                              const ModelPlan& plan,
                              const Tensor<double>& mixture) {
  BoundParams<T> bound(params, nullptr);
  const Analysis<T> a = analyze<T>(mixture, plan.cfg);
  const Var<T> est = forward(bound, plan, a);
  Tensor<double> out = est.value().template cast<double>();
  const std::size_t B = out.dim(0), per = out.size() / B;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] *= a.gain[b];
  fit_to_mixture(out, mixture);
  return out;
}

template <std::floating_point T>
std::vector<signal::Waveform> separate(const ParamStore<T>& params,
                                       const ModelPlan& plan,
                                       const signal::Waveform& mixture) {
  Tensor<double> m({1, mixture.size()}, mixture.samples);
  const Tensor<double> out = separate_batch(params, plan, m);
  std::vector<signal::Waveform> ws;
  const std::size_t N = mixture.size();
  for (std::size_t s = 0; s < plan.cfg.n_speakers; ++s) {
    signal::Waveform w;
    w.sample_rate = mixture.sample_rate;
    w.samples.assign(out.ptr() + s * N, out.ptr() + (s + 1) * N);
    ws.push_back(std::move(w));
  }
  return ws;
}

template <std::floating_point T>
double validation_loss(const TrainState<T>& st) {
  const SepNetConfig& c = st.plan.cfg;
  double total = 0;
  for (std::size_t i = 0; i < c.valid_utterances; ++i) {
    const Batch b = make_batch(st.seed, Stream::kValid, i, 1, c.segment_seconds,
                               c.n_speakers);
    BoundParams<T> bound(st.params, nullptr);
    const Analysis<T> a = analyze<T>(b.mixture, c);
    const Var<T> est = forward(bound, st.plan, a);
    total += double(pit_si_sdr_loss(est, b.sources.cast<T>()).value()[0]);
  }
  return c.valid_utterances ? total / double(c.valid_utterances) : 0.0;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct UtteranceMetrics {
  std::string id;
  double si_sdr = 0, si_sdri = 0, sdr = 0, sdri = 0;
};

// Best assignment by mean SI-SDR, metrics averaged over sources.
inline UtteranceMetrics score_utterance(
    const std::string& id, const std::vector<signal::Waveform>& est,
    const std::vector<signal::Waveform>& refs, const signal::Waveform& mix) {
  if (est.size() != refs.size())
    throw ContractError("eval: estimate/reference count mismatch for " + id);
  const std::size_t S = refs.size();
  std::vector<std::size_t> perm(S), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_v = -std::numeric_limits<double>::infinity();
  do {
    double v = 0;
    for (std::size_t i = 0; i < S; ++i) v += signal::si_sdr(est[i], refs[perm[i]]);
    if (v > best_v) {
      best_v = v;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  UtteranceMetrics m;
  m.id = id;
  for (std::size_t i = 0; i < S; ++i) {
    const auto& r = refs[best[i]];
    m.si_sdr += signal::si_sdr(est[i], r);
    m.si_sdri += signal::si_sdri(est[i], r, mix);
    m.sdr += signal::sdr(est[i], r);
    m.sdri += signal::sdri(est[i], r, mix);
  }
  m.si_sdr /= double(S);
  m.si_sdri /= double(S);
  m.sdr /= double(S);
  m.sdri /= double(S);
  return m;
}

inline UtteranceMetrics mean_metrics(const std::vector<UtteranceMetrics>& rows) {
  UtteranceMetrics m;
  m.id = "mean";
  for (const auto& r : rows) {
    m.si_sdr += r.si_sdr;
    m.si_sdri += r.si_sdri;
    m.sdr += r.sdr;
    m.sdri += r.sdri;
  }
  const double n = double(std::max<std::size_t>(rows.size(), 1));
  m.si_sdr /= n;
  m.si_sdri /= n;
  m.sdr /= n;
  m.sdri /= n;
  return m;
}

// Held-out synthetic test set: utterance i uses data_seed(seed, kTest, i).
template <std::floating_point T>
std::vector<UtteranceMetrics> evaluate_synthetic(const ParamStore<T>& params,
                                                 const ModelPlan& plan,
                                                 std::uint64_t seed,
                                                 std::size_t count,
                                                 double seconds) {
  std::vector<UtteranceMetrics> rows(count);
  parallel_for(count, [&](std::size_t i) {
    const Batch b = make_batch(seed, Stream::kTest, i, 1, seconds,
                               plan.cfg.n_speakers);
    const Tensor<double> out = separate_batch(params, plan, b.mixture);
    const std::size_t N = b.mixture.dim(1), S = plan.cfg.n_speakers;
    signal::Waveform mix{std::vector<double>(b.mixture.ptr(), b.mixture.ptr() + N)};
    std::vector<signal::Waveform> est, refs;
    for (std::size_t s = 0; s < S; ++s) {
      est.push_back({std::vector<double>(out.ptr() + s * N, out.ptr() + (s + 1) * N)});
      refs.push_back({std::vector<double>(b.sources.ptr() + s * N,
                                          b.sources.ptr() + (s + 1) * N)});
    }
    rows[i] = score_utterance("test_" + std::to_string(i), est, refs, mix);
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainRecord {
  std::uint64_t step = 0;
  double loss = 0, grad_norm = 0, lr = 0;
  double valid_loss = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
};

struct TrainOptions {
  std::string checkpoint_path;  // empty: no checkpoints
  std::function<void(const TrainRecord&)> on_step;
};

// Runs cfg.steps steps from the current state. Data for step k is
// make_batch(seed, kTrain, k * batch, batch), so a resumed run sees the same
// stream. On a non-finite loss the last checkpoint is left untouched and
// the error propagates.
template <std::floating_point T>
std::vector<TrainRecord> train(TrainState<T>& st, const TrainOptions& opt = {}) {
  const SepNetConfig& c = st.plan.cfg;
  std::vector<TrainRecord> log;
  const auto t0 = std::chrono::steady_clock::now();
  while (st.step < c.steps) {
    const Batch b = make_batch(st.seed, Stream::kTrain, st.step * c.batch,
                               c.batch, c.segment_seconds, c.n_speakers);
    const StepResult r = train_step(st, b);
    TrainRecord rec;
    rec.step = st.step;
    rec.loss = r.loss;
    rec.grad_norm = r.grad_norm;
    rec.lr = r.lr;
    if (st.step % c.steps_per_epoch == 0 && c.valid_utterances > 0) {
      rec.valid_loss = validation_loss(st);
      st.schedule.observe(rec.valid_loss);
    }
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    log.push_back(rec);
    if (opt.on_step) opt.on_step(rec);
    if (!opt.checkpoint_path.empty() && c.checkpoint_every &&
        st.step % c.checkpoint_every == 0)
      save_checkpoint(opt.checkpoint_path, st);
  }
  if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, st);
  return log;
}

}  // namespace omniscan::sepnet
