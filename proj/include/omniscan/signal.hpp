// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// STFT / iSTFT with sqrt-Hann windows, synthetic two-source mixtures,
// separation metrics and 16-bit PCM WAV I/O.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/kernels.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan::signal {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 8000.0;

  std::size_t size() const { return samples.size(); }
};

struct StftConfig {
  std::size_t window = 256;
  std::size_t hop = 128;
  // Pad window/2 zeros on both ends so every input sample is covered by
  // full overlap; the frame count becomes floor(N / hop) + 1.
  bool center = false;

  std::size_t bins() const { return window / 2 + 1; }
  std::size_t pad() const { return center ? window / 2 : 0; }

  void validate() const {
    if (window < 2 || window % 2 != 0)
      throw ContractError("stft: window length must be even and >= 2");
    if (hop == 0 || hop > window)
      throw ContractError("stft: hop must be in [1, window]");
  }

  std::size_t frames(std::size_t n) const {
    validate();
    const std::size_t padded = n + 2 * pad();
    if (padded < window)
      throw ContractError("stft: signal of " + std::to_string(n) +
                          " samples is shorter than the window (" +
                          std::to_string(window) + ")");
    return (padded - window) / hop + 1;
  }
};

// Periodic Hann, square-rooted: analysis and synthesis together apply a Hann
// window, which overlap-adds to a constant at hop = window / 2.
inline std::vector<double> sqrt_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = std::sqrt(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi *
                                          static_cast<double>(i) /
                                          static_cast<double>(n)));
  return w;
}

// Real-input DFT basis with the analysis window folded in, plus the inverse
// basis with the synthesis window. Rows are bins.
struct DftBasis {
  std::size_t window = 0, bins = 0;
  std::vector<double> win;
  kernel::RowMat<double> fwd_re, fwd_im;  // (bins, window)
  kernel::RowMat<double> inv_re, inv_im;  // (bins, window)

  explicit DftBasis(std::size_t n) : window(n), bins(n / 2 + 1), win(sqrt_hann(n)) {
    fwd_re.resize(bins, n);
    fwd_im.resize(bins, n);
    inv_re.resize(bins, n);
    inv_im.resize(bins, n);
    for (std::size_t k = 0; k < bins; ++k) {
      // One-sided inverse: interior bins count twice.
      const double wk = (k == 0 || 2 * k == n) ? 1.0 : 2.0;
      for (std::size_t i = 0; i < n; ++i) {
        // Exact phase reduction keeps the basis accurate for large k * i.
        const double ph = 2.0 * std::numbers::pi *
                          static_cast<double>((k * i) % n) /
                          static_cast<double>(n);
        const double c = std::cos(ph), s = std::sin(ph);
        fwd_re(k, i) = win[i] * c;
        fwd_im(k, i) = -win[i] * s;
        inv_re(k, i) = wk * c * win[i] / static_cast<double>(n);
        inv_im(k, i) = -wk * s * win[i] / static_cast<double>(n);
      }
    }
  }

  static const DftBasis& get(std::size_t n) {
    thread_local std::vector<std::unique_ptr<DftBasis>> cache;
    for (const auto& b : cache)
      if (b->window == n) return *b;
    cache.push_back(std::make_unique<DftBasis>(n));
    return *cache.back();
  }
};

struct ComplexSpectrogram {
  Tensor<double> real;  // (F, T)
  Tensor<double> imag;  // (F, T)
  StftConfig config;

  std::size_t bins() const { return real.dim(0); }
  std::size_t frames() const { return real.dim(1); }
};

// Batched analysis: x (B, N) -> re, im (B, F, T).
inline void stft_batch(const Tensor<double>& x, const StftConfig& cfg,
                       Tensor<double>& re, Tensor<double>& im) {
  if (x.rank() != 2) throw ShapeError("stft: expected (B, N) signals");
  const std::size_t B = x.dim(0), N = x.dim(1), W = cfg.window;
  const std::size_t T = cfg.frames(N), F = cfg.bins(), pad = cfg.pad();
  const DftBasis& basis = DftBasis::get(W);
  re = Tensor<double>({B, F, T});
  im = Tensor<double>({B, F, T});
  kernel::RowMat<double> frames(W, T);
  for (std::size_t b = 0; b < B; ++b) {
    const double* px = x.ptr() + b * N;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < W; ++i) {
        const std::size_t p = t * cfg.hop + i;  // position in padded signal
        frames(i, t) = p >= pad && p - pad < N ? px[p - pad] : 0.0;
      }
    kernel::MapMat<double>(re.ptr() + b * F * T, F, T).noalias() =
        basis.fwd_re * frames;
    kernel::MapMat<double>(im.ptr() + b * F * T, F, T).noalias() =
        basis.fwd_im * frames;
  }
}

inline ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
  Tensor<double> x({1, std::max<std::size_t>(w.size(), 1)});
  if (w.size() == 0) throw ContractError("stft: empty signal");
  std::copy(w.samples.begin(), w.samples.end(), x.ptr());
  Tensor<double> re, im;
  stft_batch(x, cfg, re, im);
  const std::size_t F = re.dim(1), T = re.dim(2);
  return {std::move(re).reshaped({F, T}), std::move(im).reshaped({F, T}), cfg};
}

// Sum over frames of analysis * synthesis window at each output sample; the
// iSTFT divides by it (COLA normalization).
inline std::vector<double> window_envelope(const StftConfig& cfg,
                                           std::size_t frames) {
  const auto win = sqrt_hann(cfg.window);
  std::vector<double> env((frames - 1) * cfg.hop + cfg.window, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < cfg.window; ++i)
      env[t * cfg.hop + i] += win[i] * win[i];
  return env;
}

// Samples whose envelope is below this are left at zero.
inline constexpr double kEnvelopeFloor = 1e-10;

// Linear map from (B, F, T) spectra to (B, length) signals.
struct IstftPlan {
  StftConfig cfg;
  std::size_t frames = 0, length = 0;
  std::vector<double> inv_env;  // per padded sample, 0 where uncovered

  IstftPlan(const StftConfig& c, std::size_t t, std::size_t n)
      : cfg(c), frames(t), length(n) {
    const auto env = window_envelope(cfg, frames);
    inv_env.resize(env.size());
    for (std::size_t i = 0; i < env.size(); ++i)
      inv_env[i] = env[i] > kEnvelopeFloor ? 1.0 / env[i] : 0.0;
  }

  void apply(const double* re, const double* im, double* out) const {
    const DftBasis& basis = DftBasis::get(cfg.window);
    const std::size_t F = cfg.bins(), T = frames, W = cfg.window;
    kernel::RowMat<double> fr(W, T);
    fr.noalias() = basis.inv_re.transpose() *
                   kernel::CMapMat<double>(re, F, T);
    fr.noalias() += basis.inv_im.transpose() *
                    kernel::CMapMat<double>(im, F, T);
    std::fill(out, out + length, 0.0);
    const std::size_t pad = cfg.pad();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < W; ++i) {
        const std::size_t p = t * cfg.hop + i;
        if (p < pad || p - pad >= length) continue;
        out[p - pad] += fr(i, t) * inv_env[p];
      }
  }

  // Adjoint of apply.
  void adjoint(const double* g, double* gre, double* gim) const {
    const DftBasis& basis = DftBasis::get(cfg.window);
    const std::size_t F = cfg.bins(), T = frames, W = cfg.window;
    const std::size_t pad = cfg.pad();
    kernel::RowMat<double> gf(W, T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < W; ++i) {
        const std::size_t p = t * cfg.hop + i;
        gf(i, t) = p < pad || p - pad >= length ? 0.0 : g[p - pad] * inv_env[p];
      }
    kernel::MapMat<double>(gre, F, T).noalias() = basis.inv_re * gf;
    kernel::MapMat<double>(gim, F, T).noalias() = basis.inv_im * gf;
  }
};

inline Waveform istft(const ComplexSpectrogram& s, std::size_t length = 0,
                      double sample_rate = 8000.0) {
  s.config.validate();
  if (s.real.rank() != 2 || s.imag.shape() != s.real.shape() ||
      s.bins() != s.config.bins())
    throw ShapeError("istft: spectrogram shape " + shape_str(s.real.shape()));
  const std::size_t T = s.frames();
  const std::size_t full = (T - 1) * s.config.hop + s.config.window;
  if (length == 0) length = full - 2 * s.config.pad();
  IstftPlan plan(s.config, T, length);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(length);
  plan.apply(s.real.ptr(), s.imag.ptr(), w.samples.data());
  return w;
}

// Differentiable batched iSTFT: re, im (B, F, T) -> (B, length).
template <class T>
Var<T> istft(const Var<T>& re, const Var<T>& im, const StftConfig& cfg,
             std::size_t length) {
  if (re.shape().size() != 3 || im.shape() != re.shape() ||
      re.dim(1) != cfg.bins())
    throw ShapeError("istft: expected (B, " + std::to_string(cfg.bins()) +
                     ", T), got " + shape_str(re.shape()));
  const std::size_t B = re.dim(0), F = re.dim(1), TT = re.dim(2);
  auto plan = std::make_shared<const IstftPlan>(cfg, TT, length);
  Tensor<T> out({B, length});
  std::vector<double> r(F * TT), i(F * TT), o(length);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(re.value().ptr() + b * F * TT, F * TT, r.begin());
    std::copy_n(im.value().ptr() + b * F * TT, F * TT, i.begin());
    plan->apply(r.data(), i.data(), o.data());
    std::copy(o.begin(), o.end(), out.ptr() + b * length);
  }
  return detail::finish<T>(
      "istft", std::move(out), {&re, &im},
      [nr = re.node(), ni = im.node(), plan, B, F, TT, length](
          Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> gr({B, F, TT}), gi({B, F, TT});
        std::vector<double> gg(length), a(F * TT), c(F * TT);
        for (std::size_t b = 0; b < B; ++b) {
          std::copy_n(g.ptr() + b * length, length, gg.begin());
          plan->adjoint(gg.data(), a.data(), c.data());
          std::copy(a.begin(), a.end(), gr.ptr() + b * F * TT);
          std::copy(c.begin(), c.end(), gi.ptr() + b * F * TT);
        }
        if (nr != kNoNode) tape.accumulate(nr, std::move(gr));
        if (ni != kNoNode) tape.accumulate(ni, std::move(gi));
      });
}

// ---------------------------------------------------------------------------
// Synthetic two-source mixtures: each "speaker" is a harmonic tone complex
// with a randomized fundamental from its own range, vibrato, a drifting
// pitch contour, spectral tilt and a syllable-rate amplitude envelope.

struct SynthConfig {
  double sample_rate = 8000.0;
  double seconds = 4.0;
  // Disjoint fundamental ranges (Hz), one per source.
  std::vector<std::array<double, 2>> f0_ranges = {{{90.0, 160.0}},
                                                  {{200.0, 360.0}}};
  double gain_db = 2.5;      // relative level drawn from [-gain_db, gain_db]
  double peak = 0.9;         // mixture peak after normalization
  double max_harmonic_hz = 3800.0;
};

struct Mixture {
  Waveform mixture;
  std::vector<Waveform> sources;
  double relative_db = 0.0;
};

inline std::vector<double> synth_source(std::mt19937_64& rng, double f0_lo,
                                        double f0_hi, std::size_t n,
                                        const SynthConfig& cfg) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double sr = cfg.sample_rate, two_pi = 2.0 * std::numbers::pi;
  const double f0 = f0_lo + (f0_hi - f0_lo) * U(rng);
  const double drift = (U(rng) - 0.5) * 0.3;  // relative glide over the clip
  const double vib_rate = 3.0 + 3.0 * U(rng), vib_depth = 0.01 + 0.03 * U(rng);
  const double vib_phase = two_pi * U(rng);
  const double tilt = 0.6 + 1.0 * U(rng);  // amplitude ~ k^-tilt
  const double am_rate = 2.0 + 4.0 * U(rng), am_depth = 0.3 + 0.6 * U(rng);
  const double am_phase = two_pi * U(rng);
  // Harmonics above the pitch ceiling of this source would alias past the
  // band limit; the count uses the highest reachable fundamental.
  const double f_top = f0 * (1.0 + std::abs(drift)) * (1.0 + vib_depth);
  const std::size_t K = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.max_harmonic_hz / f_top));
  std::vector<double> amp(K), phase(K);
  for (std::size_t k = 0; k < K; ++k) {
    amp[k] = std::pow(static_cast<double>(k + 1), -tilt) * (0.5 + U(rng));
    phase[k] = two_pi * U(rng);
  }
  std::vector<double> out(n);
  double theta = 0.0;  // fundamental phase, integrated
  const double dur = static_cast<double>(n) / sr;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    const double f = f0 * (1.0 + drift * (t / dur - 0.5)) *
                     (1.0 + vib_depth * std::sin(two_pi * vib_rate * t + vib_phase));
    theta += two_pi * f / sr;
    double v = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      v += amp[k] * std::sin(static_cast<double>(k + 1) * theta + phase[k]);
    const double env =
        1.0 - am_depth * 0.5 * (1.0 + std::sin(two_pi * am_rate * t + am_phase));
    out[i] = v * env;
  }
  return out;
}

inline double rms(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(std::max<std::size_t>(x.size(), 1)));
}

inline Mixture synth_mixture(std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (cfg.f0_ranges.size() < 2)
    throw ContractError("synth_mixture: need at least two f0 ranges");
  std::mt19937_64 rng(seed);
  const std::size_t n =
      static_cast<std::size_t>(std::llround(cfg.seconds * cfg.sample_rate));
  if (n == 0) throw ContractError("synth_mixture: empty duration");
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  Mixture m;
  m.relative_db = cfg.gain_db * U(rng);
  std::vector<std::vector<double>> src;
  for (std::size_t s = 0; s < cfg.f0_ranges.size(); ++s) {
    auto x = synth_source(rng, cfg.f0_ranges[s][0], cfg.f0_ranges[s][1], n, cfg);
    // Equal RMS, then the first source carries the relative gain.
    const double g =
        (s == 0 ? std::pow(10.0, m.relative_db / 20.0) : 1.0) / rms(x);
    for (double& v : x) v *= g;
    src.push_back(std::move(x));
  }
  std::vector<double> mix(n, 0.0);
  for (const auto& x : src)
    for (std::size_t i = 0; i < n; ++i) mix[i] += x[i];
  double peak = 0.0;
  for (double v : mix) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0 ? cfg.peak / peak : 1.0;
  // Scale the sources, then rebuild the mixture from the scaled sources so
  // that mixture == sum(sources) holds exactly.
  for (auto& x : src)
    for (double& v : x) v *= scale;
  std::fill(mix.begin(), mix.end(), 0.0);
  for (const auto& x : src)
    for (std::size_t i = 0; i < n; ++i) mix[i] += x[i];
  m.mixture = Waveform{std::move(mix), cfg.sample_rate};
  for (auto& x : src) m.sources.push_back(Waveform{std::move(x), cfg.sample_rate});
  return m;
}

// ---------------------------------------------------------------------------
// Metrics (dB).

inline constexpr double kMetricClampDb = 60.0;

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void check_pair(const Waveform& est, const Waveform& ref) {
  if (est.size() != ref.size() || est.size() == 0)
    throw ShapeError("metric: estimate has " + std::to_string(est.size()) +
                     " samples, reference " + std::to_string(ref.size()));
}

inline double ratio_db(double num, double den) {
  if (den <= 0.0) return kMetricClampDb;
  if (num <= 0.0) return -kMetricClampDb;
  return std::clamp(10.0 * std::log10(num / den), -kMetricClampDb,
                    kMetricClampDb);
}

}  // namespace detail

inline double si_sdr(const Waveform& est, const Waveform& ref) {
  detail::check_pair(est, ref);
  const double rr = detail::dot(ref.samples, ref.samples);
  if (rr == 0.0) throw DomainError("si_sdr: reference is all zeros");
  const double alpha = detail::dot(est.samples, ref.samples) / rr;
  double ss = 0.0, ee = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double s = alpha * ref.samples[i];
    const double e = est.samples[i] - s;
    ss += s * s;
    ee += e * e;
  }
  return detail::ratio_db(ss, ee);
}

inline double sdr(const Waveform& est, const Waveform& ref) {
  detail::check_pair(est, ref);
  const double rr = detail::dot(ref.samples, ref.samples);
  if (rr == 0.0) throw DomainError("sdr: reference is all zeros");
  double ee = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double e = est.samples[i] - ref.samples[i];
    ee += e * e;
  }
  return detail::ratio_db(rr, ee);
}

inline double si_sdri(const Waveform& est, const Waveform& ref,
                      const Waveform& mixture) {
  return si_sdr(est, ref) - si_sdr(mixture, ref);
}

inline double sdri(const Waveform& est, const Waveform& ref,
                   const Waveform& mixture) {
  return sdr(est, ref) - sdr(mixture, ref);
}

// ---------------------------------------------------------------------------
// RIFF/WAVE, PCM 16-bit mono.

inline void wav_write(const std::string& path, const Waveform& w) {
  if (!(w.sample_rate > 0) || w.sample_rate > 4.0e9)
    throw ContractError("wav_write: invalid sample rate");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("wav_write: cannot open " + path);
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  const auto data_bytes = static_cast<std::uint32_t>(w.size() * 2);
  os.write("RIFF", 4);
  io::put_u32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  io::put_u32(os, 16);
  const char fmt[4] = {1, 0, 1, 0};  // PCM, mono
  os.write(fmt, 4);
  io::put_u32(os, rate);
  io::put_u32(os, rate * 2);
  const char align[4] = {2, 0, 16, 0};  // block align 2, 16 bits
  os.write(align, 4);
  os.write("data", 4);
  io::put_u32(os, data_bytes);
  for (double v : w.samples) {
    const long q = std::clamp(std::lround(v * 32768.0), -32768L, 32767L);
    const auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(q));
    const char b[2] = {static_cast<char>(u & 0xff), static_cast<char>(u >> 8)};
    os.write(b, 2);
  }
  if (!os) throw FormatError("wav_write: write failed for " + path);
}

inline Waveform wav_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("wav_read: cannot open " + path);
  char tag[4];
  io::read_exact(is, tag, 4, "RIFF tag");
  if (std::string(tag, 4) != "RIFF") throw FormatError("wav_read: not RIFF");
  io::get_u32(is, "RIFF size");
  io::read_exact(is, tag, 4, "WAVE tag");
  if (std::string(tag, 4) != "WAVE") throw FormatError("wav_read: not WAVE");
  bool have_fmt = false;
  std::uint32_t rate = 0;
  for (;;) {
    io::read_exact(is, tag, 4, "chunk id");
    const std::string id(tag, 4);
    const std::uint32_t size = io::get_u32(is, "chunk size");
    if (id == "fmt ") {
      if (size < 16) throw FormatError("wav_read: short fmt chunk");
      unsigned char f[16];
      io::read_exact(is, reinterpret_cast<char*>(f), 16, "fmt chunk");
      const unsigned format = f[0] | (f[1] << 8);
      const unsigned channels = f[2] | (f[3] << 8);
      rate = f[4] | (f[5] << 8) | (f[6] << 16) | (std::uint32_t{f[7]} << 24);
      const unsigned bits = f[14] | (f[15] << 8);
      if (format != 1)
        throw FormatError("wav_read: unsupported encoding " +
                          std::to_string(format) + " (PCM only)");
      if (channels != 1)
        throw FormatError("wav_read: " + std::to_string(channels) +
                          " channels, mono required");
      if (bits != 16)
        throw FormatError("wav_read: " + std::to_string(bits) +
                          "-bit samples, 16-bit required");
      if (rate == 0) throw FormatError("wav_read: zero sample rate");
      is.ignore(size - 16 + (size & 1));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav_read: data before fmt chunk");
      if (size % 2) throw FormatError("wav_read: odd data size");
      std::string raw(size, '\0');
      io::read_exact(is, raw.data(), size, "sample data");
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto u = static_cast<std::uint16_t>(
            static_cast<unsigned char>(raw[2 * i]) |
            (static_cast<unsigned char>(raw[2 * i + 1]) << 8));
        w.samples[i] = static_cast<std::int16_t>(u) / 32768.0;
      }
      return w;
    } else {
      is.ignore(size + (size & 1));
      if (!is) throw FormatError("wav_read: truncated chunk " + id);
    }
  }
}

}  // namespace omniscan::signal
