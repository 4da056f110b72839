// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "omniscan/signal.hpp"
#include "test_util.hpp"

namespace omniscan::signal {
namespace {

constexpr double kPi = std::numbers::pi;

Waveform noise(std::size_t n, std::uint64_t seed, double amp = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-amp, amp);
  Waveform w;
  w.samples.resize(n);
  for (double& v : w.samples) v = U(rng);
  return w;
}

Waveform scaled(const Waveform& w, double a) {
  Waveform o = w;
  for (double& v : o.samples) v *= a;
  return o;
}

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("omniscan_" + std::to_string(::getpid()) + "_" + name);
}

// One-sided power of every (bin, frame).
std::vector<double> frame_power(const ComplexSpectrogram& s, std::size_t t) {
  const std::size_t F = s.bins(), T = s.frames(), W = s.config.window;
  std::vector<double> p(F);
  for (std::size_t k = 0; k < F; ++k) {
    const double re = s.real.ptr()[k * T + t], im = s.imag.ptr()[k * T + t];
    p[k] = (k == 0 || 2 * k == W ? 1.0 : 2.0) * (re * re + im * im);
  }
  return p;
}

TEST(Stft, FrameCounts) {
  const Waveform w = noise(8000, 1);
  EXPECT_EQ(stft(w, {256, 128, false}).frames(), 61u);
  const auto c = stft(w, {256, 128, true});
  EXPECT_EQ(c.frames(), 63u);
  EXPECT_EQ(c.bins(), 129u);
  EXPECT_THROW(stft(noise(100, 1), {256, 128}), ContractError);
  EXPECT_THROW(stft(w, {256, 300}), ContractError);
  EXPECT_THROW(stft(w, {255, 128}), ContractError);
}

TEST(Stft, Parseval) {
  const StftConfig cfg{256, 128};
  const Waveform w = noise(2000, 2);
  const auto s = stft(w, cfg);
  const auto win = sqrt_hann(256);
  for (std::size_t t = 0; t < s.frames(); ++t) {
    double time = 0.0;
    for (std::size_t i = 0; i < 256; ++i) {
      const double v = win[i] * w.samples[t * 128 + i];
      time += v * v;
    }
    double freq = 0.0;
    for (double p : frame_power(s, t)) freq += p;
    EXPECT_NEAR(freq / 256.0, time, 1e-8 * time) << "frame " << t;
  }
}

TEST(Stft, BinCenterCosine) {
  const StftConfig cfg{256, 128};
  Waveform w;
  w.samples.resize(256 * 4);
  for (std::size_t i = 0; i < w.size(); ++i)
    w.samples[i] = std::cos(2.0 * kPi * 32.0 * static_cast<double>(i) / 256.0);
  const auto s = stft(w, cfg);
  for (std::size_t t = 0; t < s.frames(); ++t) {
    const auto p = frame_power(s, t);
    double total = 0.0;
    for (double v : p) total += v;
    // sqrt-Hann main lobe spans the bin and its two neighbours.
    EXPECT_GE((p[31] + p[32] + p[33]) / total, 0.99);
    EXPECT_NEAR(p[32] / total, 0.8104270538508905, 1e-9);
  }
}

TEST(Stft, ZeroInZeroOut) {
  Waveform z;
  z.samples.assign(1000, 0.0);
  const auto s = stft(z, {256, 128});
  for (double v : s.real.data()) EXPECT_EQ(v, 0.0);
  for (double v : s.imag.data()) EXPECT_EQ(v, 0.0);
  const auto back = istft(s, 1000);
  for (double v : back.samples) EXPECT_EQ(v, 0.0);
}

TEST(Stft, RoundTripInterior) {
  const Waveform w = noise(8000, 3);
  for (bool center : {false, true}) {
    const StftConfig cfg{256, 128, center};
    const auto back = istft(stft(w, cfg), 8000);
    ASSERT_EQ(back.size(), 8000u);
    // Uncentered: the first and last half-window lack full overlap.
    const std::size_t lo = center ? 0 : 128;
    const std::size_t hi = center ? 8000 : (stft(w, cfg).frames() - 1) * 128 + 128;
    double err = 0.0;
    for (std::size_t i = lo; i < hi; ++i)
      err = std::max(err, std::abs(back.samples[i] - w.samples[i]));
    EXPECT_LE(err, 1e-8) << "center " << center;
  }
}

TEST(Stft, Cola) {
  const auto env = window_envelope({256, 128}, 10);
  for (std::size_t i = 128; i < env.size() - 128; ++i)
    EXPECT_NEAR(env[i], 1.0, 1e-12);
}

TEST(Istft, Linearity) {
  const StftConfig cfg{256, 128};
  const auto a = stft(noise(3000, 4), cfg), b = stft(noise(3000, 5), cfg);
  ComplexSpectrogram ab = a;
  for (std::size_t i = 0; i < ab.real.size(); ++i) {
    ab.real.data()[i] += b.real.data()[i];
    ab.imag.data()[i] += b.imag.data()[i];
  }
  const auto ya = istft(a), yb = istft(b), yab = istft(ab);
  for (std::size_t i = 0; i < yab.size(); ++i)
    EXPECT_NEAR(yab.samples[i], ya.samples[i] + yb.samples[i], 1e-10);
}

TEST(Istft, DifferentiableMatchesPlainAndGradients) {
  const StftConfig cfg{16, 8, true};
  Rng rng(6);
  const std::size_t F = cfg.bins(), T = 6, N = 40;
  const Tensor<double> re = testing::rand_tensor({2, F, T}, rng);
  const Tensor<double> im = testing::rand_tensor({2, F, T}, rng);
  const Var<double> y = istft(constant(re), constant(im), cfg, N);
  ComplexSpectrogram s{Tensor<double>({F, T}), Tensor<double>({F, T}), cfg};
  std::copy_n(re.ptr() + F * T, F * T, s.real.ptr());
  std::copy_n(im.ptr() + F * T, F * T, s.imag.ptr());
  const auto plain = istft(s, N);
  for (std::size_t i = 0; i < N; ++i)
    EXPECT_EQ(y.value().ptr()[N + i], plain.samples[i]);
  const double err = testing::op_grad_error(
      {re, im}, [&](const std::vector<Var<double>>& x) {
        return istft(x[0], x[1], cfg, N);
      });
  EXPECT_LE(err, 1e-6);
}

TEST(Synth, MixtureIsSumAndDeterministic) {
  SynthConfig cfg;
  cfg.seconds = 1.0;
  const auto m = synth_mixture(11, cfg), again = synth_mixture(11, cfg);
  ASSERT_EQ(m.sources.size(), 2u);
  for (std::size_t i = 0; i < m.mixture.size(); ++i)
    EXPECT_EQ(m.mixture.samples[i], m.sources[0].samples[i] + m.sources[1].samples[i]);
  EXPECT_EQ(m.mixture.samples, again.mixture.samples);
  EXPECT_EQ(m.sources[1].samples, again.sources[1].samples);
  EXPECT_LE(std::abs(m.relative_db), 2.5);
  double peak = 0.0;
  for (double v : m.mixture.samples) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(peak, 0.9, 1e-12);
}

TEST(Synth, SeedsDecorrelate) {
  SynthConfig cfg;
  cfg.seconds = 0.5;
  auto corr = [](const Waveform& a, const Waveform& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a.samples[i] * b.samples[i];
      aa += a.samples[i] * a.samples[i];
      bb += b.samples[i] * b.samples[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  Mixture prev = synth_mixture(0, cfg);
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Mixture cur = synth_mixture(seed, cfg);
    for (std::size_t s = 0; s < 2; ++s)
      EXPECT_LT(std::abs(corr(prev.sources[s], cur.sources[s])), 0.5) << seed;
    prev = std::move(cur);
  }
}

TEST(Metrics, ClampAndScaleExamples) {
  const Waveform ref = noise(1000, 7);
  EXPECT_EQ(si_sdr(ref, ref), 60.0);
  EXPECT_EQ(si_sdr(scaled(ref, 2.0), ref), 60.0);
  EXPECT_EQ(sdr(ref, ref), 60.0);
  Waveform zero;
  zero.samples.assign(1000, 0.0);
  EXPECT_THROW(si_sdr(ref, zero), DomainError);
  EXPECT_THROW(sdr(ref, zero), DomainError);
  EXPECT_THROW(si_sdr(noise(999, 1), ref), ShapeError);
}

TEST(Metrics, EqualEnergyOrthogonalNoiseIsZeroDb) {
  Waveform ref, est;
  const std::size_t n = 800;
  ref.samples.resize(n);
  est.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / 8000.0;
    ref.samples[i] = std::sin(2 * kPi * 500 * t);
    // Distinct bin-aligned tones over whole periods are orthogonal.
    est.samples[i] = ref.samples[i] + std::sin(2 * kPi * 1000 * t);
  }
  EXPECT_NEAR(si_sdr(est, ref), 0.0, 1e-9);
  // Random noise made orthogonal and rescaled to the reference energy.
  const Waveform r = noise(4000, 8);
  Waveform nz = noise(4000, 9);
  double nr = 0, rr = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    nr += nz.samples[i] * r.samples[i];
    rr += r.samples[i] * r.samples[i];
  }
  for (std::size_t i = 0; i < r.size(); ++i) nz.samples[i] -= nr / rr * r.samples[i];
  double nn = 0;
  for (double v : nz.samples) nn += v * v;
  Waveform e = r;
  for (std::size_t i = 0; i < r.size(); ++i)
    e.samples[i] += nz.samples[i] * std::sqrt(rr / nn);
  EXPECT_NEAR(si_sdr(e, r), 0.0, 1e-9);
}

TEST(Metrics, ScaleInvariance) {
  const Waveform ref = noise(2000, 10);
  Waveform est = ref;
  const Waveform n = noise(2000, 11, 0.5);
  for (std::size_t i = 0; i < est.size(); ++i) est.samples[i] += n.samples[i];
  const double base = si_sdr(est, ref);
  for (double a : {0.1, 1.0, 10.0})
    EXPECT_NEAR(si_sdr(scaled(est, a), ref), base, 1e-9) << a;
}

TEST(Metrics, MaximizedAtScaledReference) {
  const Waveform ref = noise(1500, 12);
  const Waveform n = noise(1500, 13, 0.3);
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> U(0.05, 5.0);
  for (int k = 0; k < 50; ++k) {
    const double a = U(rng);
    Waveform est = scaled(ref, a);
    const double clean = si_sdr(est, ref);
    for (std::size_t i = 0; i < est.size(); ++i) est.samples[i] += n.samples[i];
    EXPECT_GE(clean, si_sdr(est, ref));
    EXPECT_EQ(clean, 60.0);
  }
}

TEST(Metrics, ImprovementOfMixtureIsZero) {
  SynthConfig cfg;
  cfg.seconds = 0.5;
  const auto m = synth_mixture(15, cfg);
  for (const auto& s : m.sources) {
    EXPECT_EQ(si_sdri(m.mixture, s, m.mixture), 0.0);
    EXPECT_EQ(sdri(m.mixture, s, m.mixture), 0.0);
    EXPECT_EQ(si_sdri(s, s, m.mixture), 60.0 - si_sdr(m.mixture, s));
  }
}

// Values from tests/reference/metrics_reference.py (numpy, float64).
TEST(Metrics, MatchesIndependentReference) {
  Waveform ref, est, mix;
  for (std::size_t i = 0; i < 800; ++i) {
    const double n = static_cast<double>(i);
    ref.samples.push_back(std::sin(2 * kPi * 440 * n / 8000));
    est.samples.push_back(0.7 * ref.samples.back() +
                          0.1 * std::cos(2 * kPi * 1000 * n / 8000) +
                          0.05 * (static_cast<double>(i % 7) - 3) / 3);
    mix.samples.push_back(ref.samples.back() +
                          0.8 * std::sin(2 * kPi * 613 * n / 8000 + 0.3));
  }
  EXPECT_NEAR(si_sdr(est, ref), 16.082512700410245, 1e-9);
  EXPECT_NEAR(sdr(est, ref), 9.9106879767629188, 1e-9);
  EXPECT_NEAR(si_sdri(est, ref, mix), 16.082512700410245 - 1.9616907412147488, 1e-9);
  EXPECT_NEAR(sdri(est, ref, mix), 9.9106879767629188 - 1.9335273791091274, 1e-9);
}

TEST(Wav, RoundTrip) {
  const auto path = tmp_path("rt.wav");
  Waveform w = noise(5000, 16, 0.99);
  w.sample_rate = 8000.0;
  wav_write(path.string(), w);
  const Waveform r = wav_read(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(r.sample_rate, 8000.0);
  ASSERT_EQ(r.size(), w.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    EXPECT_LE(std::abs(r.samples[i] - w.samples[i]), std::ldexp(1.0, -15));
}

TEST(Wav, RejectsMalformed) {
  const auto path = tmp_path("bad.wav");
  Waveform w = noise(100, 17);
  wav_write(path.string(), w);
  {
    // Flip the channel count to 2.
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(22);
    f.put(2);
  }
  EXPECT_THROW(wav_read(path.string()), FormatError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "RIFF\x04\0\0\0WAVE";
  }
  EXPECT_THROW(wav_read(path.string()), FormatError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a wav file at all";
  }
  EXPECT_THROW(wav_read(path.string()), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(wav_read(path.string()), FormatError);
}

}  // namespace
}  // namespace omniscan::signal
