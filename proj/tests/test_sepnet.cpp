// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "omniscan/sepnet.hpp"
#include "omniscan/verify.hpp"
#include "test_util.hpp"

namespace omniscan::sepnet {
namespace {

using TD = Tensor<double>;

std::size_t scalar_count(const ParamStore<double>& s) {
  std::size_t n = 0;
  for (const auto& e : s.entries()) n += e.value.size();
  return n;
}

bool same_bits(const TD& a, const TD& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

SepNetConfig small_config() {
  SepNetConfig c = verify::micro_sepnet_config();
  c.segment_seconds = 200.0 / 8000.0;
  c.valid_utterances = 1;
  c.steps_per_epoch = 1000;
  return c;
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(from_json(json{{"chanels", 24}}), ContractError);
  EXPECT_THROW(from_json(json{{"oa_placement", "middle"}}), ContractError);
  EXPECT_THROW(from_json(json{{"direction_set", "7d"}}), ContractError);
  EXPECT_THROW(from_json(json{{"lr", -1.0}}), ContractError);
  EXPECT_THROW(from_json(json{{"channels", "many"}}), ContractError);
  EXPECT_THROW(apply_overrides({}, {"nokey=1"}), ContractError);
  EXPECT_THROW(apply_overrides({}, {"channels"}), ContractError);
  const SepNetConfig c = apply_overrides({}, {"channels=48", "oa_placement=front"});
  EXPECT_EQ(c.channels, 48u);
  EXPECT_EQ(c.oa_placement, "front");
  const SepNetConfig back = from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, ParamCountMatchesStore) {
  for (const char* placement : {"none", "front", "back", "both"}) {
    SepNetConfig c = verify::micro_sepnet_config();
    c.oa_placement = placement;
    const ModelPlan plan(c);
    EXPECT_EQ(param_count(plan), scalar_count(init_params<double>(plan, 1)))
        << placement;
  }
}

TEST(Encode, ZeroWaveformGivesZeroFeatures) {
  const SepNetConfig c = verify::micro_sepnet_config();
  const ModelPlan plan(c);
  const ParamStore<double> store = init_params<double>(plan, 2);
  const Analysis<double> a = analyze<double>(TD({1, 40}), c);
  EXPECT_EQ(a.gain[0], 1.0);
  BoundParams<double> bound(store, nullptr);
  const Var<double> h = encode(Scope<double>(bound), a.re, a.im);
  EXPECT_EQ(h.shape(), (Shape{1, 8, 6, 9}));
  for (double v : h.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, ShortInputRejected) {
  EXPECT_THROW(analyze<double>(TD({1, 9}), verify::micro_sepnet_config()),
               ContractError);
  EXPECT_THROW(analyze<double>(TD({1, 100}), SepNetConfig{}), ContractError);
}

TEST(Forward, ShapesAndDeskFrameCount) {
  const SepNetConfig c = verify::micro_sepnet_config();
  TrainState<double> st(c, 3);
  const Batch b = make_batch(3, Stream::kTrain, 0, 2, 33.0 / 8000.0, 2);
  const auto out = separate_batch(st.params, st.plan, b.mixture);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 33}));
  // 1 s at 8 kHz with the default framing: F = 129, T = 63.
  const Analysis<double> a = analyze<double>(TD({1, 8000}), SepNetConfig{});
  EXPECT_EQ(a.re.shape(), (Shape{1, 129, 63}));
}

TEST(Data, BatchesAreDeterministicSums) {
  const Batch a = make_batch(5, Stream::kValid, 3, 2, 0.05, 2);
  const Batch b = make_batch(5, Stream::kValid, 3, 2, 0.05, 2);
  EXPECT_TRUE(same_bits(a.mixture, b.mixture));
  EXPECT_TRUE(same_bits(a.sources, b.sources));
  const std::size_t N = a.mixture.dim(1);
  for (std::size_t u = 0; u < 2; ++u)
    for (std::size_t n = 0; n < N; ++n)
      EXPECT_EQ(a.mixture[u * N + n],
                a.sources[(u * 2) * N + n] + a.sources[(u * 2 + 1) * N + n]);
  const Batch other = make_batch(5, Stream::kTest, 3, 2, 0.05, 2);
  EXPECT_FALSE(same_bits(a.mixture, other.mixture));
}

TEST(Pit, PermutationSymmetric) {
  Rng rng(4);
  const TD refs = testing::rand_tensor({2, 2, 50}, rng);
  TD est = refs;
  for (double& v : est.data()) v += 0.3 * std::sin(v * 17.0);
  TD swapped(est.shape());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 2; ++s)
      std::copy_n(est.ptr() + (b * 2 + s) * 50, 50,
                  swapped.ptr() + (b * 2 + (1 - s)) * 50);
  PitResult r1, r2;
  const double l1 = pit_si_sdr_loss(constant(est), refs, &r1).value()[0];
  const double l2 = pit_si_sdr_loss(constant(swapped), refs, &r2).value()[0];
  EXPECT_NEAR(l1, l2, 1e-12);
  EXPECT_EQ(r1.assignment[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r2.assignment[0], (std::vector<std::size_t>{1, 0}));
}

TEST(Pit, OracleReachesClamp) {
  const Batch b = make_batch(6, Stream::kTrain, 0, 2, 0.05, 2);
  TD est = b.sources;
  for (double& v : est.data()) v *= 3.0;
  const double loss = pit_si_sdr_loss(constant(est), b.sources).value()[0];
  EXPECT_NEAR(loss, -60.0, 1e-3);
  EXPECT_THROW(pit_si_sdr_loss(constant(est), TD({2, 2, 400})), DomainError);
  EXPECT_THROW(pit_si_sdr_loss(constant(TD({1, 2, 5})), TD({1, 3, 5})), ShapeError);
}

TEST(Pit, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const TD refs = testing::rand_tensor({2, 2, 30}, rng);
  const TD est = testing::rand_tensor({2, 2, 30}, rng);
  const double err = testing::op_grad_error(
      {est}, [&](const std::vector<Var<double>>& x) {
        return pit_si_sdr_loss(x[0], refs);
      });
  EXPECT_LE(err, 1e-6);
}

TEST(Optim, ClipArithmetic) {
  std::vector<TD> g{TD({2}, std::vector<double>{3, 0}), TD({1}, std::vector<double>{4})};
  EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
  EXPECT_EQ(clip_grad_norm(g, 5.0), 1.0);
  EXPECT_EQ(g[0][0], 3.0);
  std::vector<TD> h{TD({2}, std::vector<double>{6, 0}), TD({1}, std::vector<double>{8})};
  EXPECT_DOUBLE_EQ(clip_grad_norm(h, 5.0), 0.5);
  EXPECT_DOUBLE_EQ(h[0][0], 3.0);
  EXPECT_DOUBLE_EQ(h[1][0], 4.0);
  EXPECT_DOUBLE_EQ(global_norm(h), 5.0);
}

TEST(Optim, LrScheduleExamples) {
  EXPECT_EQ(lr_schedule({5, 4, 3}), 1e-3);
  EXPECT_EQ(lr_schedule({3, 3.1, 3.2, 3.3}), 5e-4);
  EXPECT_EQ(lr_schedule({3, 3.1, 3.2, 3.3, 3.4, 3.5, 3.6}), 2.5e-4);
  EXPECT_EQ(lr_schedule({3, 3.1, 3.2, 2.0}), 1e-3);
}

TEST(Optim, AdamWFirstStep) {
  ParamStore<double> s;
  s.add("p", TD({3}, std::vector<double>{1.0, -2.0, 0.5}));
  AdamW<double> opt(s);
  opt.step(s, {TD({3}, std::vector<double>{0.5, -3.0, 0.0})}, 0.1);
  // Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g).
  EXPECT_NEAR(s.entries()[0].value[0], 1.0 - 0.1 * (1.0 + 0.01 * 1.0), 1e-7);
  EXPECT_NEAR(s.entries()[0].value[1], -2.0 - 0.1 * (-1.0 + 0.01 * -2.0), 1e-7);
  EXPECT_DOUBLE_EQ(s.entries()[0].value[2], 0.5 - 0.1 * 0.01 * 0.5);
  EXPECT_THROW(opt.step(s, {}, 0.1), ContractError);
}

TEST(Train, LossDecreasesOnFixedBatch) {
  const SepNetConfig c = small_config();
  TrainState<double> st(c, 8);
  const Batch b = make_batch(8, Stream::kTrain, 0, 1, c.segment_seconds, 2);
  std::vector<double> losses;
  for (int i = 0; i < 21; ++i) losses.push_back(train_step(st, b).loss);
  int violations = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) violations += losses[i] > losses[i - 1];
  EXPECT_LE(violations, 2);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Train, CheckpointRoundTripIsBitwise) {
  SepNetConfig c = small_config();
  c.steps = 3;
  c.steps_per_epoch = 2;
  const auto path = std::filesystem::temp_directory_path() /
                    ("omniscan_ckpt_" + std::to_string(::getpid()));
  TrainState<double> st(c, 9);
  train(st, {path.string(), {}});
  const TrainState<double> back = load_checkpoint<double>(path.string());
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.opt.steps(), 3u);
  EXPECT_EQ(back.schedule.lr(), st.schedule.lr());
  EXPECT_EQ(back.schedule.best(), st.schedule.best());
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    EXPECT_TRUE(same_bits(back.params.entries()[i].value, st.params.entries()[i].value));
    EXPECT_TRUE(same_bits(back.opt.first_moments()[i], st.opt.first_moments()[i]));
    EXPECT_TRUE(same_bits(back.opt.second_moments()[i], st.opt.second_moments()[i]));
  }
  // Resuming continues the same trajectory.
  TrainState<double> resumed = load_checkpoint<double>(path.string());
  c.steps = 5;
  st.plan = ModelPlan(c);
  resumed.plan = ModelPlan(c);
  train(st);
  train(resumed);
  for (std::size_t i = 0; i < st.params.size(); ++i)
    EXPECT_TRUE(same_bits(resumed.params.entries()[i].value, st.params.entries()[i].value));
  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage";
  }
  EXPECT_THROW(load_checkpoint<double>(path.string()), FormatError);
  std::filesystem::remove(path);
}

TEST(Train, RepeatableWithinProcess) {
  SepNetConfig c = small_config();
  c.steps = 4;
  TrainState<double> a(c, 12);
  train(a);
  // A second store lives at other heap addresses; results must not care.
  std::vector<double> spacer(777, 1.0);
  TrainState<double> b(c, 12);
  train(b);
  for (std::size_t i = 0; i < a.params.size(); ++i)
    EXPECT_TRUE(same_bits(a.params.entries()[i].value, b.params.entries()[i].value))
        << a.params.entries()[i].name;
}

TEST(Train, MicroModelGradients) {
  const verify::GradReport r = verify::micro_sepnet_gradients(17);
  EXPECT_LE(r.worst, 1e-4) << r.worst_param;
  EXPECT_GT(r.checked, 0u);
}

TEST(Eval, FitToMixtureKeepsSiSdrAndRecoversScale) {
  const Batch b = make_batch(10, Stream::kTest, 0, 1, 0.05, 2);
  const std::size_t N = b.mixture.dim(1);
  TD est = b.sources;
  for (std::size_t n = 0; n < N; ++n) {
    est[n] = est[n] * 0.2 + 0.01 * std::sin(0.3 * double(n));
    est[N + n] *= -4.0;
  }
  auto wave = [&](const TD& t, std::size_t s) {
    return signal::Waveform{std::vector<double>(t.ptr() + s * N, t.ptr() + (s + 1) * N)};
  };
  std::vector<double> before;
  for (std::size_t s = 0; s < 2; ++s)
    before.push_back(signal::si_sdr(wave(est, s), wave(b.sources, s)));
  fit_to_mixture(est, b.mixture);
  for (std::size_t s = 0; s < 2; ++s)
    EXPECT_NEAR(signal::si_sdr(wave(est, s), wave(b.sources, s)), before[s], 1e-9);
  EXPECT_GT(signal::sdr(wave(est, 1), wave(b.sources, 1)), 20.0);
  // Degenerate estimates are left alone.
  TD zero({1, 2, N});
  fit_to_mixture(zero, b.mixture);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Eval, ScoreUtteranceResolvesPermutation) {
  const Batch b = make_batch(11, Stream::kTest, 0, 1, 0.05, 2);
  const std::size_t N = b.mixture.dim(1);
  auto wave = [&](std::size_t s) {
    return signal::Waveform{
        std::vector<double>(b.sources.ptr() + s * N, b.sources.ptr() + (s + 1) * N)};
  };
  const signal::Waveform mix{std::vector<double>(b.mixture.ptr(), b.mixture.ptr() + N)};
  const auto m = score_utterance("u", {wave(1), wave(0)}, {wave(0), wave(1)}, mix);
  EXPECT_EQ(m.si_sdr, 60.0);
  EXPECT_EQ(m.sdr, 60.0);
  const auto z = score_utterance("u", {mix, mix}, {wave(0), wave(1)}, mix);
  EXPECT_EQ(z.si_sdri, 0.0);
  EXPECT_EQ(z.sdri, 0.0);
}

}  // namespace
}  // namespace omniscan::sepnet
