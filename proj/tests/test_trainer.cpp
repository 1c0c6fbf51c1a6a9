#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ptp/trainer.hpp"

using namespace ptp;

namespace {

ParamStore<double> two_params(std::vector<double> a, std::vector<double> b) {
  ParamStore<double> ps;
  Rng rng(1);
  auto x = ps.create("x", 1, static_cast<int>(a.size()), Init::kZero, rng);
  auto y = ps.create("y", 1, static_cast<int>(b.size()), Init::kZero, rng);
  x.values() = std::move(a);
  y.values() = std::move(b);
  return ps;
}

void set_grad(ParamStore<double>& ps, const std::string& name, const std::vector<double>& g) {
  auto t = ps.get(name);
  auto span = t.grad();
  ASSERT_EQ(span.size(), g.size());
  std::copy(g.begin(), g.end(), span.begin());
}

const std::vector<std::string>& small_corpus() {
  static const std::vector<std::string> c = {"the cat sat on the mat", "a dog ran to the park",
                                             "birds sing in the morning", "rain fell all night"};
  return c;
}

TrainConfig tiny_run(const std::string& model) {
  TrainConfig cfg;
  cfg.model = model;
  cfg.preset = model == "ptp" ? "ptp-tiny" : "ar-tiny";
  cfg.steps = 3;
  cfg.batch = 2;
  cfg.prefix = "";
  cfg.ar_max_patches = 8;
  return cfg;
}

}  // namespace

TEST(AdamW, FirstStepByHand) {
  auto ps = two_params({1.0, -2.0}, {3.0});
  set_grad(ps, "x", {0.5, 0.0});
  set_grad(ps, "y", {-4.0});
  OptimState st;
  adamw_step(ps, st, 0.1);
  // step 1: m_hat = g and v_hat = g^2, so the adaptive part is lr * g / (|g| + eps)
  EXPECT_NEAR(ps.get("x").values()[0], 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(ps.get("x").values()[1], -2.0 + 0.1 * 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(ps.get("y").values()[0], 3.0 - 0.1 * 0.01 * 3.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, SecondStepUsesBiasCorrection) {
  auto ps = two_params({0.0}, {0.0});
  OptimState st;
  st.weight_decay = 0.0;
  set_grad(ps, "x", {1.0});
  adamw_step(ps, st, 1.0);
  ps.zero_grad();
  set_grad(ps, "x", {3.0});
  adamw_step(ps, st, 1.0);
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0;
  const double v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
  const double m_hat = m / (1 - 0.81);
  const double v_hat = v / (1 - 0.999 * 0.999);
  const double expected = -1.0 / (1.0 + 1e-8) - m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(ps.get("x").values()[0], expected, 1e-12);
  EXPECT_EQ(ps.get("y").values()[0], 0.0);
}

TEST(AdamW, NonFiniteGradientIsAnError) {
  auto ps = two_params({1.0}, {1.0});
  set_grad(ps, "y", {std::numeric_limits<double>::quiet_NaN()});
  OptimState st;
  EXPECT_THROW(adamw_step(ps, st, 0.1), Error);
  EXPECT_EQ(ps.get("x").values()[0], 1.0);
  set_grad(ps, "y", {std::numeric_limits<double>::infinity()});
  EXPECT_THROW(adamw_step(ps, st, 0.1), Error);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  auto ps = two_params({0.0, 0.0}, {0.0});
  set_grad(ps, "x", {3.0, 0.0});
  set_grad(ps, "y", {4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.get("x").grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(ps.get("y").grad()[0], 0.8, 1e-12);
  EXPECT_NEAR(clip_grad_norm(ps, 10.0), 1.0, 1e-12);
  EXPECT_NEAR(ps.get("y").grad()[0], 0.8, 1e-12);
}

TEST(Schedule, CosineValues) {
  Schedule s{1e-3, 1e-5, 10, 110, DecayShape::kCosine};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, 5), 5e-4, 1e-18);
  EXPECT_NEAR(lr_at(s, 10), 1e-3, 1e-18);
  EXPECT_NEAR(lr_at(s, 60), (1e-3 + 1e-5) / 2, 1e-15);
  EXPECT_NEAR(lr_at(s, 110), 1e-5, 1e-18);
  for (int t = 11; t <= 110; ++t) EXPECT_LE(lr_at(s, t), lr_at(s, t - 1));
}

TEST(Schedule, LinearValuesAndRange) {
  Schedule s{2e-3, 0.0, 0, 100, DecayShape::kLinear};
  EXPECT_NEAR(lr_at(s, 0), 2e-3, 1e-18);
  EXPECT_NEAR(lr_at(s, 25), 1.5e-3, 1e-15);
  EXPECT_EQ(lr_at(s, 100), 0.0);
  EXPECT_THROW(lr_at(s, -1), Error);
  EXPECT_THROW(lr_at(s, 101), Error);
}

TEST(StabilityMonitor, PlateauFlipsOnceOnFlatTrace) {
  StabilityMonitor mon(50, 3.0, 200, 1e-5);
  int flips = 0;
  bool prev = false;
  int first_flag = -1;
  for (int i = 0; i < 1000; ++i) {
    const double loss = i < 500 ? 5.0 - 0.008 * i : 1.0;
    const auto f = mon.observe(loss);
    if (f.plateau != prev) ++flips;
    if (f.plateau && first_flag < 0) first_flag = i;
    prev = f.plateau;
  }
  EXPECT_EQ(flips, 1);
  EXPECT_TRUE(prev);
  // slope must fall to >= -1e-5 only once the window is mostly flat
  EXPECT_GT(first_flag, 500);
  EXPECT_LT(first_flag, 700);
}

TEST(StabilityMonitor, SpikeOnOutlierOnly) {
  StabilityMonitor mon(50, 3.0, 200, 1e-5);
  Rng rng(3);
  int spikes = 0;
  for (int i = 0; i < 50; ++i) spikes += mon.observe(2.0 + 0.01 * rng.normal()).spike;
  EXPECT_EQ(spikes, 0);
  EXPECT_TRUE(mon.observe(2.5).spike);
  EXPECT_FALSE(mon.observe(2.0).spike);
}

TEST(Config, ParseSkipsCommentsAndBlankLines) {
  const auto kv = parse_kv_config("# header\n\nsteps = 12  # trailing\n  prefix =  hello world \n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"steps", "12"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"prefix", "hello world"}));
  EXPECT_THROW(parse_kv_config("steps 12\n"), Error);
  EXPECT_THROW(parse_kv_config(" = 3\n"), Error);
}

TEST(Config, DumpParsesBackToSameConfig) {
  TrainConfig a;
  a.set("peak_lr", "3e-4");
  a.set("span_masking", "false");
  a.set("seed", "18446744073709551615");
  a.set("decay", "linear");
  TrainConfig b;
  b.apply(parse_kv_config(a.dump()));
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(b.peak_lr, 3e-4);
  EXPECT_FALSE(b.span_masking);
  EXPECT_EQ(b.seed, 18446744073709551615ull);
  EXPECT_NE(a.dump().find("min_lr = 1e-05\n"), std::string::npos);
}

TEST(Config, RejectsBadKeysAndValues) {
  TrainConfig c;
  EXPECT_THROW(c.set("no_such_key", "1"), Error);
  EXPECT_THROW(c.set("steps", "12x"), Error);
  EXPECT_THROW(c.set("steps", ""), Error);
  EXPECT_THROW(c.set("span_masking", "yes"), Error);
  EXPECT_THROW(c.set("peak_lr", "fast"), Error);
  c.decay = "step";
  EXPECT_THROW(c.schedule(), Error);
}

TEST(Config, ScheduleFromConfig) {
  TrainConfig c;
  c.steps = 200;
  c.warmup_frac = 0.05;
  const auto s = c.schedule();
  EXPECT_EQ(s.warmup_steps, 10);
  EXPECT_EQ(s.total_steps, 200);
  EXPECT_EQ(s.shape, DecayShape::kCosine);
}

TEST(Data, FitTokensDropsWholeWords) {
  const auto vocab = train_bpe(small_corpus(), 280);
  const std::string text = "the cat sat on the mat and the dog ran to the park";
  const auto fitted = fit_tokens(text, vocab, 6);
  EXPECT_LE(encode(fitted, vocab).size(), 6u);
  EXPECT_EQ(text.rfind(fitted, 0), 0u);
  EXPECT_TRUE(fitted.size() == text.size() || text[fitted.size()] == ' ');
  EXPECT_EQ(fit_tokens("short", vocab, 40), "short");
}

TEST(Data, ArSegments) {
  EXPECT_EQ(ar_segments("left side\tright side"), (std::pair<std::string, std::string>{"left side", "right side"}));
  EXPECT_EQ(ar_segments("a b c d e"), (std::pair<std::string, std::string>{"a b c", "d e"}));
  EXPECT_EQ(ar_segments("single"), (std::pair<std::string, std::string>{"single", ""}));
}

TEST(Pretrain, ZeroStepsReturnsInitialization) {
  const auto vocab = train_bpe(small_corpus(), 300);
  const auto atlas = builtin_test_atlas();
  for (const std::string model : {"ptp", "ar"}) {
    auto cfg = tiny_run(model);
    cfg.steps = 0;
    const auto res = run_pretraining(small_corpus(), cfg, vocab, atlas);
    EXPECT_TRUE(res.log.empty());
    const auto init = model == "ptp" ? PTPModel<float>(cfg.ptp_config(vocab), cfg.seed).to_checkpoint(0)
                                     : ARModel<float>(cfg.ar_config(vocab), cfg.seed).to_checkpoint(0);
    EXPECT_EQ(res.final_checkpoint, init) << model;
  }
}

TEST(Pretrain, RunsAreBitReproducible) {
  const auto vocab = train_bpe(small_corpus(), 300);
  const auto atlas = builtin_test_atlas();
  for (const std::string model : {"ptp", "ar"}) {
    const auto cfg = tiny_run(model);
    const auto a = run_pretraining(small_corpus(), cfg, vocab, atlas);
    const auto b = run_pretraining(small_corpus(), cfg, vocab, atlas);
    ASSERT_EQ(a.log.size(), 3u);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      EXPECT_EQ(format_metrics(a.log[i]), format_metrics(b.log[i]));
      EXPECT_TRUE(std::isfinite(a.log[i].total));
    }
    EXPECT_EQ(a.final_checkpoint, b.final_checkpoint);
    auto other = cfg;
    other.seed = cfg.seed + 1;
    EXPECT_NE(run_pretraining(small_corpus(), other, vocab, atlas).final_checkpoint, a.final_checkpoint);
  }
}

TEST(Pretrain, WritesMetricsAndCheckpoints) {
  const auto vocab = train_bpe(small_corpus(), 300);
  const auto atlas = builtin_test_atlas();
  auto cfg = tiny_run("ptp");
  cfg.steps = 4;
  cfg.ckpt_every = 2;
  const auto dir = (std::filesystem::temp_directory_path() / "ptp_trainer_out").string();
  std::filesystem::remove_all(dir);
  std::ostringstream progress;
  const auto res = run_pretraining(small_corpus(), cfg, vocab, atlas, PretrainIO{dir, &progress, 2});
  std::istringstream metrics(read_text_file(dir + "/metrics.tsv"));
  std::string line;
  std::getline(metrics, line);
  EXPECT_EQ(line, metrics_header());
  for (const auto& row : res.log) {
    std::getline(metrics, line);
    EXPECT_EQ(line, format_metrics(row));
  }
  EXPECT_TRUE(std::filesystem::exists(dir + "/step_2.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/step_4.ckpt"));
  const auto final_ck = load_checkpoint(dir + "/final.ckpt", "PTPC");
  EXPECT_EQ(final_ck, res.final_checkpoint);
  EXPECT_EQ(final_ck.step(), 4);
  EXPECT_EQ(progress.str(), format_metrics(res.log[1]) + "\n" + format_metrics(res.log[3]) + "\n");
  std::filesystem::remove_all(dir);
}

TEST(Pretrain, AbortsAfterConsecutiveNonFiniteLosses) {
  const auto vocab = train_bpe(small_corpus(), 300);
  const auto atlas = builtin_test_atlas();
  auto cfg = tiny_run("ptp");
  cfg.steps = 50;
  cfg.peak_lr = 1e30;
  cfg.min_lr = 1e30;
  cfg.warmup_frac = 0;
  cfg.clip_norm = 0;
  cfg.abort_after = 2;
  const auto dir = (std::filesystem::temp_directory_path() / "ptp_trainer_abort").string();
  std::filesystem::remove_all(dir);
  const auto res = run_pretraining(small_corpus(), cfg, vocab, atlas, PretrainIO{dir, nullptr, 100});
  ASSERT_TRUE(res.aborted);
  ASSERT_GE(res.log.size(), 2u);
  EXPECT_LT(res.log.size(), 50u);
  EXPECT_FALSE(std::isfinite(res.log.back().total));
  EXPECT_FALSE(std::isfinite(res.log[res.log.size() - 2].total));
  EXPECT_EQ(res.diagnostic_checkpoint, dir + "/diagnostic.ckpt");
  EXPECT_EQ(load_checkpoint(res.diagnostic_checkpoint, "PTPC"), res.final_checkpoint);
  std::filesystem::remove_all(dir);
}

TEST(Pretrain, RejectsBadInputs) {
  const auto vocab = train_bpe(small_corpus(), 300);
  const auto atlas = builtin_test_atlas();
  auto cfg = tiny_run("ptp");
  EXPECT_THROW(run_pretraining({}, cfg, vocab, atlas), Error);
  cfg.batch = 0;
  EXPECT_THROW(run_pretraining(small_corpus(), cfg, vocab, atlas), Error);
  cfg = tiny_run("rnn");
  EXPECT_THROW(run_pretraining(small_corpus(), cfg, vocab, atlas), Error);
}
