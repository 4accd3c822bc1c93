#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "vqg/trainer.hpp"

using namespace vqg;

namespace {

std::vector<Instance> tiny_data(std::size_t n = 6, std::uint64_t seed = 2) {
  SynthConfig c;
  c.frames = 6;
  c.regions = 2;
  c.raw_dim = 6;
  c.hyp_words = 4;
  c.sub_words = 4;
  c.instances = n;
  c.seed = seed;
  return synth_dataset(c);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.hidden = 8;
  c.epochs = 2;
  c.batch_size = 4;
  return c;
}

std::map<std::string, std::vector<double>> snapshot(const ModelParams& p) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, v] : p.named()) out[name] = v.data().values();
  return out;
}

Config parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "cfg");
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Schedule, RateDropsAfterEpochTen) {
  const TrainConfig c;
  EXPECT_EQ(c.rate_for_epoch(1), 1e-3);
  EXPECT_EQ(c.rate_for_epoch(10), 1e-3);
  EXPECT_EQ(c.rate_for_epoch(11), 2e-4);
  EXPECT_EQ(c.rate_for_epoch(15), 2e-4);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  // After one bias-corrected step, each entry moves by lr * g / (|g| + eps).
  const auto data = tiny_data(4);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const ModelParams init = ModelParams::init(dims_for(data, cfg.hidden), 9);

  ModelParams probe = init.clone();
  probe.zero_grad();
  for (const auto& inst : data) backward(instance_loss(inst, probe, SupervisionSetting::kFull, cfg));

  const TrainResult r = train_from(init.clone(), data, SupervisionSetting::kFull, cfg);
  double worst = 0.0;
  for (const auto& [name, v] : r.params.named()) {
    const auto& before = init.at(name).data();
    const auto& grad = probe.at(name).grad();
    for (std::size_t i = 0; i < v.data().size(); ++i) {
      const double g = grad[i] / 4.0;
      const double want = before[i] - 1e-3 * g / (std::abs(g) + 1e-8);
      worst = std::max(worst, std::abs(v.data()[i] - want));
    }
  }
  EXPECT_LT(worst, 1e-11);
}

TEST(Train, ZeroEpochsAndZeroRateKeepParameters) {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  const ModelParams init = ModelParams::init(dims_for(data, cfg.hidden), cfg.seed);
  cfg.epochs = 0;
  TrainResult r = train(data, SupervisionSetting::kFullSelf, cfg);
  EXPECT_EQ(snapshot(r.params), snapshot(init));
  EXPECT_TRUE(r.epochs.empty());

  cfg.epochs = 2;
  cfg.learning_rate = 0.0;
  cfg.late_learning_rate = 0.0;
  r = train(data, SupervisionSetting::kFullSelf, cfg);
  EXPECT_EQ(snapshot(r.params), snapshot(init));
  EXPECT_EQ(r.epochs.size(), 2u);
}

TEST(Train, LogsFollowTheSetting) {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  const auto keys = [&](SupervisionSetting s) {
    const nlohmann::json j = to_json(train(data, s, cfg).epochs.front());
    return std::make_pair(j.contains("loss_span"), j.contains("loss_self"));
  };
  EXPECT_EQ(keys(SupervisionSetting::kQaOnly), std::make_pair(false, false));
  EXPECT_EQ(keys(SupervisionSetting::kQaSelf), std::make_pair(false, true));
  EXPECT_EQ(keys(SupervisionSetting::kFull), std::make_pair(true, false));
  EXPECT_EQ(keys(SupervisionSetting::kFullSelf), std::make_pair(true, true));
}

TEST(Train, BottomBranchRunsOnlyWithSelfSupervision) {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  for (auto s : {SupervisionSetting::kQaOnly, SupervisionSetting::kFull}) {
    reset_fs_branch_invocations();
    const TrainResult r = train(data, s, cfg);
    infer(data, r.params, s, cfg);
    EXPECT_EQ(fs_branch_invocations(), 0u) << to_string(s);
  }
  reset_fs_branch_invocations();
  train(data, SupervisionSetting::kQaSelf, cfg);
  EXPECT_EQ(fs_branch_invocations(), data.size() * cfg.epochs);
}

TEST(Train, StepTotalsCombineComponents) {
  const auto data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.loss.lambda1 = 0.7;
  cfg.loss.lambda2 = 0.3;
  const TrainResult r = train(data, SupervisionSetting::kFullSelf, cfg);
  ASSERT_EQ(r.steps.size(), 4u);  // 6 instances, batch 4, two epochs
  EXPECT_EQ(r.steps[1].instances.size(), 2u);
  double epoch_total = 0.0;
  for (std::size_t s = 0; s < 2; ++s) {
    double sum = 0.0;
    for (const auto& part : r.steps[s].instances) {
      EXPECT_NEAR(part.total, part.qa + 0.7 * *part.span + 0.3 * *part.self, 1e-14);
      sum += part.total;
      epoch_total += part.total;
    }
    EXPECT_NEAR(r.steps[s].total, sum / static_cast<double>(r.steps[s].instances.size()),
                1e-14);
  }
  EXPECT_NEAR(r.epochs[0].total, epoch_total / 6.0, 1e-14);
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto data = tiny_data(12);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 8;
  const TrainResult a = train(data, SupervisionSetting::kFullSelf, cfg);
  const TrainResult b = train(data, SupervisionSetting::kFullSelf, cfg);
  EXPECT_NEAR(a.epochs[0].total, b.epochs[0].total, 1e-12);
  EXPECT_EQ(snapshot(a.params), snapshot(b.params));
  EXPECT_LT(a.epochs.back().total, a.epochs.front().total);
  cfg.seed = 2;
  EXPECT_NE(train(data, SupervisionSetting::kFullSelf, cfg).epochs[0].total, a.epochs[0].total);
}

TEST(Train, RejectsUnusableData) {
  auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  EXPECT_THROW(train({}, SupervisionSetting::kQaOnly, cfg), ValidationError);
  data[3].qa.gt_span.reset();
  EXPECT_THROW(train(data, SupervisionSetting::kFull, cfg), ValidationError);
  EXPECT_NO_THROW(train(data, SupervisionSetting::kQaSelf, cfg));
  TrainConfig bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(train(tiny_data(), SupervisionSetting::kQaOnly, bad), ValidationError);
  const ModelParams wrong = ModelParams::init(ModelDims{7, 6, 8}, 1);
  EXPECT_THROW(train_from(wrong.clone(), tiny_data(), SupervisionSetting::kQaOnly, cfg),
               ValidationError);
}

TEST(Infer, SpanSourceFollowsSetting) {
  const auto data = tiny_data();
  const TrainConfig cfg = tiny_config();
  const ModelParams p = train(data, SupervisionSetting::kFullSelf, cfg).params;
  const auto qa = infer(data, p, SupervisionSetting::kQaOnly, cfg);
  const auto full = infer(data, p, SupervisionSetting::kFull, cfg);
  ASSERT_EQ(qa.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(qa[i].predicted_answer, full[i].predicted_answer);
    EXPECT_EQ(qa[i].answer_scores, full[i].answer_scores);
    EXPECT_EQ(qa[i].span, ground(qa[i].scores, cfg.wsqg));
    EXPECT_EQ(full[i].span, full[i].decoded_span);
    EXPECT_EQ(qa[i].scores.size(), 6u);
  }
  EXPECT_EQ(to_eval_records(qa).size(), data.size());
  auto missing = qa;
  missing[0].gt_span.reset();
  EXPECT_THROW(to_eval_records(missing), ValidationError);
}

TEST(Config, ParsesKnownKeys) {
  const Config c = parse(
      "# comment\n"
      "frames = 12\n"
      "hidden=16   # trailing\n"
      "\n"
      "lambda2 = 0.5\n"
      "scoring = sum\n"
      "word_similarity = raw\n");
  EXPECT_EQ(c.synth.frames, 12u);
  EXPECT_EQ(c.train.hidden, 16u);
  EXPECT_EQ(c.train.loss.lambda2, 0.5);
  EXPECT_EQ(c.train.wsqg.scoring, ProposalScoring::kSum);
  EXPECT_EQ(c.train.model.word_similarity, SimilarityNorm::kRaw);
  EXPECT_EQ(c.train.model.frame_similarity, SimilarityNorm::kScaled);

  const Config round = parse(describe_config(c));
  EXPECT_EQ(describe_config(round), describe_config(c));
}

TEST(Config, RejectsWithLineNumbers) {
  EXPECT_EQ(config_error("frames = 8\nbogus = 1\n").rfind("cfg:2: unknown key 'bogus'", 0), 0u);
  EXPECT_EQ(config_error("seed = 1\nseed = 2\n").rfind("cfg:2: duplicate key", 0), 0u);
  EXPECT_EQ(config_error("hidden = many\n").rfind("cfg:1: invalid value", 0), 0u);
  EXPECT_EQ(config_error("hidden = -3\n").rfind("cfg:1:", 0), 0u);
  EXPECT_EQ(config_error("epochs\n").rfind("cfg:1: expected key = value", 0), 0u);
  EXPECT_EQ(config_error("scoring = max\n").rfind("cfg:1:", 0), 0u);
  EXPECT_EQ(config_error("frame_similarity = cosine\n").rfind("cfg:1:", 0), 0u);
  EXPECT_NE(config_error("lambda1 = -1\n"), "");
  EXPECT_NE(config_error("proposal_scale = 1\n"), "");
  EXPECT_NE(config_error("min_span = 9\nmax_span = 4\n"), "");
  EXPECT_THROW(load_config("/nonexistent/vqg.cfg"), ValidationError);
}
