#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "test_util.hpp"
#include "vqg/data.hpp"
#include "vqg/errors.hpp"

using namespace vqg;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

SynthConfig tiny_synth(std::uint64_t seed = 3) {
  SynthConfig c;
  c.frames = 8;
  c.regions = 2;
  c.raw_dim = 6;
  c.instances = 4;
  c.seed = seed;
  return c;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

// Mean over answer words of the gt hypothesis: the answer signature plus noise.
std::vector<double> answer_direction(const Instance& inst, const SynthConfig& cfg) {
  std::vector<double> dir(cfg.raw_dim, 0.0);
  const std::size_t k = inst.qa.gt_index;
  for (std::size_t l = cfg.hyp_words / 2; l < cfg.hyp_words; ++l) {
    for (std::size_t c = 0; c < cfg.raw_dim; ++c) {
      dir[c] += inst.hypotheses.at({k, l, c});
    }
  }
  return dir;
}

double region_projection(const Instance& inst, std::size_t t, std::size_t o,
                         const std::vector<double>& dir) {
  double s = 0.0;
  for (std::size_t c = 0; c < dir.size(); ++c) s += inst.video.at({t, o, c}) * dir[c];
  return s;
}

// Mean projection inside the planted span minus the mean outside.
double span_margin(const SynthConfig& cfg) {
  double total = 0.0;
  for (const Instance& inst : synth_dataset(cfg)) {
    const auto dir = answer_direction(inst, cfg);
    double in = 0.0, out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      for (std::size_t o = 0; o < cfg.regions; ++o) {
        const double p = region_projection(inst, t, o, dir);
        if (inst.qa.gt_span->contains(t)) {
          in += p, ++n_in;
        } else {
          out += p, ++n_out;
        }
      }
    }
    total += in / static_cast<double>(n_in) - (n_out ? out / static_cast<double>(n_out) : 0.0);
  }
  return total / static_cast<double>(cfg.instances);
}

PredictionRecord sample_record() {
  PredictionRecord r;
  r.id = "v1";
  r.answer_scores = {0.1, -0.2, 0.3, 0.0, 1.5};
  r.predicted_answer = 4;
  r.gt_answer = 2;
  r.p_st = {0.5, 0.25, 0.25};
  r.p_ed = {0.2, 0.2, 0.6};
  r.scores = {0.9, 0.4, 0.1};
  r.decoded_span = {0, 2};
  r.span = {0, 0};
  r.gt_span = Span{1, 2};
  return r;
}

}  // namespace

TEST(FeatureFile, RoundTrip) {
  test::TempDir dir("feat");
  std::mt19937_64 rng(1);
  const Tensor t = test::random_tensor({3, 2, 5}, rng);
  write_feature_file(dir / "a.bin", t);
  EXPECT_EQ(read_feature_file(dir / "a.bin"), t);
  write_feature_file(dir / "empty.bin", Tensor({0, 4}));
  EXPECT_EQ(read_feature_file(dir / "empty.bin").shape(), (Shape{0, 4}));
  // magic + version + rank + 3 dims + 30 values
  EXPECT_EQ(fs::file_size(dir / "a.bin"), 4u + 4 + 4 + 3 * 8 + 30 * 8);
}

TEST(FeatureFile, RejectsCorruptPayloads) {
  test::TempDir dir("feat");
  write_feature_file(dir / "a.bin", Tensor::full({4, 3}, 1.0));
  const auto size = fs::file_size(dir / "a.bin");

  fs::copy_file(dir / "a.bin", dir / "short.bin");
  fs::resize_file(dir / "short.bin", size - 8);
  const std::string truncated = error_of([&] { read_feature_file(dir / "short.bin"); });
  EXPECT_NE(truncated.find("short.bin"), std::string::npos);
  EXPECT_NE(truncated.find("[4x3] (12 values) but payload holds 11"), std::string::npos)
      << truncated;

  fs::copy_file(dir / "a.bin", dir / "long.bin");
  std::ofstream(dir / "long.bin", std::ios::app | std::ios::binary) << "x";
  EXPECT_NE(error_of([&] { read_feature_file(dir / "long.bin"); }).find("payload longer"),
            std::string::npos);

  std::ofstream(dir / "magic.bin", std::ios::binary) << "NOPE0000";
  EXPECT_NE(error_of([&] { read_feature_file(dir / "magic.bin"); }).find("magic"),
            std::string::npos);
  EXPECT_NE(error_of([&] { read_feature_file(dir / "none.bin"); }).find("none.bin"),
            std::string::npos);

  write_feature_file(dir / "nan.bin", Tensor::vector({1.0, std::nan("")}));
  EXPECT_NE(error_of([&] { read_feature_file(dir / "nan.bin"); }).find("non-finite"),
            std::string::npos);
}

TEST(QaJson, ParseAndReject) {
  nlohmann::json j = {{"question", "why?"},
                      {"answers", {"a", "b", "c", "d", "e"}},
                      {"gt_index", 3}};
  QaMeta qa = parse_qa_json(j, "q.json");
  EXPECT_EQ(qa.gt_index, 3u);
  EXPECT_FALSE(qa.gt_span.has_value());
  j["gt_span"] = {2, 5};
  qa = parse_qa_json(j, "q.json");
  EXPECT_EQ(*qa.gt_span, (Span{2, 5}));
  EXPECT_EQ(parse_qa_json(to_json(qa), "again").gt_span, qa.gt_span);

  auto rejected = [&](auto mutate) {
    nlohmann::json k = j;
    mutate(k);
    const std::string msg = error_of([&] { parse_qa_json(k, "q.json"); });
    return msg.rfind("q.json: ", 0) == 0;
  };
  EXPECT_TRUE(rejected([](auto& k) { k["gt_index"] = 5; }));
  EXPECT_TRUE(rejected([](auto& k) { k["gt_index"] = -1; }));
  EXPECT_TRUE(rejected([](auto& k) { k["answers"].erase(0); }));
  EXPECT_TRUE(rejected([](auto& k) { k.erase("question"); }));
  EXPECT_TRUE(rejected([](auto& k) { k["gt_span"] = {5, 2}; }));
  EXPECT_TRUE(rejected([](auto& k) { k["gt_span"] = {-1, 2}; }));
}

TEST(Alignment, NearestTwoStarts) {
  const SubtitleTrack track({{0, {"a"}}, {4, {"b"}}, {10, {"c"}}, {16, {"d"}}}, 24);
  const auto pairs = align_subtitles(track, FrameGrid{12, 0.5});
  ASSERT_EQ(pairs.size(), 12u);
  using P = std::array<std::size_t, 2>;
  EXPECT_EQ(pairs[0], (P{0, 1}));
  EXPECT_EQ(pairs[2], (P{0, 1}));  // midpoint 5: starts 0 and 10 tie, earlier wins
  EXPECT_EQ(pairs[3], (P{1, 2}));
  EXPECT_EQ(pairs[11], (P{2, 3}));

  const SubtitleTrack single({{3, {"only"}}}, 8);
  for (const auto& p : align_subtitles(single, FrameGrid{4, 0.5})) EXPECT_EQ(p, (P{0, 0}));
  EXPECT_TRUE(align_subtitles(SubtitleTrack({}, 8), FrameGrid{4, 0.5}).empty());
}

TEST(Finalize, BuildsAlignedFeaturesAndMasks) {
  const auto data = synth_dataset(tiny_synth());
  for (const Instance& inst : data) {
    const RawFeatures& f = inst.features;
    const std::size_t words = inst.subtitle_words.dim(1);
    EXPECT_EQ(f.subtitles.shape(), (Shape{8, 2 * words, 6}));
    const auto pairs = align_subtitles(inst.track, inst.grid);
    for (std::size_t t = 0; t < 8; ++t) {
      for (std::size_t w = 0; w < words; ++w) {
        for (std::size_t c = 0; c < 6; ++c) {
          ASSERT_EQ(f.subtitles.at({t, w, c}), inst.subtitle_words.at({pairs[t][0], w, c}));
          ASSERT_EQ(f.subtitles.at({t, words + w, c}),
                    inst.subtitle_words.at({pairs[t][1], w, c}));
        }
      }
    }
    ASSERT_EQ(inst.proposal_masks.size(), inst.proposals.size());
    ASSERT_EQ(f.num_proposals(), inst.proposals.size());
    for (std::size_t j = 0; j < inst.proposals.size(); ++j) {
      EXPECT_EQ(inst.proposal_masks[j], span_mask(*inst.proposals[j].span, 8));
    }
  }
}

TEST(Finalize, RejectsMismatchedShapes) {
  Instance inst = synth_dataset(tiny_synth())[0];
  Instance bad = inst;
  bad.grid.frames = 9;
  EXPECT_NE(error_of([&] { finalize_instance(bad, {}); }).find("synth-00000"), std::string::npos);
  bad = inst;
  bad.hypotheses = Tensor({4, 6, 6});
  EXPECT_THROW(finalize_instance(bad, {}), ValidationError);
  bad = inst;
  bad.qa.gt_span = Span{3, 8};
  EXPECT_THROW(finalize_instance(bad, {}), ValidationError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  test::TempDir dir("ds");
  const auto data = synth_dataset(tiny_synth());
  save_dataset(dir.path(), data);
  const auto back = load_dataset(dir.path());
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].features.video, data[i].features.video);
    EXPECT_EQ(back[i].features.subtitles, data[i].features.subtitles);
    EXPECT_EQ(back[i].features.proposals, data[i].features.proposals);
    EXPECT_EQ(back[i].qa.gt_span, data[i].qa.gt_span);
    EXPECT_EQ(back[i].proposal_masks, data[i].proposal_masks);
  }
  EXPECT_EQ(resolve_manifest(dir.path()), dir / "manifest.json");
  EXPECT_EQ(load_dataset(dir / "manifest.json").size(), data.size());
}

TEST(Dataset, GtSpanIsOptional) {
  test::TempDir dir("ds");
  save_dataset(dir.path(), synth_dataset(tiny_synth()));
  auto qa = read_json(dir / "synth-00001.qa.json");
  qa.erase("gt_span");
  write_json(dir / "synth-00001.qa.json", qa);
  const auto data = load_dataset(dir.path());
  EXPECT_FALSE(data[1].qa.gt_span.has_value());
  EXPECT_TRUE(data[0].qa.gt_span.has_value());
}

TEST(Dataset, EmptyManifestWarns) {
  test::TempDir dir("ds");
  write_json(dir / "manifest.json", nlohmann::json::array());
  testing::internal::CaptureStderr();
  EXPECT_TRUE(load_dataset(dir.path()).empty());
  EXPECT_NE(testing::internal::GetCapturedStderr().find("warning"), std::string::npos);
}

TEST(Dataset, ErrorsNameTheManifestAndInstance) {
  test::TempDir dir("ds");
  save_dataset(dir.path(), synth_dataset(tiny_synth()));
  const auto manifest = read_json(dir / "manifest.json");
  auto load_with = [&](auto mutate) {
    nlohmann::json m = manifest;
    mutate(m);
    write_json(dir / "manifest.json", m);
    return error_of([&] { load_dataset(dir.path()); });
  };
  std::string msg = load_with([](auto& m) { m[2].erase("qa_feat"); });
  EXPECT_NE(msg.find("manifest.json: instance 'synth-00002': missing key 'qa_feat'"),
            std::string::npos)
      << msg;
  msg = load_with([](auto& m) { m[1]["T"] = 9; });
  EXPECT_NE(msg.find("synth-00001"), std::string::npos) << msg;
  msg = load_with([](auto& m) { m[0]["video_feat"] = "missing.bin"; });
  EXPECT_NE(msg.find("missing.bin"), std::string::npos) << msg;
  msg = load_with([](auto& m) { m = nlohmann::json::object(); });
  EXPECT_NE(msg.find("must be a JSON list"), std::string::npos) << msg;

  write_json(dir / "manifest.json", manifest);
  fs::resize_file(dir / "synth-00003.subs.bin", fs::file_size(dir / "synth-00003.subs.bin") - 1);
  msg = error_of([&] { load_dataset(dir.path()); });
  EXPECT_NE(msg.find("synth-00003.subs.bin"), std::string::npos) << msg;

  std::ofstream(dir / "manifest.json") << "[{";
  EXPECT_NE(error_of([&] { load_dataset(dir.path()); }).find("malformed JSON"),
            std::string::npos);
  EXPECT_THROW(load_dataset(dir / "nowhere"), ValidationError);
}

TEST(Dataset, FixtureWithBadSubtitleTrack) {
  const fs::path fixtures = VQG_FIXTURES;
  const std::string msg = error_of([&] { load_dataset(fixtures / "bad_subs"); });
  EXPECT_NE(msg.find("clip.subs.tsv:2:"), std::string::npos) << msg;
}

TEST(Synth, DeterministicPerSeed) {
  const auto a = synth_dataset(tiny_synth(5));
  const auto b = synth_dataset(tiny_synth(5));
  const auto c = synth_dataset(tiny_synth(6));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].features.video, b[i].features.video);
    EXPECT_EQ(a[i].qa.gt_span, b[i].qa.gt_span);
  }
  EXPECT_NE(a[0].features.video, c[0].features.video);
}

TEST(Synth, SpanBoundsAndLabels) {
  SynthConfig cfg = tiny_synth();
  cfg.instances = 200;
  cfg.frames = 16;
  cfg.min_span = 3;
  cfg.max_span = 5;
  std::array<int, kNumAnswers> counts{};
  for (const Instance& inst : synth_dataset(cfg)) {
    EXPECT_GE(inst.qa.gt_span->length(), 3u);
    EXPECT_LE(inst.qa.gt_span->length(), 5u);
    EXPECT_LT(inst.qa.gt_span->ed, 16u);
    ++counts[inst.qa.gt_index];
  }
  for (int n : counts) EXPECT_GT(n, 20);

  cfg.min_span = 6;
  EXPECT_THROW(synth_dataset(cfg), ValidationError);
  cfg = tiny_synth();
  cfg.noise = -1.0;
  EXPECT_THROW(synth_dataset(cfg), ValidationError);
}

TEST(Synth, NoSignalLeavesSpanUnmarked) {
  SynthConfig cfg = tiny_synth();
  cfg.instances = 400;
  cfg.signal = 0.0;
  // Without signal the projection margin is pure noise around zero.
  EXPECT_LT(std::abs(span_margin(cfg)), 1.0);
  cfg.signal = 2.0;
  EXPECT_GT(span_margin(cfg), 10.0);
}

TEST(Synth, MarginGrowsWithSignal) {
  SynthConfig cfg = tiny_synth();
  cfg.instances = 50;
  double prev = -1e9;
  for (double s : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    cfg.signal = s;
    const double m = span_margin(cfg);
    EXPECT_GT(m, prev) << "signal " << s;
    prev = m;
  }
}

TEST(Synth, NoiselessLinearProbeSeparatesSpan) {
  SynthConfig cfg = tiny_synth();
  cfg.instances = 100;
  cfg.noise = 0.0;
  cfg.signal = 20.0;
  for (const Instance& inst : synth_dataset(cfg)) {
    // Without noise the answer words are exact copies of the signature.
    auto dir = answer_direction(inst, cfg);
    for (double& v : dir) v /= static_cast<double>(cfg.hyp_words - cfg.hyp_words / 2);
    double norm2 = 0.0;
    for (double v : dir) norm2 += v * v;
    const double threshold = cfg.signal * norm2 / 2.0;
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      for (std::size_t o = 0; o < cfg.regions; ++o) {
        ASSERT_EQ(inst.qa.gt_span->contains(t), region_projection(inst, t, o, dir) > threshold)
            << inst.id << " frame " << t;
      }
    }
  }
}

TEST(Predictions, RoundTripAndValidation) {
  test::TempDir dir("pred");
  PredictionRecord a = sample_record();
  PredictionRecord b = sample_record();
  b.id = "v2";
  b.gt_span.reset();
  write_predictions(dir / "p.jsonl", {a, b});
  EXPECT_EQ(read_predictions(dir / "p.jsonl"), (std::vector<PredictionRecord>{a, b}));

  write_predictions(dir / "none.jsonl", {});
  EXPECT_TRUE(read_predictions(dir / "none.jsonl").empty());

  PredictionRecord bad = sample_record();
  bad.scores.push_back(0.3);
  const std::string msg = error_of([&] { write_predictions(dir / "x.jsonl", {bad}); });
  EXPECT_NE(msg.find("trace length 4 != grid T 3"), std::string::npos) << msg;
  bad = sample_record();
  bad.span = {1, 3};
  EXPECT_THROW(write_predictions(dir / "x.jsonl", {bad}), ValidationError);

  std::ofstream(dir / "broken.jsonl") << to_json(a).dump() << "\n{\"id\": 3}\n";
  EXPECT_EQ(error_of([&] { read_predictions(dir / "broken.jsonl"); })
                .find((dir / "broken.jsonl").string() + ":2:"),
            0u);
}
