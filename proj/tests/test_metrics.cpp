#include <gtest/gtest.h>

#include <random>

#include "vqg/errors.hpp"
#include "vqg/metrics.hpp"

using namespace vqg;

namespace {

EvalRecord record(std::size_t pred, std::size_t gt, Span ps, Span gs) {
  return {"r", pred, gt, ps, gs};
}

double enumerate_iou(const Span& a, const Span& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i <= std::max(a.ed, b.ed); ++i) {
    inter += a.contains(i) && b.contains(i);
    uni += a.contains(i) || b.contains(i);
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<EvalRecord> random_records(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> answer(0, 4);
  const std::size_t frames = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
  auto span = [&] {
    const std::size_t st = std::uniform_int_distribution<std::size_t>(0, frames - 1)(rng);
    const std::size_t ed = std::uniform_int_distribution<std::size_t>(st, frames - 1)(rng);
    return Span{st, ed};
  };
  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"r" + std::to_string(i), answer(rng), answer(rng), span(), span()});
  }
  return out;
}

}  // namespace

TEST(Evaluate, SingleRecord) {
  const std::vector<EvalRecord> rs{record(2, 2, {0, 2}, {0, 4})};
  const EvalReport r = evaluate(rs);
  EXPECT_EQ(r.n, 1u);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_NEAR(r.t_miou, 0.6, 1e-15);
  EXPECT_EQ(r.r_at_1.at(0.3), 1.0);
  EXPECT_EQ(r.r_at_1.at(0.5), 1.0);
  EXPECT_EQ(r.r_at_1.at(0.7), 0.0);
  EXPECT_EQ(r.asa, 1.0);
}

TEST(Evaluate, PerfectPredictions) {
  const std::vector<EvalRecord> rs{record(0, 0, {1, 3}, {1, 3}), record(4, 4, {0, 0}, {0, 0})};
  const EvalReport r = evaluate(rs);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_EQ(r.t_miou, 1.0);
  EXPECT_EQ(r.asa, 1.0);
  for (const auto& [m, v] : r.r_at_1) EXPECT_EQ(v, 1.0) << m;
}

TEST(Evaluate, CorrectAnswersDisjointSpans) {
  const std::vector<EvalRecord> rs{record(1, 1, {0, 1}, {3, 4})};
  const EvalReport r = evaluate(rs);
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_EQ(r.asa, 0.0);
  EXPECT_EQ(r.t_miou, 0.0);
}

TEST(Evaluate, ClosedThresholds) {
  // IoU exactly 0.5 counts at m = 0.5.
  const std::vector<EvalRecord> rs{record(0, 0, {0, 1}, {0, 3})};
  const EvalReport r = evaluate(rs);
  EXPECT_EQ(r.r_at_1.at(0.5), 1.0);
  EXPECT_EQ(r.asa, 1.0);
}

TEST(Evaluate, EmptyInput) {
  try {
    evaluate(std::vector<EvalRecord>{});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "no-records");
  }
}

TEST(Report, JsonRoundTripAndSchema) {
  std::mt19937_64 rng(3);
  const auto rs = random_records(rng, 40);
  const EvalReport r = evaluate(rs);
  const nlohmann::json j = to_json(r);
  EXPECT_TRUE(j["r_at_1"].contains("0.3"));
  EXPECT_TRUE(j["r_at_1"].contains("0.5"));
  EXPECT_TRUE(j["r_at_1"].contains("0.7"));
  const EvalReport back = report_from_json(j);
  EXPECT_EQ(back.n, r.n);
  EXPECT_EQ(back.acc, r.acc);
  EXPECT_EQ(back.t_miou, r.t_miou);
  EXPECT_EQ(back.asa, r.asa);
  EXPECT_EQ(back.r_at_1, r.r_at_1);

  auto broken = [&](auto mutate) {
    nlohmann::json k = j;
    mutate(k);
    return k;
  };
  EXPECT_THROW(report_from_json(broken([](auto& k) { k.erase("acc"); })), ValidationError);
  EXPECT_THROW(report_from_json(broken([](auto& k) { k["acc"] = 1.5; })), ValidationError);
  EXPECT_THROW(report_from_json(broken([](auto& k) { k["acc"] = "high"; })), ValidationError);
  EXPECT_THROW(report_from_json(broken([](auto& k) { k["n"] = 0; })), ValidationError);
  EXPECT_THROW(report_from_json(broken([](auto& k) { k["r_at_1"]["x"] = 0.1; })),
               ValidationError);
  EXPECT_THROW(report_from_json(broken([](auto& k) {
                 k["asa"] = 1.0;
                 k["acc"] = 0.5;
               })),
               ValidationError);
  EXPECT_THROW(report_from_json(nlohmann::json::array()), ValidationError);
}

TEST(Report, TableLayout) {
  const std::vector<EvalRecord> rs{record(2, 2, {0, 2}, {0, 4})};
  const std::string table = format_table(evaluate(rs));
  const auto first_line = table.substr(0, table.find('\n'));
  EXPECT_EQ(first_line,
            "R@1 IoU=0.3 | R@1 IoU=0.5 | R@1 IoU=0.7 | T.mIoU |    Acc |    ASA");
  EXPECT_NE(table.find("60.00"), std::string::npos);
  EXPECT_NE(table.find("100.00"), std::string::npos);
}

TEST(MetricProperties, RandomRecords) {
  std::mt19937_64 rng(10000);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rs = random_records(rng, 50);
    const EvalReport r = evaluate(rs);
    EXPECT_LE(r.asa, r.acc);
    EXPECT_LE(r.asa, r.r_at_1.at(0.5));
    EXPECT_GE(r.r_at_1.at(0.3), r.r_at_1.at(0.5));
    EXPECT_GE(r.r_at_1.at(0.5), r.r_at_1.at(0.7));
    double sum = 0.0;
    for (const auto& rec : rs) sum += enumerate_iou(rec.predicted_span, rec.gt_span);
    EXPECT_NEAR(r.t_miou, sum / static_cast<double>(rs.size()), 1e-12);
    for (double v : {r.acc, r.asa, r.t_miou}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(MetricProperties, CustomThresholdsAreMonotone) {
  std::mt19937_64 rng(7);
  const auto rs = random_records(rng, 500);
  std::vector<double> ms;
  for (int k = 0; k <= 20; ++k) ms.push_back(k / 20.0);
  const EvalReport r = evaluate(rs, ms);
  double prev = 1.0;
  for (const auto& [m, v] : r.r_at_1) {
    EXPECT_LE(v, prev) << m;
    prev = v;
  }
  EXPECT_EQ(r.r_at_1.at(0.0), 1.0);
}
