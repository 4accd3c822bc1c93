#include "vqg/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "vqg/errors.hpp"

namespace vqg {

namespace {

std::atomic<std::size_t> g_fs_branch_calls{0};

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "vqg-checkpoint";

void require_rank3(const char* what, const Tensor& t, std::size_t width) {
  if (t.rank() != 3 || t.dim(2) != width) {
    throw ShapeError(std::string("encode: ") + what + " has shape " +
                     shape_str(t.shape()) + ", expected [*, *, " +
                     std::to_string(width) + "]");
  }
}

// Positional encoding broadcast to a rank-3 shape along `axis` (0 or 1).
Tensor positional_constant(const Shape& shape, std::size_t axis) {
  const std::size_t d = shape[2];
  const Tensor table = positional_encoding(shape[axis], d);
  Tensor out(shape);
  for (std::size_t a = 0; a < shape[0]; ++a) {
    for (std::size_t b = 0; b < shape[1]; ++b) {
      const std::size_t pos = axis == 0 ? a : b;
      for (std::size_t c = 0; c < d; ++c) {
        out[(a * shape[1] + b) * d + c] = table[pos * d + c];
      }
    }
  }
  return out;
}

Value encode_stream(const Tensor& raw, std::size_t seq_axis,
                    const Value& proj_w, const Value& proj_b,
                    const Value& conv_w, const Value& conv_b) {
  Value projected = relu(add_bias(matmul(Value::constant(raw), proj_w), proj_b));
  Value with_pos =
      add(projected, Value::constant(positional_constant(projected.shape(), seq_axis)));
  return add(with_pos, depthwise_conv3(with_pos, seq_axis, conv_w, conv_b));
}

Value fuse(const Value& a, const Value& b, const Value& weight, const Value& bias) {
  Value joined = concat_last({a, b, mul(a, b), add(a, b)});
  return add_bias(matmul(joined, weight), bias);
}

Value normalize_rows(const Value& sim, std::size_t width, SimilarityNorm norm) {
  switch (norm) {
    case SimilarityNorm::kRaw:
      return sim;
    case SimilarityNorm::kSoftmax:
      return softmax(sim, sim.shape().size() - 1);
    case SimilarityNorm::kScaled:
      return scale(sim, 1.0 / static_cast<double>(width * sim.shape().back()));
  }
  return sim;
}

std::vector<double> to_vector(const Tensor& t) { return t.values(); }

}  // namespace

SimilarityNorm parse_similarity_norm(const std::string& s) {
  if (s == "raw") return SimilarityNorm::kRaw;
  if (s == "softmax") return SimilarityNorm::kSoftmax;
  if (s == "scaled") return SimilarityNorm::kScaled;
  throw ValidationError("unknown similarity normalization '" + s +
                        "' (expected raw, softmax or scaled)");
}

std::string to_string(SimilarityNorm n) {
  switch (n) {
    case SimilarityNorm::kRaw: return "raw";
    case SimilarityNorm::kSoftmax: return "softmax";
    case SimilarityNorm::kScaled: return "scaled";
  }
  return "raw";
}

// ---------------------------------------------------------------------------
// Parameters

std::map<std::string, Shape> ModelParams::expected_shapes(const ModelDims& dims) {
  const std::size_t d = dims.hidden;
  return {
      {"answer_head.bias", {1}},
      {"answer_head.weight", {d, 1}},
      {"conv_text.bias", {d}},
      {"conv_text.weight", {3, d}},
      {"conv_video.bias", {d}},
      {"conv_video.weight", {3, d}},
      {"frame_fuse.bias", {d}},
      {"frame_fuse.weight", {4 * d, d}},
      {"proj_text.bias", {d}},
      {"proj_text.weight", {dims.raw_text, d}},
      {"proj_video.bias", {d}},
      {"proj_video.weight", {dims.raw_video, d}},
      {"span_head.bias", {2}},
      {"span_head.weight", {d, 2}},
      {"temporal_att.bias", {1}},
      {"temporal_att.weight", {d, 1}},
      {"word_fuse.bias", {d}},
      {"word_fuse.weight", {4 * d, d}},
  };
}

ModelParams ModelParams::init(const ModelDims& dims, std::uint64_t seed) {
  if (dims.hidden == 0 || dims.raw_text == 0 || dims.raw_video == 0) {
    throw ValidationError("model dims must be positive");
  }
  const auto shapes = expected_shapes(dims);
  // Bias fan-in is the row count of the matching weight.
  auto fan_in = [&](const std::string& name, const Shape& shape) -> std::size_t {
    const auto dot = name.rfind('.');
    if (name.substr(dot + 1) == "bias") {
      return shapes.at(name.substr(0, dot) + ".weight")[0];
    }
    return shape[0];
  };
  ModelParams p;
  p.dims_ = dims;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : shapes) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(name, shape)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(shape);
    for (double& x : t.data()) x = dist(rng);
    p.params_.emplace(name, Value::parameter(std::move(t)));
  }
  return p;
}

const Value& ModelParams::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

Value& ModelParams::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v.data().size();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.dims_ = dims_;
  for (const auto& [name, v] : params_) {
    p.params_.emplace(name, Value::parameter(v.data()));
  }
  return p;
}

nlohmann::json ModelParams::to_json() const {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, v] : params_) {
    params[name] = {{"shape", v.shape()}, {"values", v.data().values()}};
  }
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"dims",
           {{"raw_video", dims_.raw_video},
            {"raw_text", dims_.raw_text},
            {"hidden", dims_.hidden}}},
          {"params", params}};
}

ModelParams ModelParams::from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != kCheckpointFormat) {
      throw ValidationError("checkpoint: unrecognised format");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw ValidationError("checkpoint: unsupported version " +
                            j.at("version").dump());
    }
    ModelDims dims;
    dims.raw_video = j.at("dims").at("raw_video").get<std::size_t>();
    dims.raw_text = j.at("dims").at("raw_text").get<std::size_t>();
    dims.hidden = j.at("dims").at("hidden").get<std::size_t>();
    const auto expected = expected_shapes(dims);
    const auto& stored = j.at("params");
    for (const auto& [name, _] : stored.items()) {
      if (!expected.count(name)) {
        throw ValidationError("checkpoint: unexpected parameter '" + name + "'");
      }
    }
    ModelParams p;
    p.dims_ = dims;
    for (const auto& [name, shape] : expected) {
      if (!stored.contains(name)) {
        throw ValidationError("checkpoint: missing parameter '" + name + "'");
      }
      const auto got = stored.at(name).at("shape").get<Shape>();
      if (got != shape) {
        throw ValidationError("checkpoint: parameter '" + name + "' has shape " +
                              shape_str(got) + ", expected " + shape_str(shape));
      }
      auto values = stored.at(name).at("values").get<std::vector<double>>();
      if (values.size() != shape_numel(shape)) {
        throw ValidationError("checkpoint: parameter '" + name + "' has " +
                              std::to_string(values.size()) + " values, expected " +
                              std::to_string(shape_numel(shape)));
      }
      Tensor t(shape, std::move(values));
      if (!t.all_finite()) {
        throw ValidationError("checkpoint: parameter '" + name + "' is not finite");
      }
      p.params_.emplace(name, Value::parameter(std::move(t)));
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed JSON: ") + e.what());
  }
}

void ModelParams::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot write checkpoint");
  out << to_json().dump() << '\n';
}

ModelParams ModelParams::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open checkpoint");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
  try {
    return from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Forward pieces

Tensor positional_encoding(std::size_t length, std::size_t d) {
  Tensor t({length, d});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t c = 0; c < d; ++c) {
      const double k = static_cast<double>(c - c % 2);
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, k / static_cast<double>(d));
      t[pos * d + c] = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

FeatureBundle encode(const RawFeatures& raw, const ModelParams& params) {
  const ModelDims& dims = params.dims();
  require_rank3("hypotheses", raw.hypotheses, dims.raw_text);
  require_rank3("video", raw.video, dims.raw_video);
  require_rank3("subtitles", raw.subtitles, dims.raw_text);
  if (raw.hypotheses.dim(0) != kNumAnswers) {
    throw ShapeError("encode: expected 5 hypotheses, got " +
                     shape_str(raw.hypotheses.shape()));
  }
  if (raw.subtitles.dim(0) != raw.video.dim(0)) {
    throw ShapeError("encode: subtitles " + shape_str(raw.subtitles.shape()) +
                     " and video " + shape_str(raw.video.shape()) +
                     " disagree on frame count");
  }
  const Value& pv_w = params.at("proj_video.weight");
  const Value& pv_b = params.at("proj_video.bias");
  const Value& pt_w = params.at("proj_text.weight");
  const Value& pt_b = params.at("proj_text.bias");
  const Value& cv_w = params.at("conv_video.weight");
  const Value& cv_b = params.at("conv_video.bias");
  const Value& ct_w = params.at("conv_text.weight");
  const Value& ct_b = params.at("conv_text.bias");

  FeatureBundle out;
  out.hypotheses = encode_stream(raw.hypotheses, 1, pt_w, pt_b, ct_w, ct_b);
  out.video = encode_stream(raw.video, 0, pv_w, pv_b, cv_w, cv_b);
  out.subtitles = encode_stream(raw.subtitles, 0, pt_w, pt_b, ct_w, ct_b);
  if (raw.num_proposals() > 0) {
    require_rank3("proposals", raw.proposals, dims.raw_text);
    out.proposals = encode_stream(raw.proposals, 1, pt_w, pt_b, ct_w, ct_b);
  }
  return out;
}

Value word_level_attention(const Value& queries, const Value& context,
                           const ModelParams& params, const ModelOptions& opts) {
  const Shape& q = queries.shape();
  const Shape& c = context.shape();
  if (q.size() != 3 || c.size() != 3 || q[2] != c[2]) {
    throw ShapeError("word_level_attention: queries " + shape_str(q) +
                     " vs context " + shape_str(c));
  }
  Value h = expand(queries, 1, c[0]);  // [B, T, L, d]
  Value v = expand(context, 0, q[0]);  // [B, T, N, d]
  Value sim = matmul(h, transpose(v));  // [B, T, L, N]
  const std::size_t d = q[2];
  Value v_att = max(matmul(normalize_rows(sim, d, opts.word_similarity), v), 2);
  Value h_att = max(matmul(normalize_rows(transpose(sim), d, opts.word_similarity), h), 2);
  return fuse(v_att, h_att, params.at("word_fuse.weight"),
              params.at("word_fuse.bias"));
}

Value frame_level_attention(const Value& subtitle_frames,
                            const Value& video_frames, const ModelParams& params,
                            const ModelOptions& opts) {
  if (subtitle_frames.shape() != video_frames.shape()) {
    throw ShapeError("frame_level_attention: " +
                     shape_str(subtitle_frames.shape()) + " vs " +
                     shape_str(video_frames.shape()));
  }
  Value sim = matmul(subtitle_frames, transpose(video_frames));  // [.., T, T]
  const std::size_t d = video_frames.shape().back();
  Value v_att =
      matmul(normalize_rows(transpose(sim), d, opts.frame_similarity), video_frames);
  Value s_att = matmul(normalize_rows(sim, d, opts.frame_similarity), subtitle_frames);
  return fuse(v_att, s_att, params.at("frame_fuse.weight"),
              params.at("frame_fuse.bias"));
}

TemporalAttention temporal_attention(const Value& fused,
                                     const ModelParams& params) {
  const Shape& s = fused.shape();
  if (s.size() < 2) {
    throw ShapeError("temporal_attention: needs [.., T, d], got " + shape_str(s));
  }
  Value logits = add_bias(matmul(fused, params.at("temporal_att.weight")),
                          params.at("temporal_att.bias"));
  Shape score_shape(s.begin(), s.end() - 1);
  Value scores = sigmoid(reshape(logits, score_shape));
  Value weighted = mul(expand(scores, score_shape.size(), s.back()), fused);
  return {scores, weighted};
}

Value predict_answer(const Value& weighted, const ModelParams& params) {
  if (weighted.shape().size() != 3) {
    throw ShapeError("predict_answer: expected [5, T, d], got " +
                     shape_str(weighted.shape()));
  }
  Value pooled = max(weighted, 1);  // [5, d]
  Value scores = add_bias(matmul(pooled, params.at("answer_head.weight")),
                          params.at("answer_head.bias"));
  return reshape(scores, {weighted.shape()[0]});
}

SpanDistributions predict_span(const Value& weighted, const ModelParams& params) {
  if (weighted.shape().size() != 2) {
    throw ShapeError("predict_span: expected [T, d], got " +
                     shape_str(weighted.shape()));
  }
  Value logits = add_bias(matmul(weighted, params.at("span_head.weight")),
                          params.at("span_head.bias"));  // [T, 2]
  Value probs = softmax(transpose(logits), 1);          // [2, T]
  return {select(probs, 0), select(probs, 1)};
}

Span decode_span(std::span<const double> p_st, std::span<const double> p_ed,
                 std::size_t max_span_frames) {
  if (p_st.empty() || p_st.size() != p_ed.size()) {
    throw ShapeError("decode_span: distributions of length " +
                     std::to_string(p_st.size()) + " and " +
                     std::to_string(p_ed.size()));
  }
  const std::size_t frames = p_st.size();
  const std::size_t cap = max_span_frames == 0 ? frames : max_span_frames;
  Span best{0, 0};
  double best_score = -1.0;
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t j = i; j < frames && j - i < cap; ++j) {
      const double score = p_st[i] * p_ed[j];
      if (score > best_score) {
        best_score = score;
        best = {i, j};
      }
    }
  }
  return best;
}

UpperOutput upper_forward(const FeatureBundle& bundle, const ModelParams& params,
                          const ModelOptions& opts) {
  Value video_frames = word_level_attention(bundle.hypotheses, bundle.video, params, opts);
  Value subtitle_frames =
      word_level_attention(bundle.hypotheses, bundle.subtitles, params, opts);
  Value fused = frame_level_attention(subtitle_frames, video_frames, params, opts);
  TemporalAttention att = temporal_attention(fused, params);
  return {predict_answer(att.weighted, params), att.scores, att.weighted};
}

Value fs_branch_forward(const FeatureBundle& bundle, const ModelParams& params,
                        const ModelOptions& opts) {
  g_fs_branch_calls.fetch_add(1, std::memory_order_relaxed);
  if (!bundle.proposals.defined() || bundle.proposals.shape()[0] == 0) {
    return Value();
  }
  const std::size_t frames = bundle.video.shape()[0];
  const std::size_t d = bundle.video.shape()[2];
  const std::size_t count = bundle.proposals.shape()[0];
  Value video = reshape(mean(bundle.video, 1), {frames, 1, d});
  Value subtitles = reshape(mean(bundle.subtitles, 1), {frames, 1, d});
  Value queries = reshape(mean(bundle.proposals, 1), {count, 1, d});
  Value video_frames = word_level_attention(queries, video, params, opts);
  Value subtitle_frames = word_level_attention(queries, subtitles, params, opts);
  Value fused = frame_level_attention(subtitle_frames, video_frames, params, opts);
  return temporal_attention(fused, params).scores;
}

std::size_t fs_branch_invocations() {
  return g_fs_branch_calls.load(std::memory_order_relaxed);
}

void reset_fs_branch_invocations() {
  g_fs_branch_calls.store(0, std::memory_order_relaxed);
}

Prediction predict(const RawFeatures& raw, const ModelParams& params,
                   const ModelOptions& opts) {
  const FeatureBundle bundle = encode(raw, params);
  const UpperOutput upper = upper_forward(bundle, params, opts);

  Prediction p;
  p.answer_scores = to_vector(upper.answer_scores.data());
  for (std::size_t k = 1; k < p.answer_scores.size(); ++k) {
    if (p.answer_scores[k] > p.answer_scores[p.predicted_answer]) {
      p.predicted_answer = k;
    }
  }
  const Tensor& att = upper.attention.data();
  const std::size_t frames = att.dim(1);
  for (std::size_t k = 0; k < att.dim(0); ++k) {
    p.attention.emplace_back(att.data().begin() + static_cast<std::ptrdiff_t>(k * frames),
                             att.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * frames));
  }
  const SpanDistributions spans =
      predict_span(select(upper.weighted, p.predicted_answer), params);
  p.p_st = to_vector(spans.p_st.data());
  p.p_ed = to_vector(spans.p_ed.data());
  p.decoded_span = decode_span(p.p_st, p.p_ed, opts.max_span_frames);
  return p;
}

}  // namespace vqg
