#pragma once

// Two-stream dual-level attention network.
//
// Upper branch: each of the five question-answer hypotheses attends to the
// video regions and to the aligned subtitle words of every frame (word level),
// the two per-frame results attend to each other across frames (frame level),
// and a sigmoid temporal-attention head reweights the fused frames before the
// answer and span heads.
//
// Bottom branch: subtitle proposals replace the hypotheses. All word and
// region axes are averaged away first, so each proposal is a single query
// vector. Every weight is shared with the upper branch.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqg/autograd.hpp"
#include "vqg/timeline.hpp"

namespace vqg {

inline constexpr std::size_t kNumAnswers = 5;

struct ModelDims {
  std::size_t raw_video = 300;  // region feature width before projection
  std::size_t raw_text = 300;   // word feature width before projection
  std::size_t hidden = 128;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// How a similarity matrix is turned into attention weights.
/// kRaw uses the plain products, kSoftmax normalizes each row, kScaled
/// divides by d times the row length (a mean of per-channel products).
enum class SimilarityNorm { kRaw, kSoftmax, kScaled };

SimilarityNorm parse_similarity_norm(const std::string& s);
std::string to_string(SimilarityNorm n);

struct ModelOptions {
  SimilarityNorm word_similarity = SimilarityNorm::kSoftmax;
  SimilarityNorm frame_similarity = SimilarityNorm::kScaled;
  /// Longest decoded span in frames; 0 means unbounded.
  std::size_t max_span_frames = 0;
};

/// Pre-encoding features for one instance.
struct RawFeatures {
  Tensor hypotheses;  // [5, L_h, raw_text]
  Tensor video;       // [T, N_o, raw_video]
  Tensor subtitles;   // [T, L_s, raw_text]
  Tensor proposals;   // [T_sp, L_sp, raw_text]; T_sp may be 0

  std::size_t frames() const { return video.rank() ? video.dim(0) : 0; }
  std::size_t num_proposals() const {
    return proposals.rank() ? proposals.dim(0) : 0;
  }
};

/// Encoded features, all with hidden width d. `proposals` is undefined when
/// the instance has no subtitle proposals.
struct FeatureBundle {
  Value hypotheses;  // [5, L_h, d]
  Value video;       // [T, N_o, d]
  Value subtitles;   // [T, L_s, d]
  Value proposals;   // [T_sp, L_sp, d]
};

/// Named parameter store. Names are stable and double as checkpoint keys.
class ModelParams {
 public:
  ModelParams() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
  static ModelParams init(const ModelDims& dims, std::uint64_t seed);
  static std::map<std::string, Shape> expected_shapes(const ModelDims& dims);

  const ModelDims& dims() const { return dims_; }
  const Value& at(const std::string& name) const;
  Value& at(const std::string& name);
  const std::map<std::string, Value>& named() const { return params_; }
  std::map<std::string, Value>& named() { return params_; }
  std::size_t num_scalars() const;

  void zero_grad();
  /// Deep copy: new leaves with the same values.
  ModelParams clone() const;

  nlohmann::json to_json() const;
  /// Validates format, version, parameter names and every shape.
  static ModelParams from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ModelParams load(const std::filesystem::path& path);

 private:
  ModelDims dims_;
  std::map<std::string, Value> params_;
};

/// Sinusoidal table [length, d]: sin on even channels, cos on odd ones.
Tensor positional_encoding(std::size_t length, std::size_t d);

/// Projection (linear + relu), positional encoding along the sequence axis
/// and one residual depthwise convolution. Video and subtitles use the frame
/// axis; hypotheses and proposals use the word axis.
FeatureBundle encode(const RawFeatures& raw, const ModelParams& params);

/// Word-level attention of a batch of queries against the regions (or words)
/// of every frame.
///   queries: [B, L, d], context: [T, N, d]  ->  [B, T, d]
Value word_level_attention(const Value& queries, const Value& context,
                           const ModelParams& params,
                           const ModelOptions& opts = {});

/// Frame-level attention between the subtitle and video streams.
///   [.., T, d] x [.., T, d] -> [.., T, d]
Value frame_level_attention(const Value& subtitle_frames,
                            const Value& video_frames, const ModelParams& params,
                            const ModelOptions& opts = {});

struct TemporalAttention {
  Value scores;    // [.., T], each in (0, 1)
  Value weighted;  // [.., T, d], scores * fused
};

TemporalAttention temporal_attention(const Value& fused,
                                     const ModelParams& params);

/// Max-pool over time then linear: [5, T, d] -> [5].
Value predict_answer(const Value& weighted, const ModelParams& params);

struct SpanDistributions {
  Value p_st;  // [T]
  Value p_ed;  // [T]
};

/// Per-frame linear start/end logits, softmax over time: [T, d] -> 2 x [T].
SpanDistributions predict_span(const Value& weighted, const ModelParams& params);

/// argmax over i <= j (and j - i < max_span_frames when non-zero) of
/// p_st[i] * p_ed[j]; ties go to the smallest i, then the smallest j.
Span decode_span(std::span<const double> p_st, std::span<const double> p_ed,
                 std::size_t max_span_frames = 0);

/// Upper-branch activations for all five hypotheses.
struct UpperOutput {
  Value answer_scores;  // [5]
  Value attention;      // [5, T]
  Value weighted;       // [5, T, d]
};

UpperOutput upper_forward(const FeatureBundle& bundle, const ModelParams& params,
                          const ModelOptions& opts = {});

/// Bottom branch: one attention trace per subtitle proposal, [T_sp, T].
/// Returns an undefined Value when there are no proposals.
Value fs_branch_forward(const FeatureBundle& bundle, const ModelParams& params,
                        const ModelOptions& opts = {});

/// Number of fs_branch_forward calls since the last reset.
std::size_t fs_branch_invocations();
void reset_fs_branch_invocations();

/// Numeric outputs for one instance.
struct Prediction {
  std::vector<double> answer_scores;           // 5
  std::size_t predicted_answer = 0;
  std::vector<double> p_st;                    // span head of the chosen stream
  std::vector<double> p_ed;
  std::vector<std::vector<double>> attention;  // per hypothesis, length T
  Span decoded_span;                           // from decode_span
};

/// Inference: answer = argmax score (first on ties); span heads read the
/// predicted-answer stream.
Prediction predict(const RawFeatures& raw, const ModelParams& params,
                   const ModelOptions& opts = {});

}  // namespace vqg
