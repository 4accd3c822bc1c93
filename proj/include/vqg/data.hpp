#pragma once

// Instances, on-disk dataset layout and the planted-span generator.
//
// Dataset directory:
//   manifest.json      [{id, video_feat, sub_feat, qa_feat, qa_json, subs_path, T}]
//   <id>.video.bin     [T, N_o, raw_video] region features
//   <id>.subs.bin      [N_sub, L_w, raw_text] word features per subtitle
//   <id>.qa.bin        [5, L_h, raw_text] word features per hypothesis
//   <id>.qa.json       {question, answers[5], gt_index, gt_span?: [st, ed]}
//   <id>.subs.tsv      subtitle track (start<TAB>text, END<TAB>video_end)
// Paths in the manifest are relative to the manifest's directory.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vqg/metrics.hpp"
#include "vqg/model.hpp"
#include "vqg/timeline.hpp"

namespace vqg {

/// "VQGF", little-endian uint32 version, uint32 ndim, uint64 dims[ndim],
/// then float64 values.
inline constexpr std::array<char, 4> kFeatureMagic{'V', 'Q', 'G', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

Tensor read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const Tensor& t);

struct QaMeta {
  std::string question;
  std::array<std::string, kNumAnswers> answers;
  std::size_t gt_index = 0;
  std::optional<Span> gt_span;
};

QaMeta parse_qa_json(const nlohmann::json& j, const std::string& source);
nlohmann::json to_json(const QaMeta& qa);

struct DataOptions {
  std::size_t proposal_scale = 2;
  double fps = 0.5;
};

struct Instance {
  std::string id;
  FrameGrid grid;
  Tensor video;           // [T, N_o, raw_video]
  Tensor hypotheses;      // [5, L_h, raw_text]
  Tensor subtitle_words;  // [N_sub, L_w, raw_text]
  SubtitleTrack track;
  QaMeta qa;

  // Derived by finalize_instance.
  RawFeatures features;
  std::vector<SubtitleProposal> proposals;
  std::vector<Mask> proposal_masks;
};

/// For each frame, the two subtitles whose start times are nearest the frame
/// midpoint (ties to the earlier one), in track order. A one-subtitle track
/// is used twice.
std::vector<std::array<std::size_t, 2>> align_subtitles(const SubtitleTrack& track,
                                                        const FrameGrid& grid);

/// Validates shapes and builds aligned subtitle features, subtitle proposal
/// features and proposal masks. Throws ValidationError naming the instance.
void finalize_instance(Instance& inst, const DataOptions& opts);

std::vector<Instance> load_dataset(const std::filesystem::path& manifest,
                                   const DataOptions& opts = {});
/// Accepts either a manifest file or a directory containing manifest.json.
std::filesystem::path resolve_manifest(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& dir,
                  const std::vector<Instance>& instances);

struct SynthConfig {
  std::size_t frames = 16;
  std::size_t regions = 4;
  std::size_t hyp_words = 6;
  std::size_t sub_words = 6;  // aligned words per frame (two subtitles)
  std::size_t raw_dim = 32;
  std::size_t instances = 200;
  double signal = 2.0;
  double noise = 0.5;
  double topic = 1.0;         // strength of per-subtitle topic vectors
  std::size_t min_span = 0;   // planted span length bounds in frames; 0 = frames/8
  std::size_t max_span = 0;   // 0 = frames/2
  std::uint64_t seed = 7;

  void validate() const;
};

/// Planted-span instances. Inside gt_span the correct answer's signature is
/// added to every video region and to the words of subtitles starting in the
/// span; the correct hypothesis carries the same signature in its answer
/// words. Each frame's regions also carry the topic of the subtitle running
/// at that time, so subtitle proposals find their own frames.
std::vector<Instance> synth_dataset(const SynthConfig& cfg,
                                    const DataOptions& opts = {},
                                    const std::string& id_prefix = "synth");

/// One line of a predictions file.
struct PredictionRecord {
  std::string id;
  std::vector<double> answer_scores;
  std::size_t predicted_answer = 0;
  std::size_t gt_answer = 0;
  std::vector<double> p_st;
  std::vector<double> p_ed;
  std::vector<double> scores;  // attention trace of the predicted-answer stream
  Span decoded_span;           // from the span heads
  Span span;                   // span used for evaluation
  std::optional<Span> gt_span;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

nlohmann::json to_json(const PredictionRecord& r);
PredictionRecord prediction_from_json(const nlohmann::json& j);

/// Writes one JSON object per line. Throws ValidationError if a record's
/// trace, p_st and p_ed lengths disagree or a span leaves the grid.
void write_predictions(const std::filesystem::path& path,
                       const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

}  // namespace vqg
