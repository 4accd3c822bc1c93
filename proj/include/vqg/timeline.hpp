#pragma once

// Temporal data model: inclusive frame spans, subtitle tracks that only carry
// start times, subtitle proposals and the projection from seconds to frames.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vqg/errors.hpp"

namespace vqg {

/// Inclusive frame interval [st, ed].
struct Span {
  std::size_t st = 0;
  std::size_t ed = 0;

  /// Throws ValidationError unless st <= ed.
  static Span make(std::size_t st, std::size_t ed);
  std::size_t length() const { return ed - st + 1; }
  bool contains(std::size_t i) const { return st <= i && i <= ed; }

  friend bool operator==(const Span&, const Span&) = default;
};

std::string to_string(const Span& s);

/// Frame i covers [i / fps, (i + 1) / fps) seconds.
struct FrameGrid {
  std::size_t frames = 0;
  double fps = 0.5;

  double duration() const { return static_cast<double>(frames) / fps; }
  double frame_start(std::size_t i) const { return static_cast<double>(i) / fps; }
};

struct SubtitleEntry {
  double start = 0.0;
  std::vector<std::string> tokens;
};

/// Subtitles with strictly increasing start times, all before video_end.
class SubtitleTrack {
 public:
  SubtitleTrack() = default;
  /// Validates ordering and bounds; throws ValidationError.
  SubtitleTrack(std::vector<SubtitleEntry> entries, double video_end);

  const std::vector<SubtitleEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  double video_end() const { return video_end_; }
  /// Start of subtitle i, with start(size()) == video_end.
  double start(std::size_t i) const;

  /// Parses `start<TAB>text` lines terminated by `END<TAB>video_end`.
  /// `source` prefixes error messages (usually the file path).
  static SubtitleTrack parse(std::istream& in, const std::string& source);
  static SubtitleTrack load(const std::filesystem::path& path);
  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<SubtitleEntry> entries_;
  double video_end_ = 0.0;
};

struct SubtitleProposal {
  std::size_t first = 0;  // index of the first grouped subtitle
  std::size_t count = 0;  // number of grouped subtitles
  double t_start = 0.0;
  double t_end = 0.0;     // exclusive
  std::optional<Span> span;
};

/// Groups `scale` adjacent subtitles per proposal. Proposal j covers
/// [start(j), start(j + scale)). A track shorter than `scale` yields one
/// proposal over the whole track; an empty track yields none.
std::vector<SubtitleProposal> build_subtitle_proposals(const SubtitleTrack& track,
                                                       std::size_t scale);

/// Same, with spans projected onto `grid`. Proposals that miss the grid
/// entirely are dropped.
std::vector<SubtitleProposal> build_subtitle_proposals(const SubtitleTrack& track,
                                                       std::size_t scale,
                                                       const FrameGrid& grid);

/// Frames whose window overlaps [t_start, t_end) with positive measure,
/// clamped to the grid. Throws ValidationError("interval-off-grid") when no
/// frame overlaps.
Span project_to_frames(double t_start, double t_end, const FrameGrid& grid);

/// Seconds covered by a span: [st / fps, (ed + 1) / fps).
std::pair<double, double> span_window(const Span& s, const FrameGrid& grid);

double temporal_iou(const Span& a, const Span& b);

using Mask = std::vector<std::uint8_t>;

/// mask[i] == 1 iff s contains i. Throws ValidationError if s.ed >= frames.
Mask span_mask(const Span& s, std::size_t frames);

}  // namespace vqg
