#include "vqg/timeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace vqg {

Span Span::make(std::size_t st, std::size_t ed) {
  if (st > ed) {
    throw ValidationError("invalid span [" + std::to_string(st) + ", " +
                          std::to_string(ed) + "]: st > ed");
  }
  return Span{st, ed};
}

std::string to_string(const Span& s) {
  return "[" + std::to_string(s.st) + ", " + std::to_string(s.ed) + "]";
}

SubtitleTrack::SubtitleTrack(std::vector<SubtitleEntry> entries,
                             double video_end)
    : entries_(std::move(entries)), video_end_(video_end) {
  if (!std::isfinite(video_end_) || video_end_ <= 0.0) {
    throw ValidationError("subtitle track: video_end must be positive");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const double s = entries_[i].start;
    if (!std::isfinite(s) || s < 0.0) {
      throw ValidationError("subtitle track: entry " + std::to_string(i) +
                            " has invalid start time");
    }
    if (i > 0 && !(s > entries_[i - 1].start)) {
      throw ValidationError("subtitle track: start times not strictly "
                            "increasing at entry " + std::to_string(i));
    }
    if (!(s < video_end_)) {
      throw ValidationError("subtitle track: entry " + std::to_string(i) +
                            " starts at or after video_end");
    }
  }
}

double SubtitleTrack::start(std::size_t i) const {
  if (i == entries_.size()) return video_end_;
  return entries_.at(i).start;
}

namespace {

std::optional<double> parse_double(std::string_view text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) {
    return std::nullopt;
  }
  return value;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

}  // namespace

SubtitleTrack SubtitleTrack::parse(std::istream& in, const std::string& source) {
  std::vector<SubtitleEntry> entries;
  std::optional<double> video_end;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ValidationError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (video_end) fail("content after END line");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail("expected <start>\\t<text>");
    const std::string_view head(line.data(), tab);
    const std::string_view rest(line.data() + tab + 1, line.size() - tab - 1);
    if (head == "END") {
      video_end = parse_double(rest);
      if (!video_end || *video_end <= 0.0) fail("invalid video_end");
      continue;
    }
    const auto start = parse_double(head);
    if (!start || *start < 0.0) fail("invalid start time '" + std::string(head) + "'");
    if (!entries.empty() && !(*start > entries.back().start)) {
      fail("start time " + std::string(head) + " is not after previous " +
           "start time");
    }
    entries.push_back({*start, split_words(rest)});
  }
  if (!video_end) {
    ++line_no;
    fail("missing END line");
  }
  if (!entries.empty() && !(entries.back().start < *video_end)) {
    fail("last subtitle starts at or after video_end");
  }
  return SubtitleTrack(std::move(entries), *video_end);
}

SubtitleTrack SubtitleTrack::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open subtitle file");
  return parse(in, path.string());
}

void SubtitleTrack::write(std::ostream& out) const {
  out << std::setprecision(17);
  for (const auto& e : entries_) {
    out << e.start << '\t';
    for (std::size_t i = 0; i < e.tokens.size(); ++i) {
      if (i) out << ' ';
      out << e.tokens[i];
    }
    out << '\n';
  }
  out << "END\t" << video_end_ << '\n';
}

void SubtitleTrack::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot write subtitle file");
  write(out);
}

std::vector<SubtitleProposal> build_subtitle_proposals(const SubtitleTrack& track,
                                                       std::size_t scale) {
  if (scale < 2) throw ValidationError("subtitle proposal scale must be >= 2");
  std::vector<SubtitleProposal> out;
  const std::size_t n = track.size();
  if (n == 0) return out;
  if (n < scale) {
    out.push_back({0, n, track.start(0), track.video_end(), std::nullopt});
    return out;
  }
  for (std::size_t j = 0; j + scale <= n; ++j) {
    out.push_back({j, scale, track.start(j), track.start(j + scale), std::nullopt});
  }
  return out;
}

std::vector<SubtitleProposal> build_subtitle_proposals(const SubtitleTrack& track,
                                                       std::size_t scale,
                                                       const FrameGrid& grid) {
  std::vector<SubtitleProposal> out;
  for (auto p : build_subtitle_proposals(track, scale)) {
    if (p.t_end <= 0.0 || p.t_start >= grid.duration()) continue;
    p.span = project_to_frames(p.t_start, p.t_end, grid);
    out.push_back(p);
  }
  return out;
}

Span project_to_frames(double t_start, double t_end, const FrameGrid& grid) {
  if (!(t_start < t_end)) {
    throw ValidationError("project_to_frames: empty interval");
  }
  if (grid.frames == 0 || t_end <= 0.0 || t_start >= grid.duration()) {
    throw ValidationError("interval-off-grid");
  }
  const double first = std::floor(t_start * grid.fps);
  const double last = std::ceil(t_end * grid.fps) - 1.0;
  const double max_frame = static_cast<double>(grid.frames - 1);
  const auto st = static_cast<std::size_t>(std::clamp(first, 0.0, max_frame));
  const auto ed = static_cast<std::size_t>(std::clamp(last, 0.0, max_frame));
  return Span{st, std::max(st, ed)};
}

std::pair<double, double> span_window(const Span& s, const FrameGrid& grid) {
  return {grid.frame_start(s.st), grid.frame_start(s.ed + 1)};
}

double temporal_iou(const Span& a, const Span& b) {
  const std::size_t lo = std::max(a.st, b.st);
  const std::size_t hi = std::min(a.ed, b.ed);
  const std::size_t inter = hi >= lo ? hi - lo + 1 : 0;
  const std::size_t uni = a.length() + b.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask span_mask(const Span& s, std::size_t frames) {
  if (s.st > s.ed || s.ed >= frames) {
    throw ValidationError("span " + to_string(s) + " outside grid of " +
                          std::to_string(frames) + " frames");
  }
  Mask mask(frames, 0);
  for (std::size_t i = s.st; i <= s.ed; ++i) mask[i] = 1;
  return mask;
}

}  // namespace vqg
