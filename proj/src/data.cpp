#include "vqg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "vqg/errors.hpp"

namespace vqg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Feature files

namespace {

void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) {
    out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

bool get_le(std::istream& in, std::uint64_t& v, int bytes) {
  v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) return false;
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return true;
}

constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void write_feature_file(const fs::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot write feature file");
  out.write(kFeatureMagic.data(), kFeatureMagic.size());
  put_le(out, kFeatureVersion, 4);
  put_le(out, t.rank(), 4);
  for (std::size_t d : t.shape()) put_le(out, d, 8);
  for (double v : t.data()) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

Tensor read_feature_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path.string() + ": cannot open feature file");
  auto fail = [&](const std::string& what) {
    throw ValidationError(path.string() + ": " + what);
  };
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kFeatureMagic) fail("bad magic bytes");
  std::uint64_t version = 0;
  std::uint64_t rank = 0;
  if (!get_le(in, version, 4) || version != kFeatureVersion) {
    fail("unsupported feature file version");
  }
  if (!get_le(in, rank, 4) || rank > kMaxRank) fail("bad rank in header");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    if (!get_le(in, v, 8)) fail("truncated shape header");
    d = v;
  }
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    if (!get_le(in, bits, 8)) {
      fail("header declares " + shape_str(shape) + " (" + std::to_string(n) +
           " values) but payload holds " + std::to_string(i));
    }
    values[i] = std::bit_cast<double>(bits);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail("payload longer than header shape " + shape_str(shape));
  }
  Tensor t(std::move(shape), std::move(values));
  if (!t.all_finite()) fail("non-finite feature value");
  return t;
}

// ---------------------------------------------------------------------------
// QA metadata

QaMeta parse_qa_json(const nlohmann::json& j, const std::string& source) {
  auto fail = [&](const std::string& what) {
    throw ValidationError(source + ": " + what);
  };
  if (!j.is_object()) fail("QA JSON must be an object");
  QaMeta qa;
  try {
    qa.question = j.at("question").get<std::string>();
    const auto& answers = j.at("answers");
    if (!answers.is_array() || answers.size() != kNumAnswers) {
      fail("'answers' must hold exactly 5 strings");
    }
    for (std::size_t k = 0; k < kNumAnswers; ++k) {
      qa.answers[k] = answers[k].get<std::string>();
    }
    const auto& gt = j.at("gt_index");
    if (!gt.is_number_integer() || gt.get<long long>() < 0 ||
        gt.get<long long>() >= static_cast<long long>(kNumAnswers)) {
      fail("'gt_index' must be an integer in 0..4");
    }
    qa.gt_index = gt.get<std::size_t>();
    if (j.contains("gt_span") && !j["gt_span"].is_null()) {
      const auto& s = j["gt_span"];
      auto index = [](const nlohmann::json& v) {
        return v.is_number_integer() && v.get<long long>() >= 0;
      };
      if (!s.is_array() || s.size() != 2 || !index(s[0]) || !index(s[1])) {
        fail("'gt_span' must be [st, ed] with non-negative integers");
      }
      qa.gt_span = Span::make(s[0].get<std::size_t>(), s[1].get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed QA JSON: ") + e.what());
  } catch (const ValidationError& e) {
    if (std::string(e.what()).rfind(source, 0) == 0) throw;
    fail(e.what());
  }
  return qa;
}

nlohmann::json to_json(const QaMeta& qa) {
  nlohmann::json j = {{"question", qa.question},
                      {"answers", qa.answers},
                      {"gt_index", qa.gt_index}};
  if (qa.gt_span) j["gt_span"] = {qa.gt_span->st, qa.gt_span->ed};
  return j;
}

// ---------------------------------------------------------------------------
// Assembly

std::vector<std::array<std::size_t, 2>> align_subtitles(const SubtitleTrack& track,
                                                        const FrameGrid& grid) {
  std::vector<std::array<std::size_t, 2>> out;
  if (track.empty()) return out;
  std::vector<std::size_t> order(track.size());
  for (std::size_t t = 0; t < grid.frames; ++t) {
    const double mid = (static_cast<double>(t) + 0.5) / grid.fps;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(track.start(a) - mid) < std::abs(track.start(b) - mid);
    });
    std::array<std::size_t, 2> pair{order[0], order.size() > 1 ? order[1] : order[0]};
    if (pair[0] > pair[1]) std::swap(pair[0], pair[1]);
    out.push_back(pair);
  }
  return out;
}

void finalize_instance(Instance& inst, const DataOptions& opts) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("instance '" + inst.id + "': " + what);
  };
  if (inst.video.rank() != 3 || inst.video.dim(0) == 0 || inst.video.dim(1) == 0 ||
      inst.video.dim(2) == 0) {
    fail("video features must be [T, N_o, raw] with positive dims, got " +
         shape_str(inst.video.shape()));
  }
  if (inst.grid.frames != inst.video.dim(0)) {
    fail("T = " + std::to_string(inst.grid.frames) + " but video features have " +
         std::to_string(inst.video.dim(0)) + " frames");
  }
  if (inst.hypotheses.rank() != 3 || inst.hypotheses.dim(0) != kNumAnswers ||
      inst.hypotheses.dim(1) == 0 || inst.hypotheses.dim(2) == 0) {
    fail("hypothesis features must be [5, L_h, raw], got " +
         shape_str(inst.hypotheses.shape()));
  }
  const std::size_t raw_text = inst.hypotheses.dim(2);
  if (inst.subtitle_words.rank() != 3 || inst.subtitle_words.dim(0) != inst.track.size() ||
      inst.subtitle_words.dim(2) != raw_text ||
      (inst.track.size() > 0 && inst.subtitle_words.dim(1) == 0)) {
    fail("subtitle features " + shape_str(inst.subtitle_words.shape()) +
         " do not match " + std::to_string(inst.track.size()) +
         " subtitles of width " + std::to_string(raw_text));
  }
  if (inst.qa.gt_index >= kNumAnswers) fail("gt_index out of range");
  if (inst.qa.gt_span && inst.qa.gt_span->ed >= inst.grid.frames) {
    fail("gt_span " + to_string(*inst.qa.gt_span) + " outside grid of " +
         std::to_string(inst.grid.frames) + " frames");
  }

  const std::size_t frames = inst.grid.frames;
  const std::size_t words = inst.subtitle_words.dim(1);
  const auto& sw = inst.subtitle_words;
  auto copy_words = [&](Tensor& dst, std::size_t dst_offset, std::size_t sub) {
    const std::size_t n = words * raw_text;
    std::copy_n(sw.data().begin() + static_cast<std::ptrdiff_t>(sub * n), n,
                dst.data().begin() + static_cast<std::ptrdiff_t>(dst_offset));
  };

  RawFeatures f;
  f.video = inst.video;
  f.hypotheses = inst.hypotheses;
  if (inst.track.empty()) {
    f.subtitles = Tensor({frames, std::max<std::size_t>(1, 2 * words), raw_text});
  } else {
    f.subtitles = Tensor({frames, 2 * words, raw_text});
    const auto pairs = align_subtitles(inst.track, inst.grid);
    for (std::size_t t = 0; t < frames; ++t) {
      const std::size_t base = t * 2 * words * raw_text;
      copy_words(f.subtitles, base, pairs[t][0]);
      copy_words(f.subtitles, base + words * raw_text, pairs[t][1]);
    }
  }

  inst.proposals = build_subtitle_proposals(inst.track, opts.proposal_scale, inst.grid);
  inst.proposal_masks.clear();
  if (inst.proposals.empty()) {
    f.proposals = Tensor({0, 1, raw_text});
  } else {
    const std::size_t group = inst.proposals.front().count;
    f.proposals = Tensor({inst.proposals.size(), group * words, raw_text});
    for (std::size_t j = 0; j < inst.proposals.size(); ++j) {
      const auto& p = inst.proposals[j];
      for (std::size_t s = 0; s < p.count; ++s) {
        copy_words(f.proposals, (j * group + s) * words * raw_text, p.first + s);
      }
      inst.proposal_masks.push_back(span_mask(*p.span, frames));
    }
  }
  inst.features = std::move(f);
}

// ---------------------------------------------------------------------------
// Manifest

fs::path resolve_manifest(const fs::path& path) {
  if (fs::is_directory(path)) return path / "manifest.json";
  return path;
}

std::vector<Instance> load_dataset(const fs::path& manifest_path,
                                   const DataOptions& opts) {
  const fs::path manifest = resolve_manifest(manifest_path);
  std::ifstream in(manifest);
  if (!in) throw ValidationError(manifest.string() + ": cannot open manifest");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(manifest.string() + ": malformed JSON: " + e.what());
  }
  if (!j.is_array()) {
    throw ValidationError(manifest.string() + ": manifest must be a JSON list");
  }
  if (j.empty()) {
    std::cerr << "warning: " << manifest.string() << ": manifest lists no instances\n";
  }
  const fs::path root = manifest.parent_path();
  std::vector<Instance> out;
  for (std::size_t n = 0; n < j.size(); ++n) {
    const auto& e = j[n];
    std::string id = "#" + std::to_string(n);
    auto fail = [&](const std::string& what) {
      throw ValidationError(manifest.string() + ": instance '" + id + "': " + what);
    };
    if (!e.is_object()) fail("entry must be an object");
    if (e.contains("id") && e["id"].is_string()) id = e["id"].get<std::string>();
    for (const char* key :
         {"id", "video_feat", "sub_feat", "qa_feat", "qa_json", "subs_path", "T"}) {
      if (!e.contains(key)) fail(std::string("missing key '") + key + "'");
    }
    if (!e["id"].is_string()) fail("'id' must be a string");
    id = e["id"].get<std::string>();
    if (!e["T"].is_number_unsigned() || e["T"].get<std::size_t>() == 0) {
      fail("'T' must be a positive integer");
    }
    for (const char* key : {"video_feat", "sub_feat", "qa_feat", "qa_json", "subs_path"}) {
      if (!e[key].is_string()) fail(std::string("'") + key + "' must be a path string");
    }
    try {
      Instance inst;
      inst.id = id;
      inst.grid = FrameGrid{e["T"].get<std::size_t>(), opts.fps};
      inst.video = read_feature_file(root / e["video_feat"].get<std::string>());
      inst.subtitle_words = read_feature_file(root / e["sub_feat"].get<std::string>());
      inst.hypotheses = read_feature_file(root / e["qa_feat"].get<std::string>());
      const fs::path qa_path = root / e["qa_json"].get<std::string>();
      std::ifstream qa_in(qa_path);
      if (!qa_in) throw ValidationError(qa_path.string() + ": cannot open QA JSON");
      nlohmann::json qa_json;
      try {
        qa_in >> qa_json;
      } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(qa_path.string() + ": malformed JSON: " + ex.what());
      }
      inst.qa = parse_qa_json(qa_json, qa_path.string());
      inst.track = SubtitleTrack::load(root / e["subs_path"].get<std::string>());
      finalize_instance(inst, opts);
      out.push_back(std::move(inst));
    } catch (const ValidationError& ex) {
      fail(ex.what());
    }
  }
  return out;
}

void save_dataset(const fs::path& dir, const std::vector<Instance>& instances) {
  fs::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& inst : instances) {
    const std::string base = inst.id;
    write_feature_file(dir / (base + ".video.bin"), inst.video);
    write_feature_file(dir / (base + ".subs.bin"), inst.subtitle_words);
    write_feature_file(dir / (base + ".qa.bin"), inst.hypotheses);
    {
      std::ofstream qa(dir / (base + ".qa.json"));
      qa << to_json(inst.qa).dump(2) << '\n';
    }
    inst.track.save(dir / (base + ".subs.tsv"));
    manifest.push_back({{"id", inst.id},
                        {"video_feat", base + ".video.bin"},
                        {"sub_feat", base + ".subs.bin"},
                        {"qa_feat", base + ".qa.bin"},
                        {"qa_json", base + ".qa.json"},
                        {"subs_path", base + ".subs.tsv"},
                        {"T", inst.grid.frames}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error((dir / "manifest.json").string() + ": cannot write");
  out << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthConfig::validate() const {
  if (frames == 0 || regions == 0 || hyp_words < 2 || sub_words < 2 || raw_dim == 0) {
    throw ValidationError("synth: frames, regions and raw_dim must be positive; "
                          "hyp_words and sub_words must be at least 2");
  }
  if ((min_span && min_span > frames) || (max_span && max_span > frames) ||
      (min_span && max_span && min_span > max_span)) {
    throw ValidationError("synth: span bounds must satisfy 1 <= min_span <= max_span <= frames");
  }
  if (!(signal >= 0.0) || !(noise >= 0.0) || !(topic >= 0.0)) {
    throw ValidationError("synth: signal, noise and topic must be non-negative");
  }
}

std::vector<Instance> synth_dataset(const SynthConfig& cfg, const DataOptions& opts,
                                    const std::string& id_prefix) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t r = cfg.raw_dim;
  const std::size_t words = cfg.sub_words / 2;
  auto random_vector = [&] {
    std::vector<double> v(r);
    for (double& x : v) x = gauss(rng);
    return v;
  };
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  std::vector<Instance> out;
  out.reserve(cfg.instances);
  for (std::size_t n = 0; n < cfg.instances; ++n) {
    Instance inst;
    std::ostringstream id;
    id << id_prefix << '-' << std::setw(5) << std::setfill('0') << n;
    inst.id = id.str();
    inst.grid = FrameGrid{cfg.frames, opts.fps};
    const double frame_len = 1.0 / opts.fps;

    // Subtitles last one to three frames each and tile the whole video.
    std::vector<SubtitleEntry> entries;
    for (double t = 0.0; t < inst.grid.duration();
         t += frame_len * static_cast<double>(uniform_int(1, 3))) {
      SubtitleEntry e;
      e.start = t;
      for (std::size_t w = 0; w < words; ++w) {
        e.tokens.push_back("s" + std::to_string(entries.size()) + "w" + std::to_string(w));
      }
      entries.push_back(std::move(e));
    }
    inst.track = SubtitleTrack(std::move(entries), inst.grid.duration());
    const std::size_t n_sub = inst.track.size();

    const std::size_t min_len =
        cfg.min_span ? cfg.min_span : std::max<std::size_t>(1, cfg.frames / 8);
    const std::size_t max_len =
        cfg.max_span ? cfg.max_span : std::max<std::size_t>(min_len, cfg.frames / 2);
    const std::size_t len = uniform_int(min_len, max_len);
    const std::size_t st = uniform_int(0, cfg.frames - len);
    const Span gt{st, st + len - 1};
    const std::size_t answer = uniform_int(0, kNumAnswers - 1);

    std::vector<std::vector<double>> topics;
    for (std::size_t i = 0; i < n_sub; ++i) topics.push_back(random_vector());
    std::vector<std::vector<double>> signatures;
    for (std::size_t k = 0; k < kNumAnswers; ++k) signatures.push_back(random_vector());
    const auto& planted = signatures[answer];

    inst.video = Tensor({cfg.frames, cfg.regions, r});
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      const double mid = (static_cast<double>(t) + 0.5) * frame_len;
      std::size_t active = 0;
      while (active + 1 < n_sub && inst.track.start(active + 1) <= mid) ++active;
      const bool inside = gt.contains(t);
      for (std::size_t o = 0; o < cfg.regions; ++o) {
        for (std::size_t c = 0; c < r; ++c) {
          double v = cfg.noise * gauss(rng) + cfg.topic * topics[active][c];
          if (inside) v += cfg.signal * planted[c];
          inst.video[(t * cfg.regions + o) * r + c] = v;
        }
      }
    }

    const auto [gt_begin, gt_end] = span_window(gt, inst.grid);
    inst.subtitle_words = Tensor({n_sub, words, r});
    for (std::size_t i = 0; i < n_sub; ++i) {
      const bool overlaps = inst.track.start(i) < gt_end && inst.track.start(i + 1) > gt_begin;
      for (std::size_t w = 0; w < words; ++w) {
        for (std::size_t c = 0; c < r; ++c) {
          double v = cfg.noise * gauss(rng) + cfg.topic * topics[i][c];
          if (overlaps) v += cfg.signal * planted[c];
          inst.subtitle_words[(i * words + w) * r + c] = v;
        }
      }
    }

    // Question words are shared; answer words carry each answer's signature.
    std::vector<std::vector<double>> question;
    for (std::size_t l = 0; l < cfg.hyp_words / 2; ++l) question.push_back(random_vector());
    inst.hypotheses = Tensor({kNumAnswers, cfg.hyp_words, r});
    for (std::size_t k = 0; k < kNumAnswers; ++k) {
      for (std::size_t l = 0; l < cfg.hyp_words; ++l) {
        const auto& base = l < question.size() ? question[l] : signatures[k];
        for (std::size_t c = 0; c < r; ++c) {
          inst.hypotheses[(k * cfg.hyp_words + l) * r + c] =
              cfg.noise * gauss(rng) + base[c];
        }
      }
    }

    inst.qa.question = "synthetic question " + std::to_string(n);
    for (std::size_t k = 0; k < kNumAnswers; ++k) {
      inst.qa.answers[k] = "answer " + std::to_string(k);
    }
    inst.qa.gt_index = answer;
    inst.qa.gt_span = gt;
    finalize_instance(inst, opts);
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predictions

namespace {

nlohmann::json span_json(const Span& s) { return {s.st, s.ed}; }

Span span_from(const nlohmann::json& j, const char* key) {
  const auto& s = j.at(key);
  if (!s.is_array() || s.size() != 2) {
    throw ValidationError(std::string("prediction: '") + key + "' must be [st, ed]");
  }
  return Span::make(s[0].get<std::size_t>(), s[1].get<std::size_t>());
}

void validate_prediction(const PredictionRecord& r) {
  const std::size_t frames = r.p_st.size();
  auto fail = [&](const std::string& what) {
    throw ValidationError("prediction '" + r.id + "': " + what);
  };
  if (frames == 0) fail("empty p_st");
  if (r.p_ed.size() != frames) fail("p_ed length differs from p_st");
  if (r.scores.size() != frames) {
    fail("trace length " + std::to_string(r.scores.size()) + " != grid T " +
         std::to_string(frames));
  }
  for (const Span* s : {&r.decoded_span, &r.span}) {
    if (s->st > s->ed || s->ed >= frames) fail("span " + to_string(*s) + " outside grid");
  }
  if (r.gt_span && r.gt_span->ed >= frames) fail("gt_span outside grid");
  if (r.answer_scores.size() != kNumAnswers) fail("expected 5 answer scores");
}

}  // namespace

nlohmann::json to_json(const PredictionRecord& r) {
  return {{"id", r.id},
          {"answer_scores", r.answer_scores},
          {"pred_answer", r.predicted_answer},
          {"gt_answer", r.gt_answer},
          {"p_st", r.p_st},
          {"p_ed", r.p_ed},
          {"scores", r.scores},
          {"decoded_span", span_json(r.decoded_span)},
          {"span", span_json(r.span)},
          {"gt_span", r.gt_span ? span_json(*r.gt_span) : nlohmann::json(nullptr)}};
}

PredictionRecord prediction_from_json(const nlohmann::json& j) {
  try {
    PredictionRecord r;
    r.id = j.at("id").get<std::string>();
    r.answer_scores = j.at("answer_scores").get<std::vector<double>>();
    r.predicted_answer = j.at("pred_answer").get<std::size_t>();
    r.gt_answer = j.at("gt_answer").get<std::size_t>();
    r.p_st = j.at("p_st").get<std::vector<double>>();
    r.p_ed = j.at("p_ed").get<std::vector<double>>();
    r.scores = j.at("scores").get<std::vector<double>>();
    r.decoded_span = span_from(j, "decoded_span");
    r.span = span_from(j, "span");
    if (j.contains("gt_span") && !j["gt_span"].is_null()) r.gt_span = span_from(j, "gt_span");
    validate_prediction(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("prediction: malformed record: ") + e.what());
  }
}

void write_predictions(const fs::path& path, const std::vector<PredictionRecord>& records) {
  for (const auto& r : records) validate_prediction(r);
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot write predictions");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::vector<PredictionRecord> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open predictions");
  std::vector<PredictionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(prediction_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vqg
