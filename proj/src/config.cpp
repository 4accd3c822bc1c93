#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "vqg/errors.hpp"
#include "vqg/trainer.hpp"

namespace vqg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
std::optional<T> parse_number(const std::string& text) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) return std::nullopt;
  }
  return value;
}

struct Field {
  std::function<bool(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

template <typename T, typename Getter>
Field numeric(Getter ref) {
  return {[ref](Config& c, const std::string& v) {
            auto parsed = parse_number<T>(v);
            if (!parsed) return false;
            ref(c) = *parsed;
            return true;
          },
          [ref](const Config& c) {
            Config copy = c;
            std::ostringstream out;
            out << ref(copy);
            return out.str();
          }};
}

template <typename Getter>
Field norm_field(Getter ref) {
  return {[ref](Config& c, const std::string& v) {
            if (v != "raw" && v != "softmax" && v != "scaled") return false;
            ref(c) = parse_similarity_norm(v);
            return true;
          },
          [ref](const Config& c) {
            Config copy = c;
            return to_string(ref(copy));
          }};
}

const std::map<std::string, Field>& fields() {
  using Sz = std::size_t;
  static const std::map<std::string, Field> table = {
      // synthetic data
      {"frames", numeric<Sz>([](Config& c) -> Sz& { return c.synth.frames; })},
      {"regions", numeric<Sz>([](Config& c) -> Sz& { return c.synth.regions; })},
      {"hyp_words", numeric<Sz>([](Config& c) -> Sz& { return c.synth.hyp_words; })},
      {"sub_words", numeric<Sz>([](Config& c) -> Sz& { return c.synth.sub_words; })},
      {"raw_dim", numeric<Sz>([](Config& c) -> Sz& { return c.synth.raw_dim; })},
      {"instances", numeric<Sz>([](Config& c) -> Sz& { return c.synth.instances; })},
      {"val_instances", numeric<Sz>([](Config& c) -> Sz& { return c.val_instances; })},
      {"signal", numeric<double>([](Config& c) -> double& { return c.synth.signal; })},
      {"noise", numeric<double>([](Config& c) -> double& { return c.synth.noise; })},
      {"topic", numeric<double>([](Config& c) -> double& { return c.synth.topic; })},
      {"min_span", numeric<Sz>([](Config& c) -> Sz& { return c.synth.min_span; })},
      {"max_span", numeric<Sz>([](Config& c) -> Sz& { return c.synth.max_span; })},
      {"synth_seed",
       numeric<std::uint64_t>([](Config& c) -> std::uint64_t& { return c.synth.seed; })},
      // timeline
      {"fps", numeric<double>([](Config& c) -> double& { return c.data.fps; })},
      {"proposal_scale", numeric<Sz>([](Config& c) -> Sz& { return c.data.proposal_scale; })},
      // model
      {"hidden", numeric<Sz>([](Config& c) -> Sz& { return c.train.hidden; })},
      {"max_span_frames",
       numeric<Sz>([](Config& c) -> Sz& { return c.train.model.max_span_frames; })},
      {"word_similarity", norm_field([](Config& c) -> SimilarityNorm& {
         return c.train.model.word_similarity;
       })},
      {"frame_similarity", norm_field([](Config& c) -> SimilarityNorm& {
         return c.train.model.frame_similarity;
       })},
      // training
      {"batch_size", numeric<Sz>([](Config& c) -> Sz& { return c.train.batch_size; })},
      {"learning_rate",
       numeric<double>([](Config& c) -> double& { return c.train.learning_rate; })},
      {"late_learning_rate",
       numeric<double>([](Config& c) -> double& { return c.train.late_learning_rate; })},
      {"lr_drop_epoch", numeric<Sz>([](Config& c) -> Sz& { return c.train.lr_drop_epoch; })},
      {"epochs", numeric<Sz>([](Config& c) -> Sz& { return c.train.epochs; })},
      {"seed", numeric<std::uint64_t>([](Config& c) -> std::uint64_t& { return c.train.seed; })},
      {"adam_beta1", numeric<double>([](Config& c) -> double& { return c.train.adam.beta1; })},
      {"adam_beta2", numeric<double>([](Config& c) -> double& { return c.train.adam.beta2; })},
      {"adam_epsilon",
       numeric<double>([](Config& c) -> double& { return c.train.adam.epsilon; })},
      // losses
      {"lambda1", numeric<double>([](Config& c) -> double& { return c.train.loss.lambda1; })},
      {"lambda2", numeric<double>([](Config& c) -> double& { return c.train.loss.lambda2; })},
      {"epsilon", numeric<double>([](Config& c) -> double& { return c.train.loss.epsilon; })},
      // grounding
      {"alpha", numeric<double>([](Config& c) -> double& { return c.train.wsqg.alpha; })},
      {"scoring",
       {[](Config& c, const std::string& v) {
          if (v != "mean" && v != "sum") return false;
          c.train.wsqg.scoring = parse_scoring(v);
          return true;
        },
        [](const Config& c) { return to_string(c.train.wsqg.scoring); }}},
  };
  return table;
}

}  // namespace

Config parse_config(std::istream& in, const std::string& source) {
  Config cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fail = [&](const std::string& what) {
      throw ValidationError(source + ":" + std::to_string(line_no) + ": " + what);
    };
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = fields().find(key);
    if (it == fields().end()) fail("unknown key '" + key + "'");
    if (!seen.insert(key).second) fail("duplicate key '" + key + "'");
    if (value.empty() || !it->second.set(cfg, value)) {
      fail("invalid value '" + value + "' for '" + key + "'");
    }
  }
  try {
    cfg.synth.validate();
    cfg.train.validate();
    if (cfg.data.proposal_scale < 2) throw ValidationError("proposal_scale must be >= 2");
    if (!(cfg.data.fps > 0.0)) throw ValidationError("fps must be positive");
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return cfg;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open config");
  return parse_config(in, path.string());
}

std::string describe_config(const Config& cfg) {
  std::ostringstream out;
  for (const auto& [key, field] : fields()) out << key << " = " << field.get(cfg) << '\n';
  return out.str();
}

}  // namespace vqg
