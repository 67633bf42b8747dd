#include "run_config.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "ecgsl/data_io.hpp"
#include "ecgsl/error.hpp"

namespace ecgsl::cli {

namespace {

enum class Kind { Count, Real, Bool, PadMode, Arch, List };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* default_value;
};

// Model defaults mirror ModelConfig{}; the rest mirror the library structs.
const KeySpec kSchema[] = {
    {"seed", Kind::Count, "0"},
    {"workers", Kind::Count, "1"},

    {"synth.records", Kind::Count, "100"},
    {"synth.classes", Kind::Count, "3"},
    {"synth.duration", Kind::Real, "60"},
    {"synth.fs", Kind::Real, "100"},
    {"synth.hr_min", Kind::Real, "55"},
    {"synth.hr_max", Kind::Real, "95"},
    {"synth.rr_jitter", Kind::Real, "0.03"},
    {"synth.snr", Kind::Real, "inf"},
    {"synth.t_delta", Kind::Real, "0.35"},
    {"synth.rr_delta", Kind::Real, "1"},

    {"segment.length", Kind::Count, "100"},
    {"segment.pre_fraction", Kind::Real, "0.35"},
    {"segment.post_fraction", Kind::Real, "0.45"},
    {"segment.pad_mode", Kind::PadMode, "edge"},
    {"segment.target_fs", Kind::Real, "100"},

    {"model.arch", Kind::Arch, "segment-transformer"},
    {"model.channels", Kind::List, "16,32,32,64,64,128"},
    {"model.kernel", Kind::Count, "5"},
    {"model.stride", Kind::Count, "2"},
    {"model.embed_dim", Kind::Count, "64"},
    {"model.layers", Kind::Count, "2"},
    {"model.heads", Kind::Count, "4"},
    {"model.ffn_dim", Kind::Count, "128"},
    {"model.dropout", Kind::Real, "0.1"},
    {"model.classifier_hidden", Kind::Count, "64"},
    {"model.cnn_channels", Kind::List, "32,32,64,64,128,256"},

    {"train.beta1", Kind::Real, "0.9"},
    {"train.beta2", Kind::Real, "0.999"},
    {"train.eps", Kind::Real, "1e-08"},
    {"train.mask_fraction", Kind::Real, "0.1"},
    {"train.freeze_encoder", Kind::Bool, "false"},
    {"ae.epochs", Kind::Count, "20"},
    {"ae.lr", Kind::Real, "0.0001"},
    {"ae.batch_size", Kind::Count, "64"},
    {"mask.epochs", Kind::Count, "20"},
    {"mask.lr", Kind::Real, "0.0001"},
    {"mask.batch_size", Kind::Count, "64"},
    {"finetune.epochs", Kind::Count, "20"},
    {"finetune.lr", Kind::Real, "0.0001"},
    {"finetune.batch_size", Kind::Count, "64"},

    {"eval.folds", Kind::Count, "5"},
};

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kSchema)
    if (key == k.key) return &k;
  return nullptr;
}

bool parse_count(const std::string& v, std::uint64_t& out) {
  const auto* end = v.data() + v.size();
  auto r = std::from_chars(v.data(), end, out);
  return !v.empty() && r.ec == std::errc() && r.ptr == end;
}

bool parse_real(const std::string& v, double& out) {
  if (v == "inf") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  const auto* end = v.data() + v.size();
  auto r = std::from_chars(v.data(), end, out);
  return !v.empty() && r.ec == std::errc() && r.ptr == end && std::isfinite(out);
}

bool valid_value(Kind kind, const std::string& v) {
  std::uint64_t u;
  double d;
  switch (kind) {
    case Kind::Count: return parse_count(v, u);
    case Kind::Real: return parse_real(v, d);
    case Kind::Bool: return v == "true" || v == "false";
    case Kind::PadMode: return v == "edge" || v == "zero" || v == "stretch";
    case Kind::Arch: return v == "segment-transformer" || v == "cnn";
    case Kind::List: {
      std::stringstream ss(v);
      std::string item;
      std::size_t n = 0;
      while (std::getline(ss, item, ',')) {
        if (!parse_count(item, u)) return false;
        ++n;
      }
      return n > 0;
    }
  }
  return false;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kSchema) values_[k.key] = k.default_value;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : kSchema) out.push_back(k.key);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto* spec = find_key(key);
  require(spec != nullptr, ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  require(valid_value(spec->kind, value), ErrorCode::InvalidConfig,
          "invalid value '" + value + "' for config key '" + key + "'");
  values_[key] = value;
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig,
            origin + ":" + std::to_string(n) + ": expected key=value, got '" + line + "'");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::load_file(const std::filesystem::path& path) { load_text(read_file(path), path.string()); }

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  require(it != values_.end(), ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const {
  double d = 0.0;
  parse_real(get(key), d);
  return d;
}

std::uint64_t RunConfig::integer(const std::string& key) const {
  std::uint64_t u = 0;
  parse_count(get(key), u);
  return u;
}

bool RunConfig::flag(const std::string& key) const { return get(key) == "true"; }

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::string RunConfig::result_text() const {
  std::string out;
  for (const auto& [k, v] : values_)
    if (k != "workers") out += k + "=" + v + "\n";
  return out;
}

SynthConfig RunConfig::synth() const {
  SynthConfig c;
  c.num_records = integer("synth.records");
  c.num_classes = integer("synth.classes");
  c.duration_s = real("synth.duration");
  c.fs = real("synth.fs");
  c.hr_min_bpm = real("synth.hr_min");
  c.hr_max_bpm = real("synth.hr_max");
  c.rr_jitter = real("synth.rr_jitter");
  c.snr_db = real("synth.snr");
  c.t_amplitude_delta = real("synth.t_delta");
  c.rr_variability_delta = real("synth.rr_delta");
  c.seed = integer("seed");
  c.validate();
  return c;
}

SegmentationConfig RunConfig::segmentation() const {
  SegmentationConfig c;
  c.segment_length = integer("segment.length");
  c.pre_fraction = real("segment.pre_fraction");
  c.post_fraction = real("segment.post_fraction");
  c.pad_mode = parse_pad_mode(get("segment.pad_mode"));
  c.target_fs = real("segment.target_fs");
  c.validate();
  return c;
}

ModelConfig RunConfig::model(std::size_t segment_length, std::size_t num_classes) const {
  std::string text;
  for (const auto& [k, v] : values_)
    if (k.rfind("model.", 0) == 0) text += k + "=" + v + "\n";
  text += "model.segment_length=" + std::to_string(segment_length) + "\n";
  text += "model.classes=" + std::to_string(num_classes) + "\n";
  return ModelConfig::from_text(text);
}

TrainConfig RunConfig::train(TrainStage stage) const {
  const std::string p = stage == TrainStage::Autoencoder ? "ae." : stage == TrainStage::Masked ? "mask." : "finetune.";
  TrainConfig c;
  c.epochs = integer(p + "epochs");
  c.learning_rate = real(p + "lr");
  c.batch_size = integer(p + "batch_size");
  c.adam_beta1 = real("train.beta1");
  c.adam_beta2 = real("train.beta2");
  c.adam_eps = real("train.eps");
  c.mask_fraction = real("train.mask_fraction");
  c.freeze_encoder = flag("train.freeze_encoder");
  c.seed = integer("seed");
  c.workers = integer("workers");
  c.validate();
  return c;
}

}  // namespace ecgsl::cli
