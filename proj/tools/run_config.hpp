#pragma once

// Resolved run settings: schema defaults, then a key=value file, then flags.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ecgsl/model.hpp"
#include "ecgsl/signal.hpp"
#include "ecgsl/synth.hpp"
#include "ecgsl/training.hpp"

namespace ecgsl::cli {

enum class TrainStage { Autoencoder, Masked, Finetune };

class RunConfig {
 public:
  RunConfig();

  // InvalidConfig for unknown keys or values that do not parse for the key's type.
  void set(const std::string& key, const std::string& value);
  // "key=value" per line, '#' comments and blank lines ignored.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin);

  const std::string& get(const std::string& key) const;
  double real(const std::string& key) const;
  std::uint64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;

  // Every key, sorted, one "key=value" per line.
  std::string to_text() const;
  // to_text() without execution-only keys (workers), as embedded in checkpoints.
  std::string result_text() const;
  static std::vector<std::string> keys();

  SynthConfig synth() const;
  SegmentationConfig segmentation() const;
  // Segment length and class count come from the data, not from the config.
  ModelConfig model(std::size_t segment_length, std::size_t num_classes) const;
  TrainConfig train(TrainStage stage) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace ecgsl::cli
