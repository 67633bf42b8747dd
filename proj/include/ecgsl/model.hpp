#pragma once

// The segment-sequence network: convolutional structural encoder/decoder,
// sinusoidal positions, pre-norm transformer, attention pooling and the two
// heads, plus the raw-signal baseline CNN.
//
// Parameters are stored by name in a sorted map; every forward function reads
// them through a `Bound`, which materialises each parameter on the tape the
// first time it is used and can hand the gradients back by name.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ecgsl/tensor.hpp"

namespace ecgsl {

struct EncoderConfig {
  std::vector<std::size_t> channels{16, 32, 32, 64, 64, 128};
  std::size_t kernel_size = 5;
  std::size_t stride = 2;
  std::size_t embed_dim = 64;
  std::size_t segment_length = 100;

  void validate() const;
  std::size_t padding() const { return kernel_size / 2; }
  // Sequence lengths through the stack, lengths()[0] == segment_length.
  std::vector<std::size_t> lengths() const;
  std::size_t flat_size() const { return channels.back() * lengths().back(); }
};

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;
};

enum class Architecture { SegmentTransformer, BaselineCnn };

struct ModelConfig {
  Architecture arch = Architecture::SegmentTransformer;
  EncoderConfig encoder;
  TransformerConfig transformer;
  std::size_t num_classes = 3;
  std::size_t classifier_hidden = 64;
  std::vector<std::size_t> cnn_channels{32, 32, 64, 64, 128, 256};

  void validate() const;
  std::size_t d() const { return encoder.embed_dim; }

  // key=value lines, stable order; parse rejects unknown keys.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

template <class T>
using ParameterSet = std::map<std::string, Array<T>>;

template <class U, class T>
ParameterSet<U> cast_parameters(const ParameterSet<T>& p) {
  ParameterSet<U> out;
  for (const auto& [name, a] : p) out.emplace(name, a.template cast<U>());
  return out;
}

// Shape of every parameter the configuration owns.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg);

// Glorot-uniform weights, zero biases, unit layer-norm gains.
ParameterSet<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

template <class T>
class Bound {
 public:
  // Parameters whose name starts with one of `frozen_prefixes` enter the tape
  // as constants and never receive a gradient.
  Bound(Tape<T>& tape, const ParameterSet<T>& params, bool trainable = true,
        std::vector<std::string> frozen_prefixes = {})
      : tape_(tape), params_(params), trainable_(trainable), frozen_(std::move(frozen_prefixes)) {}

  Tape<T>& tape() { return tape_; }
  Tensor<T> operator()(const std::string& name);
  // Uses `t` in place of the stored parameter `name` from now on.
  void bind(const std::string& name, Tensor<T> t) { leaves_.insert_or_assign(name, std::move(t)); }
  // Gradients of every trainable parameter this binding touched.
  ParameterSet<T> gradients() const;

 private:
  Tape<T>& tape_;
  const ParameterSet<T>& params_;
  bool trainable_;
  std::vector<std::string> frozen_;
  std::map<std::string, Tensor<T>> leaves_;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
};

// [N, S] -> [N, d]
template <class T>
Tensor<T> encode_segments(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& x);
// [N, d] -> [N, S], values in (0, 1)
template <class T>
Tensor<T> decode_embeddings(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& e);

// PE[t, 2k] = sin(t / 10000^(2k/d)), PE[t, 2k+1] = cos(same).
template <class T>
Array<T> positional_encoding(std::size_t steps, std::size_t d);

// h[T, d] -> [T, d]. Positions with mask == 0 neither attend nor are attended.
template <class T>
Tensor<T> transformer_forward(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& h,
                              std::span<const std::uint8_t> mask, const ForwardOptions& opt);

template <class T>
struct PoolResult {
  Tensor<T> pooled;   // [1, d]
  Tensor<T> weights;  // [1, T]
};

template <class T>
PoolResult<T> attention_pool(Bound<T>& p, const Tensor<T>& h, std::span<const std::uint8_t> mask);

// [1, d] -> [1, C] raw logits.
template <class T>
Tensor<T> classify(Bound<T>& p, const Tensor<T>& pooled);

// [M, d] -> [M, S], values in (0, 1)
template <class T>
Tensor<T> reconstruct(Bound<T>& p, const Tensor<T>& hidden);

template <class T>
struct SequenceForward {
  Tensor<T> hidden;  // [T, d]
  Tensor<T> logits;  // [1, C], only when classification was requested
  Tensor<T> pool_weights;
};

// Full path: encode every segment, add positions, run the transformer and,
// when `with_classifier`, pool and classify. x is [T, S].
template <class T>
SequenceForward<T> forward_sequence(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& x,
                                    std::span<const std::uint8_t> mask, const ForwardOptions& opt,
                                    bool with_classifier = true);

// Raw signal [L] (L >= 64) -> logits [1, C].
template <class T>
Tensor<T> baseline_cnn_forward(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& signal);

enum class Stage { None, Autoencoder, Masked, Finetuned };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct AdamState {
  ParameterSet<float> m;
  ParameterSet<float> v;
  std::uint64_t step = 0;

  bool operator==(const AdamState&) const = default;
};

struct ModelState {
  ModelConfig config;
  ParameterSet<float> params;
  Stage stage = Stage::None;
  std::uint64_t seed = 0;
  std::string run_config;  // resolved key=value snapshot of the producing run
  std::optional<AdamState> optimizer;

  static ModelState initial(const ModelConfig& cfg, std::uint64_t seed);
  bool has_classifier() const { return stage == Stage::Finetuned; }
};

// Logits of one sequence in eval mode; the model must be a segment transformer.
std::vector<float> predict_logits(const ModelState& state, const Array<float>& segments,
                                  std::span<const std::uint8_t> mask);

}  // namespace ecgsl
