#pragma once

// Input saliency: |d logit_c / d x| for the predicted class c, plus the
// per-class summaries built from it. Segments share the peak anchor index, so
// averaging across segments is positional.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ecgsl/model.hpp"
#include "ecgsl/signal.hpp"
#include "ecgsl/tensor.hpp"

namespace ecgsl {

// Anything that maps segments [N, S] plus a padding mask to logits [1, C].
class SequenceClassifier {
 public:
  virtual ~SequenceClassifier() = default;
  virtual Tensor<double> logits(Tape<double>& tape, const Tensor<double>& x,
                                std::span<const std::uint8_t> mask) const = 0;
};

// The fine-tuned model, evaluated in double precision without dropout.
class ModelClassifier : public SequenceClassifier {
 public:
  // InvalidState unless the state carries a trained classification head.
  explicit ModelClassifier(const ModelState& state);
  Tensor<double> logits(Tape<double>& tape, const Tensor<double>& x,
                        std::span<const std::uint8_t> mask) const override;

 private:
  ModelConfig config_;
  ParameterSet<double> params_;
};

// logits[c] = sum over real rows i of x[i, :] . w[:, c]; w is [S, C].
class LinearClassifier : public SequenceClassifier {
 public:
  explicit LinearClassifier(Array<double> w);
  Tensor<double> logits(Tape<double>& tape, const Tensor<double>& x,
                        std::span<const std::uint8_t> mask) const override;

 private:
  Array<double> w_;
};

struct SaliencyMap {
  Array<float> values;  // [N, S], >= 0, zero on padding rows
  std::size_t predicted_class = 0;
  std::string record_id;
};

SaliencyMap input_saliency(const SequenceClassifier& model, const SegmentSequence& seq);
SaliencyMap input_saliency(const ModelState& state, const SegmentSequence& seq);

// One map per sequence, computed on up to `workers` threads.
std::vector<SaliencyMap> saliency_maps(const SequenceClassifier& model, const std::vector<SegmentSequence>& data,
                                       std::size_t workers = 1);

struct ClassSaliency {
  std::vector<double> mean_segment;   // [S]
  std::vector<double> mean_saliency;  // [S]
  std::size_t count = 0;              // real segments averaged
};

// Over every real segment of every sequence predicted as `c`. EmptyClass when none is.
ClassSaliency class_average_saliency(const std::vector<SegmentSequence>& data, const std::vector<SaliencyMap>& maps,
                                     std::size_t c);
// Mean over sequences predicted as `c` of the real segment with the largest
// summed saliency (lowest index on ties). EmptyClass when none is.
std::vector<double> highest_saliency_segment(const std::vector<SegmentSequence>& data,
                                             const std::vector<SaliencyMap>& maps, std::size_t c);

struct ClassSaliencySummary {
  std::string class_name;
  std::optional<ClassSaliency> average;  // absent when nothing was predicted as this class
  std::vector<double> top_segment;
};

// Row per position 0..S-1; per class: mean segment, mean saliency, mean top segment.
// Classes without predictions leave their cells empty.
std::string saliency_csv(const std::vector<ClassSaliencySummary>& classes, std::size_t segment_length);

}  // namespace ecgsl
