#pragma once

// Training loops: structural autoencoder, masked-segment pre-training,
// supervised fine-tuning, and the raw-signal CNN baseline.
//
// Every sample is forwarded on its own tape; gradients of a batch are summed
// in sample order and averaged, so results do not depend on the worker count.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ecgsl/model.hpp"
#include "ecgsl/random.hpp"
#include "ecgsl/signal.hpp"

namespace ecgsl {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double mask_fraction = 0.10;
  bool freeze_encoder = false;
  std::size_t workers = 1;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // sample-weighted mean over the epoch
  std::optional<double> metric;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch;  // fine-tuning with validation only

  // "epoch\tloss\tmetric\tseconds" per line, metric "-" when absent.
  std::string to_text() const;
  // First epoch whose metric reaches `target`.
  std::optional<std::size_t> epochs_to_reach(double target) const;
};

struct TrainResult {
  ModelState state;
  TrainHistory history;
};

using LogFn = std::function<void(const std::string&)>;

// One Adam update with bias correction. `state.step` is incremented first and
// used as the step index. Parameters without an entry in `grads` are left
// untouched, moments included. A non-finite gradient aborts before any change.
void adam_step(ParameterSet<float>& params, const ParameterSet<float>& grads, AdamState& state,
               const TrainConfig& cfg);

AdamState zero_adam_state(const ParameterSet<float>& params);

// max(1, round(fraction * N_real)) distinct indices among real segments,
// ascending. Empty when there is no real segment.
std::vector<std::size_t> select_mask(std::span<const std::uint8_t> pad_mask, double fraction, Rng& rng);

// Runs fn(0..n-1) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

// Per-segment reconstruction over every real segment of the corpus.
TrainResult pretrain_autoencoder(const std::vector<SegmentSequence>& corpus, const ModelState& init,
                                 const TrainConfig& cfg, const LogFn& log = {});

// Requires an autoencoder-stage init unless `from_scratch`.
TrainResult pretrain_masked(const std::vector<SegmentSequence>& corpus, const ModelState& init,
                            const TrainConfig& cfg, bool from_scratch = false, const LogFn& log = {});

// Cross-entropy fine-tuning of every parameter. With a validation set the
// state of the best-macro-F1 epoch is returned, otherwise the last one.
TrainResult finetune(const std::vector<SegmentSequence>& train, const std::vector<SegmentSequence>& validation,
                     const ModelState& init, const TrainConfig& cfg, const LogFn& log = {});

// Eval-mode argmax predictions.
std::vector<std::size_t> predict(const ModelState& state, const std::vector<SegmentSequence>& data,
                                 std::size_t workers = 1);

// Macro F1 of `state` on labelled sequences.
double macro_f1_on(const ModelState& state, const std::vector<SegmentSequence>& data, std::size_t workers = 1);

struct MaskedEvaluation {
  double model_mse = 0.0;         // eval-mode masked reconstruction error
  double mean_segment_mse = 0.0;  // predicting the corpus-mean segment at the same positions
  std::size_t masked_segments = 0;
};

// Draws masks with `seed` and scores both the model and the mean-segment baseline on them.
MaskedEvaluation evaluate_masked(const ModelState& state, const std::vector<SegmentSequence>& corpus,
                                 double mask_fraction, std::uint64_t seed);

// Eval-mode per-segment autoencoder MSE over all real segments.
double evaluate_autoencoder(const ModelState& state, const std::vector<SegmentSequence>& corpus);

struct LabelledSignal {
  std::vector<float> samples;
  std::size_t label = 0;
};

TrainResult train_baseline_cnn(const std::vector<LabelledSignal>& train, const std::vector<LabelledSignal>& validation,
                               const ModelState& init, const TrainConfig& cfg, const LogFn& log = {});
std::vector<std::size_t> predict_baseline_cnn(const ModelState& state, const std::vector<LabelledSignal>& data);

}  // namespace ecgsl
