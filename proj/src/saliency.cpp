#include "ecgsl/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ecgsl/training.hpp"

namespace ecgsl {

ModelClassifier::ModelClassifier(const ModelState& state) : config_(state.config) {
  require(state.config.arch == Architecture::SegmentTransformer, ErrorCode::InvalidState,
          "saliency needs a segment-transformer model");
  require(state.has_classifier(), ErrorCode::InvalidState,
          "saliency needs a fine-tuned checkpoint, got stage '" + to_string(state.stage) + "'");
  params_ = cast_parameters<double>(state.params);
}

Tensor<double> ModelClassifier::logits(Tape<double>& tape, const Tensor<double>& x,
                                       std::span<const std::uint8_t> mask) const {
  Bound<double> p(tape, params_, false);
  return forward_sequence(p, config_, x, mask, {}).logits;
}

LinearClassifier::LinearClassifier(Array<double> w) : w_(std::move(w)) {
  require(w_.shape.size() == 2, ErrorCode::Shape, "linear classifier weights must be [S, C]");
}

Tensor<double> LinearClassifier::logits(Tape<double>& tape, const Tensor<double>& x,
                                        std::span<const std::uint8_t> mask) const {
  Array<double> m({1, mask.size()});
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? 1.0 : 0.0;
  return matmul(tape.constant(m), matmul(x, tape.constant(w_)));
}

SaliencyMap input_saliency(const SequenceClassifier& model, const SegmentSequence& seq) {
  require(!seq.segments.empty() && seq.pad_mask.size() == seq.size(), ErrorCode::Data,
          "saliency: invalid sequence '" + seq.record_id + "'");
  Tape<double> tape;
  auto x = tape.variable(seq.matrix().cast<double>());
  auto z = model.logits(tape, x, seq.pad_mask);
  require(z.rank() == 2 && z.dim(0) == 1, ErrorCode::Shape, "classifier must return logits [1, C]");
  auto zd = z.data();
  const auto c = static_cast<std::size_t>(std::max_element(zd.begin(), zd.end()) - zd.begin());
  tape.backward(slice(z, 1, c, c + 1));

  SaliencyMap out{Array<float>(x.shape()), c, seq.record_id};
  const auto g = x.grad_array();
  const std::size_t S = x.dim(1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.pad_mask[i]) continue;
    for (std::size_t j = 0; j < S; ++j) out.values.at(i, j) = static_cast<float>(std::abs(g.at(i, j)));
  }
  return out;
}

SaliencyMap input_saliency(const ModelState& state, const SegmentSequence& seq) {
  return input_saliency(ModelClassifier(state), seq);
}

std::vector<SaliencyMap> saliency_maps(const SequenceClassifier& model, const std::vector<SegmentSequence>& data,
                                       std::size_t workers) {
  std::vector<SaliencyMap> out(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { out[i] = input_saliency(model, data[i]); });
  return out;
}

namespace {

void check_pairs(const std::vector<SegmentSequence>& data, const std::vector<SaliencyMap>& maps) {
  require(data.size() == maps.size(), ErrorCode::Shape, "one saliency map per sequence expected");
  for (std::size_t k = 0; k < data.size(); ++k)
    require(maps[k].values.shape == Shape{data[k].size(), data[k].segment_length()}, ErrorCode::Shape,
            "saliency map shape differs from sequence '" + data[k].record_id + "'");
}

std::size_t common_length(const std::vector<SegmentSequence>& data, const std::vector<SaliencyMap>& maps,
                          std::size_t c) {
  for (std::size_t k = 0; k < data.size(); ++k)
    if (maps[k].predicted_class == c && data[k].real_count() > 0) return data[k].segment_length();
  fail(ErrorCode::EmptyClass, "no sample is predicted as class " + std::to_string(c));
}

}  // namespace

ClassSaliency class_average_saliency(const std::vector<SegmentSequence>& data, const std::vector<SaliencyMap>& maps,
                                     std::size_t c) {
  check_pairs(data, maps);
  const std::size_t S = common_length(data, maps, c);
  ClassSaliency out{std::vector<double>(S, 0.0), std::vector<double>(S, 0.0), 0};
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (maps[k].predicted_class != c) continue;
    require(data[k].segment_length() == S, ErrorCode::Shape, "segment lengths differ within a class");
    for (std::size_t i = 0; i < data[k].size(); ++i) {
      if (!data[k].pad_mask[i]) continue;
      for (std::size_t j = 0; j < S; ++j) {
        out.mean_segment[j] += data[k].segments[i].values[j];
        out.mean_saliency[j] += maps[k].values.at(i, j);
      }
      ++out.count;
    }
  }
  for (std::size_t j = 0; j < S; ++j) {
    out.mean_segment[j] /= static_cast<double>(out.count);
    out.mean_saliency[j] /= static_cast<double>(out.count);
  }
  return out;
}

std::vector<double> highest_saliency_segment(const std::vector<SegmentSequence>& data,
                                             const std::vector<SaliencyMap>& maps, std::size_t c) {
  check_pairs(data, maps);
  const std::size_t S = common_length(data, maps, c);
  std::vector<double> out(S, 0.0);
  std::size_t n = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (maps[k].predicted_class != c || data[k].real_count() == 0) continue;
    std::size_t best = 0;
    double best_sum = -1.0;
    for (std::size_t i = 0; i < data[k].size(); ++i) {
      if (!data[k].pad_mask[i]) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < S; ++j) s += maps[k].values.at(i, j);
      if (s > best_sum) best_sum = s, best = i;
    }
    for (std::size_t j = 0; j < S; ++j) out[j] += data[k].segments[best].values[j];
    ++n;
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

std::string saliency_csv(const std::vector<ClassSaliencySummary>& classes, std::size_t segment_length) {
  std::string out = "position";
  for (const auto& c : classes)
    out += "," + c.class_name + "_segment," + c.class_name + "_saliency," + c.class_name + "_top_segment";
  out += '\n';
  char buf[32];
  for (std::size_t j = 0; j < segment_length; ++j) {
    out += std::to_string(j);
    for (const auto& c : classes) {
      if (!c.average) {
        out += ",,,";
        continue;
      }
      for (double v : {c.average->mean_segment.at(j), c.average->mean_saliency.at(j), c.top_segment.at(j)}) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace ecgsl
