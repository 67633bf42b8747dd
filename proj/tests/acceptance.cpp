// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// Every check computes its reference independently of the code under test.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "commands.hpp"
#include "ecgsl/data_io.hpp"
#include "ecgsl/evaluation.hpp"
#include "ecgsl/saliency.hpp"
#include "ecgsl/synth.hpp"
#include "ecgsl/training.hpp"
#include "metrics_oracle.hpp"

using namespace ecgsl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <class T>
Array<T> random_array(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Array<T> a(shape);
  for (auto& v : a.data) v = static_cast<T>(uniform(rng, lo, hi));
  return a;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); }

// ---------------------------------------------------------------------------
// 1. Gradient correctness

// An op under test: builds its output from a list of argument tensors.
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor<double>(std::vector<Tensor<double>>&)> f64;
  std::function<Tensor<float>(std::vector<Tensor<float>>&)> f32;
  double lo = -1.0, hi = 1.0;
};

template <class T>
T scalar_of(const Tensor<T>&);

template <class F>
OpCase op(const char* name, std::vector<Shape> shapes, F f, double lo = -1.0, double hi = 1.0) {
  return {name, std::move(shapes), [f](std::vector<Tensor<double>>& a) { return f(a); },
          [f](std::vector<Tensor<float>>& a) { return f(a); }, lo, hi};
}

template <class T>
std::vector<Tensor<T>> unpack(const Tensor<T>& flat, const std::vector<Shape>& shapes) {
  std::vector<Tensor<T>> out;
  std::size_t off = 0;
  for (const auto& s : shapes) {
    out.push_back(reshape(slice(flat, 0, off, off + numel(s)), s));
    off += numel(s);
  }
  return out;
}

// Scalar probe sum(out * R) with R fixed by `seed`.
template <class T>
Tensor<T> probe(const Tensor<T>& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, out.tape().constant(random_array<T>(out.shape(), rng))));
}

// Central differences of a double-precision scalar function.
std::vector<double> central_differences(const std::function<double(const Array<double>&)>& f, Array<double> x,
                                        double eps) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

std::vector<OpCase> op_cases() {
  static const std::vector<std::uint8_t> m33{1, 0, 1, 1, 1, 0, 0, 0, 1};
  static const std::vector<std::uint8_t> m4{1, 0, 1, 1};
  static const std::vector<std::size_t> labels{0, 3, 1};
  static const std::vector<std::size_t> rows{3, 0, 3};
  using S = std::vector<Shape>;
  return {
      op("add", S{{3, 4}, {3, 4}}, [](auto& a) { return add(a[0], a[1]); }),
      op("sub", S{{3, 4}, {3, 4}}, [](auto& a) { return sub(a[0], a[1]); }),
      op("mul", S{{3, 4}, {3, 4}}, [](auto& a) { return mul(a[0], a[1]); }),
      op("scale", S{{5}}, [](auto& a) { return scale(a[0], decltype(scalar_of(a[0]))(-2.5)); }),
      op("add_bias", S{{3, 4}, {4}}, [](auto& a) { return add_bias(a[0], a[1]); }),
      op("matmul", S{{3, 4}, {4, 2}}, [](auto& a) { return matmul(a[0], a[1]); }),
      op("transpose", S{{3, 4}}, [](auto& a) { return transpose(a[0]); }),
      op("dense", S{{3, 4}, {4, 2}, {2}}, [](auto& a) { return dense(a[0], a[1], a[2]); }),
      op("conv1d", S{{2, 3, 11}, {4, 3, 5}, {4}}, [](auto& a) { return conv1d(a[0], a[1], 2, 2, &a[2]); }),
      op("conv1d_transpose", S{{2, 3, 6}, {3, 4, 5}, {4}},
         [](auto& a) { return conv1d_transpose(a[0], a[1], 2, 2, 1, &a[2]); }),
      op("max_pool1d", S{{2, 3, 8}}, [](auto& a) { return max_pool1d(a[0], 2); }),
      op("relu", S{{4, 5}}, [](auto& a) { return relu(a[0]); }),
      op("sigmoid", S{{4, 5}}, [](auto& a) { return sigmoid(a[0]); }, -4, 4),
      op("tanh", S{{4, 5}}, [](auto& a) { return tanh(a[0]); }, -2, 2),
      // Fixed seed, so every evaluation draws the same keep mask.
      op("dropout", S{{4, 5}}, [](auto& a) {
        Rng r(5);
        return dropout(a[0], 0.3, true, &r);
      }),
      op("softmax", S{{4, 5}}, [](auto& a) { return softmax(a[0]); }, -3, 3),
      op("masked_softmax", S{{3, 3}}, [](auto& a) { return masked_softmax(a[0], std::span<const std::uint8_t>(m33)); }),
      op("layer_norm", S{{3, 6}, {6}, {6}}, [](auto& a) { return layer_norm(a[0], a[1], a[2]); }),
      op("masked_mse", S{{4, 3}, {4, 3}}, [](auto& a) { return masked_mse(a[0], a[1], std::span<const std::uint8_t>(m4)); }),
      op("cross_entropy", S{{3, 4}}, [](auto& a) { return cross_entropy(a[0], std::span<const std::size_t>(labels)); }, -2, 2),
      op("reshape", S{{2, 6}}, [](auto& a) { return reshape(a[0], {3, 4}); }),
      op("concat", S{{2, 3}, {2, 2}}, [](auto& a) { return concat(std::span<const std::decay_t<decltype(a[0])>>(a.data(), 2), 1); }),
      op("slice", S{{4, 5}}, [](auto& a) { return slice(a[0], 1, 1, 4); }),
      op("index_rows", S{{4, 3}}, [](auto& a) { return index_rows(a[0], std::span<const std::size_t>(rows)); }),
      op("sum", S{{3, 4}}, [](auto& a) { return sum(a[0]); }),
      op("mean", S{{3, 4}}, [](auto& a) { return mean(a[0]); }),
      op("mean_last", S{{3, 4}}, [](auto& a) { return mean_last(a[0]); }),
  };
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.channels = {2, 2, 3, 3, 4, 4};
  c.encoder.embed_dim = 8;
  c.encoder.segment_length = 16;
  c.transformer.num_layers = 1;
  c.transformer.num_heads = 2;
  c.transformer.ffn_dim = 8;
  c.transformer.dropout = 0.0;
  c.classifier_hidden = 4;
  c.num_classes = 3;
  return c;
}

// Every loss term of the model from one tape: classification, masked
// reconstruction and autoencoder reconstruction.
template <class T>
Tensor<T> full_loss(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& x, const Array<T>& target) {
  const std::vector<std::uint8_t> mask{1, 1, 1, 0};
  const std::vector<std::uint8_t> masked{0, 1, 0, 0};
  const std::vector<std::uint8_t> real{1, 1, 1, 0};
  const std::size_t label = 2;
  auto out = forward_sequence(p, cfg, x, mask, {});
  auto ce = cross_entropy(out.logits, std::span<const std::size_t>(&label, 1));
  auto mse = masked_mse(reconstruct(p, out.hidden), p.tape().constant(target), masked);
  auto ae = masked_mse(decode_embeddings(p, cfg, encode_segments(p, cfg, x)), p.tape().constant(target), real);
  return add(add(ce, mse), ae);
}

Outcome criterion_gradients() {
  double worst64 = 0.0, worst32 = 0.0;
  std::string worst_op;
  for (const auto& op : op_cases()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      std::size_t n = 0;
      for (const auto& s : op.shapes) n += numel(s);
      Rng rng(seed * 977);
      const auto x = random_array<double>({n}, rng, op.lo, op.hi);
      auto fn = [&](Tape<double>& tape, const Tensor<double>& flat) {
        auto args = unpack(flat, op.shapes);
        (void)tape;
        return probe(op.f64(args), seed);
      };
      const auto r = grad_check(fn, x, 1e-5);
      if (r.max_rel_error > worst64) worst64 = r.max_rel_error, worst_op = op.name;
      // Single precision: float tape gradient against double central differences.
      const auto fd = central_differences(
          [&](const Array<double>& v) {
            Tape<double> t;
            return fn(t, t.constant(v)).item();
          },
          x, 1e-6);
      Tape<float> tf;
      auto xf = tf.variable(x.cast<float>());
      auto args = unpack(xf, op.shapes);
      auto loss = probe(op.f32(args), seed);
      tf.backward(loss);
      const auto g = xf.grad_array();
      for (std::size_t i = 0; i < n; ++i) worst32 = std::max(worst32, rel_err(g[i], fd[i]));
    }
  }

  // Full tiny model: input and every parameter.
  const auto cfg = tiny_config();
  auto params = cast_parameters<double>(init_parameters(cfg, 18));
  Rng rng(19);
  for (auto& [name, a] : params)
    if (name.ends_with(".bias")) for (auto& v : a.data) v = 0.3 * gaussian(rng);
  const auto x = random_array<double>({4, 16}, rng, 0.0, 1.0);
  const auto target = random_array<double>({4, 16}, rng, 0.0, 1.0);
  const auto input_check = grad_check(
      [&](Tape<double>& tape, const Tensor<double>& xv) {
        Bound<double> p(tape, params, false);
        return full_loss(p, cfg, xv, target);
      },
      x, 1e-4);
  std::vector<double> flat;
  for (const auto& [_, a] : params) flat.insert(flat.end(), a.data.begin(), a.data.end());
  auto bind_all = [&](Bound<double>& p, const Tensor<double>& th) {
    std::size_t off = 0;
    for (const auto& [name, a] : params) {
      p.bind(name, reshape(slice(th, 0, off, off + a.size()), a.shape));
      off += a.size();
    }
  };
  const auto param_check = grad_check(
      [&](Tape<double>& tape, const Tensor<double>& th) {
        Bound<double> p(tape, params, false);
        bind_all(p, th);
        return full_loss(p, cfg, tape.constant(x), target);
      },
      Array<double>({flat.size()}, flat), 1e-4);
  const double model64 = std::max(input_check.max_rel_error, param_check.max_rel_error);

  // Single-precision model parameter gradients against double central differences.
  const auto fd = central_differences(
      [&](const Array<double>& th) {
        Tape<double> tape;
        Bound<double> p(tape, params, false);
        bind_all(p, tape.constant(th));
        return full_loss(p, cfg, tape.constant(x), target).item();
      },
      Array<double>({flat.size()}, flat), 1e-4);
  const auto params32 = cast_parameters<float>(params);
  Tape<float> tf;
  Bound<float> pf(tf, params32);
  auto loss = full_loss(pf, cfg, tf.constant(x.cast<float>()), target.cast<float>());
  tf.backward(loss);
  const auto grads = pf.gradients();
  double model32 = 0.0;
  std::size_t off = 0;
  for (const auto& [name, a] : params32) {
    auto it = grads.find(name);
    for (std::size_t i = 0; i < a.size(); ++i)
      model32 = std::max(model32, rel_err(it == grads.end() ? 0.0 : it->second[i], fd[off + i]));
    off += a.size();
  }

  Outcome o;
  o.pass = worst64 < 1e-5 && model64 < 1e-5 && worst32 < 1e-3 && model32 < 1e-3;
  o.detail = "ops double " + fmt("%.2e", worst64) + " (worst " + worst_op + "), ops single " + fmt("%.2e", worst32) +
             ", model double " + fmt("%.2e", model64) + " over " +
             std::to_string(input_check.checked + param_check.checked) + " coords, model single " +
             fmt("%.2e", model32);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Adjoint identity

Outcome criterion_adjoint() {
  Rng rng(2024);
  double worst64 = 0.0, worst32 = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); };
    const std::size_t B = pick(1, 4), Ci = pick(1, 8), Co = pick(1, 8), K = pick(1, 7);
    const std::size_t stride = pick(1, 3), pad = pick(0, K / 2 + 1);
    const std::size_t L = K + pick(0, 30);
    if (L + 2 * pad < K) continue;
    const std::size_t Lout = (L + 2 * pad - K) / stride + 1;
    const std::size_t out_pad = (L + 2 * pad - K) % stride;
    auto run = [&](auto tag) {
      using T = decltype(tag);
      Rng local(trial);
      Tape<T> tape;
      auto x = tape.constant(random_array<T>({B, Ci, L}, local));
      auto k = tape.constant(random_array<T>({Co, Ci, K}, local));
      auto y = tape.constant(random_array<T>({B, Co, Lout}, local));
      auto cx = conv1d(x, k, stride, pad);
      auto ty = conv1d_transpose(y, k, stride, pad, out_pad);
      double lhs = 0.0, rhs = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < cx.size(); ++i) {
        lhs += static_cast<double>(cx.data()[i]) * y.data()[i];
        scale += std::abs(static_cast<double>(cx.data()[i]) * y.data()[i]);
      }
      for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(x.data()[i]) * ty.data()[i];
      return std::abs(lhs - rhs) / std::max(1.0, scale);
    };
    worst64 = std::max(worst64, run(double{}));
    worst32 = std::max(worst32, run(float{}));
  }
  return {worst64 < 1e-4 && worst32 < 1e-4,
          "max |<Cx,y> - <x,C'y>| / max(1, sum|terms|): double " + fmt("%.2e", worst64) + ", single " +
              fmt("%.2e", worst32)};
}

// ---------------------------------------------------------------------------
// 3. Peak detection

// One-to-one greedy matching within +/- tol samples.
std::size_t match_peaks(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& found,
                        std::size_t tol) {
  std::size_t hits = 0, j = 0;
  for (auto t : truth) {
    while (j < found.size() && found[j] + tol < t) ++j;
    if (j < found.size() && found[j] <= t + tol) ++hits, ++j;
  }
  return hits;
}

Outcome criterion_peaks() {
  const SegmentationConfig seg;
  std::string detail;
  bool pass = true;
  for (double snr : {std::numeric_limits<double>::infinity(), 20.0}) {
    SynthConfig sc;
    sc.num_records = 100;
    sc.duration_s = 60.0;
    sc.snr_db = snr;
    sc.seed = 31;
    std::size_t truth = 0, hits = 0, found = 0;
    for (const auto& r : synth_ecg(sc)) {
      const auto peaks = preprocess(r.record, seg).peaks.indices;
      truth += r.truth.indices.size();
      found += peaks.size();
      hits += match_peaks(r.truth.indices, peaks, 3);
    }
    const double sens = static_cast<double>(hits) / static_cast<double>(truth);
    const double spurious = static_cast<double>(found - hits) / static_cast<double>(truth);
    if (std::isinf(snr)) {
      pass = pass && hits == truth;
      detail += "clean: " + std::to_string(hits) + "/" + std::to_string(truth) + " within 3 samples";
    } else {
      pass = pass && sens >= 0.99 && spurious <= 0.01;
      detail += "; 20 dB: sensitivity " + fmt("%.4f", sens) + ", spurious " + fmt("%.4f", spurious);
    }
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 4. Segmentation conformance

Outcome criterion_segmentation() {
  RawRecord r;
  r.fs = 100.0;
  r.record_id = "hand";
  for (int i = 0; i < 400; ++i) r.samples.push_back(std::sin(0.23 * i) + 0.002 * i * i / 100.0);
  const SegmentationConfig cfg;
  const auto seq = segment(r, PeakList{{100, 200, 300}}, cfg);
  bool pass = seq.size() == 3;
  std::string detail;
  if (pass) {
    // Hand derivation: RR = 100, pre = 35, post = 45 -> samples 165..245 (81),
    // min-max normalised, peak at 43, so 8 edge samples before and 11 after.
    const auto& s = seq.segments[1];
    const double lo = *std::min_element(r.samples.begin() + 165, r.samples.begin() + 246);
    const double hi = *std::max_element(r.samples.begin() + 165, r.samples.begin() + 246);
    std::vector<float> expected(100);
    for (std::size_t k = 0; k < 81; ++k) expected[8 + k] = static_cast<float>((r.samples[165 + k] - lo) / (hi - lo));
    for (std::size_t k = 0; k < 8; ++k) expected[k] = expected[8];
    for (std::size_t k = 89; k < 100; ++k) expected[k] = expected[88];
    const bool window = s.pre_len == 35 && s.post_len == 45 && s.pre_len + s.post_len + 1 == 81;
    const bool exact = s.values == expected;
    pass = window && exact && s.peak_index == 43;
    detail = "hand example: window " + std::to_string(s.pre_len + s.post_len + 1) + " samples, peak_index " +
             std::to_string(s.peak_index) + (exact ? ", values exact" : ", values DIFFER");
  }
  // Corpus-wide invariants for every pad mode.
  SynthConfig sc;
  sc.num_records = 30;
  sc.duration_s = 30;
  sc.snr_db = 20;
  sc.seed = 4;
  std::size_t n = 0, bad = 0;
  for (auto mode : {PadMode::Edge, PadMode::Zero, PadMode::Stretch}) {
    SegmentationConfig c;
    c.pad_mode = mode;
    for (const auto& rec : synth_ecg(sc))
      for (const auto& s : preprocess(rec.record, c).sequence.segments) {
        ++n;
        const auto [mn, mx] = std::minmax_element(s.values.begin(), s.values.end());
        if (s.values.size() != 100 || *mn < 0.0f || *mx > 1.0f) ++bad;
      }
  }
  pass = pass && bad == 0;
  detail += "; " + std::to_string(n) + " corpus segments, " + std::to_string(bad) + " outside length 100 / [0,1]";
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 5. Metrics oracle

Outcome criterion_metrics() {
  Rng rng(55);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t C = 2 + uniform_index(rng, 5);
    const auto cm = oracle::random_confusion(C, rng);
    const auto ref = oracle::brute_force_metrics(cm);
    worst = std::max({worst, std::abs(accuracy(cm) - ref.accuracy), std::abs(macro_f1(cm) - ref.macro_f1),
                      std::abs(macro_precision(cm) - ref.macro_precision),
                      std::abs(macro_recall(cm) - ref.macro_recall)});
    if (C == 2) {
      const auto ss = sensitivity_specificity(cm);
      worst = std::max({worst, std::abs(ss.sensitivity - ref.sensitivity), std::abs(ss.specificity - ref.specificity)});
    }
  }
  // TP=3, FP=1, FN=1, TN=5 with class 1 positive.
  ConfusionMatrix hand(2);
  hand.at(1, 1) = 3;
  hand.at(0, 1) = 1;
  hand.at(1, 0) = 1;
  hand.at(0, 0) = 5;
  const double f1 = macro_f1(hand);
  const auto ss = sensitivity_specificity(hand);
  // F1(pos) = 6/8, F1(neg) = 10/12.
  const double f1_ref = (0.75 + 10.0 / 12.0) / 2.0;
  const bool hand_ok = std::abs(f1 - f1_ref) < 1e-12 && std::abs(f1 - 0.7917) < 5e-5 &&
                       std::abs(ss.sensitivity - 0.75) < 1e-12 && std::abs(ss.specificity - 5.0 / 6.0) < 1e-12;
  return {worst < 1e-12 && hand_ok, "1000 matrices max |diff| " + fmt("%.1e", worst) + "; hand example macro F1 " +
                                        fmt("%.4f", f1) + ", Sen " + fmt("%.4f", ss.sensitivity) + ", Spe " +
                                        fmt("%.4f", ss.specificity)};
}

// ---------------------------------------------------------------------------
// 6. Masked-loss locality

Outcome criterion_locality() {
  ModelConfig cfg = tiny_config();
  const auto params = init_parameters(cfg, 3);
  Rng rng(66);
  std::size_t nonzero_unmasked = 0, zero_masked_rows = 0, cases = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t real = 2 + uniform_index(rng, 10), pad = uniform_index(rng, 4);
    std::vector<std::uint8_t> mask(real + pad, 0);
    std::fill(mask.begin(), mask.begin() + real, 1);
    const auto masked = select_mask(mask, 0.3, rng);
    const auto x = random_array<float>({real + pad, 16}, rng, 0.0, 1.0);
    Tape<float> tape;
    Bound<float> p(tape, params);
    auto input = x;
    for (auto r : masked) std::fill(input.data.begin() + r * 16, input.data.begin() + (r + 1) * 16, 0.0f);
    auto out = forward_sequence(p, cfg, tape.constant(input), mask, {}, false);
    auto rec = reconstruct(p, out.hidden);
    std::vector<std::uint8_t> sel(real + pad, 0);
    for (auto r : masked) sel[r] = 1;
    tape.backward(masked_mse(rec, tape.constant(x), sel));
    const auto g = rec.grad_array();
    for (std::size_t i = 0; i < real + pad; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 16; ++j) row += std::abs(g.at(i, j));
      if (!sel[i] && row != 0.0) ++nonzero_unmasked;
      if (sel[i] && row == 0.0) ++zero_masked_rows;
    }
    ++cases;
  }
  // Selection property over 10,000 draws with random padding layouts.
  std::size_t padding_hits = 0, wrong_count = 0;
  for (int k = 0; k < 10000; ++k) {
    const std::size_t n = 1 + uniform_index(rng, 60);
    std::vector<std::uint8_t> mask(n);
    std::size_t real = 0;
    for (auto& m : mask) real += (m = unit_uniform(rng) < 0.7);
    const double f = uniform(rng, 0.01, 0.99);
    const auto idx = select_mask(mask, f, rng);
    for (auto i : idx) padding_hits += mask[i] == 0;
    const std::size_t want = real == 0 ? 0 : std::max<std::size_t>(1, std::llround(f * static_cast<double>(real)));
    wrong_count += idx.size() != std::min(want, real) || std::set<std::size_t>(idx.begin(), idx.end()).size() != idx.size();
  }
  return {nonzero_unmasked == 0 && zero_masked_rows == 0 && padding_hits == 0 && wrong_count == 0,
          std::to_string(cases) + " model cases: " + std::to_string(nonzero_unmasked) +
              " unmasked rows with gradient; 10000 draws: " + std::to_string(padding_hits) +
              " padding selections, " + std::to_string(wrong_count) + " wrong counts"};
}

// ---------------------------------------------------------------------------
// 7. Edge vs zero padding

Outcome criterion_padding_ablation() {
  SynthConfig sc;
  sc.num_records = 100;
  sc.duration_s = 20;
  sc.snr_db = 20;
  sc.seed = 5;
  const auto recs = synth_ecg(sc);
  TrainConfig tc;
  tc.epochs = 10;
  tc.learning_rate = 3e-4;
  tc.batch_size = 64;
  tc.seed = 2;
  double mse[2];
  std::size_t segments = 0;
  int k = 0;
  for (auto mode : {PadMode::Edge, PadMode::Zero}) {
    SegmentationConfig seg;
    seg.pad_mode = mode;
    std::vector<SegmentSequence> seqs;
    for (const auto& r : recs) seqs.push_back(preprocess(r.record, seg).sequence);
    segments = 0;
    for (const auto& s : seqs) segments += s.real_count();
    const auto res = pretrain_autoencoder(seqs, ModelState::initial(ModelConfig{}, 1), tc);
    mse[k++] = evaluate_autoencoder(res.state, seqs);
  }
  return {mse[0] < mse[1], "final AE MSE edge " + fmt("%.3e", mse[0]) + " vs zero " + fmt("%.3e", mse[1]) + " (" +
                               std::to_string(segments) + " segments, 10 epochs)"};
}

// ---------------------------------------------------------------------------
// 8 and 9. Pre-training utility and masked reconstruction vs the mean segment

struct PretrainRun {
  std::vector<SegmentSequence> train, validation;
  ModelState masked;
  MaskedEvaluation held_out, train_eval;
  std::size_t masked_epochs = 0;
};

PretrainRun run_pretraining() {
  SynthConfig sc;
  sc.num_records = 600;
  sc.duration_s = 10;
  sc.snr_db = 20;
  sc.num_classes = 3;
  sc.seed = 7;
  std::vector<SegmentSequence> seqs;
  const SegmentationConfig seg;
  for (const auto& r : synth_ecg(sc)) {
    auto p = preprocess(r.record, seg);
    p.sequence.label = r.record.label;
    seqs.push_back(std::move(p.sequence));
  }
  seqs = pad_sequences(std::move(seqs));
  std::vector<std::size_t> labels;
  for (const auto& s : seqs) labels.push_back(*s.label);
  const auto folds = stratified_kfold(labels, 5, 1);
  PretrainRun run;
  std::vector<bool> held(seqs.size(), false);
  for (auto i : folds[0]) held[i] = true;
  for (std::size_t i = 0; i < seqs.size(); ++i) (held[i] ? run.validation : run.train).push_back(seqs[i]);

  TrainConfig ae;
  ae.epochs = 10;
  ae.learning_rate = 3e-4;
  ae.batch_size = 64;
  ae.seed = 1;
  const auto ae_res = pretrain_autoencoder(run.train, ModelState::initial(ModelConfig{}, 1), ae);
  TrainConfig mk = ae;
  mk.batch_size = 8;
  run.masked_epochs = mk.epochs;
  run.masked = pretrain_masked(run.train, ae_res.state, mk).state;
  run.held_out = evaluate_masked(run.masked, run.validation, 0.1, 3);
  run.train_eval = evaluate_masked(run.masked, run.train, 0.1, 3);
  return run;
}

Outcome criterion_masked_vs_mean(const PretrainRun& run) {
  return {run.held_out.model_mse < run.held_out.mean_segment_mse && run.train_eval.model_mse < run.train_eval.mean_segment_mse,
          "after " + std::to_string(run.masked_epochs) + " epochs: held-out masked MSE " +
              fmt("%.3e", run.held_out.model_mse) + " vs mean segment " + fmt("%.3e", run.held_out.mean_segment_mse) +
              " (" + std::to_string(run.held_out.masked_segments) + " masked); training set " +
              fmt("%.3e", run.train_eval.model_mse) + " vs " + fmt("%.3e", run.train_eval.mean_segment_mse)};
}

Outcome criterion_pretraining_utility(const PretrainRun& run) {
  TrainConfig ft;
  ft.epochs = 10;
  ft.learning_rate = 5e-4;
  ft.batch_size = 16;
  ft.seed = 3;
  const auto from_masked = finetune(run.train, run.validation, run.masked, ft);
  // Same seed: the random init is the model the pre-training started from.
  const auto from_random = finetune(run.train, run.validation, ModelState::initial(ModelConfig{}, 1), ft);
  const auto m = from_masked.history.epochs_to_reach(0.90);
  const auto r = from_random.history.epochs_to_reach(0.90);
  auto text = [](const std::optional<std::size_t>& e) { return e ? std::to_string(*e) : std::string("never"); };
  auto best = [](const TrainHistory& h) {
    double b = 0.0;
    for (const auto& e : h.epochs) b = std::max(b, e.metric.value_or(0.0));
    return b;
  };
  return {m.has_value() && (!r || *m <= *r),
          "epochs to validation macro F1 >= 0.90: masked init " + text(m) + ", random init " + text(r) +
              " (budget " + std::to_string(ft.epochs) + "; best F1 " + fmt("%.3f", best(from_masked.history)) +
              " vs " + fmt("%.3f", best(from_random.history)) + ")"};
}

// ---------------------------------------------------------------------------
// 10. Determinism of the whole CLI pipeline

std::string run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) throw std::runtime_error("cli failed: " + err.str());
  return out.str();
}

void pipeline(const fs::path& dir, const std::string& workers) {
  const auto d = [&](const std::string& n) { return (dir / n).string(); };
  const std::vector<std::string> common = {"--seed", "11", "--workers", workers};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), common.begin(), common.end());
    return a;
  };
  run_cli(with({"synth", "--out", d("corpus"), "--records", "30", "--classes", "3", "--duration", "10", "--snr", "20"}));
  run_cli(with({"preprocess", "--in", d("corpus/manifest.tsv"), "--out", d("seg.bin")}));
  run_cli(with({"pretrain-ae", "--data", d("seg.bin"), "--out", d("ae.ckpt"), "--epochs", "2", "--lr", "3e-4"}));
  run_cli(with({"pretrain-mask", "--data", d("seg.bin"), "--out", d("mask.ckpt"), "--checkpoint", d("ae.ckpt"),
                "--epochs", "2", "--lr", "3e-4", "--batch-size", "8"}));
  run_cli(with({"finetune", "--data", d("seg.bin"), "--out", d("ft.ckpt"), "--init", "masked", "--checkpoint",
                d("mask.ckpt"), "--epochs", "2", "--lr", "5e-4", "--batch-size", "8", "--holdout-fold", "0"}));
  run_cli(with({"evaluate", "--data", d("seg.bin"), "--checkpoint", d("ft.ckpt"), "--out", d("eval"),
                "--holdout-fold", "0"}));
  run_cli(with({"saliency", "--data", d("seg.bin"), "--checkpoint", d("ft.ckpt"), "--out", d("saliency.csv")}));
}

Outcome criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / ("ecgsl_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  // Different worker counts on purpose: results must not depend on them.
  pipeline(root / "a", "1");
  pipeline(root / "b", "2");
  const std::vector<std::string> files = {"corpus/manifest.tsv", "seg.bin",          "ae.ckpt",
                                          "mask.ckpt",           "mask.ckpt.masked_eval.txt", "ft.ckpt",
                                          "eval/metrics.txt",    "eval/confusion.csv", "eval/predictions.tsv",
                                          "saliency.csv"};
  std::size_t same = 0;
  std::string differing;
  for (const auto& f : files) {
    if (read_file(root / "a" / f) == read_file(root / "b" / f)) ++same;
    else differing += " " + f;
  }
  fs::remove_all(root);
  return {same == files.size(), std::to_string(same) + "/" + std::to_string(files.size()) +
                                    " artifacts bitwise identical across two runs (workers 1 vs 2)" +
                                    (differing.empty() ? "" : "; differ:" + differing)};
}

// ---------------------------------------------------------------------------
// 11. Padding invariance

Outcome criterion_padding_invariance() {
  const ModelConfig cfg;
  Rng rng(111);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    // Fresh weights every 10 cases, with non-zero biases so padding rows are not trivially zero inside.
    auto state = ModelState::initial(cfg, 1000 + trial / 10);
    for (auto& [name, a] : state.params)
      if (name.ends_with("bias") || name.ends_with(".b")) for (auto& v : a.data) v = static_cast<float>(0.1 * gaussian(rng));
    const std::size_t n = 1 + uniform_index(rng, 20), extra = 1 + uniform_index(rng, 10);
    const auto x = random_array<float>({n, 100}, rng, 0.0, 1.0);
    Array<float> padded({n + extra, 100});
    std::copy(x.data.begin(), x.data.end(), padded.data.begin());
    std::vector<std::uint8_t> mask(n, 1), mask_padded(n + extra, 0);
    std::fill(mask_padded.begin(), mask_padded.begin() + n, 1);
    const auto a = predict_logits(state, x, mask);
    const auto b = predict_logits(state, padded, mask_padded);
    for (std::size_t c = 0; c < a.size(); ++c) worst = std::max(worst, static_cast<double>(std::abs(a[c] - b[c])));
  }
  return {worst < 1e-5, "100 cases, max |logit change| " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 12. Saliency sanity

Outcome criterion_saliency() {
  Rng rng(12);
  std::size_t mismatches = 0, padding_nonzero = 0, shape_bad = 0, cases = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t S = 4 + uniform_index(rng, 20), C = 2 + uniform_index(rng, 4);
    const std::size_t real = 1 + uniform_index(rng, 8), pad = uniform_index(rng, 4);
    const auto w = random_array<double>({S, C}, rng);
    SegmentSequence seq;
    for (std::size_t i = 0; i < real + pad; ++i) {
      HeartbeatSegment h;
      h.values.assign(S, 0.0f);
      if (i < real)
        for (auto& v : h.values) v = static_cast<float>(unit_uniform(rng));
      seq.segments.push_back(h);
      seq.pad_mask.push_back(i < real);
    }
    const auto map = input_saliency(LinearClassifier(w), seq);
    ++cases;
    if (map.values.shape != Shape{real + pad, S}) {
      ++shape_bad;
      continue;
    }
    // Independent predicted class.
    std::vector<double> z(C, 0.0);
    for (std::size_t i = 0; i < real; ++i)
      for (std::size_t j = 0; j < S; ++j)
        for (std::size_t c = 0; c < C; ++c) z[c] += seq.segments[i].values[j] * w.at(j, c);
    const auto c = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    for (std::size_t i = 0; i < real + pad; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        if (i >= real) padding_nonzero += map.values.at(i, j) != 0.0f;
        else mismatches += map.values.at(i, j) != static_cast<float>(std::abs(w.at(j, c)));
      }
  }
  // Full model: padding rows exactly zero, shape [N, 100].
  auto state = ModelState::initial(ModelConfig{}, 4);
  state.stage = Stage::Finetuned;
  std::size_t model_padding_nonzero = 0;
  for (int trial = 0; trial < 5; ++trial) {
    SegmentSequence seq;
    const std::size_t real = 3 + trial, pad = 2;
    const auto x = random_array<float>({real, 100}, rng, 0.0, 1.0);
    for (std::size_t i = 0; i < real + pad; ++i) {
      HeartbeatSegment h;
      h.values.assign(100, 0.0f);
      if (i < real) std::copy(x.data.begin() + i * 100, x.data.begin() + (i + 1) * 100, h.values.begin());
      seq.segments.push_back(h);
      seq.pad_mask.push_back(i < real);
    }
    const auto map = input_saliency(state, seq);
    if (map.values.shape != Shape{real + pad, 100}) ++shape_bad;
    for (std::size_t i = real; i < real + pad; ++i)
      for (std::size_t j = 0; j < 100; ++j) model_padding_nonzero += map.values.at(i, j) != 0.0f;
  }
  return {mismatches == 0 && padding_nonzero == 0 && shape_bad == 0 && model_padding_nonzero == 0,
          std::to_string(cases) + " linear cases: " + std::to_string(mismatches) + " entries != |w|, " +
              std::to_string(padding_nonzero) + " non-zero padding entries; model: " +
              std::to_string(model_padding_nonzero) + " non-zero padding entries; " + std::to_string(shape_bad) +
              " shape mismatches"};
}

// ---------------------------------------------------------------------------
// 13. Stratified K-fold

Outcome criterion_kfold() {
  Rng rng(13);
  std::size_t violations = 0, vectors = 0;
  for (int trial = 0; trial < 300; ++trial) {
    // Half the draws use the 5-fold protocol, the rest other fold counts.
    const std::size_t k = trial % 2 ? 2 + uniform_index(rng, 6) : 5, C = 1 + uniform_index(rng, 5);
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0, m = k + uniform_index(rng, 40); n < m; ++n) labels.push_back(c);
    shuffle(std::span<std::size_t>(labels), rng);
    const std::uint64_t seed = rng();
    const auto folds = stratified_kfold(labels, k, seed);
    ++vectors;
    if (folds.size() != k || stratified_kfold(labels, k, seed) != folds) {
      ++violations;
      continue;
    }
    std::vector<int> seen(labels.size(), 0);
    for (const auto& f : folds)
      for (auto i : f) ++seen[i];
    violations += std::count_if(seen.begin(), seen.end(), [](int s) { return s != 1; });
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& f : folds) {
        const auto n = static_cast<std::size_t>(std::count_if(f.begin(), f.end(), [&](auto i) { return labels[i] == c; }));
        lo = std::min(lo, n);
        hi = std::max(hi, n);
      }
      violations += hi - lo > 1;
    }
  }
  return {violations == 0,
          std::to_string(vectors) + " label vectors: partition, disjointness, per-class balance and seed "
                                    "determinism, " + std::to_string(violations) + " violations"};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("%s %2d %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };
  report(1, "gradient-correctness", criterion_gradients);
  report(2, "conv-adjoint", criterion_adjoint);
  report(3, "peak-detection", criterion_peaks);
  report(4, "segmentation-conformance", criterion_segmentation);
  report(5, "metrics-oracle", criterion_metrics);
  report(6, "masked-loss-locality", criterion_locality);
  report(7, "edge-vs-zero-padding", criterion_padding_ablation);

  std::optional<PretrainRun> run;
  const auto t0 = std::chrono::steady_clock::now();
  std::string pretrain_error;
  try {
    run = run_pretraining();
  } catch (const std::exception& e) {
    pretrain_error = e.what();
  }
  const double pre_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("      shared pre-training for 8 and 9 [%.1fs]\n", pre_secs);
  report(8, "pretraining-utility", [&] {
    return run ? criterion_pretraining_utility(*run) : Outcome{false, "pre-training failed: " + pretrain_error};
  });
  report(9, "masked-beats-mean-segment", [&] {
    return run ? criterion_masked_vs_mean(*run) : Outcome{false, "pre-training failed: " + pretrain_error};
  });
  report(10, "determinism", criterion_determinism);
  report(11, "padding-invariance", criterion_padding_invariance);
  report(12, "saliency-sanity", criterion_saliency);
  report(13, "stratified-kfold", criterion_kfold);
  std::printf("%d of 13 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
