#include "ecgsl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "ecgsl/evaluation.hpp"

namespace ecgsl {

void TrainConfig::validate() const {
  require(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be >= 1");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidConfig,
          "learning_rate must be finite and >= 0");
  require(mask_fraction > 0.0 && mask_fraction < 1.0, ErrorCode::InvalidConfig, "mask_fraction must be in (0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, ErrorCode::InvalidConfig,
          "Adam betas must be in [0, 1)");
  require(adam_eps > 0.0, ErrorCode::InvalidConfig, "adam_eps must be positive");
  require(workers >= 1, ErrorCode::InvalidConfig, "workers must be >= 1");
}

std::string TrainHistory::to_text() const {
  std::string out = "epoch\tloss\tmetric\tseconds\n";
  char buf[128];
  for (const auto& e : epochs) {
    char metric[32] = "-";
    if (e.metric) std::snprintf(metric, sizeof metric, "%.6f", *e.metric);
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%s\t%.3f\n", e.epoch, e.loss, metric, e.seconds);
    out += buf;
  }
  return out;
}

std::optional<std::size_t> TrainHistory::epochs_to_reach(double target) const {
  for (const auto& e : epochs)
    if (e.metric && *e.metric >= target) return e.epoch;
  return std::nullopt;
}

AdamState zero_adam_state(const ParameterSet<float>& params) {
  AdamState s;
  for (const auto& [name, a] : params) {
    s.m.emplace(name, Array<float>(a.shape));
    s.v.emplace(name, Array<float>(a.shape));
  }
  return s;
}

void adam_step(ParameterSet<float>& params, const ParameterSet<float>& grads, AdamState& st, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto p = params.find(name);
    require(p != params.end(), ErrorCode::InvalidState, "gradient for unknown parameter '" + name + "'");
    require(g.shape == p->second.shape, ErrorCode::Shape, "gradient shape differs for '" + name + "'");
    for (float v : g.data) require(std::isfinite(v), ErrorCode::Numeric, "non-finite gradient in '" + name + "'");
  }
  const std::uint64_t t = ++st.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name).data;
    auto& m = st.m.at(name).data;
    auto& v = st.v.at(name).data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps));
    }
  }
}

std::vector<std::size_t> select_mask(std::span<const std::uint8_t> pad_mask, double fraction, Rng& rng) {
  require(!pad_mask.empty(), ErrorCode::InvalidConfig, "select_mask: empty sequence");
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < pad_mask.size(); ++i)
    if (pad_mask[i]) real.push_back(i);
  if (real.empty()) return {};
  const auto count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(real.size()))), 1, real.size());
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, real.size() - i));
    std::swap(real[i], real[j]);
  }
  real.resize(count);
  std::sort(real.begin(), real.end());
  return real;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

using Clock = std::chrono::steady_clock;

// Stream tags for derive_seed so the different random draws never overlap.
enum : std::uint64_t { kShuffle = 1, kMask = 2, kDropout = 3, kEvalMask = 4 };

std::uint64_t stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t epoch, std::uint64_t item) {
  return derive_seed(derive_seed(derive_seed(seed, tag), epoch), item);
}

struct SampleOut {
  double loss = 0.0;
  ParameterSet<float> grads;
  bool used = false;
};

void accumulate(ParameterSet<float>& total, const ParameterSet<float>& g) {
  for (const auto& [name, a] : g) {
    auto it = total.find(name);
    if (it == total.end()) {
      total.emplace(name, a);
      continue;
    }
    for (std::size_t i = 0; i < a.size(); ++i) it->second.data[i] += a.data[i];
  }
}

// Shuffled mini-batches over per-sample losses; returns the epoch mean loss.
double run_epoch(ModelState& state, AdamState& adam, std::size_t n, std::size_t epoch, const TrainConfig& cfg,
                 const std::function<SampleOut(std::size_t sample, std::size_t epoch)>& sample_fn) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(stream(cfg.seed, kShuffle, epoch, 0));
  shuffle(std::span<std::size_t>(order), shuffle_rng);

  double loss_sum = 0.0;
  std::size_t used = 0;
  std::vector<SampleOut> outs;
  for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
    const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
    ParameterSet<float> total;
    std::size_t batch_used = 0;
    for (std::size_t g0 = b0; g0 < b1; g0 += cfg.workers) {
      const std::size_t g1 = std::min(b1, g0 + cfg.workers);
      outs.assign(g1 - g0, {});
      parallel_for(g1 - g0, cfg.workers, [&](std::size_t k) { outs[k] = sample_fn(order[g0 + k], epoch); });
      for (auto& o : outs) {
        if (!o.used) continue;
        loss_sum += o.loss;
        ++used;
        ++batch_used;
        accumulate(total, o.grads);
      }
    }
    if (batch_used == 0) continue;
    const float inv = 1.0f / static_cast<float>(batch_used);
    for (auto& [_, a] : total)
      for (auto& v : a.data) v *= inv;
    adam_step(state.params, total, adam, cfg);
  }
  require(std::isfinite(loss_sum), ErrorCode::Numeric, "training loss diverged");
  return used ? loss_sum / static_cast<double>(used) : 0.0;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void log_epoch(const LogFn& log, const char* stage, const EpochRecord& r, std::size_t total) {
  if (!log) return;
  char buf[160];
  if (r.metric)
    std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu loss %.6g val_macro_f1 %.4f (%.1fs)", stage, r.epoch, total,
                  r.loss, *r.metric, r.seconds);
  else
    std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu loss %.6g (%.1fs)", stage, r.epoch, total, r.loss, r.seconds);
  log(buf);
}

Array<float> zero_rows(Array<float> x, std::span<const std::size_t> rows) {
  const std::size_t S = x.shape[1];
  for (auto r : rows) std::fill(x.data.begin() + r * S, x.data.begin() + (r + 1) * S, 0.0f);
  return x;
}

std::vector<std::uint8_t> row_mask(std::size_t n, std::span<const std::size_t> rows) {
  std::vector<std::uint8_t> m(n, 0);
  for (auto r : rows) m[r] = 1;
  return m;
}

std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void require_segment_model(const ModelState& s) {
  require(s.config.arch == Architecture::SegmentTransformer, ErrorCode::InvalidState,
          "this stage needs a segment-transformer model");
}

void require_labels(const std::vector<SegmentSequence>& data, std::size_t C, const char* what) {
  for (const auto& s : data) {
    require(s.label.has_value(), ErrorCode::InvalidDataset, std::string(what) + " sequence '" + s.record_id + "' has no label");
    require(*s.label < C, ErrorCode::InvalidDataset,
            std::string(what) + " label " + std::to_string(*s.label) + " out of range for " + std::to_string(C) + " classes");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

TrainResult pretrain_autoencoder(const std::vector<SegmentSequence>& corpus, const ModelState& init,
                                 const TrainConfig& cfg, const LogFn& log) {
  cfg.validate();
  require_segment_model(init);
  const std::size_t S = init.config.encoder.segment_length;
  std::vector<const std::vector<float>*> segs;
  for (const auto& s : corpus)
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.pad_mask[i]) {
        require(s.segments[i].values.size() == S, ErrorCode::Shape, "segment length differs from model S");
        segs.push_back(&s.segments[i].values);
      }
  require(!segs.empty(), ErrorCode::InvalidDataset, "autoencoder corpus has no real segments");

  TrainResult res{init, {}};
  res.state.stage = Stage::Autoencoder;
  AdamState adam = zero_adam_state(res.state.params);
  const std::size_t n = segs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(stream(cfg.seed, kShuffle, epoch, 0));
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    double loss_sum = 0.0;
    // Segments are independent, so a batch is one tape over [B, S].
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t B = std::min(n, b0 + cfg.batch_size) - b0;
      Array<float> x({B, S});
      for (std::size_t k = 0; k < B; ++k) std::copy(segs[order[b0 + k]]->begin(), segs[order[b0 + k]]->end(),
                                                    x.data.begin() + k * S);
      Tape<float> tape;
      Bound<float> p(tape, res.state.params);
      auto xt = tape.constant(x);
      auto y = decode_embeddings(p, res.state.config, encode_segments(p, res.state.config, xt));
      std::vector<std::uint8_t> all(B, 1);
      auto loss = masked_mse(y, xt, all);
      tape.backward(loss);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(B);
      adam_step(res.state.params, p.gradients(), adam, cfg);
    }
    require(std::isfinite(loss_sum), ErrorCode::Numeric, "autoencoder loss diverged");
    EpochRecord r{epoch, loss_sum / static_cast<double>(n), std::nullopt, seconds_since(t0)};
    res.history.epochs.push_back(r);
    log_epoch(log, "pretrain-ae", r, cfg.epochs);
  }
  res.state.optimizer = adam;
  return res;
}

TrainResult pretrain_masked(const std::vector<SegmentSequence>& corpus, const ModelState& init,
                            const TrainConfig& cfg, bool from_scratch, const LogFn& log) {
  cfg.validate();
  require_segment_model(init);
  require(from_scratch || init.stage != Stage::None, ErrorCode::StageOrder,
          "masked pre-training needs an 'ae' checkpoint (or an explicit from-scratch run)");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].real_count() == 0) {
      if (log) log("warning: skipping '" + corpus[i].record_id + "': every segment is padding");
      continue;
    }
    usable.push_back(i);
  }
  require(!usable.empty(), ErrorCode::InvalidDataset, "masked pre-training corpus has no usable sequence");

  TrainResult res{init, {}};
  res.state.stage = Stage::Masked;
  AdamState adam = zero_adam_state(res.state.params);
  std::vector<std::string> frozen;
  if (cfg.freeze_encoder) frozen.push_back("enc.");
  const auto& mc = res.state.config;

  auto sample = [&](std::size_t k, std::size_t epoch) {
    const auto& seq = corpus[usable[k]];
    Rng mask_rng(stream(cfg.seed, kMask, epoch, usable[k]));
    Rng drop_rng(stream(cfg.seed, kDropout, epoch, usable[k]));
    const auto masked = select_mask(seq.pad_mask, cfg.mask_fraction, mask_rng);
    const auto target = seq.matrix();
    Tape<float> tape;
    Bound<float> p(tape, res.state.params, true, frozen);
    auto x = tape.constant(zero_rows(target, masked));
    auto out = forward_sequence(p, mc, x, seq.pad_mask, {true, &drop_rng}, false);
    auto rec = reconstruct(p, out.hidden);
    auto loss = masked_mse(rec, tape.constant(target), row_mask(seq.size(), masked));
    tape.backward(loss);
    return SampleOut{loss.item(), p.gradients(), true};
  };
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const double loss = run_epoch(res.state, adam, usable.size(), epoch, cfg, sample);
    EpochRecord r{epoch, loss, std::nullopt, seconds_since(t0)};
    res.history.epochs.push_back(r);
    log_epoch(log, "pretrain-mask", r, cfg.epochs);
  }
  res.state.optimizer = adam;
  return res;
}

TrainResult finetune(const std::vector<SegmentSequence>& train, const std::vector<SegmentSequence>& validation,
                     const ModelState& init, const TrainConfig& cfg, const LogFn& log) {
  cfg.validate();
  require_segment_model(init);
  const std::size_t C = init.config.num_classes;
  require(!train.empty(), ErrorCode::InvalidDataset, "fine-tuning set is empty");
  require_labels(train, C, "training");
  require_labels(validation, C, "validation");
  std::vector<std::size_t> per_class(C, 0);
  for (const auto& s : train) ++per_class[*s.label];
  for (std::size_t c = 0; c < C; ++c)
    require(per_class[c] > 0, ErrorCode::InvalidDataset,
            "class " + std::to_string(c) + " is absent from the training labels");
  for (const auto& s : train)
    require(s.real_count() > 0, ErrorCode::InvalidDataset, "sequence '" + s.record_id + "' has no real segment");

  TrainResult res{init, {}};
  res.state.stage = Stage::Finetuned;
  AdamState adam = zero_adam_state(res.state.params);
  const auto& mc = res.state.config;
  auto sample = [&](std::size_t i, std::size_t epoch) {
    const auto& seq = train[i];
    Rng drop_rng(stream(cfg.seed, kDropout, epoch, i));
    Tape<float> tape;
    Bound<float> p(tape, res.state.params);
    auto out = forward_sequence(p, mc, tape.constant(seq.matrix()), seq.pad_mask, {true, &drop_rng});
    const std::size_t label = *seq.label;
    auto loss = cross_entropy(out.logits, std::span<const std::size_t>(&label, 1));
    tape.backward(loss);
    return SampleOut{loss.item(), p.gradients(), true};
  };

  std::optional<ModelState> best;
  double best_f1 = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochRecord r{epoch, run_epoch(res.state, adam, train.size(), epoch, cfg, sample), std::nullopt, 0.0};
    res.state.optimizer = adam;
    if (!validation.empty()) {
      r.metric = macro_f1_on(res.state, validation, cfg.workers);
      if (*r.metric > best_f1) {
        best_f1 = *r.metric;
        best = res.state;
        res.history.best_epoch = epoch;
      }
    }
    r.seconds = seconds_since(t0);
    res.history.epochs.push_back(r);
    log_epoch(log, "finetune", r, cfg.epochs);
  }
  if (best) res.state = std::move(*best);
  if (!res.state.optimizer) res.state.optimizer = adam;
  return res;
}

std::vector<std::size_t> predict(const ModelState& state, const std::vector<SegmentSequence>& data,
                                 std::size_t workers) {
  require_segment_model(state);
  std::vector<std::size_t> out(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    out[i] = argmax(predict_logits(state, data[i].matrix(), data[i].pad_mask));
  });
  return out;
}

double macro_f1_on(const ModelState& state, const std::vector<SegmentSequence>& data, std::size_t workers) {
  require_labels(data, state.config.num_classes, "evaluation");
  auto pred = predict(state, data, workers);
  std::vector<std::size_t> truth;
  for (const auto& s : data) truth.push_back(*s.label);
  return macro_f1(confusion_matrix(truth, pred, state.config.num_classes));
}

MaskedEvaluation evaluate_masked(const ModelState& state, const std::vector<SegmentSequence>& corpus,
                                 double mask_fraction, std::uint64_t seed) {
  require_segment_model(state);
  const std::size_t S = state.config.encoder.segment_length;
  std::vector<double> mean(S, 0.0);
  std::size_t n_real = 0;
  for (const auto& s : corpus)
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.pad_mask[i]) {
        for (std::size_t j = 0; j < S; ++j) mean[j] += s.segments[i].values[j];
        ++n_real;
      }
  require(n_real > 0, ErrorCode::InvalidDataset, "corpus has no real segments");
  for (auto& v : mean) v /= static_cast<double>(n_real);

  MaskedEvaluation ev;
  double model_sum = 0.0, base_sum = 0.0;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto& seq = corpus[k];
    Rng rng(stream(seed, kEvalMask, 0, k));
    const auto masked = select_mask(seq.pad_mask, mask_fraction, rng);
    if (masked.empty()) continue;
    const auto target = seq.matrix();
    Tape<float> tape;
    Bound<float> p(tape, state.params, false);
    auto out = forward_sequence(p, state.config, tape.constant(zero_rows(target, masked)), seq.pad_mask, {}, false);
    auto rec = reconstruct(p, index_rows(out.hidden, std::span<const std::size_t>(masked))).value();
    for (std::size_t m = 0; m < masked.size(); ++m) {
      double e_model = 0.0, e_base = 0.0;
      for (std::size_t j = 0; j < S; ++j) {
        const double t = target.at(masked[m], j);
        e_model += (rec.at(m, j) - t) * (rec.at(m, j) - t);
        e_base += (mean[j] - t) * (mean[j] - t);
      }
      model_sum += e_model / static_cast<double>(S);
      base_sum += e_base / static_cast<double>(S);
      ++ev.masked_segments;
    }
  }
  require(ev.masked_segments > 0, ErrorCode::InvalidDataset, "no segment could be masked");
  ev.model_mse = model_sum / static_cast<double>(ev.masked_segments);
  ev.mean_segment_mse = base_sum / static_cast<double>(ev.masked_segments);
  return ev;
}

double evaluate_autoencoder(const ModelState& state, const std::vector<SegmentSequence>& corpus) {
  require_segment_model(state);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    std::vector<std::size_t> real;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.pad_mask[i]) real.push_back(i);
    if (real.empty()) continue;
    Tape<float> tape;
    Bound<float> p(tape, state.params, false);
    auto x = index_rows(tape.constant(s.matrix()), std::span<const std::size_t>(real));
    auto y = decode_embeddings(p, state.config, encode_segments(p, state.config, x));
    std::vector<std::uint8_t> all(real.size(), 1);
    sum += static_cast<double>(masked_mse(y, x, all).item()) * static_cast<double>(real.size());
    n += real.size();
  }
  require(n > 0, ErrorCode::InvalidDataset, "corpus has no real segments");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Baseline CNN

std::vector<std::size_t> predict_baseline_cnn(const ModelState& state, const std::vector<LabelledSignal>& data) {
  std::vector<std::size_t> out;
  for (const auto& d : data) {
    Tape<float> tape;
    Bound<float> p(tape, state.params, false);
    auto z = baseline_cnn_forward(p, state.config, tape.constant(Array<float>({d.samples.size()}, d.samples)));
    out.push_back(argmax(z.data()));
  }
  return out;
}

TrainResult train_baseline_cnn(const std::vector<LabelledSignal>& train, const std::vector<LabelledSignal>& validation,
                               const ModelState& init, const TrainConfig& cfg, const LogFn& log) {
  cfg.validate();
  require(init.config.arch == Architecture::BaselineCnn, ErrorCode::InvalidState, "expected a baseline CNN model");
  const std::size_t C = init.config.num_classes;
  require(!train.empty(), ErrorCode::InvalidDataset, "baseline training set is empty");
  std::vector<std::size_t> per_class(C, 0);
  for (const auto& s : train) {
    require(s.label < C, ErrorCode::InvalidDataset, "label out of range");
    ++per_class[s.label];
  }
  for (std::size_t c = 0; c < C; ++c)
    require(per_class[c] > 0, ErrorCode::InvalidDataset, "class " + std::to_string(c) + " is absent from training");

  TrainResult res{init, {}};
  res.state.stage = Stage::Finetuned;
  AdamState adam = zero_adam_state(res.state.params);
  auto sample = [&](std::size_t i, std::size_t) {
    Tape<float> tape;
    Bound<float> p(tape, res.state.params);
    const auto& d = train[i];
    auto z = baseline_cnn_forward(p, res.state.config, tape.constant(Array<float>({d.samples.size()}, d.samples)));
    auto loss = cross_entropy(z, std::span<const std::size_t>(&d.label, 1));
    tape.backward(loss);
    return SampleOut{loss.item(), p.gradients(), true};
  };
  std::vector<std::size_t> truth;
  for (const auto& v : validation) truth.push_back(v.label);
  std::optional<ModelState> best;
  double best_f1 = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochRecord r{epoch, run_epoch(res.state, adam, train.size(), epoch, cfg, sample), std::nullopt, 0.0};
    res.state.optimizer = adam;
    if (!validation.empty()) {
      r.metric = macro_f1(confusion_matrix(truth, predict_baseline_cnn(res.state, validation), C));
      if (*r.metric > best_f1) {
        best_f1 = *r.metric;
        best = res.state;
        res.history.best_epoch = epoch;
      }
    }
    r.seconds = seconds_since(t0);
    res.history.epochs.push_back(r);
    log_epoch(log, "baseline-cnn", r, cfg.epochs);
  }
  if (best) res.state = std::move(*best);
  if (!res.state.optimizer) res.state.optimizer = adam;
  return res;
}

}  // namespace ecgsl
