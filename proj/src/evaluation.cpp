#include "ecgsl/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "ecgsl/error.hpp"
#include "ecgsl/random.hpp"

namespace ecgsl {

namespace {

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string class_label(std::span<const std::string> names, std::size_t c) {
  return c < names.size() ? names[c] : std::to_string(c);
}

}  // namespace

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts) t += v;
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                 std::size_t num_classes) {
  require(!truth.empty(), ErrorCode::Data, "confusion_matrix: no samples");
  require(truth.size() == predicted.size(), ErrorCode::Data,
          "confusion_matrix: label vectors differ in length");
  require(num_classes >= 1, ErrorCode::InvalidConfig, "confusion_matrix: needs at least one class");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] < num_classes && predicted[i] < num_classes, ErrorCode::Data,
            "confusion_matrix: label out of range at sample " + std::to_string(i));
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < cm.num_classes; ++c) diag += cm.at(c, c);
  return ratio(static_cast<double>(diag), static_cast<double>(cm.total()));
}

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes;
  std::vector<ClassMetrics> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < C; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const double tp = static_cast<double>(cm.at(c, c));
    const double fp = static_cast<double>(col) - tp, fn = static_cast<double>(row) - tp;
    out[c].precision = ratio(tp, tp + fp);
    out[c].recall = ratio(tp, tp + fn);
    out[c].f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
    out[c].support = row;
  }
  return out;
}

namespace {

template <class F>
double macro(const ConfusionMatrix& cm, F field) {
  if (cm.num_classes == 0) return 0.0;
  double s = 0.0;
  for (const auto& m : per_class_metrics(cm)) s += field(m);
  return s / static_cast<double>(cm.num_classes);
}

}  // namespace

double macro_f1(const ConfusionMatrix& cm) {
  return macro(cm, [](const ClassMetrics& m) { return m.f1; });
}
double macro_precision(const ConfusionMatrix& cm) {
  return macro(cm, [](const ClassMetrics& m) { return m.precision; });
}
double macro_recall(const ConfusionMatrix& cm) {
  return macro(cm, [](const ClassMetrics& m) { return m.recall; });
}

SenSpe sensitivity_specificity(const ConfusionMatrix& cm) {
  require(cm.num_classes == 2, ErrorCode::InvalidConfig,
          "sensitivity/specificity need a binary confusion matrix, got " + std::to_string(cm.num_classes) +
              " classes");
  const double tp = static_cast<double>(cm.at(1, 1)), fn = static_cast<double>(cm.at(1, 0));
  const double tn = static_cast<double>(cm.at(0, 0)), fp = static_cast<double>(cm.at(0, 1));
  return {ratio(tp, tp + fn), ratio(tn, tn + fp)};
}

MetricsReport make_report(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.cm = cm;
  r.accuracy = accuracy(cm);
  r.per_class = per_class_metrics(cm);
  r.macro_f1 = macro_f1(cm);
  r.macro_precision = macro_precision(cm);
  r.macro_recall = macro_recall(cm);
  r.binary = cm.num_classes == 2;
  if (r.binary) {
    auto s = sensitivity_specificity(cm);
    r.sensitivity = s.sensitivity;
    r.specificity = s.specificity;
  }
  return r;
}

std::string format_report(const MetricsReport& r, std::span<const std::string> names) {
  std::ostringstream o;
  char buf[160];
  std::snprintf(buf, sizeof buf, "samples\t%llu\naccuracy\t%.6f\nmacro_f1\t%.6f\nmacro_precision\t%.6f\nmacro_recall\t%.6f\n",
                static_cast<unsigned long long>(r.cm.total()), r.accuracy, r.macro_f1, r.macro_precision,
                r.macro_recall);
  o << buf;
  if (r.binary) {
    std::snprintf(buf, sizeof buf, "sensitivity\t%.6f\nspecificity\t%.6f\n", r.sensitivity, r.specificity);
    o << buf;
  }
  o << "class\tprecision\trecall\tf1\tsupport\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%llu\n", class_label(names, c).c_str(), m.precision,
                  m.recall, m.f1, static_cast<unsigned long long>(m.support));
    o << buf;
  }
  return o.str();
}

std::string confusion_csv(const ConfusionMatrix& cm, std::span<const std::string> names) {
  std::ostringstream o;
  o << "true\\pred";
  for (std::size_t c = 0; c < cm.num_classes; ++c) o << ',' << class_label(names, c);
  o << '\n';
  for (std::size_t t = 0; t < cm.num_classes; ++t) {
    o << class_label(names, t);
    for (std::size_t p = 0; p < cm.num_classes; ++p) o << ',' << cm.at(t, p);
    o << '\n';
  }
  return o.str();
}

std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const std::size_t> labels, std::size_t k,
                                                       std::uint64_t seed) {
  require(k >= 2, ErrorCode::InvalidConfig, "stratified_kfold needs k >= 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [c, members] : by_class)
    require(members.size() >= k, ErrorCode::InvalidDataset,
            "class " + std::to_string(c) + " has " + std::to_string(members.size()) + " samples, fewer than k=" +
                std::to_string(k));

  Rng rng(derive_seed(seed, 0x6b666f6c64));
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (auto& [c, members] : by_class) {
    shuffle(std::span<std::size_t>(members), rng);
    for (auto idx : members) {
      folds[next].push_back(idx);
      next = (next + 1) % k;
    }
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

}  // namespace ecgsl
