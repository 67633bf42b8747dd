#pragma once

// Classification metrics and stratified fold assignment. Undefined ratios
// (0/0) are reported as 0.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ecgsl {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;  // row-major C*C

  explicit ConfusionMatrix(std::size_t c = 0) : num_classes(c), counts(c * c, 0) {}
  std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * num_classes + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * num_classes + p]; }
  std::uint64_t total() const;
  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                 std::size_t num_classes);

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::uint64_t support = 0;
};

struct MetricsReport {
  ConfusionMatrix cm;
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0, macro_precision = 0, macro_recall = 0;
  bool binary = false;
  double sensitivity = 0, specificity = 0;  // binary only, class 1 positive
};

double accuracy(const ConfusionMatrix& cm);
std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);
double macro_f1(const ConfusionMatrix& cm);
double macro_precision(const ConfusionMatrix& cm);
double macro_recall(const ConfusionMatrix& cm);

struct SenSpe {
  double sensitivity = 0, specificity = 0;
};
// Binary only; class 1 is the positive (disorder) class.
SenSpe sensitivity_specificity(const ConfusionMatrix& cm);

MetricsReport make_report(const ConfusionMatrix& cm);

std::string format_report(const MetricsReport& r, std::span<const std::string> class_names = {});
std::string confusion_csv(const ConfusionMatrix& cm, std::span<const std::string> class_names = {});

// Index sets of k folds. Within every class the members are shuffled and dealt
// round-robin, starting each class at the fold after where the previous one
// stopped so fold sizes stay within one of each other too.
std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const std::size_t> labels, std::size_t k,
                                                       std::uint64_t seed);

}  // namespace ecgsl
