#pragma once

// Raw single-lead ECG to fixed-length heartbeat segment sequences:
// high-pass -> powerline smoothing -> resample -> R-peak detection -> segmentation.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgsl/tensor.hpp"

namespace ecgsl {

struct RawRecord {
  std::vector<double> samples;
  double fs = 0.0;
  std::string record_id;
  std::optional<std::size_t> label;

  double duration() const { return fs > 0 ? static_cast<double>(samples.size()) / fs : 0.0; }
};

// Throws ErrorCode::Data for empty/non-finite samples or fs <= 0.
void validate(const RawRecord& record);

struct PeakList {
  std::vector<std::size_t> indices;
};

enum class PadMode { Edge, Zero, Stretch };

std::string_view to_string(PadMode mode);
PadMode parse_pad_mode(std::string_view text);

struct SegmentationConfig {
  std::size_t segment_length = 100;
  double pre_fraction = 0.35;
  double post_fraction = 0.45;
  PadMode pad_mode = PadMode::Edge;
  double target_fs = 100.0;

  void validate() const;
  // Peak position inside a segment; keeps the pre:post capture ratio.
  std::size_t anchor() const;
};

struct HeartbeatSegment {
  std::vector<float> values;
  std::size_t peak_index = 0;
  std::size_t pre_len = 0;   // samples captured before the peak (after record clipping)
  std::size_t post_len = 0;  // samples captured after the peak
  bool degenerate = false;
};

struct SegmentSequence {
  std::vector<HeartbeatSegment> segments;
  std::vector<std::uint8_t> pad_mask;  // 1 = real segment, 0 = sequential padding
  std::string record_id;
  std::optional<std::size_t> label;

  std::size_t size() const { return segments.size(); }
  std::size_t real_count() const;
  std::size_t segment_length() const { return segments.empty() ? 0 : segments[0].values.size(); }
  // Segment values stacked as [N, S].
  Array<float> matrix() const;
};

// Second-order sections (b0 b1 b2 a1 a2, a0 = 1) of a digital Butterworth filter
// obtained with the bilinear transform and a pre-warped cutoff.
struct Biquad {
  double b0, b1, b2, a1, a2;
};
enum class FilterType { Lowpass, Highpass };
std::vector<Biquad> butterworth(int order, double cutoff_hz, double fs, FilterType type);

// Forward-backward application with odd-extension padding and steady-state
// initial conditions, averaged with the same pass on the reversed input so
// the result commutes exactly with time reversal.
std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x);

// Order-5 zero-phase Butterworth high-pass.
RawRecord highpass_filter(const RawRecord& record, double cutoff_hz = 0.5);

// Trailing moving average over round(fs / powerline) samples; missing history
// replicates the first sample.
RawRecord powerline_smooth(const RawRecord& record, double powerline_hz = 50.0);

// Linear interpolation onto a uniform grid at target_fs.
RawRecord resample(const RawRecord& record, double target_fs);

// Pan-Tompkins style QRS detector: 5-15 Hz band-pass, derivative, squaring,
// 150 ms moving-window integration, adaptive thresholds with a 200 ms
// refractory period and search-back, then refinement to the local maximum of
// the input within +/-50 ms.
PeakList detect_r_peaks(const RawRecord& record);

SegmentSequence segment(const RawRecord& record, const PeakList& peaks,
                        const SegmentationConfig& cfg);

// Extends every sequence with all-zero segments up to the longest one.
std::vector<SegmentSequence> pad_sequences(std::vector<SegmentSequence> batch);

struct PreprocessResult {
  SegmentSequence sequence;
  PeakList peaks;
};

// highpass -> powerline -> resample -> detect -> segment.
PreprocessResult preprocess(const RawRecord& record, const SegmentationConfig& cfg);

}  // namespace ecgsl
