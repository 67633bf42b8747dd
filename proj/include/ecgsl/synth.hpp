#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "ecgsl/signal.hpp"

namespace ecgsl {

// Desk-scale synthetic ECG corpus. Every beat is a sum of three Gaussian
// bumps (P, QRS, T); classes differ in T-wave amplitude and RR variability.
struct SynthConfig {
  std::size_t num_records = 100;
  double duration_s = 60.0;
  double fs = 100.0;
  double hr_min_bpm = 55.0;
  double hr_max_bpm = 95.0;
  double rr_jitter = 0.03;  // relative std of beat-to-beat RR
  double snr_db = std::numeric_limits<double>::infinity();  // infinity disables noise
  std::size_t num_classes = 3;
  double t_amplitude_delta = 0.35;     // T amplitude grows by this fraction per class
  double rr_variability_delta = 1.0;   // RR jitter grows by this fraction per class
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthRecord {
  RawRecord record;
  PeakList truth;                    // sample index of every R-wave centre
  std::vector<double> t_amplitudes;  // per beat, in truth order
};

// Labels are assigned round-robin (record i gets class i % num_classes).
// Record i depends only on (seed, i), so corpora of different sizes share
// their common prefix.
std::vector<SynthRecord> synth_ecg(const SynthConfig& cfg);

}  // namespace ecgsl
