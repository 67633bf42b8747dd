#include "ecgsl/synth.hpp"

#include <cmath>
#include <string>

#include "ecgsl/random.hpp"

namespace ecgsl {

void SynthConfig::validate() const {
  require(num_classes >= 1, ErrorCode::InvalidConfig, "synthetic corpus needs at least one class");
  require(fs > 0.0 && duration_s > 0.0, ErrorCode::InvalidConfig,
          "synthetic corpus needs positive fs and duration");
  require(hr_min_bpm > 0.0 && hr_max_bpm >= hr_min_bpm, ErrorCode::InvalidConfig,
          "heart-rate range must be positive and ordered");
  require(rr_jitter >= 0.0 && rr_jitter < 0.5, ErrorCode::InvalidConfig, "rr jitter must be in [0, 0.5)");
  require(!(snr_db < -20.0), ErrorCode::InvalidConfig, "snr must be >= -20 dB");
}

namespace {

struct Wave {
  double offset_s;
  double sigma_s;
  double amplitude;
};

void add_bump(std::vector<double>& x, double fs, double centre, const Wave& w) {
  const double c = centre + w.offset_s * fs;
  const double sig = w.sigma_s * fs;
  const auto lo = static_cast<long>(std::floor(c - 5.0 * sig));
  const auto hi = static_cast<long>(std::ceil(c + 5.0 * sig));
  for (long i = std::max(0L, lo); i <= hi && i < static_cast<long>(x.size()); ++i) {
    const double d = (static_cast<double>(i) - c) / sig;
    x[static_cast<std::size_t>(i)] += w.amplitude * std::exp(-0.5 * d * d);
  }
}

}  // namespace

std::vector<SynthRecord> synth_ecg(const SynthConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.fs));
  std::vector<SynthRecord> out;
  out.reserve(cfg.num_records);
  for (std::size_t r = 0; r < cfg.num_records; ++r) {
    Rng rng(derive_seed(cfg.seed, r));
    const std::size_t label = r % cfg.num_classes;
    const double k = static_cast<double>(label);
    const double hr = uniform(rng, cfg.hr_min_bpm, cfg.hr_max_bpm);
    const double rr_mean = 60.0 / hr;
    const double jitter = cfg.rr_jitter * (1.0 + k * cfg.rr_variability_delta);
    const double t_base = 0.25 * (1.0 + k * cfg.t_amplitude_delta) * (1.0 + 0.05 * gaussian(rng));

    SynthRecord rec;
    rec.record.fs = cfg.fs;
    rec.record.label = label;
    char id[32];
    std::snprintf(id, sizeof id, "rec%05zu", r);
    rec.record.record_id = id;
    rec.record.samples.assign(n, 0.0);

    double t = 0.6 * rr_mean;
    while (true) {
      const auto peak = static_cast<std::size_t>(std::llround(t * cfg.fs));
      if (peak >= n) break;
      const double rr = rr_mean * std::max(0.5, 1.0 + jitter * gaussian(rng));
      const double t_amp = t_base * (1.0 + 0.03 * gaussian(rng));
      const double centre = static_cast<double>(peak);
      const double qt = std::sqrt(rr_mean);
      add_bump(rec.record.samples, cfg.fs, centre, {-0.18, 0.025, 0.15});
      add_bump(rec.record.samples, cfg.fs, centre, {0.0, 0.012, 1.0});
      add_bump(rec.record.samples, cfg.fs, centre, {0.28 * qt, 0.05, t_amp});
      rec.truth.indices.push_back(peak);
      rec.t_amplitudes.push_back(t_amp);
      t += rr;
    }

    if (std::isfinite(cfg.snr_db)) {
      double power = 0.0;
      for (double v : rec.record.samples) power += v * v;
      power /= static_cast<double>(n);
      const double sigma = std::sqrt(power / std::pow(10.0, cfg.snr_db / 10.0));
      for (auto& v : rec.record.samples) v += sigma * gaussian(rng);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace ecgsl
