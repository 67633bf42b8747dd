#include "ecgsl/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

namespace ecgsl {

void validate(const RawRecord& record) {
  require(!record.samples.empty(), ErrorCode::Data, "record '" + record.record_id + "' is empty");
  require(record.fs > 0.0 && std::isfinite(record.fs), ErrorCode::Data,
          "record '" + record.record_id + "' has a non-positive sampling rate");
  for (double v : record.samples)
    require(std::isfinite(v), ErrorCode::Data,
            "record '" + record.record_id + "' contains non-finite samples");
}

std::string_view to_string(PadMode mode) {
  switch (mode) {
    case PadMode::Edge: return "edge";
    case PadMode::Zero: return "zero";
    case PadMode::Stretch: return "stretch";
  }
  return "edge";
}

PadMode parse_pad_mode(std::string_view text) {
  if (text == "edge") return PadMode::Edge;
  if (text == "zero") return PadMode::Zero;
  if (text == "stretch") return PadMode::Stretch;
  fail(ErrorCode::InvalidConfig, "unknown pad mode '" + std::string(text) + "'");
}

void SegmentationConfig::validate() const {
  require(segment_length >= 8, ErrorCode::InvalidConfig, "segment length must be >= 8");
  require(pre_fraction > 0.0 && post_fraction > 0.0 && pre_fraction + post_fraction <= 1.0,
          ErrorCode::InvalidConfig, "pre/post fractions must be positive and sum to <= 1");
  require(target_fs > 0.0, ErrorCode::InvalidConfig, "target sampling rate must be positive");
}

std::size_t SegmentationConfig::anchor() const {
  const double ratio = pre_fraction / (pre_fraction + post_fraction);
  return static_cast<std::size_t>(std::lround(ratio * static_cast<double>(segment_length - 1)));
}

std::size_t SegmentSequence::real_count() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}));
}

Array<float> SegmentSequence::matrix() const {
  const std::size_t S = segment_length();
  Array<float> out({segments.size(), S});
  for (std::size_t i = 0; i < segments.size(); ++i)
    std::copy(segments[i].values.begin(), segments[i].values.end(), out.data.begin() + i * S);
  return out;
}

// ---------------------------------------------------------------------------
// Filters

std::vector<Biquad> butterworth(int order, double cutoff_hz, double fs, FilterType type) {
  require(order >= 1, ErrorCode::InvalidConfig, "filter order must be >= 1");
  require(fs > 0.0 && cutoff_hz > 0.0 && cutoff_hz < fs / 2.0, ErrorCode::InvalidConfig,
          "cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, Nyquist=" +
              std::to_string(fs / 2.0) + " Hz)");
  using cd = std::complex<double>;
  const double warped = std::tan(std::numbers::pi * cutoff_hz / fs);
  const bool high = type == FilterType::Highpass;
  auto digital_pole = [&](int k) {
    const cd proto = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    const cd s = high ? warped / proto : warped * proto;
    return (1.0 + s) / (1.0 - s);
  };
  // Gain is normalised at DC for low-pass and at Nyquist for high-pass.
  const double z_ref = high ? -1.0 : 1.0;
  auto normalise = [&](Biquad q) {
    const double num = q.b0 + q.b1 * z_ref + q.b2;
    const double den = 1.0 + q.a1 * z_ref + q.a2;
    const double g = den / num;
    q.b0 *= g;
    q.b1 *= g;
    q.b2 *= g;
    return q;
  };
  std::vector<Biquad> sections;
  for (int k = 0; k < order / 2; ++k) {
    const cd z = digital_pole(k);
    Biquad q{1.0, high ? -2.0 : 2.0, 1.0, -2.0 * z.real(), std::norm(z)};
    sections.push_back(normalise(q));
  }
  if (order % 2 == 1) {
    const double z = digital_pole(order / 2).real();
    Biquad q{1.0, high ? -1.0 : 1.0, 0.0, -z, 0.0};
    sections.push_back(normalise(q));
  }
  return sections;
}

namespace {

// Direct form II transposed cascade. `level` seeds every section with the
// steady state it would reach under a constant input of that value.
std::vector<double> sosfilt(std::span<const Biquad> sections, std::span<const double> x,
                            double level) {
  std::vector<double> y(x.begin(), x.end());
  double u = level;
  for (const auto& q : sections) {
    const double gain = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    const double ys = u * gain;
    double z2 = q.b2 * u - q.a2 * ys;
    double z1 = q.b1 * u - q.a1 * ys + z2;
    for (auto& v : y) {
      const double in = v;
      const double out = q.b0 * in + z1;
      z1 = q.b1 * in - q.a1 * out + z2;
      z2 = q.b2 * in - q.a2 * out;
      v = out;
    }
    u = ys;
  }
  return y;
}

}  // namespace

namespace {

std::vector<double> forward_backward(std::span<const Biquad> sections, std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t pad = std::min<std::size_t>(3 * (2 * sections.size() + 1), n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  auto fwd = sosfilt(sections, ext, ext.front());
  std::reverse(fwd.begin(), fwd.end());
  auto bwd = sosfilt(sections, fwd, fwd.front());
  std::reverse(bwd.begin(), bwd.end());
  return std::vector<double>(bwd.begin() + static_cast<std::ptrdiff_t>(pad),
                             bwd.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

}  // namespace

// Edge transients differ between "forward first" and "backward first", so
// both orders are run and averaged; the result commutes exactly with time
// reversal.
std::vector<double> filtfilt(std::span<const Biquad> sections, std::span<const double> x) {
  const std::size_t n = x.size();
  require(n >= 2, ErrorCode::Data, "filtfilt needs at least two samples");
  auto a = forward_backward(sections, x);
  std::vector<double> rev(x.rbegin(), x.rend());
  auto b = forward_backward(sections, rev);
  for (std::size_t i = 0; i < n; ++i) a[i] = 0.5 * (a[i] + b[n - 1 - i]);
  return a;
}

RawRecord highpass_filter(const RawRecord& record, double cutoff_hz) {
  validate(record);
  const auto sections = butterworth(5, cutoff_hz, record.fs, FilterType::Highpass);
  RawRecord out = record;
  if (record.samples.size() >= 2) out.samples = filtfilt(sections, record.samples);
  return out;
}

RawRecord powerline_smooth(const RawRecord& record, double powerline_hz) {
  validate(record);
  require(powerline_hz > 0.0, ErrorCode::InvalidConfig, "powerline frequency must be positive");
  const auto w = static_cast<std::size_t>(
      std::max<long>(1, std::lround(record.fs / powerline_hz)));
  RawRecord out = record;
  const auto& x = record.samples;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < w; ++k) s += (i >= k) ? x[i - k] : x[0];
    out.samples[i] = s / static_cast<double>(w);
  }
  return out;
}

RawRecord resample(const RawRecord& record, double target_fs) {
  validate(record);
  require(target_fs > 0.0, ErrorCode::InvalidConfig, "target sampling rate must be positive");
  require(record.samples.size() >= 2, ErrorCode::Data, "cannot resample a single-sample record");
  RawRecord out = record;
  out.fs = target_fs;
  if (target_fs == record.fs) return out;
  const auto& x = record.samples;
  const double step = record.fs / target_fs;
  const auto len = static_cast<std::size_t>(
      std::floor(static_cast<double>(x.size() - 1) * target_fs / record.fs + 1e-9)) + 1;
  out.samples.resize(len);
  for (std::size_t k = 0; k < len; ++k) {
    const double pos = static_cast<double>(k) * step;
    const auto i = std::min(static_cast<std::size_t>(pos), x.size() - 1);
    const double frac = pos - static_cast<double>(i);
    out.samples[k] = (i + 1 < x.size()) ? x[i] + frac * (x[i + 1] - x[i]) : x[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// QRS detection

namespace {

std::vector<double> qrs_energy(const RawRecord& record) {
  const auto& x = record.samples;
  const double fs = record.fs;
  auto band = filtfilt(butterworth(2, 15.0, fs, FilterType::Lowpass), x);
  band = filtfilt(butterworth(2, 5.0, fs, FilterType::Highpass), band);

  const std::size_t n = band.size();
  auto at = [&](std::ptrdiff_t i) {
    return band[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1))];
  };
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::ptrdiff_t>(i);
    const double d = (2.0 * at(k + 2) + at(k + 1) - at(k - 1) - 2.0 * at(k - 2)) / 8.0;
    sq[i] = d * d;
  }
  // Centred 150 ms integration window. Near the record ends it is truncated
  // and averaged over what remains, so a beat on the last sample still peaks there.
  const auto w = static_cast<std::size_t>(std::max<long>(1, std::lround(0.150 * fs)));
  const std::size_t half = w / 2;
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sq[i];
  std::vector<double> mwi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + (w - half));
    mwi[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return mwi;
}

struct Candidate {
  std::size_t index;
  double value;
};

}  // namespace

PeakList detect_r_peaks(const RawRecord& record) {
  validate(record);
  const double fs = record.fs;
  require(fs > 30.0, ErrorCode::InvalidConfig, "peak detection needs fs > 30 Hz for the 5-15 Hz band");
  require(record.duration() >= 2.0, ErrorCode::Data, "peak detection needs at least 2 s of signal");

  const auto mwi = qrs_energy(record);
  const std::size_t n = mwi.size();
  const auto refractory = static_cast<std::size_t>(std::ceil(0.2 * fs));

  std::vector<Candidate> candidates;
  // Local maxima; the record ends count when the energy is still rising into them.
  for (std::size_t i = 0; i < n; ++i) {
    const bool left = i == 0 || mwi[i] > mwi[i - 1];
    const bool right = i + 1 == n || mwi[i] >= mwi[i + 1];
    if (left && right && (i > 0 || i + 1 < n) && mwi[i] > 0.0) candidates.push_back({i, mwi[i]});
  }

  const auto learn = static_cast<std::size_t>(std::min<double>(static_cast<double>(n), 2.0 * fs));
  const double learn_max = *std::max_element(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(learn));
  const double learn_mean =
      std::accumulate(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(learn), 0.0) /
      static_cast<double>(learn);
  double spki = 0.5 * learn_max;
  double npki = 0.5 * learn_mean;
  auto threshold = [&] { return npki + 0.25 * (spki - npki); };

  std::vector<Candidate> qrs;
  std::vector<Candidate> rejected;  // since the last accepted QRS, for search-back
  auto mean_rr = [&]() -> double {
    if (qrs.size() < 2) return 0.0;
    const std::size_t k = std::min<std::size_t>(8, qrs.size() - 1);
    return static_cast<double>(qrs.back().index - qrs[qrs.size() - 1 - k].index) / static_cast<double>(k);
  };

  for (const auto& c : candidates) {
    if (c.value > threshold()) {
      if (!qrs.empty() && c.index - qrs.back().index < refractory) {
        if (c.value > qrs.back().value) qrs.back() = c;
        continue;
      }
      // Search back for a missed beat before accepting this one.
      const double rr = mean_rr();
      if (rr > 0.0 && !qrs.empty() && static_cast<double>(c.index - qrs.back().index) > 1.66 * rr) {
        const Candidate* best = nullptr;
        for (const auto& r : rejected)
          if (r.index - qrs.back().index >= refractory && c.index - r.index >= refractory &&
              r.value > 0.5 * threshold() && (!best || r.value > best->value))
            best = &r;
        if (best) {
          qrs.push_back(*best);
          spki = 0.25 * best->value + 0.75 * spki;
        }
      }
      qrs.push_back(c);
      spki = 0.125 * c.value + 0.875 * spki;
      rejected.clear();
    } else {
      npki = 0.125 * c.value + 0.875 * npki;
      rejected.push_back(c);
    }
  }
  require(!qrs.empty(), ErrorCode::EmptyPeaks, "no R-peaks found in record '" + record.record_id + "'");

  // Refine onto the input signal and re-impose the refractory gap.
  const auto reach = static_cast<std::size_t>(std::lround(0.05 * fs));
  const auto& x = record.samples;
  std::vector<std::size_t> refined;
  for (const auto& c : qrs) {
    const std::size_t lo = c.index >= reach ? c.index - reach : 0;
    const std::size_t hi = std::min(n - 1, c.index + reach);
    std::size_t best = lo;
    for (std::size_t i = lo; i <= hi; ++i)
      if (x[i] > x[best]) best = i;
    refined.push_back(best);
  }
  std::sort(refined.begin(), refined.end());
  refined.erase(std::unique(refined.begin(), refined.end()), refined.end());
  PeakList peaks;
  for (std::size_t idx : refined) {
    if (!peaks.indices.empty() && idx - peaks.indices.back() < refractory) {
      if (x[idx] > x[peaks.indices.back()]) peaks.indices.back() = idx;
      continue;
    }
    peaks.indices.push_back(idx);
  }
  return peaks;
}

// ---------------------------------------------------------------------------
// Segmentation

namespace {

void fit_normalised(std::span<const double> window, std::vector<float>& out, std::size_t offset,
                    bool& degenerate) {
  const auto [mn_it, mx_it] = std::minmax_element(window.begin(), window.end());
  const double mn = *mn_it, mx = *mx_it;
  degenerate = !(mx > mn);
  for (std::size_t i = 0; i < window.size(); ++i)
    out[offset + i] = degenerate ? 0.0f : static_cast<float>((window[i] - mn) / (mx - mn));
}

}  // namespace

SegmentSequence segment(const RawRecord& record, const PeakList& peaks, const SegmentationConfig& cfg) {
  validate(record);
  cfg.validate();
  const auto& p = peaks.indices;
  require(p.size() >= 2, ErrorCode::Segmentation,
          "segmentation of '" + record.record_id + "' needs at least 2 peaks, got " +
              std::to_string(p.size()));
  const std::size_t n = record.samples.size();
  for (std::size_t i = 0; i < p.size(); ++i)
    require(p[i] < n && (i == 0 || p[i] > p[i - 1]), ErrorCode::Segmentation,
            "peak indices must be strictly increasing and inside the record");

  const std::size_t S = cfg.segment_length;
  const std::size_t anchor = cfg.anchor();
  const std::size_t room_left = anchor, room_right = S - 1 - anchor;

  SegmentSequence seq;
  seq.record_id = record.record_id;
  seq.label = record.label;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::size_t rr_next = i + 1 < p.size() ? p[i + 1] - p[i] : p[i] - p[i - 1];
    const std::size_t rr_prev = i > 0 ? p[i] - p[i - 1] : rr_next;
    const auto want_pre = static_cast<std::size_t>(std::lround(cfg.pre_fraction * static_cast<double>(rr_prev)));
    const auto want_post = static_cast<std::size_t>(std::lround(cfg.post_fraction * static_cast<double>(rr_next)));

    HeartbeatSegment seg;
    seg.pre_len = std::min(want_pre, p[i]);
    seg.post_len = std::min(want_post, n - 1 - p[i]);
    seg.values.assign(S, 0.0f);

    if (cfg.pad_mode == PadMode::Stretch) {
      // Resample the raw window to S samples, then normalise.
      const std::size_t W = seg.pre_len + seg.post_len + 1;
      const double* window = record.samples.data() + (p[i] - seg.pre_len);
      std::vector<double> stretched(S, window[0]);
      if (W > 1) {
        const double ratio = static_cast<double>(W - 1) / static_cast<double>(S - 1);
        for (std::size_t k = 0; k < S; ++k) {
          const double pos = static_cast<double>(k) * ratio;
          const auto j = std::min(static_cast<std::size_t>(pos), W - 1);
          const double frac = pos - static_cast<double>(j);
          stretched[k] = j + 1 < W ? window[j] + frac * (window[j + 1] - window[j]) : window[j];
        }
      }
      fit_normalised(stretched, seg.values, 0, seg.degenerate);
      seg.peak_index = W > 1 ? static_cast<std::size_t>(std::lround(
                                   static_cast<double>(seg.pre_len) * static_cast<double>(S - 1) /
                                   static_cast<double>(W - 1)))
                             : anchor;
    } else {
      // Keep what fits around the anchor; the outermost samples go first.
      const std::size_t keep_pre = std::min(seg.pre_len, room_left);
      const std::size_t keep_post = std::min(seg.post_len, room_right);
      const std::size_t start = anchor - keep_pre;
      std::span<const double> window(record.samples.data() + (p[i] - keep_pre), keep_pre + keep_post + 1);
      fit_normalised(window, seg.values, start, seg.degenerate);
      if (cfg.pad_mode == PadMode::Edge && !seg.degenerate) {
        const float first = seg.values[start];
        const float last = seg.values[anchor + keep_post];
        std::fill(seg.values.begin(), seg.values.begin() + static_cast<std::ptrdiff_t>(start), first);
        std::fill(seg.values.begin() + static_cast<std::ptrdiff_t>(anchor + keep_post + 1), seg.values.end(), last);
      }
      seg.peak_index = anchor;
    }
    seq.segments.push_back(std::move(seg));
    seq.pad_mask.push_back(1);
  }
  return seq;
}

std::vector<SegmentSequence> pad_sequences(std::vector<SegmentSequence> batch) {
  require(!batch.empty(), ErrorCode::InvalidConfig, "pad_sequences needs a non-empty batch");
  std::size_t longest = 0, S = 0;
  for (const auto& s : batch) {
    longest = std::max(longest, s.size());
    if (S == 0) S = s.segment_length();
  }
  for (auto& s : batch) {
    while (s.size() < longest) {
      HeartbeatSegment pad;
      pad.values.assign(S, 0.0f);
      s.segments.push_back(std::move(pad));
      s.pad_mask.push_back(0);
    }
  }
  return batch;
}

PreprocessResult preprocess(const RawRecord& record, const SegmentationConfig& cfg) {
  cfg.validate();
  auto filtered = powerline_smooth(highpass_filter(record, 0.5), 50.0);
  auto resampled = resample(filtered, cfg.target_fs);
  PreprocessResult out;
  out.peaks = detect_r_peaks(resampled);
  out.sequence = segment(resampled, out.peaks, cfg);
  return out;
}

}  // namespace ecgsl
