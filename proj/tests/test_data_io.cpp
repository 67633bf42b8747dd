#include <cmath>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "ecgsl/data_io.hpp"
#include "ecgsl/random.hpp"
#include "test_util.hpp"

using namespace ecgsl;
using ecgsl::testing::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

ModelState sample_state(bool with_optimizer) {
  ModelConfig cfg;
  cfg.encoder.channels = {2, 2, 3, 3, 4, 4};
  cfg.encoder.embed_dim = 8;
  cfg.encoder.segment_length = 16;
  cfg.transformer = {1, 2, 8, 0.0};
  auto s = ModelState::initial(cfg, 42);
  s.stage = Stage::Masked;
  s.run_config = "train.lr=0.0005\nseed=42\n";
  if (with_optimizer) {
    AdamState a;
    Rng rng(1);
    for (const auto& [name, p] : s.params) {
      Array<float> m(p.shape), v(p.shape);
      for (auto& x : m.data) x = static_cast<float>(gaussian(rng));
      for (auto& x : v.data) x = static_cast<float>(unit_uniform(rng));
      a.m.emplace(name, m);
      a.v.emplace(name, v);
    }
    a.step = 1234;
    s.optimizer = a;
  }
  return s;
}

bool same_state(const ModelState& a, const ModelState& b) {
  return a.config.to_text() == b.config.to_text() && a.params == b.params && a.stage == b.stage &&
         a.seed == b.seed && a.run_config == b.run_config && a.optimizer == b.optimizer;
}

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  TempDir dir;
  for (bool opt : {false, true}) {
    auto s = sample_state(opt);
    // Values that only survive a bitwise round trip.
    s.params.begin()->second.data[0] = std::nextafter(1.0f, 2.0f);
    s.params.begin()->second.data[1] = -0.0f;
    s.params.begin()->second.data[2] = 1e-42f;  // subnormal
    write_checkpoint(s, dir / "ckpt.bin");
    auto back = read_checkpoint(dir / "ckpt.bin");
    CHECK(same_state(s, back));
    CHECK(std::signbit(back.params.begin()->second.data[1]));
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(s));
  }
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    CHECK(e.path().filename() == "ckpt.bin");  // no temporaries left behind
}

TEST_CASE("checkpoint load errors are distinct") {
  auto bytes = serialize_checkpoint(sample_state(true));
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_ERROR_CODE(parse_checkpoint(b), ErrorCode::BadMagic);
    CHECK_ERROR_CODE(parse_checkpoint("EC"), ErrorCode::BadMagic);
  }
  SUBCASE("version") {
    auto b = bytes;
    b[5] = static_cast<char>(kCheckpointVersion + 1);
    CHECK_ERROR_CODE(parse_checkpoint(b), ErrorCode::Version);
  }
  SUBCASE("truncated anywhere") {
    for (std::size_t cut = 5; cut < bytes.size(); cut += 1 + cut / 7)
      CHECK_ERROR_CODE(parse_checkpoint(bytes.substr(0, cut)), ErrorCode::Truncated);
  }
  SUBCASE("shape mismatch against the stored config") {
    auto s = sample_state(false);
    auto other = s;
    other.config.encoder.embed_dim = 10;
    other.config.transformer.num_heads = 2;
    s.config = other.config;  // params still shaped for embed_dim 8
    CHECK_ERROR_CODE(parse_checkpoint(serialize_checkpoint(s)), ErrorCode::ShapeMismatch);
    auto missing = sample_state(false);
    missing.params.erase("recon.bias");
    CHECK_ERROR_CODE(parse_checkpoint(serialize_checkpoint(missing)), ErrorCode::ShapeMismatch);
  }
  SUBCASE("missing file") {
    CHECK_ERROR_CODE(read_checkpoint("/nonexistent/ckpt.bin"), ErrorCode::Io);
  }
}

TEST_CASE("manifest loading") {
  TempDir dir;
  write_record_file(dir / "a.f32", {0.5, -1.25, 3.0});
  write_record_file(dir / "b.f32", {1.0, 2.0});
  const std::string head = "ecgsl-manifest\t1\nclasses\tneg\tpos\n";

  SUBCASE("empty body is valid") {
    write_text(dir / "m.tsv", head);
    auto m = load_manifest(dir / "m.tsv");
    CHECK(m.entries.empty());
    CHECK(m.class_names == std::vector<std::string>{"neg", "pos"});
  }
  SUBCASE("records load with labels") {
    write_text(dir / "m.tsv", head + "# comment\nA\ta.f32\t250\t3\t1\nB\tb.f32\t100\t2\t-\n");
    auto m = load_manifest(dir / "m.tsv");
    REQUIRE(m.entries.size() == 2);
    auto a = read_record(m, "A");
    CHECK(a.samples == std::vector<double>{0.5, -1.25, 3.0});
    CHECK(a.fs == 250.0);
    CHECK(a.label == std::optional<std::size_t>(1));
    CHECK(!read_record(m, "B").label.has_value());
    CHECK_ERROR_CODE(read_record(m, "C"), ErrorCode::Manifest);
    // write/load round trip
    write_manifest(m, dir / "m2.tsv");
    auto m2 = load_manifest(dir / "m2.tsv");
    CHECK(m2.entries.size() == 2);
    CHECK(m2.entries[0].fs == 250.0);
  }
  SUBCASE("errors") {
    write_text(dir / "m.tsv", head + "A\ta.f32\t100\t3\t0\nA\tb.f32\t100\t2\t0\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    write_text(dir / "m.tsv", head + "A\ta.f32\t100\t4\t0\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    write_text(dir / "m.tsv", head + "A\tmissing.f32\t100\t3\t0\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    write_text(dir / "m.tsv", head + "A\ta.f32\t100\t3\t2\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    write_text(dir / "m.tsv", head + "A\ta.f32\tfast\t3\t0\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    write_text(dir / "m.tsv", "ecgsl-manifest\t2\n");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Version);
    write_text(dir / "m.tsv", "");
    CHECK_ERROR_CODE(load_manifest(dir / "m.tsv"), ErrorCode::Manifest);
    CHECK_ERROR_CODE(load_manifest(dir / "nope.tsv"), ErrorCode::Io);
  }
}

TEST_CASE("segment corpus round trip and CSV dump") {
  TempDir dir;
  SynthConfig sc;
  sc.num_records = 4;
  sc.duration_s = 20;
  sc.seed = 3;
  SegmentCorpus c;
  c.class_names = {"x", "y", "z"};
  for (const auto& r : synth_ecg(sc)) c.sequences.push_back(preprocess(r.record, c.segmentation).sequence);
  c.sequences = pad_sequences(c.sequences);
  c.sequences[1].label.reset();
  write_segment_corpus(c, dir / "seg.bin");
  auto back = read_segment_corpus(dir / "seg.bin");
  REQUIRE(back.sequences.size() == c.sequences.size());
  for (std::size_t i = 0; i < c.sequences.size(); ++i) {
    const auto &a = c.sequences[i], &b = back.sequences[i];
    CHECK(a.record_id == b.record_id);
    CHECK(a.label == b.label);
    CHECK(a.pad_mask == b.pad_mask);
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
      CHECK(a.segments[j].values == b.segments[j].values);
      CHECK(a.segments[j].peak_index == b.segments[j].peak_index);
      CHECK(a.segments[j].pre_len == b.segments[j].pre_len);
      CHECK(a.segments[j].degenerate == b.segments[j].degenerate);
    }
  }
  CHECK(back.class_names == c.class_names);
  CHECK(back.segmentation.pad_mode == PadMode::Edge);

  auto csv = segments_csv(c.sequences);
  std::size_t rows = 0;
  for (const auto& s : c.sequences) rows += s.size();
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == rows + 1);
  CHECK(csv.rfind("record_id,segment,real,peak_index,v0,", 0) == 0);

  auto bytes = read_file(dir / "seg.bin");
  write_text(dir / "cut.bin", bytes.substr(0, bytes.size() - 3));
  CHECK_ERROR_CODE(read_segment_corpus(dir / "cut.bin"), ErrorCode::Truncated);
}

TEST_CASE("synthetic generator: spacing, determinism, files") {
  SynthConfig sc;
  sc.num_records = 1;
  sc.hr_min_bpm = sc.hr_max_bpm = 60.0;
  sc.rr_jitter = 0.0;
  sc.rr_variability_delta = 0.0;
  auto r = synth_ecg(sc);
  const auto& p = r[0].truth.indices;
  REQUIRE(p.size() > 50);
  for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] - p[i - 1] == 100);

  SynthConfig noisy;
  noisy.num_records = 6;
  noisy.duration_s = 10;
  noisy.snr_db = 10;
  noisy.seed = 99;
  auto a = synth_ecg(noisy), b = synth_ecg(noisy);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].record.samples == b[i].record.samples);
    CHECK(a[i].record.label == std::optional<std::size_t>(i % 3));
  }
  // A larger corpus keeps the common prefix.
  noisy.num_records = 8;
  CHECK(synth_ecg(noisy)[5].record.samples == a[5].record.samples);

  TempDir dir;
  write_synth_corpus(a, 3, dir.path());
  auto m = load_manifest(dir / "manifest.tsv");
  CHECK(m.entries.size() == 6);
  CHECK(m.class_names.size() == 3);
  auto rec = read_record(m, a[2].record.record_id);
  for (std::size_t i = 0; i < rec.samples.size(); ++i)
    CHECK(rec.samples[i] == static_cast<double>(static_cast<float>(a[2].record.samples[i])));
  auto peaks = read_file(dir / "peaks.tsv");
  CHECK(peaks.find(a[0].record.record_id + "\t" + std::to_string(a[0].truth.indices[0]) + ",") != std::string::npos);

  SynthConfig bad;
  bad.num_classes = 0;
  CHECK_ERROR_CODE(synth_ecg(bad), ErrorCode::InvalidConfig);
}

TEST_CASE("synthetic classes differ in T amplitude by many standard errors") {
  for (double delta : {0.3, 0.35}) {
    SynthConfig sc;
    sc.num_records = 60;
    sc.duration_s = 30;
    sc.t_amplitude_delta = delta;
    sc.seed = 11;
    auto recs = synth_ecg(sc);
    // Per-record mean T amplitude is the sampling unit.
    std::vector<std::vector<double>> per_class(sc.num_classes);
    for (const auto& r : recs) {
      const double m = std::accumulate(r.t_amplitudes.begin(), r.t_amplitudes.end(), 0.0) /
                       static_cast<double>(r.t_amplitudes.size());
      per_class[*r.record.label].push_back(m);
    }
    auto stats = [](const std::vector<double>& v) {
      const double n = static_cast<double>(v.size());
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
      double ss = 0;
      for (double x : v) ss += (x - mean) * (x - mean);
      return std::pair{mean, ss / (n - 1) / n};  // mean, squared standard error
    };
    for (std::size_t c = 0; c + 1 < sc.num_classes; ++c) {
      auto [m0, se0] = stats(per_class[c]);
      auto [m1, se1] = stats(per_class[c + 1]);
      CHECK(std::abs(m1 - m0) >= 5.0 * std::sqrt(se0 + se1));
    }
  }
}

TEST_CASE("atomic write replaces whole files") {
  TempDir dir;
  write_file_atomic(dir / "sub/f.txt", "first version, long");
  write_file_atomic(dir / "sub/f.txt", "second");
  CHECK(read_file(dir / "sub/f.txt") == "second");
  CHECK_ERROR_CODE(write_file_atomic("/proc/ecgsl_forbidden/x", "y"), ErrorCode::Io);
}
