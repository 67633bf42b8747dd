#include "ecgsl/data_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

namespace ecgsl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    require(!ec, ErrorCode::Io, "cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      fail(ErrorCode::Io, "short write to " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::Io, "cannot rename onto " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

// Little-endian encoding regardless of host order.
template <class U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out{};
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  template <class U>
  void put(U v) {
    v = to_le(v);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void u8(std::uint8_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void i64(std::int64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return to_le(v);
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    require(b_.size() - pos_ >= n, ErrorCode::Truncated, what_ + " is truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto t = line.find('\t', start);
    out.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
    if (t == std::string::npos) break;
    start = t + 1;
  }
  return out;
}

std::string real_text(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest and records

const ManifestEntry& Manifest::find(const std::string& record_id) const {
  for (const auto& e : entries)
    if (e.record_id == record_id) return e;
  fail(ErrorCode::Manifest, "record '" + record_id + "' is not in the manifest");
}

Manifest load_manifest(const fs::path& path) {
  require(fs::exists(path), ErrorCode::Io, "manifest " + path.string() + " does not exist");
  std::istringstream in(read_file(path));
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::set<std::string> ids;
  auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (!header) {
      require(f.size() == 2 && f[0] == "ecgsl-manifest", ErrorCode::Manifest,
              where() + "missing 'ecgsl-manifest<TAB>version' header");
      require(f[1] == std::to_string(kManifestVersion), ErrorCode::Version,
              where() + "unsupported manifest version '" + f[1] + "'");
      header = true;
      continue;
    }
    if (f[0] == "classes") {
      m.class_names.assign(f.begin() + 1, f.end());
      continue;
    }
    require(f.size() == 5, ErrorCode::Manifest, where() + "expected 5 tab-separated fields");
    ManifestEntry e;
    e.record_id = f[0];
    e.path = f[1];
    require(!e.record_id.empty(), ErrorCode::Manifest, where() + "empty record id");
    require(ids.insert(e.record_id).second, ErrorCode::Manifest, where() + "duplicate record id '" + e.record_id + "'");
    try {
      std::size_t used = 0;
      e.fs = std::stod(f[2], &used);
      require(used == f[2].size(), ErrorCode::Manifest, "");
      e.length = std::stoull(f[3], &used);
      require(used == f[3].size() && f[3][0] != '-', ErrorCode::Manifest, "");
      if (f[4] != "-") {
        e.label = std::stoull(f[4], &used);
        require(used == f[4].size() && f[4][0] != '-', ErrorCode::Manifest, "");
      }
    } catch (const std::exception&) {
      fail(ErrorCode::Manifest, where() + "malformed fs, length or label");
    }
    require(e.fs > 0.0 && std::isfinite(e.fs), ErrorCode::Manifest, where() + "fs must be positive");
    if (e.label)
      require(*e.label < m.class_names.size(), ErrorCode::Manifest,
              where() + "label " + std::to_string(*e.label) + " out of range for " +
                  std::to_string(m.class_names.size()) + " classes");
    const fs::path file = m.base_dir / e.path;
    require(fs::exists(file), ErrorCode::Manifest, where() + "record file " + file.string() + " is missing");
    const auto bytes = fs::file_size(file);
    require(bytes == e.length * sizeof(float), ErrorCode::Manifest,
            where() + "record file holds " + std::to_string(bytes / sizeof(float)) + " samples, manifest says " +
                std::to_string(e.length));
    m.entries.push_back(std::move(e));
  }
  require(header, ErrorCode::Manifest, path.string() + ": empty file, missing header");
  return m;
}

void write_manifest(const Manifest& m, const fs::path& path) {
  std::ostringstream o;
  o << "ecgsl-manifest\t" << m.version << "\n";
  o << "classes";
  for (const auto& c : m.class_names) o << '\t' << c;
  o << "\n";
  for (const auto& e : m.entries)
    o << e.record_id << '\t' << e.path << '\t' << real_text(e.fs) << '\t' << e.length << '\t'
      << (e.label ? std::to_string(*e.label) : "-") << "\n";
  write_file_atomic(path, o.str());
}

RawRecord read_record(const Manifest& m, const std::string& record_id) {
  const auto& e = m.find(record_id);
  const auto bytes = read_file(m.base_dir / e.path);
  require(bytes.size() == e.length * sizeof(float), ErrorCode::Manifest,
          "record '" + record_id + "' length differs from the manifest");
  Reader r(bytes, "record " + record_id);
  RawRecord rec;
  rec.record_id = e.record_id;
  rec.fs = e.fs;
  rec.label = e.label;
  rec.samples.resize(e.length);
  for (auto& v : rec.samples) v = r.f32();
  validate(rec);
  return rec;
}

void write_record_file(const fs::path& path, const std::vector<double>& samples) {
  Writer w;
  for (double v : samples) w.f32(static_cast<float>(v));
  write_file_atomic(path, w.take());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[5] = {'E', 'C', 'G', 'S', 'L'};

void put_table(Writer& w, const ParameterSet<float>& t) {
  w.u32(static_cast<std::uint32_t>(t.size()));
  for (const auto& [name, a] : t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u64(d);
    for (float v : a.data) w.f32(v);
  }
}

ParameterSet<float> get_table(Reader& r) {
  ParameterSet<float> t;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    Shape shape(r.u32());
    require(shape.size() <= 8, ErrorCode::ShapeMismatch, "parameter '" + name + "' has implausible rank");
    for (auto& d : shape) d = r.u64();
    const auto n = numel(shape);
    require(n <= r.remaining() / sizeof(float), ErrorCode::Truncated, "checkpoint is truncated");
    Array<float> a(shape);
    for (auto& v : a.data) v = r.f32();
    require(t.emplace(name, std::move(a)).second, ErrorCode::ShapeMismatch,
            "parameter '" + name + "' appears twice");
  }
  return t;
}

void check_table(const ParameterSet<float>& t, const std::map<std::string, Shape>& expected, const char* what) {
  for (const auto& [name, shape] : expected) {
    auto it = t.find(name);
    require(it != t.end(), ErrorCode::ShapeMismatch, std::string(what) + " is missing '" + name + "'");
    require(it->second.shape == shape, ErrorCode::ShapeMismatch,
            std::string(what) + " '" + name + "' has shape " + shape_string(it->second.shape) + ", config expects " +
                shape_string(shape));
  }
  require(t.size() == expected.size(), ErrorCode::ShapeMismatch,
          std::string(what) + " holds tensors the config does not define");
}

}  // namespace

std::string serialize_checkpoint(const ModelState& s) {
  Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(s.seed);
  w.u8(static_cast<std::uint8_t>(s.stage));
  w.str(s.config.to_text());
  w.str(s.run_config);
  put_table(w, s.params);
  w.u8(s.optimizer ? 1 : 0);
  if (s.optimizer) {
    w.u64(s.optimizer->step);
    put_table(w, s.optimizer->m);
    put_table(w, s.optimizer->v);
  }
  return w.take();
}

ModelState parse_checkpoint(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  require(bytes.size() >= sizeof kCheckpointMagic &&
              std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) == 0,
          ErrorCode::BadMagic, "not a checkpoint (bad magic)");
  r.raw(sizeof kCheckpointMagic);
  const auto version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::Version,
          "checkpoint version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointVersion) + ")");
  ModelState s;
  s.seed = r.u64();
  const auto stage = r.u8();
  require(stage <= static_cast<std::uint8_t>(Stage::Finetuned), ErrorCode::Data, "checkpoint has unknown stage tag");
  s.stage = static_cast<Stage>(stage);
  s.config = ModelConfig::from_text(r.str());
  s.run_config = r.str();
  const auto expected = parameter_shapes(s.config);
  s.params = get_table(r);
  check_table(s.params, expected, "parameter table");
  if (r.u8()) {
    AdamState a;
    a.step = r.u64();
    a.m = get_table(r);
    a.v = get_table(r);
    check_table(a.m, expected, "first-moment table");
    check_table(a.v, expected, "second-moment table");
    s.optimizer = std::move(a);
  }
  require(r.done(), ErrorCode::Data, "checkpoint has trailing bytes");
  return s;
}

void write_checkpoint(const ModelState& state, const fs::path& path) {
  write_file_atomic(path, serialize_checkpoint(state));
}

ModelState read_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Segment corpus

namespace {
constexpr char kCorpusMagic[6] = {'E', 'C', 'G', 'S', 'E', 'G'};
}

void write_segment_corpus(const SegmentCorpus& c, const fs::path& path) {
  Writer w;
  w.raw(kCorpusMagic, sizeof kCorpusMagic);
  w.u32(kSegmentCorpusVersion);
  const auto& g = c.segmentation;
  w.u32(static_cast<std::uint32_t>(g.segment_length));
  w.f64(g.pre_fraction);
  w.f64(g.post_fraction);
  w.u8(static_cast<std::uint8_t>(g.pad_mode));
  w.f64(g.target_fs);
  w.u32(static_cast<std::uint32_t>(c.class_names.size()));
  for (const auto& n : c.class_names) w.str(n);
  w.u32(static_cast<std::uint32_t>(c.sequences.size()));
  for (const auto& s : c.sequences) {
    w.str(s.record_id);
    w.i64(s.label ? static_cast<std::int64_t>(*s.label) : -1);
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& seg = s.segments[i];
      require(seg.values.size() == g.segment_length, ErrorCode::Shape,
              "segment length differs from the corpus segment length");
      w.u32(static_cast<std::uint32_t>(seg.peak_index));
      w.u32(static_cast<std::uint32_t>(seg.pre_len));
      w.u32(static_cast<std::uint32_t>(seg.post_len));
      w.u8(seg.degenerate ? 1 : 0);
      w.u8(s.pad_mask[i]);
      for (float v : seg.values) w.f32(v);
    }
  }
  write_file_atomic(path, w.take());
}

SegmentCorpus read_segment_corpus(const fs::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, "segment corpus " + path.string());
  require(bytes.size() >= sizeof kCorpusMagic && std::memcmp(bytes.data(), kCorpusMagic, sizeof kCorpusMagic) == 0,
          ErrorCode::BadMagic, path.string() + " is not a segment corpus");
  r.raw(sizeof kCorpusMagic);
  const auto version = r.u32();
  require(version == kSegmentCorpusVersion, ErrorCode::Version,
          "segment corpus version " + std::to_string(version) + " is not supported");
  SegmentCorpus c;
  auto& g = c.segmentation;
  g.segment_length = r.u32();
  g.pre_fraction = r.f64();
  g.post_fraction = r.f64();
  const auto mode = r.u8();
  require(mode <= static_cast<std::uint8_t>(PadMode::Stretch), ErrorCode::Data, "unknown pad mode in corpus");
  g.pad_mode = static_cast<PadMode>(mode);
  g.target_fs = r.f64();
  g.validate();
  c.class_names.resize(r.u32());
  for (auto& n : c.class_names) n = r.str();
  c.sequences.resize(r.u32());
  for (auto& s : c.sequences) {
    s.record_id = r.str();
    const auto label = r.i64();
    if (label >= 0) s.label = static_cast<std::size_t>(label);
    const auto n = r.u32();
    require(n <= r.remaining() / (g.segment_length * sizeof(float)), ErrorCode::Truncated,
            "segment corpus is truncated");
    s.segments.resize(n);
    s.pad_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& seg = s.segments[i];
      seg.peak_index = r.u32();
      seg.pre_len = r.u32();
      seg.post_len = r.u32();
      seg.degenerate = r.u8() != 0;
      s.pad_mask[i] = r.u8();
      seg.values.resize(g.segment_length);
      for (auto& v : seg.values) v = r.f32();
    }
  }
  require(r.done(), ErrorCode::Data, "segment corpus has trailing bytes");
  return c;
}

std::string segments_csv(const std::vector<SegmentSequence>& sequences) {
  std::ostringstream o;
  char buf[32];
  o << "record_id,segment,real,peak_index";
  const std::size_t S = sequences.empty() ? 0 : sequences[0].segment_length();
  for (std::size_t j = 0; j < S; ++j) o << ",v" << j;
  o << "\n";
  for (const auto& s : sequences)
    for (std::size_t i = 0; i < s.size(); ++i) {
      o << s.record_id << ',' << i << ',' << static_cast<int>(s.pad_mask[i]) << ',' << s.segments[i].peak_index;
      for (float v : s.segments[i].values) {
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
        o << buf;
      }
      o << "\n";
    }
  return o.str();
}

void write_synth_corpus(const std::vector<SynthRecord>& records, std::size_t num_classes, const fs::path& dir) {
  Manifest m;
  for (std::size_t c = 0; c < num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  std::ostringstream peaks;
  peaks << "record_id\tpeaks\n";
  for (const auto& r : records) {
    const std::string rel = "records/" + r.record.record_id + ".f32";
    write_record_file(dir / rel, r.record.samples);
    m.entries.push_back({r.record.record_id, rel, r.record.fs, r.record.samples.size(), r.record.label});
    peaks << r.record.record_id << '\t';
    for (std::size_t i = 0; i < r.truth.indices.size(); ++i) peaks << (i ? "," : "") << r.truth.indices[i];
    peaks << "\n";
  }
  write_file_atomic(dir / "peaks.tsv", peaks.str());
  write_manifest(m, dir / "manifest.tsv");
}

}  // namespace ecgsl
