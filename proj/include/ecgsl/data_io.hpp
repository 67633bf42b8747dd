#pragma once

// On-disk formats. Everything binary is little-endian; every file carries a
// version and is written through a temporary file plus rename.
//
// Manifest (text, tab-separated):
//   ecgsl-manifest <TAB> 1
//   classes <TAB> name0 <TAB> name1 ...
//   record_id <TAB> relative/path.f32 <TAB> fs <TAB> length <TAB> label|-
// Record: `length` raw float32 samples, nothing else.
// Checkpoint: "ECGSL", u32 version, u64 seed, u8 stage, model config text,
//   run config text, parameter table, optional Adam moments.
// Segment corpus: "ECGSEG", u32 version, segmentation config, class names,
//   then every sequence with its segments and padding mask.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ecgsl/model.hpp"
#include "ecgsl/signal.hpp"
#include "ecgsl/synth.hpp"

namespace ecgsl {

inline constexpr std::uint32_t kManifestVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kSegmentCorpusVersion = 1;

// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

struct ManifestEntry {
  std::string record_id;
  std::string path;  // relative to the manifest directory
  double fs = 0.0;
  std::size_t length = 0;
  std::optional<std::size_t> label;
};

struct Manifest {
  std::uint32_t version = kManifestVersion;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  const ManifestEntry& find(const std::string& record_id) const;
};

// Validates ids, labels and that every record file exists with the declared length.
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

RawRecord read_record(const Manifest& m, const std::string& record_id);
void write_record_file(const std::filesystem::path& path, const std::vector<double>& samples);

void write_checkpoint(const ModelState& state, const std::filesystem::path& path);
// Errors: BadMagic, Version, Truncated, ShapeMismatch (parameter table does
// not match the stored model config). Nothing is returned on failure.
ModelState read_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelState& state);
ModelState parse_checkpoint(const std::string& bytes);

struct SegmentCorpus {
  SegmentationConfig segmentation;
  std::vector<std::string> class_names;
  std::vector<SegmentSequence> sequences;
};

void write_segment_corpus(const SegmentCorpus& corpus, const std::filesystem::path& path);
SegmentCorpus read_segment_corpus(const std::filesystem::path& path);

// One row per segment: record_id, segment index, real, peak_index, S values.
std::string segments_csv(const std::vector<SegmentSequence>& sequences);

// Writes manifest.tsv, records/<id>.f32 and peaks.tsv (record_id, comma-separated
// ground-truth peak indices) under `dir`.
void write_synth_corpus(const std::vector<SynthRecord>& records, std::size_t num_classes,
                        const std::filesystem::path& dir);

}  // namespace ecgsl
