#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmri/ingest.hpp"
#include "cmri/labels.hpp"
#include "cmri/phantom.hpp"

namespace cmri {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- container -------------------------------------------------------------
//
// magic (8 bytes) | u32 version | u64 header length | JSON header | float32 data
//
// The header holds free-form "meta" plus an "arrays" table of
// {name, shape, offset, count}; offsets count floats from the start of the
// data block. Everything is little-endian.

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "CMRICKPT";
inline constexpr std::string_view kVolumeMagic = "CMRIKSP1";

struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::int64_t numel() const;
};

struct Container {
  json meta = json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(std::string_view name) const;  // throws std::out_of_range
  bool has(std::string_view name) const;
};

void write_container(const fs::path& path, std::string_view magic, const Container& c);
// Throws MissingArtifactError when the file is absent, ValidationError when it is malformed.
Container read_container(const fs::path& path, std::string_view magic);

// Write to a sibling temporary file, then rename over the target.
void write_file_atomic(const fs::path& path, std::span<const char> bytes);
void write_text_atomic(const fs::path& path, std::string_view text);
std::string read_text(const fs::path& path);

std::string sha256_hex(std::span<const char> bytes);
std::string sha256_file(const fs::path& path);

// ---- volumes ---------------------------------------------------------------

struct StoredVolume {
  KSpaceStack kspace;
  VolumeClass volume_class = VolumeClass::Normal;
  std::vector<BoundingBox> boxes;
};

void write_volume(const fs::path& path, const StoredVolume& v);
StoredVolume read_volume(const fs::path& path);

// ---- record sets -----------------------------------------------------------
//
// A directory with records.f32 (raw little-endian floats, one fixed-size
// record after another) and index.json (shape plus per-record metadata).

enum class Provenance { Real, Synthetic };
std::string_view to_string(Provenance p);

struct RecordMeta {
  std::string volume_id;
  ConditionLabel condition;
  VolumeClass volume_class = VolumeClass::Normal;
  int slice_index = 0;
  int row = 0;
  int col = 0;
  double overlap_fraction = 0.0;
  Provenance provenance = Provenance::Real;
};

struct RecordSet {
  std::vector<std::int64_t> shape;  // per record, e.g. {2, 96, 96}
  std::vector<float> values;
  std::vector<RecordMeta> meta;

  std::size_t record_size() const;
  std::size_t size() const { return meta.size(); }
  std::span<const float> record(std::size_t i) const;
  void append(std::span<const float> values, RecordMeta m);
};

void write_records(const fs::path& dir, const RecordSet& set);
RecordSet read_records(const fs::path& dir);

json to_json(const RecordMeta& m);
RecordMeta record_meta_from_json(const json& j);

}  // namespace cmri
