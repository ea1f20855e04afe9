#include "cmri/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <openssl/evp.h>

#include "cmri/error.hpp"

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace cmri {

std::int64_t NamedArray::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

const NamedArray& Container::array(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw std::out_of_range("container has no array '" + std::string(name) + "'");
}

bool Container::has(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(std::span<const char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return ss.str();
}

std::string sha256_file(const fs::path& path) {
  const std::string text = read_text(path);
  return sha256_hex(std::span<const char>(text.data(), text.size()));
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos, const fs::path& path) {
  if (pos + sizeof(T) > in.size()) throw ValidationError("truncated file: " + path.string());
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_container(const fs::path& path, std::string_view magic, const Container& c) {
  if (magic.size() != 8) throw std::invalid_argument("container magic must be 8 bytes");
  json header;
  header["meta"] = c.meta;
  header["arrays"] = json::array();
  std::size_t offset = 0;
  for (const auto& a : c.arrays) {
    if (a.numel() != static_cast<std::int64_t>(a.values.size())) {
      throw std::invalid_argument("array '" + a.name + "': shape does not match value count");
    }
    header["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size();
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + 12 + text.size() + offset * sizeof(float));
  out.append(magic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out.append(text);
  for (const auto& a : c.arrays) {
    out.append(reinterpret_cast<const char*>(a.values.data()), a.values.size() * sizeof(float));
  }
  write_file_atomic(path, std::span<const char>(out.data(), out.size()));
}

Container read_container(const fs::path& path, std::string_view magic) {
  if (!fs::exists(path)) throw MissingArtifactError(path.string());
  const std::string in = read_text(path);
  if (in.size() < 20 || std::string_view(in.data(), 8) != magic) {
    throw ValidationError("not a " + std::string(magic) + " file: " + path.string());
  }
  std::size_t pos = 8;
  const auto version = take<std::uint32_t>(in, pos, path);
  if (version != kContainerVersion) {
    throw ValidationError("unsupported container version " + std::to_string(version));
  }
  const auto header_len = take<std::uint64_t>(in, pos, path);
  if (pos + header_len > in.size()) throw ValidationError("truncated header: " + path.string());
  json header;
  try {
    header = json::parse(in.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw ValidationError("bad container header in " + path.string() + ": " + e.what());
  }
  pos += header_len;
  const std::size_t data_floats = (in.size() - pos) / sizeof(float);

  Container c;
  c.meta = header.value("meta", json::object());
  for (const auto& entry : header.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset + count > data_floats || a.numel() != static_cast<std::int64_t>(count)) {
      throw ValidationError("array '" + a.name + "' out of bounds in " + path.string());
    }
    a.values.resize(count);
    std::memcpy(a.values.data(), in.data() + pos + offset * sizeof(float), count * sizeof(float));
    c.arrays.push_back(std::move(a));
  }
  return c;
}

// ---- volumes ---------------------------------------------------------------

void write_volume(const fs::path& path, const StoredVolume& v) {
  const auto& k = v.kspace;
  Container c;
  c.meta["volume_id"] = k.volume_id;
  c.meta["sequence"] = std::string(to_string(k.sequence));
  c.meta["volume_class"] = std::string(to_string(v.volume_class));
  json boxes = json::array();
  for (const auto& b : v.boxes) {
    boxes.push_back({{"slice", b.slice}, {"row0", b.row0}, {"col0", b.col0}, {"row1", b.row1}, {"col1", b.col1}});
  }
  c.meta["boxes"] = boxes;
  NamedArray a;
  a.name = "kspace";
  a.shape = {static_cast<std::int64_t>(k.coils), static_cast<std::int64_t>(k.slices),
             static_cast<std::int64_t>(k.rows), static_cast<std::int64_t>(k.cols), 2};
  a.values.resize(k.data.size() * 2);
  std::memcpy(a.values.data(), k.data.data(), a.values.size() * sizeof(float));
  c.arrays.push_back(std::move(a));
  write_container(path, kVolumeMagic, c);
}

StoredVolume read_volume(const fs::path& path) {
  const Container c = read_container(path, kVolumeMagic);
  const NamedArray& a = c.array("kspace");
  if (a.shape.size() != 5 || a.shape[4] != 2) throw ValidationError("bad k-space shape in " + path.string());
  StoredVolume v;
  v.kspace = KSpaceStack(static_cast<std::size_t>(a.shape[0]), static_cast<std::size_t>(a.shape[1]),
                         static_cast<std::size_t>(a.shape[2]), static_cast<std::size_t>(a.shape[3]));
  std::memcpy(static_cast<void*>(v.kspace.data.data()), a.values.data(), a.values.size() * sizeof(float));
  v.kspace.volume_id = c.meta.at("volume_id").get<std::string>();
  v.kspace.sequence = parse_sequence(c.meta.at("sequence").get<std::string>());
  v.volume_class = parse_volume_class(c.meta.at("volume_class").get<std::string>());
  for (const auto& b : c.meta.at("boxes")) {
    v.boxes.push_back({b.at("slice").get<int>(), b.at("row0").get<int>(), b.at("col0").get<int>(),
                       b.at("row1").get<int>(), b.at("col1").get<int>()});
  }
  return v;
}

// ---- record sets -----------------------------------------------------------

std::string_view to_string(Provenance p) { return p == Provenance::Real ? "real" : "synthetic"; }

std::size_t RecordSet::record_size() const {
  return static_cast<std::size_t>(
      std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>()));
}

std::span<const float> RecordSet::record(std::size_t i) const {
  const std::size_t n = record_size();
  return std::span<const float>(values).subspan(i * n, n);
}

void RecordSet::append(std::span<const float> v, RecordMeta m) {
  if (v.size() != record_size()) throw std::invalid_argument("RecordSet::append: wrong record size");
  values.insert(values.end(), v.begin(), v.end());
  meta.push_back(std::move(m));
}

json to_json(const RecordMeta& m) {
  return {{"volume_id", m.volume_id},
          {"sequence", std::string(to_string(m.condition.sequence))},
          {"abnormality", std::string(to_string(m.condition.abnormality))},
          {"volume_class", std::string(to_string(m.volume_class))},
          {"slice", m.slice_index},
          {"row", m.row},
          {"col", m.col},
          {"overlap", m.overlap_fraction},
          {"provenance", std::string(to_string(m.provenance))}};
}

RecordMeta record_meta_from_json(const json& j) {
  RecordMeta m;
  m.volume_id = j.at("volume_id").get<std::string>();
  m.condition.sequence = parse_sequence(j.at("sequence").get<std::string>());
  m.condition.abnormality = parse_abnormality(j.at("abnormality").get<std::string>());
  m.volume_class = parse_volume_class(j.at("volume_class").get<std::string>());
  m.slice_index = j.at("slice").get<int>();
  m.row = j.at("row").get<int>();
  m.col = j.at("col").get<int>();
  m.overlap_fraction = j.at("overlap").get<double>();
  m.provenance = j.at("provenance").get<std::string>() == "real" ? Provenance::Real : Provenance::Synthetic;
  return m;
}

void write_records(const fs::path& dir, const RecordSet& set) {
  if (set.values.size() != set.record_size() * set.size()) {
    throw std::invalid_argument("write_records: value count does not match records");
  }
  fs::create_directories(dir);
  write_file_atomic(dir / "records.f32",
                    std::span<const char>(reinterpret_cast<const char*>(set.values.data()),
                                          set.values.size() * sizeof(float)));
  json index;
  index["shape"] = set.shape;
  index["count"] = set.size();
  index["records"] = json::array();
  for (const auto& m : set.meta) index["records"].push_back(to_json(m));
  write_text_atomic(dir / "index.json", index.dump(1));
}

RecordSet read_records(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  const fs::path data_path = dir / "records.f32";
  if (!fs::exists(index_path)) throw MissingArtifactError(index_path.string());
  if (!fs::exists(data_path)) throw MissingArtifactError(data_path.string());
  json index;
  try {
    index = json::parse(read_text(index_path));
  } catch (const json::exception& e) {
    throw ValidationError("bad record index " + index_path.string() + ": " + e.what());
  }
  RecordSet set;
  set.shape = index.at("shape").get<std::vector<std::int64_t>>();
  for (const auto& r : index.at("records")) set.meta.push_back(record_meta_from_json(r));
  const std::string raw = read_text(data_path);
  if (raw.size() != set.size() * set.record_size() * sizeof(float)) {
    throw ValidationError("record data size mismatch in " + dir.string());
  }
  set.values.resize(raw.size() / sizeof(float));
  std::memcpy(set.values.data(), raw.data(), raw.size());
  return set;
}

}  // namespace cmri
