#include "lslm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "lslm/errors.hpp"

namespace lslm {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'L', 'M', 'C', 'K', 'P', 'T'};

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

void write_floats_le(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      unsigned char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

void read_floats_le(std::istream& is, std::span<float> out) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : out) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      f = std::bit_cast<float>(bits);
    }
  }
}

nlohmann::json read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const auto len = read_u64_le(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("truncated checkpoint header: " + path.string());
  auto header = nlohmann::json::parse(text);
  if (header.value("format_version", 0) != kCheckpointFormatVersion) {
    throw DataError("unsupported checkpoint format version in " + path.string());
  }
  return header;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const nlohmann::json& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    const std::uint64_t nbytes = t.numel() * sizeof(float);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::json header = {
      {"format_version", kCheckpointFormatVersion}, {"meta", meta}, {"tensors", tensors}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 8);
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : params) write_floats_le(os, t.data());
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  return read_header(is, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  auto header = read_header(is, path);
  Checkpoint ck;
  ck.meta = header.at("meta");
  const auto payload_start = is.tellg();
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<float> values(shape_numel(shape));
    if (entry.at("nbytes").get<std::uint64_t>() != values.size() * sizeof(float)) {
      throw DataError("checkpoint entry size mismatch for " + entry.at("name").get<std::string>());
    }
    is.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    read_floats_le(is, values);
    if (!is) throw DataError("truncated checkpoint payload: " + path.string());
    ck.params.add(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return ck;
}

}  // namespace lslm
