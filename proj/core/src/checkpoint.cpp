#include "unrollcs/checkpoint.hpp"

#include <zlib.h>

#include <sstream>

#include "binary_io.hpp"
#include "unrollcs/error.hpp"

namespace unrollcs {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'L', 'C'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_array(binio::Writer& w, const std::string& name, const Shape& shape, const double* v) {
  w.put_string(name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (const std::size_t d : shape) w.put<std::uint64_t>(d);
  w.put_doubles(v, shape_numel(shape));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : config.to_text()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!c.set(key, value)) throw ConfigError("unknown model key '" + key + "'");
  }
  c.validate();
  return c;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(config_hash(ckpt.model));
  w.put_string(ckpt.model.to_text());
  w.put_string(ckpt.train_text);
  w.put<std::uint64_t>(ckpt.state.step);
  w.put<std::uint64_t>(ckpt.seed);
  w.put<std::uint64_t>(ckpt.state.adam.t);
  const auto& tensors = ckpt.state.params.tensors();
  const bool moments = ckpt.state.adam.t > 0;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size() * (moments ? 3 : 1)));
  for (const auto& [name, t] : tensors) put_array(w, name, t.shape(), t.data().data());
  if (moments) {
    for (const char* kind : {"adam.m/", "adam.v/"}) {
      const auto& src = kind[5] == 'm' ? ckpt.state.adam.m : ckpt.state.adam.v;
      for (const auto& [name, t] : tensors) {
        const auto it = src.find(name);
        if (it == src.end() || it->second.size() != t.numel()) {
          throw ContractError("checkpoint: optimizer moment for '" + name + "' missing");
        }
        put_array(w, kind + name, t.shape(), it->second.data());
      }
    }
  }
  std::vector<unsigned char> bytes = w.bytes();
  const std::uint32_t crc = crc_of(bytes.data(), bytes.size());
  binio::Writer tail;
  tail.put<std::uint32_t>(crc);
  bytes.insert(bytes.end(), tail.bytes().begin(), tail.bytes().end());
  return bytes;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what) {
  if (bytes.size() < 8) throw IoError(what + ": too short for a checkpoint");
  binio::Reader crc_reader(bytes.data() + bytes.size() - 4, 4, what);
  if (crc_reader.get<std::uint32_t>() != crc_of(bytes.data(), bytes.size() - 4)) {
    throw IoError(what + ": CRC mismatch (file corrupt)");
  }
  binio::Reader r(bytes.data(), bytes.size() - 4, what);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4)) throw IoError(what + ": not a PRLC checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw IoError(what + ": unsupported checkpoint version " + std::to_string(version));
  const auto hash = r.get<std::uint64_t>();
  Checkpoint ckpt;
  ckpt.model = model_config_from_text(r.get_string());
  if (config_hash(ckpt.model) != hash) throw ConfigError(what + ": config hash does not match the stored config");
  ckpt.train_text = r.get_string();
  ckpt.state.step = r.get<std::uint64_t>();
  ckpt.seed = r.get<std::uint64_t>();
  ckpt.state.adam.t = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  const auto layout = parameter_layout(ckpt.model);
  std::map<std::string, Shape> expected;
  for (const auto& spec : layout) expected[spec.name] = spec.shape;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError(what + ": implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    auto values = r.get_doubles(shape_numel(shape));
    std::string base = name;
    std::map<std::string, std::vector<double>>* moment = nullptr;
    if (name.rfind("adam.m/", 0) == 0) {
      base = name.substr(7);
      moment = &ckpt.state.adam.m;
    } else if (name.rfind("adam.v/", 0) == 0) {
      base = name.substr(7);
      moment = &ckpt.state.adam.v;
    }
    const auto it = expected.find(base);
    if (it == expected.end() || it->second != shape) {
      throw IoError(what + ": array '" + name + "' " + shape_to_string(shape) + " does not fit the config");
    }
    if (moment) {
      (*moment)[base] = std::move(values);
    } else {
      ckpt.state.params.insert(name, Tensor::from_data(shape, std::move(values), true));
    }
  }
  if (r.remaining() != 0) throw IoError(what + ": trailing bytes");
  if (ckpt.state.params.tensors().size() != layout.size()) throw IoError(what + ": missing parameter arrays");
  if (ckpt.state.adam.t > 0 &&
      (ckpt.state.adam.m.size() != layout.size() || ckpt.state.adam.v.size() != layout.size())) {
    throw IoError(what + ": missing optimizer moments");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path.string(), encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path.string()), path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (config_hash(ckpt.model) != config_hash(expected)) {
    throw ConfigError(path.string() + ": checkpoint config hash differs from the requested model config");
  }
  return ckpt;
}

}  // namespace unrollcs
