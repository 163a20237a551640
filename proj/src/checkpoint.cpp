#include "latentctl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "latentctl/errors.hpp"

namespace latentctl {

namespace {

constexpr char kMagic[8] = {'L', 'C', 'T', 'L', 'C', 'K', 'P', 'T'};


void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw CheckpointError("checkpoint of kind '" + kind + "' has no array '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.first == name) return true;
  return false;
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : arrays) table.push_back({{"name", name}, {"shape", t.shape()}});
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"kind", kind},
                                 {"config", config},
                                 {"arrays", table}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& a : arrays) {
    for (double v : a.second.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.config = header.at("config");
  std::size_t off = 16 + hlen;
  for (const auto& entry : header.at("arrays")) {
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    if (bytes.size() - off < n * 8) throw CheckpointError("truncated checkpoint payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(get_u64(bytes.data() + off + 8 * i));
    off += n * 8;
    ck.arrays.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  if (off != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = to_bytes();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write to '" + path + "' failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

void Checkpoint::nest(const std::string& prefix, const Checkpoint& inner) {
  config[prefix] = {{"kind", inner.kind}, {"config", inner.config}};
  for (const auto& [name, t] : inner.arrays) arrays.emplace_back(prefix + "/" + name, t);
}

Checkpoint Checkpoint::extract(const std::string& prefix) const {
  if (!config.contains(prefix)) throw CheckpointError("checkpoint has no nested '" + prefix + "'");
  Checkpoint ck;
  ck.kind = config.at(prefix).at("kind").get<std::string>();
  ck.config = config.at(prefix).at("config");
  const std::string head = prefix + "/";
  for (const auto& [name, t] : arrays)
    if (name.rfind(head, 0) == 0) ck.arrays.emplace_back(name.substr(head.size()), t);
  return ck;
}

}  // namespace latentctl
