#include "robustlens/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace rl {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " bytes)");
    }
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  const auto& params = checkpoint.network.params;
  nlohmann::json header;
  header["spec"] = checkpoint.network.spec;
  header["metadata"] = checkpoint.metadata;
  header["tensors"] = params.names();
  nlohmann::json buffers = nlohmann::json::array();
  for (const auto& [name, entry] : params) {
    if (!entry.trainable) buffers.push_back(name);
  }
  header["buffers"] = buffers;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out{'R', 'L', 'C', 'K'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, entry] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entry.value.rank()));
    for (Index e : entry.value.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    const auto* p = reinterpret_cast<const std::uint8_t*>(entry.value.raw());
    out.insert(out.end(), p, p + entry.value.size() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (std::memcmp(in.take(4), "RLCK", 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = in.get<std::uint64_t>();
  if (header_len > in.remaining()) throw FormatError("checkpoint header length exceeds file size");
  const auto* text = reinterpret_cast<const char*>(in.take(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text, text + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint out;
  out.network.spec = header.at("spec").get<NetworkSpec>();
  out.metadata = header.value("metadata", nlohmann::json::object());
  const auto names = header.at("tensors").get<std::vector<std::string>>();
  const auto buffer_list = header.value("buffers", std::vector<std::string>{});
  const std::set<std::string> buffers(buffer_list.begin(), buffer_list.end());

  for (const auto& expected : names) {
    const auto len = in.get<std::uint32_t>();
    std::string name(reinterpret_cast<const char*>(in.take(len)), len);
    if (name != expected) throw FormatError("checkpoint tensor '" + name + "' out of order, expected '" + expected + "'");
    const auto dtype = in.get<std::uint8_t>();
    const auto rank = in.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(in.get<std::uint64_t>()));
    const auto count = static_cast<std::size_t>(numel(shape));
    std::vector<float> data(count);
    if (dtype == 0) {
      std::memcpy(data.data(), in.take(count * sizeof(float)), count * sizeof(float));
    } else if (dtype == 1) {
      std::vector<double> wide(count);
      std::memcpy(wide.data(), in.take(count * sizeof(double)), count * sizeof(double));
      for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<float>(wide[i]);
    } else {
      throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for tensor '" + name + "'");
    }
    out.network.params.insert(name, Tensor<float>(std::move(shape), std::move(data)), buffers.count(name) == 0);
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");

  // The stored names must be exactly those the NetworkSpec implies.
  const auto reference = build_network<float>(out.network.spec, 0);
  if (reference.params.names() != out.network.params.names()) {
    throw FormatError("checkpoint tensors do not match the network spec");
  }
  for (const auto& [name, entry] : reference.params) {
    if (entry.value.shape() != out.network.params.at(name).shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        to_string(out.network.params.at(name).shape()) + ", spec implies " +
                        to_string(entry.value.shape()));
    }
  }
  return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace rl
