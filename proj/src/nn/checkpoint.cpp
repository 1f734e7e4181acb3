#include "towerphys/nn/checkpoint.hpp"

#include <array>

#include "towerphys/io.hpp"

namespace towerphys::nn {
namespace {

constexpr std::array<std::uint8_t, 8> kMagic{'T', 'W', 'R', 'C', 'K', 'P', 'T', 0};

template <class T>
StoredTensor store(const std::string& name, const Tensor<T>& t) {
  StoredTensor s{name, static_cast<int>(sizeof(T)), t.shape(), {}};
  io::ByteWriter w;
  for (T v : t.values()) {
    if constexpr (sizeof(T) == 4) {
      w.f32(v);
    } else {
      w.f64(v);
    }
  }
  s.bytes = std::move(w.buffer());
  return s;
}

template <class T>
void fetch(const StoredTensor& s, Tensor<T>& t) {
  if (s.shape != t.shape()) {
    fail(ErrorKind::format, "checkpoint: tensor " + s.name + " has shape " +
                                Tensor<T>::shape_string(s.shape) + ", model expects " +
                                Tensor<T>::shape_string(t.shape()));
  }
  io::ByteReader r(s.bytes, "checkpoint tensor " + s.name);
  for (T& v : t.values()) v = static_cast<T>(s.element_size == 4 ? r.f32() : r.f64());
}

}  // namespace

template <class T>
Checkpoint make_checkpoint(const ParameterList<T>& params, std::string metadata) {
  Checkpoint c{std::move(metadata), {}};
  for (const auto& [name, p] : params.params) c.tensors.push_back(store(name, p->value));
  for (const auto& [name, b] : params.buffers) c.tensors.push_back(store(name, *b));
  return c;
}

template <class T>
void restore_checkpoint(const Checkpoint& checkpoint, const ParameterList<T>& params) {
  const std::size_t expected = params.params.size() + params.buffers.size();
  if (checkpoint.tensors.size() != expected) {
    fail(ErrorKind::format, "checkpoint: holds " + std::to_string(checkpoint.tensors.size()) +
                                " tensors, model has " + std::to_string(expected));
  }
  std::size_t k = 0;
  auto check_name = [&](const std::string& name) {
    if (checkpoint.tensors[k].name != name) {
      fail(ErrorKind::format, "checkpoint: expected tensor " + name + ", found " +
                                  checkpoint.tensors[k].name);
    }
  };
  for (const auto& [name, p] : params.params) {
    check_name(name);
    fetch(checkpoint.tensors[k++], p->value);
  }
  for (const auto& [name, b] : params.buffers) {
    check_name(name);
    fetch(checkpoint.tensors[k++], *b);
  }
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointFormatVersion);
  w.string(c.metadata);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const StoredTensor& t : c.tensors) {
    require(t.element_size == 4 || t.element_size == 8, "checkpoint: bad element size");
    require(t.bytes.size() == Tensor<float>::count(t.shape) * static_cast<std::size_t>(t.element_size),
            "checkpoint: tensor " + t.name + " byte size disagrees with its shape");
    w.string(t.name);
    w.u8(static_cast<std::uint8_t>(t.element_size));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(t.bytes);
  }
  w.u32(io::crc32(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> file, const std::string& what) {
  if (file.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), file.begin())) {
    fail(ErrorKind::format, what + ": not a checkpoint file (bad magic)");
  }
  const auto payload = io::verify_checksum(file, what);
  io::ByteReader r(payload, what);
  r.bytes(kMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointFormatVersion) {
    fail(ErrorKind::format, what + ": format version " + std::to_string(version) +
                                " not supported (expected " +
                                std::to_string(kCheckpointFormatVersion) + ")");
  }
  Checkpoint c;
  c.metadata = r.string();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    StoredTensor t;
    t.name = r.string();
    t.element_size = r.u8();
    if (t.element_size != 4 && t.element_size != 8) {
      fail(ErrorKind::format, what + ": bad element size for " + t.name);
    }
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorKind::format, what + ": implausible rank for " + t.name);
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<int>(r.u32()));
    const auto bytes = r.bytes(Tensor<float>::count(t.shape) * static_cast<std::size_t>(t.element_size));
    t.bytes.assign(bytes.begin(), bytes.end());
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) fail(ErrorKind::format, what + ": trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::io, "checkpoint not found: " + path.string());
  const std::vector<std::uint8_t> bytes = io::read_file(path);
  return decode_checkpoint(bytes, "checkpoint " + path.string());
}

std::string checkpoint_digest(const Checkpoint& checkpoint) {
  return io::sha256_hex(encode_checkpoint(checkpoint));
}

template Checkpoint make_checkpoint(const ParameterList<float>&, std::string);
template Checkpoint make_checkpoint(const ParameterList<double>&, std::string);
template void restore_checkpoint(const Checkpoint&, const ParameterList<float>&);
template void restore_checkpoint(const Checkpoint&, const ParameterList<double>&);

}  // namespace towerphys::nn
