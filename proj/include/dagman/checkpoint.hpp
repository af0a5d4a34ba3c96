#pragma once

// Versioned binary checkpoint:
//
//   "DGMN" | u32 version | u64 n | n bytes of JSON metadata
//   | u32 tensor count | tensors... | u32 CRC-32 of the tensor table
//
// Each tensor is: u32 name length | name | u8 dtype (0 f32, 1 f64) |
// u32 rank | u64 dims[rank] | little-endian payload. The JSON block holds
// the full PretrainConfig plus step counters.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "dagman/codistill.hpp"
#include "dagman/config.hpp"
#include "dagman/optim.hpp"

namespace dagman {

inline constexpr char kCheckpointMagic[4] = {'D', 'G', 'M', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    if constexpr (std::endian::native == std::endian::big && sizeof(U) > 1) v = byteswap(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<char>& bytes() { return bytes_; }

  template <class U>
  static U byteswap(U v) {
    U out;
    auto* s = reinterpret_cast<unsigned char*>(&v);
    auto* d = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) d[i] = s[sizeof(U) - 1 - i];
    return out;
  }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, p_, sizeof(U));
    p_ += sizeof(U);
    if constexpr (std::endian::native == std::endian::big && sizeof(U) > 1) v = ByteWriter::byteswap(v);
    return v;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* r = p_;
    p_ += n;
    return r;
  }
  const char* position() const { return p_; }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError("truncated checkpoint payload");
  }
  const char* p_;
  const char* end_;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

template <class T>
void write_tensor(ByteWriter& w, const std::string& name, const ag::Matrix<T>& m) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(dtype_code<T>());
  w.put<std::uint32_t>(2);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.put<T>(m.data()[i]);
}

}  // namespace detail

// Everything a checkpoint restores.
template <class T>
struct Checkpoint {
  PretrainConfig config;
  DistillState<T> state;
  std::vector<ag::Matrix<T>> adam_m;
  std::vector<ag::Matrix<T>> adam_v;
  std::int64_t adam_steps = 0;
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, const PretrainConfig& cfg, const DistillState<T>& state,
                     const AdamW<T>* opt = nullptr) {
  json meta{{"config", to_json(cfg)},
            {"step", state.step},
            {"adam_steps", opt ? opt->steps_taken() : 0},
            {"scalar", detail::dtype_code<T>() == 0 ? "f32" : "f64"}};
  const std::string meta_text = meta.dump();

  detail::ByteWriter table;
  const auto& sp = state.student->params().items();
  const auto& tp = state.teacher->params().items();
  std::uint32_t count = static_cast<std::uint32_t>(sp.size() + tp.size() + 3 + (opt ? 2 * sp.size() : 0));
  table.put<std::uint32_t>(count);
  for (const auto& p : sp) detail::write_tensor<T>(table, "student/" + p.name, p.var->value);
  for (const auto& p : tp) detail::write_tensor<T>(table, "teacher/" + p.name, p.var->value);
  detail::write_tensor<T>(table, "center/cls", state.center_cls);
  detail::write_tensor<T>(table, "center/patch", state.center_patch);
  detail::write_tensor<T>(table, "center/g", state.center_g);
  if (opt) {
    for (std::size_t i = 0; i < sp.size(); ++i) detail::write_tensor<T>(table, "adam_m/" + sp[i].name, opt->first_moments()[i]);
    for (std::size_t i = 0; i < sp.size(); ++i) detail::write_tensor<T>(table, "adam_v/" + sp[i].name, opt->second_moments()[i]);
  }

  detail::ByteWriter out;
  out.put_bytes(kCheckpointMagic, 4);
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint64_t>(meta_text.size());
  out.put_bytes(meta_text.data(), meta_text.size());
  out.put_bytes(table.bytes().data(), table.bytes().size());
  out.put<std::uint32_t>(detail::crc32_of(table.bytes().data(), table.bytes().size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(out.bytes().data(), static_cast<std::streamsize>(out.bytes().size()));
    if (!f) throw IoError("checkpoint write failed: " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

// Loads and verifies a checkpoint. When `expected` is given, the stored
// encoder configuration must match it field for field.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const EncoderConfig* expected = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes.data(), bytes.size());
  const char* magic = r.take(4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version mismatch: file has " + std::to_string(version) + ", reader supports " +
                      std::to_string(kCheckpointVersion));
  const auto meta_len = r.get<std::uint64_t>();
  if (meta_len > r.remaining()) throw FormatError("truncated checkpoint payload");
  const char* meta_ptr = r.take(static_cast<std::size_t>(meta_len));
  json meta;
  try {
    meta = json::parse(std::string(meta_ptr, static_cast<std::size_t>(meta_len)));
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  if (r.remaining() < 4) throw FormatError("truncated checkpoint payload");
  const char* table_begin = r.position();
  const std::size_t table_len = r.remaining() - 4;
  detail::ByteReader crc_reader(table_begin + table_len, 4);
  const auto stored_crc = crc_reader.get<std::uint32_t>();
  if (detail::crc32_of(table_begin, table_len) != stored_crc) throw FormatError("checksum mismatch");

  Checkpoint<T> ck;
  from_json(meta.at("config"), ck.config);
  if (expected) {
    const auto diff = first_difference(to_json(*expected), to_json(ck.config.encoder), "encoder");
    if (!diff.empty()) throw ValidationError(diff, "checkpoint encoder configuration does not match");
  }
  ck.config.validate();
  ck.state = DistillState<T>::create(ck.config.encoder, ck.config.distill, ck.config.seed);
  ck.state.step = meta.at("step").get<std::int64_t>();
  ck.adam_steps = meta.value("adam_steps", std::int64_t{0});

  detail::ByteReader t(table_begin, table_len);
  const auto count = t.get<std::uint32_t>();
  std::vector<std::pair<std::string, ag::Matrix<T>>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = t.get<std::uint32_t>();
    std::string name(t.take(name_len), name_len);
    const auto dtype = t.get<std::uint8_t>();
    if (dtype != detail::dtype_code<T>()) throw FormatError("tensor '" + name + "' has a different scalar type");
    const auto rank = t.get<std::uint32_t>();
    if (rank != 2) throw FormatError("tensor '" + name + "' has unsupported rank");
    const auto rows = t.get<std::uint64_t>();
    const auto cols = t.get<std::uint64_t>();
    ag::Matrix<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = t.get<T>();
    tensors.emplace_back(std::move(name), std::move(m));
  }
  std::size_t next = 0;
  auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) -> ag::Matrix<T> {
    if (next >= tensors.size() || tensors[next].first != name)
      throw FormatError("checkpoint tensor table out of order at '" + name + "'");
    auto& m = tensors[next++].second;
    if (m.rows() != rows || m.cols() != cols) throw ValidationError(name, "tensor shape does not match configuration");
    return std::move(m);
  };
  auto& sp = ck.state.student->params().items();
  auto& tp = ck.state.teacher->params().items();
  for (auto& p : sp) p.var->value = take("student/" + p.name, p.var->value.rows(), p.var->value.cols());
  for (auto& p : tp) p.var->value = take("teacher/" + p.name, p.var->value.rows(), p.var->value.cols());
  ck.state.center_cls = take("center/cls", 1, ck.config.distill.k_cls);
  ck.state.center_patch = take("center/patch", 1, ck.config.distill.k_patch);
  ck.state.center_g = take("center/g", 1, ck.config.distill.k_g);
  if (next < tensors.size()) {
    for (auto& p : sp) ck.adam_m.push_back(take("adam_m/" + p.name, p.var->value.rows(), p.var->value.cols()));
    for (auto& p : sp) ck.adam_v.push_back(take("adam_v/" + p.name, p.var->value.rows(), p.var->value.cols()));
  }
  if (next != tensors.size()) throw FormatError("unexpected trailing tensors in checkpoint");
  return ck;
}

}  // namespace dagman
