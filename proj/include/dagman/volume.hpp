#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagman/errors.hpp"
#include "dagman/rng.hpp"

namespace dagman {

// (depth, height, width) ordered triple; used for voxel shapes, token grids,
// window sizes and shifts alike.
using Triple = std::array<int, 3>;
using Spacing = std::array<double, 3>;

constexpr std::int64_t product(const Triple& t) noexcept {
  return std::int64_t{t[0]} * t[1] * t[2];
}

constexpr std::int64_t flat_index(const Triple& shape, int z, int y, int x) noexcept {
  return (std::int64_t{z} * shape[1] + y) * shape[2] + x;
}

constexpr Triple unflatten(const Triple& shape, std::int64_t i) noexcept {
  const int x = static_cast<int>(i % shape[2]);
  const int y = static_cast<int>((i / shape[2]) % shape[1]);
  const int z = static_cast<int>(i / (std::int64_t{shape[1]} * shape[2]));
  return {z, y, x};
}

struct Volume {
  Triple shape{1, 1, 1};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;  // C-order, width fastest

  Volume() : data(1, 0.0f) {}
  Volume(Triple s, Spacing sp, float fill = 0.0f)
      : shape(s), spacing(sp), data(static_cast<std::size_t>(product(s)), fill) {}

  float& at(int z, int y, int x) { return data[static_cast<std::size_t>(flat_index(shape, z, y, x))]; }
  float at(int z, int y, int x) const { return data[static_cast<std::size_t>(flat_index(shape, z, y, x))]; }

  std::int64_t size() const noexcept { return product(shape); }

  void validate() const {
    for (int i = 0; i < 3; ++i) {
      detail::require(shape[i] >= 1, "shape[" + std::to_string(i) + "]", "must be >= 1");
      detail::require(spacing[i] > 0.0 && std::isfinite(spacing[i]), "spacing[" + std::to_string(i) + "]",
                      "must be finite and > 0");
    }
    detail::require(static_cast<std::int64_t>(data.size()) == product(shape), "data", "size does not match shape");
    for (float f : data) detail::require(std::isfinite(f), "data", "contains a non-finite intensity");
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

// Lesion geometry family selected by class_id % 3.
enum class LesionFamily { sphere = 0, cube = 1, shell = 2 };

inline LesionFamily family_of(int class_id) { return static_cast<LesionFamily>(class_id % 3); }

struct SyntheticSpec {
  Triple shape{32, 32, 32};
  int num_lesions = 1;
  std::array<double, 2> lesion_radius_range{3.0, 6.0};
  double lesion_intensity = 1.0;
  double background_noise_sigma = 0.1;
  int class_id = 0;
  int num_classes = 2;

  void validate() const {
    for (int i = 0; i < 3; ++i) detail::require(shape[i] >= 1, "shape[" + std::to_string(i) + "]", "must be >= 1");
    detail::require(num_lesions >= 0, "num_lesions", "must be >= 0");
    detail::require(lesion_radius_range[0] > 0.0 && lesion_radius_range[0] <= lesion_radius_range[1],
                    "lesion_radius_range", "need 0 < min <= max");
    if (num_lesions > 0) {
      const double need = 2.0 * std::ceil(lesion_radius_range[1]) + 1.0;
      for (int i = 0; i < 3; ++i)
        detail::require(need <= shape[i], "lesion_radius_range", "largest lesion does not fit inside the volume");
    }
    detail::require(std::isfinite(lesion_intensity), "lesion_intensity", "must be finite");
    detail::require(background_noise_sigma >= 0.0, "background_noise_sigma", "must be >= 0");
    detail::require(num_classes >= 1, "num_classes", "must be >= 1");
    detail::require(class_id >= 0 && class_id < num_classes, "class_id", "must lie in [0, num_classes)");
  }
};

// Does the lattice offset (dz,dy,dx) from a lesion centre fall inside a lesion
// of the given family and radius? Cubes use the half-side giving the same
// volume as the sphere of that radius, so families differ in shape but not in
// expected mass; shells keep the outer half of the sphere's radius.
inline bool inside_lesion(LesionFamily fam, double radius, int dz, int dy, int dx) {
  const double r2 = double(dz) * dz + double(dy) * dy + double(dx) * dx;
  switch (fam) {
    case LesionFamily::sphere:
      return r2 <= radius * radius;
    case LesionFamily::cube: {
      const double half = radius * std::cbrt(M_PI / 6.0);
      return std::abs(dz) <= half && std::abs(dy) <= half && std::abs(dx) <= half;
    }
    case LesionFamily::shell: {
      const double outer = radius * std::cbrt(8.0 / 7.0);  // equal volume with the inner half removed
      const double inner = 0.5 * outer;
      return r2 <= outer * outer && r2 >= inner * inner;
    }
  }
  return false;
}

// Gaussian background plus `num_lesions` lesions with integer centres. Pure
// function of (spec, seed).
inline Volume generate_synthetic_volume(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Volume vol(spec.shape, {1.0, 1.0, 1.0});
  Engine eng = make_engine(seed, {0x5e7a});
  const auto fam = family_of(spec.class_id);
  std::uniform_real_distribution<double> radius_dist(spec.lesion_radius_range[0], spec.lesion_radius_range[1]);
  for (int l = 0; l < spec.num_lesions; ++l) {
    const double radius = radius_dist(eng);
    const double outer = fam == LesionFamily::shell ? radius * std::cbrt(8.0 / 7.0) : radius;
    const int reach = static_cast<int>(std::ceil(outer));
    Triple centre{};
    for (int i = 0; i < 3; ++i) {
      const int lo = std::min(reach, spec.shape[i] - 1);
      const int hi = std::max(lo, spec.shape[i] - 1 - reach);
      centre[i] = std::uniform_int_distribution<int>(lo, hi)(eng);
    }
    for (int dz = -reach; dz <= reach; ++dz)
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dx = -reach; dx <= reach; ++dx) {
          const int z = centre[0] + dz, y = centre[1] + dy, x = centre[2] + dx;
          if (z < 0 || y < 0 || x < 0 || z >= spec.shape[0] || y >= spec.shape[1] || x >= spec.shape[2]) continue;
          if (inside_lesion(fam, radius, dz, dy, dx))
            vol.at(z, y, x) = static_cast<float>(spec.lesion_intensity);
        }
  }
  if (spec.background_noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.background_noise_sigma);
    for (auto& v : vol.data) v = static_cast<float>(v + noise(eng));
  }
  return vol;
}

// ---------------------------------------------------------------------------
// ".vol" container: one JSON header line, then a raw little-endian payload.

enum class VolDType { f32le, u8 };

inline const char* dtype_name(VolDType t) { return t == VolDType::f32le ? "f32le" : "u8"; }
inline std::size_t dtype_size(VolDType t) { return t == VolDType::f32le ? 4 : 1; }

struct VolHeader {
  Triple shape{};
  Spacing spacing{};
  VolDType dtype = VolDType::f32le;
};

namespace detail {

inline std::string vol_header_line(const VolHeader& h) {
  nlohmann::json j;
  j["shape"] = {h.shape[0], h.shape[1], h.shape[2]};
  j["spacing"] = {h.spacing[0], h.spacing[1], h.spacing[2]};
  j["dtype"] = dtype_name(h.dtype);
  return j.dump() + "\n";
}

inline void write_vol_file(const std::filesystem::path& path, const VolHeader& h, const char* payload,
                           std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const auto line = vol_header_line(h);
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.write(payload, static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::pair<VolHeader, std::vector<char>> read_vol_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open volume file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("malformed header: missing header line");
  VolHeader h;
  try {
    const auto j = nlohmann::json::parse(line);
    const auto& shape = j.at("shape");
    const auto& spacing = j.at("spacing");
    if (!shape.is_array() || shape.size() != 3 || !spacing.is_array() || spacing.size() != 3)
      throw FormatError("malformed header: shape and spacing must have three entries");
    for (int i = 0; i < 3; ++i) {
      h.shape[i] = shape[i].get<int>();
      h.spacing[i] = spacing[i].get<double>();
      if (h.shape[i] < 1 || !(h.spacing[i] > 0.0)) throw FormatError("malformed header: non-positive shape or spacing");
    }
    const auto dt = j.at("dtype").get<std::string>();
    if (dt == "f32le")
      h.dtype = VolDType::f32le;
    else if (dt == "u8")
      h.dtype = VolDType::u8;
    else
      throw FormatError("malformed header: unsupported dtype '" + dt + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto expected = static_cast<std::size_t>(product(h.shape)) * dtype_size(h.dtype);
  if (payload.size() != expected)
    throw FormatError("payload size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(payload.size()));
  return {h, std::move(payload)};
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  std::vector<char> bytes(v.data.size() * 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(v.data[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  detail::write_vol_file(path, {v.shape, v.spacing, VolDType::f32le}, bytes.data(), bytes.size());
}

inline Volume load_volume(const std::filesystem::path& path) {
  auto [h, payload] = detail::read_vol_file(path);
  if (h.dtype != VolDType::f32le) throw FormatError("expected dtype f32le in " + path.string());
  Volume v(h.shape, h.spacing);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, payload.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    v.data[i] = std::bit_cast<float>(u);
  }
  return v;
}

// Binary grid (e.g. a mask) exported for inspection.
struct ByteVolume {
  Triple shape{};
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;
};

inline void save_byte_volume(const ByteVolume& v, const std::filesystem::path& path) {
  if (static_cast<std::int64_t>(v.data.size()) != product(v.shape)) throw ValidationError("data", "size does not match shape");
  detail::write_vol_file(path, {v.shape, v.spacing, VolDType::u8}, reinterpret_cast<const char*>(v.data.data()),
                         v.data.size());
}

inline ByteVolume load_byte_volume(const std::filesystem::path& path) {
  auto [h, payload] = detail::read_vol_file(path);
  if (h.dtype != VolDType::u8) throw FormatError("expected dtype u8 in " + path.string());
  ByteVolume v{h.shape, h.spacing, std::vector<std::uint8_t>(payload.begin(), payload.end())};
  return v;
}

// ---------------------------------------------------------------------------

// Trilinear resampling. Output voxel i sits at physical offset i * target from
// the shared origin; coordinates past the last source voxel clamp to the edge.
inline Volume resample(const Volume& v, const Spacing& target) {
  for (int i = 0; i < 3; ++i)
    detail::require(target[i] > 0.0 && std::isfinite(target[i]), "target_spacing[" + std::to_string(i) + "]",
                    "must be finite and > 0");
  Triple out_shape{};
  for (int i = 0; i < 3; ++i) {
    out_shape[i] = static_cast<int>(std::lround(v.shape[i] * v.spacing[i] / target[i]));
    detail::require(out_shape[i] >= 1, "target_spacing[" + std::to_string(i) + "]", "degenerate output shape");
  }
  Volume out(out_shape, target);
  std::array<std::vector<int>, 3> lo, hi;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    lo[a].resize(out_shape[a]);
    hi[a].resize(out_shape[a]);
    frac[a].resize(out_shape[a]);
    for (int i = 0; i < out_shape[a]; ++i) {
      double c = i * target[a] / v.spacing[a];
      c = std::clamp(c, 0.0, double(v.shape[a] - 1));
      const int l = static_cast<int>(std::floor(c));
      lo[a][i] = l;
      hi[a][i] = std::min(l + 1, v.shape[a] - 1);
      frac[a][i] = c - l;
    }
  }
  for (int z = 0; z < out_shape[0]; ++z)
    for (int y = 0; y < out_shape[1]; ++y)
      for (int x = 0; x < out_shape[2]; ++x) {
        const double fz = frac[0][z], fy = frac[1][y], fx = frac[2][x];
        if (fz == 0.0 && fy == 0.0 && fx == 0.0) {
          out.at(z, y, x) = v.at(lo[0][z], lo[1][y], lo[2][x]);
          continue;
        }
        double acc = 0.0;
        for (int cz = 0; cz < 2; ++cz)
          for (int cy = 0; cy < 2; ++cy)
            for (int cx = 0; cx < 2; ++cx) {
              const double w = (cz ? fz : 1.0 - fz) * (cy ? fy : 1.0 - fy) * (cx ? fx : 1.0 - fx);
              if (w == 0.0) continue;
              acc += w * v.at(cz ? hi[0][z] : lo[0][z], cy ? hi[1][y] : lo[1][y], cx ? hi[2][x] : lo[2][x]);
            }
        out.at(z, y, x) = static_cast<float>(acc);
      }
  return out;
}

inline Volume crop(const Volume& v, const Triple& origin, const Triple& shape) {
  for (int i = 0; i < 3; ++i)
    detail::require(origin[i] >= 0 && shape[i] >= 1 && origin[i] + shape[i] <= v.shape[i],
                    "crop_shape[" + std::to_string(i) + "]", "crop extends outside the volume");
  Volume out(shape, v.spacing);
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y) {
      const float* src = &v.data[static_cast<std::size_t>(flat_index(v.shape, origin[0] + z, origin[1] + y, origin[2]))];
      std::copy(src, src + shape[2], &out.data[static_cast<std::size_t>(flat_index(shape, z, y, 0))]);
    }
  return out;
}

// Crop of the central region; used where a fixed, non-random view is needed.
inline Volume center_crop(const Volume& v, const Triple& shape) {
  Triple origin{};
  for (int i = 0; i < 3; ++i) origin[i] = (v.shape[i] - shape[i]) / 2;
  return crop(v, origin, shape);
}

struct ViewPair {
  Volume u;
  Volume v;
  std::array<Triple, 2> crop_origins{};
  std::uint64_t source_id = 0;
};

// Two independent uniformly placed crops (overlap allowed).
inline ViewPair random_crop_views(const Volume& vol, const Triple& crop_shape, std::uint64_t seed,
                                  std::uint64_t source_id = 0) {
  for (int i = 0; i < 3; ++i)
    detail::require(crop_shape[i] >= 1 && crop_shape[i] <= vol.shape[i], "crop_shape[" + std::to_string(i) + "]",
                    "crop larger than volume");
  Engine eng = make_engine(seed, {0xc409});
  ViewPair pair;
  pair.source_id = source_id;
  for (auto& origin : pair.crop_origins)
    for (int i = 0; i < 3; ++i) origin[i] = std::uniform_int_distribution<int>(0, vol.shape[i] - crop_shape[i])(eng);
  pair.u = crop(vol, pair.crop_origins[0], crop_shape);
  pair.v = crop(vol, pair.crop_origins[1], crop_shape);
  return pair;
}

}  // namespace dagman
