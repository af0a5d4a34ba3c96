#pragma once

// Helpers shared by the test binaries: tiny configurations and independent
// reference computations written without the library's kernels.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "dagman/dagman.hpp"

namespace testing_support {

using dagman::Triple;

// D0 = 8, 8^3 input, 1-voxel patches: stage grids 8, 4, 2, 1. Stage 1 has a
// shifted second block so the gradient check covers the wrap-region masks.
inline dagman::EncoderConfig tiny_encoder() {
  dagman::EncoderConfig c;
  c.input_shape = {8, 8, 8};
  c.patch_size = {1, 1, 1};
  c.window_size = {2, 2, 2};
  c.stage_depths = {2, 1, 1, 1};
  c.stage_heads = {2, 2, 2, 4};
  c.embed_dim = 8;
  c.mlp_ratio = 2.0;
  c.sa_stage = 3;
  c.sa_depth = 2;
  return c;
}

inline dagman::DistillConfig tiny_distill() {
  dagman::DistillConfig d;
  d.k_cls = 16;
  d.k_patch = 16;
  d.k_g = 16;
  d.head_hidden_ratio = 2.0;
  return d;
}

inline dagman::PretrainConfig tiny_pretrain() {
  dagman::PretrainConfig p;
  p.encoder = tiny_encoder();
  p.distill = tiny_distill();
  p.steps = 4;
  p.warmup_steps = 1;
  p.batch_size = 2;
  p.mask.block_shape = {2, 2, 2};
  return p;
}

inline std::vector<dagman::Volume> tiny_volumes(int n, Triple shape = {8, 8, 8}, std::uint64_t seed = 7) {
  std::vector<dagman::Volume> out;
  for (int i = 0; i < n; ++i) {
    dagman::SyntheticSpec s;
    s.shape = shape;
    s.lesion_radius_range = {1.0, 2.0};
    s.class_id = i % 2;
    out.push_back(dagman::generate_synthetic_volume(s, seed + static_cast<std::uint64_t>(i)));
  }
  return out;
}

// Dense multi-head attention over all rows of qkv ([n x 3D], Q | K | V),
// returning the [n x D] output.
inline Eigen::MatrixXd dense_attention(const Eigen::MatrixXd& qkv, int heads,
                                       std::vector<Eigen::MatrixXd>* probs = nullptr) {
  const auto n = qkv.rows();
  const auto d = qkv.cols() / 3;
  const auto dh = d / heads;
  Eigen::MatrixXd out(n, d);
  for (int h = 0; h < heads; ++h) {
    Eigen::MatrixXd s(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        double dot = 0;
        for (Eigen::Index c = 0; c < dh; ++c) dot += qkv(i, h * dh + c) * qkv(j, d + h * dh + c);
        s(i, j) = dot / std::sqrt(double(dh));
      }
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = s.row(i).maxCoeff(), z = 0;
      for (Eigen::Index j = 0; j < n; ++j) z += std::exp(s(i, j) - mx);
      for (Eigen::Index j = 0; j < n; ++j) s(i, j) = std::exp(s(i, j) - mx) / z;
    }
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < dh; ++c) {
        double acc = 0;
        for (Eigen::Index j = 0; j < n; ++j) acc += s(i, j) * qkv(j, 2 * d + h * dh + c);
        out(i, h * dh + c) = acc;
      }
    if (probs) probs->push_back(s);
  }
  return out;
}

// Lattice points (dz, dy, dx) with dz^2 + dy^2 + dx^2 <= r^2.
inline long lattice_ball_count(double r) {
  const int R = static_cast<int>(std::floor(r));
  long n = 0;
  for (int z = -R; z <= R; ++z)
    for (int y = -R; y <= R; ++y)
      for (int x = -R; x <= R; ++x)
        if (z * z + y * y + x * x <= r * r) ++n;
  return n;
}

// -sum_k t_k log(max(s_k, 1e-12)) in double.
inline double cross_entropy(const std::vector<double>& t, const std::vector<double>& s) {
  double ce = 0;
  for (std::size_t k = 0; k < t.size(); ++k) ce -= t[k] * std::log(std::max(s[k], 1e-12));
  return ce;
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  double mx = -1e300;
  for (double v : z) mx = std::max(mx, v / tau);
  std::vector<double> p(z.size());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += p[i] = std::exp(z[i] / tau - mx);
  for (auto& v : p) v /= sum;
  return p;
}

inline std::vector<double> random_distribution(std::mt19937_64& eng, int k) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(static_cast<std::size_t>(k));
  double s = 0;
  for (auto& v : p) s += v = u(eng);
  for (auto& v : p) v /= s;
  return p;
}

// FNV-1a over every parameter value, in registration order.
template <class T>
std::uint64_t param_hash(const dagman::ParamSet<T>& ps) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : ps.items()) {
    const auto* b = reinterpret_cast<const unsigned char*>(p.var->value.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.var->value.size()) * sizeof(T); ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(std::random_device{}()) + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
