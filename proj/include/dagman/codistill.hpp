#pragma once

// Student/teacher co-distillation: projection heads, sharpening and
// centering, the four loss terms, their weighted total, and the EMA teacher.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dagman/encoder.hpp"
#include "dagman/masking.hpp"

namespace dagman {

struct DistillConfig {
  double tau_s = 0.1;
  double tau_t = 0.04;
  double lambda_m = 0.996;        // EMA momentum at step 0
  bool momentum_cosine_ramp = true;  // ramp lambda_m to 1 over training
  double center_momentum = 0.9;
  double lambda_aitd = 0.1;
  double lambda_ampd = 0.1;
  double lambda_gitd = 0.1;
  int k_cls = 512;
  int k_patch = 512;
  int k_g = 512;
  double head_hidden_ratio = 4.0;

  void validate(const std::string& prefix = "distill") const {
    detail::require(tau_s > 0.0, prefix + ".tau_s", "must be > 0");
    detail::require(tau_t > 0.0, prefix + ".tau_t", "must be > 0");
    detail::require(lambda_m >= 0.0 && lambda_m <= 1.0, prefix + ".lambda_m", "must lie in [0, 1]");
    detail::require(center_momentum >= 0.0 && center_momentum < 1.0, prefix + ".center_momentum", "must lie in [0, 1)");
    detail::require(lambda_aitd >= 0.0, prefix + ".lambda_aitd", "must be >= 0");
    detail::require(lambda_ampd >= 0.0, prefix + ".lambda_ampd", "must be >= 0");
    detail::require(lambda_gitd >= 0.0, prefix + ".lambda_gitd", "must be >= 0");
    detail::require(k_cls >= 1, prefix + ".k_cls", "must be >= 1");
    detail::require(k_patch >= 1, prefix + ".k_patch", "must be >= 1");
    detail::require(k_g >= 1, prefix + ".k_g", "must be >= 1");
    detail::require(head_hidden_ratio > 0.0, prefix + ".head_hidden_ratio", "must be > 0");
  }

  friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

template <class T>
struct Heads {
  MlpHead<T> cls;
  MlpHead<T> patch;
  MlpHead<T> global;
  LinearParams<T> predictor;  // final token -> voxels of its block
};

// Encoder plus heads with every parameter registered in one ParamSet, in a
// fixed order. Student and teacher are two Networks built from one config.
template <class T>
class Network {
 public:
  Network(const EncoderConfig& enc, const DistillConfig& dc, std::uint64_t seed)
      : Network(enc, dc, make_engine(seed, {0x1417})) {}

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const Encoder<T>& encoder() const { return *encoder_; }
  const Heads<T>& heads() const { return heads_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const EncoderConfig& encoder_config() const { return encoder_->config(); }
  const DistillConfig& distill_config() const { return distill_; }

  void copy_values_from(const Network& other) {
    auto& a = params_.items();
    const auto& b = other.params_.items();
    if (a.size() != b.size()) throw ValidationError("params", "parameter count mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].var->value.rows() != b[i].var->value.rows() || a[i].var->value.cols() != b[i].var->value.cols())
        throw ValidationError(a[i].name, "shape mismatch");
      a[i].var->value = b[i].var->value;
    }
  }

 private:
  Network(const EncoderConfig& enc, const DistillConfig& dc, Engine eng) : distill_(dc) {
    dc.validate();
    encoder_ = std::make_unique<Encoder<T>>(enc, params_, eng);
    const auto& cfg = encoder_->config();
    const int d_tap = cfg.sa_width();
    const int d_last = cfg.stage_width(kStages);
    auto hidden = [&](int d) { return static_cast<int>(std::lround(d * dc.head_hidden_ratio)); };
    heads_.cls = make_mlp_head(params_, "head.cls", d_tap, hidden(d_tap), dc.k_cls, eng);
    heads_.patch = make_mlp_head(params_, "head.patch", d_tap, hidden(d_tap), dc.k_patch, eng);
    heads_.global = make_mlp_head(params_, "head.global", d_last, hidden(d_last), dc.k_g, eng);
    heads_.predictor = make_linear(params_, "head.predictor", d_last,
                                   static_cast<int>(product(cfg.final_token_extent())), eng);
  }

  DistillConfig distill_;
  ParamSet<T> params_;
  std::unique_ptr<Encoder<T>> encoder_;
  Heads<T> heads_;
};

// ---------------------------------------------------------------------------
// Sharpening and centering

// softmax((logits - center) / tau) row-wise; center may be empty (student side).
template <class T>
Matrix<T> project_and_sharpen(const Matrix<T>& logits, double tau, const ag::RowVector<T>* center = nullptr) {
  detail::require(tau > 0.0, "tau", "must be > 0");
  if (center && center->size() > 0) {
    Matrix<T> shifted = logits.rowwise() - center->row(0);
    return ag::softmax_rows<T>(shifted, T(1.0 / tau));
  }
  return ag::softmax_rows<T>(logits, T(1.0 / tau));
}

// Head logits and sharpened distribution for one embedding batch.
template <class T>
Matrix<T> project_and_sharpen(Tape<T>& tape, const Var<T>& embedding, const MlpHead<T>& head, double tau,
                              const ag::RowVector<T>* center = nullptr) {
  return project_and_sharpen<T>(apply(tape, head, embedding)->value, tau, center);
}

// center <- m * center + (1 - m) * mean over rows of logits.
template <class T>
ag::RowVector<T> update_center(const ag::RowVector<T>& center, const Matrix<T>& batch_logits, double momentum) {
  detail::require(momentum >= 0.0 && momentum < 1.0, "center_momentum", "must lie in [0, 1)");
  detail::require(batch_logits.rows() >= 1 && batch_logits.cols() == center.cols(), "center", "width mismatch");
  const ag::RowVector<T> mean = batch_logits.colwise().sum() / T(batch_logits.rows());
  return T(momentum) * center + T(1.0 - momentum) * mean;
}

// ---------------------------------------------------------------------------
// Loss values on explicit distributions (rows are distributions)

namespace detail {

template <class T>
double row_cross_entropy(const Matrix<T>& teacher, const Matrix<T>& student, Eigen::Index r) {
  double ce = 0.0;
  for (Eigen::Index k = 0; k < teacher.cols(); ++k)
    ce -= double(teacher(r, k)) * std::log(std::max(double(student(r, k)), 1e-12));
  return ce;
}

}  // namespace detail

// Batch mean of -sum_k P_t log P_s; used for both the [CLS] and pooled terms.
template <class T>
double loss_aitd(const Matrix<T>& p_student, const Matrix<T>& p_teacher) {
  detail::require(p_student.rows() == p_teacher.rows() && p_student.cols() == p_teacher.cols() && p_student.rows() >= 1,
                  "distributions", "student and teacher shapes differ");
  double total = 0.0;
  for (Eigen::Index r = 0; r < p_student.rows(); ++r) total += detail::row_cross_entropy(p_teacher, p_student, r);
  return total / double(p_student.rows());
}

template <class T>
double loss_gitd(const Matrix<T>& p_student, const Matrix<T>& p_teacher) {
  return loss_aitd(p_student, p_teacher);
}

// Per-token cross-entropy weighted by the masked indicator, averaged over the
// masked tokens; zero when nothing is masked.
template <class T>
double loss_ampd(const Matrix<T>& p_student, const Matrix<T>& p_teacher, const std::vector<double>& masked) {
  detail::require(p_student.rows() == p_teacher.rows() && p_student.cols() == p_teacher.cols() &&
                      static_cast<Eigen::Index>(masked.size()) == p_student.rows(),
                  "distributions", "token counts differ across student, teacher and mask");
  double total = 0.0, weight = 0.0;
  for (Eigen::Index r = 0; r < p_student.rows(); ++r) {
    if (masked[r] == 0.0) continue;
    total += masked[r] * detail::row_cross_entropy(p_teacher, p_student, r);
    weight += masked[r];
  }
  return weight > 0.0 ? total / weight : 0.0;
}

// ---------------------------------------------------------------------------
// Differentiable loss terms from student logits

// Cross-entropy between a constant teacher distribution and the sharpened
// student logits, mean over rows.
template <class T>
Var<T> distill_cross_entropy(Tape<T>& tape, const Var<T>& student_logits, const Matrix<T>& p_teacher, double tau_s) {
  const auto rows = student_logits->value.rows();
  return ag::soft_cross_entropy(tape, student_logits, p_teacher, T(tau_s), std::vector<T>(rows, T(1)), T(rows));
}

template <class T>
Var<T> masked_distill_cross_entropy(Tape<T>& tape, const Var<T>& student_logits, const Matrix<T>& p_teacher,
                                    const std::vector<double>& masked, double tau_s) {
  detail::require(static_cast<Eigen::Index>(masked.size()) == student_logits->value.rows(), "mask",
                  "token count mismatch between mask and patch logits");
  std::vector<T> w(masked.begin(), masked.end());
  T norm = 0;
  for (T v : w) norm += v;
  return ag::soft_cross_entropy(tape, student_logits, p_teacher, T(tau_s), std::move(w), norm);
}

// Voxel-level mask for the reconstruction target: entry (t, v) is 1 when
// voxel v of final-token block t lies in a masked input patch.
template <class T>
Matrix<T> voxel_mask(const EncoderConfig& cfg, const MaskVector& input_mask) {
  detail::require(input_mask.grid == cfg.patch_grid(), "mask.grid",
                  "reconstruction mask must live on the input-patch grid");
  const Triple ext = cfg.final_token_extent();
  const Triple grid{cfg.input_shape[0] / ext[0], cfg.input_shape[1] / ext[1], cfg.input_shape[2] / ext[2]};
  Matrix<T> m(product(grid), product(ext));
  for (int gz = 0; gz < grid[0]; ++gz)
    for (int gy = 0; gy < grid[1]; ++gy)
      for (int gx = 0; gx < grid[2]; ++gx) {
        const auto r = flat_index(grid, gz, gy, gx);
        Eigen::Index c = 0;
        for (int z = 0; z < ext[0]; ++z)
          for (int y = 0; y < ext[1]; ++y)
            for (int x = 0; x < ext[2]; ++x) {
              const int pz = (gz * ext[0] + z) / cfg.patch_size[0];
              const int py = (gy * ext[1] + y) / cfg.patch_size[1];
              const int px = (gx * ext[2] + x) / cfg.patch_size[2];
              m(r, c++) = input_mask.keep[flat_index(input_mask.grid, pz, py, px)] ? T(0) : T(1);
            }
      }
  return m;
}

// Mean L1 error of the linear predictor over voxels of masked input patches.
template <class T>
Var<T> loss_amip(Tape<T>& tape, const Var<T>& final_tokens, const LinearParams<T>& predictor, const Volume& target,
                 const MaskVector& input_mask, const EncoderConfig& cfg) {
  Var<T> pred = apply(tape, predictor, final_tokens);
  Matrix<T> tgt = extract_patches<T>(target, cfg.final_token_extent());
  if (pred->value.rows() != tgt.rows() || pred->value.cols() != tgt.cols())
    throw ValidationError("predictor", "prediction layout does not match the target view");
  Matrix<T> mask = voxel_mask<T>(cfg, input_mask);
  const T count = mask.sum();
  return ag::masked_l1(tape, pred, std::move(tgt), std::move(mask), count);
}

inline double total_loss(double amip, double ampd, double aitd, double gitd, const DistillConfig& cfg) {
  return amip + cfg.lambda_ampd * ampd + cfg.lambda_aitd * aitd + cfg.lambda_gitd * gitd;
}

template <class T>
Var<T> total_loss(Tape<T>& tape, const Var<T>& amip, const Var<T>& ampd, const Var<T>& aitd, const Var<T>& gitd,
                  const DistillConfig& cfg) {
  std::vector<std::pair<Var<T>, T>> terms{{amip, T(1)}, {ampd, T(cfg.lambda_ampd)}};
  if (aitd) terms.push_back({aitd, T(cfg.lambda_aitd)});
  terms.push_back({gitd, T(cfg.lambda_gitd)});
  return ag::weighted_sum(tape, std::move(terms));
}

// ---------------------------------------------------------------------------
// Teacher state

template <class T>
struct DistillState {
  std::unique_ptr<Network<T>> student;
  std::unique_ptr<Network<T>> teacher;
  ag::RowVector<T> center_cls;
  ag::RowVector<T> center_patch;
  ag::RowVector<T> center_g;
  std::int64_t step = 0;

  // Teacher starts as an exact copy of the student; centers start at zero.
  static DistillState create(const EncoderConfig& enc, const DistillConfig& dc, std::uint64_t seed) {
    DistillState s;
    s.student = std::make_unique<Network<T>>(enc, dc, seed);
    s.teacher = std::make_unique<Network<T>>(enc, dc, seed);
    s.teacher->copy_values_from(*s.student);
    s.center_cls = ag::RowVector<T>::Zero(dc.k_cls);
    s.center_patch = ag::RowVector<T>::Zero(dc.k_patch);
    s.center_g = ag::RowVector<T>::Zero(dc.k_g);
    return s;
  }
};

// theta_t <- m * theta_t + (1 - m) * theta_s, elementwise. Student untouched.
template <class T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double momentum) {
  detail::require(momentum >= 0.0 && momentum <= 1.0, "lambda_m", "must lie in [0, 1]");
  auto& t = teacher.items();
  const auto& s = student.items();
  if (t.size() != s.size()) throw ValidationError("params", "teacher and student parameter counts differ");
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i].var->value.rows() != s[i].var->value.rows() || t[i].var->value.cols() != s[i].var->value.cols())
      throw ValidationError(t[i].name, "teacher and student shapes differ");
  if (momentum == 1.0) return;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (momentum == 0.0) {
      t[i].var->value = s[i].var->value;
    } else {
      t[i].var->value = T(momentum) * t[i].var->value + T(1.0 - momentum) * s[i].var->value;
    }
  }
}

template <class T>
void ema_update(DistillState<T>& state, double momentum) {
  ema_update(state.teacher->params(), state.student->params(), momentum);
}

}  // namespace dagman
