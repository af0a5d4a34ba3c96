#pragma once

// One pretraining step runs, per batch item:
//   clean teacher pass on u -> S_ATT -> student mask
//   patch dropout of u and v for the teacher (noisy teacher)
//   teacher passes on u^ (patch tokens) and v^ ([CLS] and pooled tokens)
//   student pass on the masked view and the four losses
// then one AdamW step on the student, the EMA teacher update and the
// center updates.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dagman/checkpoint.hpp"
#include "dagman/codistill.hpp"
#include "dagman/config.hpp"
#include "dagman/masking.hpp"
#include "dagman/optim.hpp"
#include "dagman/volume.hpp"

namespace dagman {

struct LossReport {
  std::int64_t step = 0;  // 1-based index of the update this report belongs to
  double lr = 0.0;
  double amip = 0.0;
  double ampd = 0.0;
  double aitd = 0.0;
  double gitd = 0.0;
  double total = 0.0;
};

// How often each pipeline stage ran; lets callers confirm which code paths a
// configuration exercises.
struct PipelineCounters {
  std::int64_t satt_passes = 0;
  std::int64_t attention_masks = 0;
  std::int64_t low_attention_masks = 0;
  std::int64_t random_masks = 0;
  std::int64_t blockwise_masks = 0;
  std::int64_t patch_dropouts = 0;
  std::int64_t teacher_passes = 0;
  std::int64_t student_passes = 0;
};

// Masks produced for one batch item.
struct ItemMasks {
  MaskVector input;               // student mask at the input-patch grid
  std::vector<double> ampd;       // AMPD weight per SA-grid token
  std::optional<MaskVector> u_dropout;
  std::optional<MaskVector> v_dropout;
};

template <class T>
struct ItemTargets {
  ItemMasks masks;
  Matrix<T> p_patch, p_g, p_cls;         // sharpened, centered teacher distributions
  Matrix<T> g_logits, cls_logits;        // raw [1 x K] teacher logits
  Matrix<T> patch_logit_sum;             // column sums of the patch logits
  std::int64_t patch_rows = 0;
};

template <class T>
struct StudentLoss {
  Var<T> amip, ampd, aitd, gitd, total;  // aitd is null without SA
  Var<T> final_tokens;
};

inline std::string format_loss_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.lr << ',' << r.amip << ',' << r.ampd << ',' << r.aitd << ','
     << r.gitd << ',' << r.total;
  return os.str();
}

inline constexpr const char* kLossCsvHeader = "step,lr,amip,ampd,aitd,gitd,total";

template <class T>
class Trainer {
 public:
  explicit Trainer(const PretrainConfig& cfg)
      : cfg_(cfg), state_((cfg.validate(), DistillState<T>::create(cfg.encoder, cfg.distill, cfg.seed))) {
    make_optimizer();
  }

  // Resume from a checkpoint, including optimizer moments when present.
  explicit Trainer(Checkpoint<T>&& ck) : cfg_(ck.config), state_(std::move(ck.state)) {
    make_optimizer();
    if (!ck.adam_m.empty()) {
      opt_->first_moments() = std::move(ck.adam_m);
      opt_->second_moments() = std::move(ck.adam_v);
    }
    opt_->set_steps_taken(ck.adam_steps);
  }

  const PretrainConfig& config() const noexcept { return cfg_; }
  DistillState<T>& state() noexcept { return state_; }
  const DistillState<T>& state() const noexcept { return state_; }
  AdamW<T>& optimizer() noexcept { return *opt_; }
  const PipelineCounters& counters() const noexcept { return counters_; }
  const std::vector<ItemMasks>& last_masks() const noexcept { return last_masks_; }

  // Learning rate of the next update.
  double next_lr() const {
    return warmup_cosine_lr(cfg_.base_lr, static_cast<int>(state_.step) + 1, cfg_.warmup_steps, cfg_.steps);
  }

  // Masks for one item, seeded by (seed, step, item). `clean` receives the
  // teacher's tap-stage pass on u when S_ATT was needed.
  ItemMasks make_masks(const Volume& u, std::int64_t item, StageOutputs<T>* clean = nullptr) {
    const auto& enc = cfg_.encoder;
    const Triple factor = enc.sa_upsample_factor();
    const auto step = static_cast<std::uint64_t>(state_.step);
    const auto key = stream_key(cfg_.seed, {step, static_cast<std::uint64_t>(item), 0x3a5c});
    ItemMasks m;
    const auto s = cfg_.masking_strategy;
    if (s == MaskStrategy::attention || s == MaskStrategy::low_attention) {
      Tape<T> tape(false);
      ForwardOptions<T> opt;
      opt.stop_after_tap = true;
      auto out = state_.teacher->encoder().forward(tape, u, opt);
      ++counters_.satt_passes;
      ++counters_.teacher_passes;
      const SemanticAttention satt = compute_satt(out.cls_attention, enc.resolved_sa_heads(), enc.sa_grid());
      MaskVector coarse;
      if (s == MaskStrategy::attention) {
        coarse = attention_guided_mask(satt, cfg_.mask);
        ++counters_.attention_masks;
      } else {
        coarse = low_attention_mask(satt, cfg_.mask);
        ++counters_.low_attention_masks;
      }
      m.ampd.resize(coarse.size());
      for (std::size_t i = 0; i < coarse.size(); ++i) m.ampd[i] = coarse.keep[i] ? 0.0 : 1.0;
      m.input = upsample_mask(coarse, factor);
      if (clean) *clean = std::move(out);
    } else {
      if (s == MaskStrategy::random) {
        m.input = random_mask(enc.patch_grid(), cfg_.mask.r, key);
        ++counters_.random_masks;
      } else if (s == MaskStrategy::blockwise) {
        m.input = blockwise_mask(enc.patch_grid(), cfg_.mask.r, cfg_.mask.block_shape, key);
        ++counters_.blockwise_masks;
      } else {
        throw ValidationError("masking_strategy", "not a student masking strategy");
      }
      m.ampd = masked_fraction(m.input, factor);
    }
    if (cfg_.noisy_teacher) {
      m.u_dropout = patch_dropout_mask(enc.patch_grid(), cfg_.mask.r_t, stream_key(key, {1}));
      m.v_dropout = patch_dropout_mask(enc.patch_grid(), cfg_.mask.r_t, stream_key(key, {2}));
      counters_.patch_dropouts += 2;
    }
    return m;
  }

  // Teacher-side quantities for one item: masks, sharpened target
  // distributions, and the raw logits that feed the running centers.
  ItemTargets<T> teacher_targets(const ViewPair& pair, std::int64_t item) {
    const auto& dc = cfg_.distill;
    const bool has_sa = cfg_.encoder.semantic_attention;
    const Network<T>& teacher = *state_.teacher;
    ItemTargets<T> tg;
    StageOutputs<T> clean;
    tg.masks = make_masks(pair.u, item, &clean);

    // Patch distribution from u^ (u itself without noise).
    Tape<T> tt(false);
    Var<T> t_patch;
    {
      std::vector<T> keep;
      ForwardOptions<T> opt;
      opt.stop_after_tap = true;
      if (tg.masks.u_dropout) {
        keep = tg.masks.u_dropout->template keep_weights<T>();
        opt.keep = &keep;
      }
      if (!tg.masks.u_dropout && clean.tap_features) {
        t_patch = apply(tt, teacher.heads().patch, clean.tap_features);
      } else {
        auto out = teacher.encoder().forward(tt, pair.u, opt);
        ++counters_.teacher_passes;
        t_patch = apply(tt, teacher.heads().patch, out.tap_features);
      }
    }
    // [CLS] and pooled distributions from v^.
    Var<T> t_cls, t_g;
    {
      std::vector<T> keep;
      ForwardOptions<T> opt;
      if (tg.masks.v_dropout) {
        keep = tg.masks.v_dropout->template keep_weights<T>();
        opt.keep = &keep;
      }
      auto out = teacher.encoder().forward(tt, pair.v, opt);
      ++counters_.teacher_passes;
      if (has_sa) t_cls = apply(tt, teacher.heads().cls, out.cls);
      t_g = apply(tt, teacher.heads().global, out.pooled);
    }
    tg.p_patch = project_and_sharpen<T>(t_patch->value, dc.tau_t, &state_.center_patch);
    tg.p_g = project_and_sharpen<T>(t_g->value, dc.tau_t, &state_.center_g);
    tg.g_logits = t_g->value;
    if (has_sa) {
      tg.p_cls = project_and_sharpen<T>(t_cls->value, dc.tau_t, &state_.center_cls);
      tg.cls_logits = t_cls->value;
    }
    tg.patch_logit_sum = t_patch->value.colwise().sum();
    tg.patch_rows = t_patch->value.rows();
    return tg;
  }

  // Differentiable student loss for one item against fixed teacher targets.
  // Path drop is keyed by (seed, step, item), so repeated calls agree.
  StudentLoss<T> student_loss(Tape<T>& st, const ViewPair& pair, const ItemTargets<T>& tg, std::int64_t item) {
    const auto& enc = cfg_.encoder;
    const auto& dc = cfg_.distill;
    Network<T>& student = *state_.student;
    Engine drop_eng = make_engine(cfg_.seed, {static_cast<std::uint64_t>(state_.step), static_cast<std::uint64_t>(item), 0x9d});
    const std::vector<T> keep = tg.masks.input.template keep_weights<T>();
    ForwardOptions<T> opt;
    opt.keep = &keep;
    opt.path_drop = PathDrop{cfg_.student_path_drop, &drop_eng};
    auto out = student.encoder().forward(st, pair.u, opt);
    ++counters_.student_passes;
    const auto& heads = student.heads();
    StudentLoss<T> l;
    l.ampd = masked_distill_cross_entropy(st, apply(st, heads.patch, out.tap_features), tg.p_patch, tg.masks.ampd, dc.tau_s);
    l.gitd = distill_cross_entropy(st, apply(st, heads.global, out.pooled), tg.p_g, dc.tau_s);
    if (enc.semantic_attention) l.aitd = distill_cross_entropy(st, apply(st, heads.cls, out.cls), tg.p_cls, dc.tau_s);
    l.amip = loss_amip(st, out.final_tokens, heads.predictor, pair.u, tg.masks.input, enc);
    l.final_tokens = out.final_tokens;
    l.total = total_loss(st, l.amip, l.ampd, l.aitd, l.gitd, dc);
    return l;
  }

  // One optimizer update over a batch. `lr_override` replaces the scheduled
  // learning rate.
  LossReport step(std::span<const ViewPair> batch, std::optional<double> lr_override = std::nullopt) {
    detail::require(!batch.empty(), "batch", "empty batch");
    const auto& dc = cfg_.distill;
    const bool has_sa = cfg_.encoder.semantic_attention;
    const double inv_b = 1.0 / double(batch.size());

    LossReport rep;
    rep.step = state_.step + 1;
    rep.lr = lr_override ? *lr_override : next_lr();

    Matrix<T> cls_logits(has_sa ? batch.size() : 0, dc.k_cls);
    Matrix<T> g_logits(batch.size(), dc.k_g);
    Matrix<T> patch_sum = Matrix<T>::Zero(1, dc.k_patch);
    std::int64_t patch_rows = 0;
    last_masks_.clear();
    state_.student->params().zero_grad();

    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto item = static_cast<std::int64_t>(b);
      ItemTargets<T> tg = teacher_targets(batch[b], item);
      if (has_sa) cls_logits.row(b) = tg.cls_logits.row(0);
      g_logits.row(b) = tg.g_logits.row(0);
      patch_sum += tg.patch_logit_sum;
      patch_rows += tg.patch_rows;

      Tape<T> st;
      const StudentLoss<T> l = student_loss(st, batch[b], tg, item);
      const double v_amip = double(l.amip->value(0, 0)), v_ampd = double(l.ampd->value(0, 0));
      const double v_aitd = l.aitd ? double(l.aitd->value(0, 0)) : 0.0, v_gitd = double(l.gitd->value(0, 0));
      const double v_total = double(l.total->value(0, 0));
      if (!std::isfinite(v_amip) || !std::isfinite(v_ampd) || !std::isfinite(v_aitd) || !std::isfinite(v_gitd) ||
          !std::isfinite(v_total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << rep.step << " item " << b << ": amip=" << v_amip << " ampd=" << v_ampd
           << " aitd=" << v_aitd << " gitd=" << v_gitd << " total=" << v_total;
        throw NumericError(os.str());
      }
      rep.amip += v_amip * inv_b;
      rep.ampd += v_ampd * inv_b;
      rep.aitd += v_aitd * inv_b;
      rep.gitd += v_gitd * inv_b;
      rep.total += v_total * inv_b;
      st.backward(ag::scale(st, l.total, T(inv_b)));
      last_masks_.push_back(std::move(tg.masks));
    }

    opt_->clip_grad_norm(cfg_.grad_clip);
    opt_->step(rep.lr);
    const double momentum = cosine_momentum(dc.lambda_m, static_cast<int>(state_.step), cfg_.steps, dc.momentum_cosine_ramp);
    ema_update(state_, momentum);
    if (has_sa) state_.center_cls = update_center<T>(state_.center_cls, cls_logits, dc.center_momentum);
    state_.center_g = update_center<T>(state_.center_g, g_logits, dc.center_momentum);
    state_.center_patch =
        update_center<T>(state_.center_patch, Matrix<T>(patch_sum / T(patch_rows)), dc.center_momentum);
    state_.student->params().zero_grad();
    ++state_.step;
    return rep;
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, cfg_, state_, opt_.get()); }

 private:
  void make_optimizer() {
    typename AdamW<T>::Options o;
    o.beta1 = cfg_.adam_beta1;
    o.beta2 = cfg_.adam_beta2;
    o.eps = cfg_.adam_eps;
    o.weight_decay = cfg_.weight_decay;
    opt_ = std::make_unique<AdamW<T>>(state_.student->params(), o);
  }

  PretrainConfig cfg_;
  DistillState<T> state_;
  std::unique_ptr<AdamW<T>> opt_;
  PipelineCounters counters_;
  std::vector<ItemMasks> last_masks_;
};

// Batch for update `step`: each item picks a source volume and a crop seed
// from (seed, step, item) alone, so batches do not depend on history.
inline std::vector<ViewPair> sample_batch(const PretrainConfig& cfg, std::span<const Volume> data, std::int64_t step) {
  detail::require(!data.empty(), "data", "no training volumes");
  std::vector<ViewPair> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) {
    Engine eng = make_engine(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b), 0xda7a});
    const auto idx = std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(eng);
    batch.push_back(random_crop_views(data[idx], cfg.crop_shape(), eng(), idx));
  }
  return batch;
}

struct PretrainOptions {
  std::filesystem::path loss_csv;         // empty: no log
  std::filesystem::path checkpoint_path;  // empty: no checkpoints
  std::function<void(const LossReport&)> on_step;
};

// Runs cfg.steps updates from a fresh initialization. The loss CSV gets one
// row per update; a checkpoint is written every cfg.checkpoint_every steps
// and once at the end.
template <class T>
Trainer<T> pretrain(const PretrainConfig& cfg, std::span<const Volume> data, const PretrainOptions& opts = {}) {
  Trainer<T> trainer(cfg);
  std::ofstream csv;
  if (!opts.loss_csv.empty()) {
    csv.open(opts.loss_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot open loss log: " + opts.loss_csv.string());
    csv << kLossCsvHeader << '\n';
  }
  for (int s = 0; s < cfg.steps; ++s) {
    const auto batch = sample_batch(cfg, data, trainer.state().step);
    const LossReport rep = trainer.step(batch);
    if (csv.is_open()) {
      csv << format_loss_row(rep) << '\n';
      csv.flush();
      if (!csv) throw IoError("cannot write loss log: " + opts.loss_csv.string());
    }
    if (opts.on_step) opts.on_step(rep);
    if (!opts.checkpoint_path.empty() && cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0)
      trainer.save(opts.checkpoint_path);
  }
  if (!opts.checkpoint_path.empty()) trainer.save(opts.checkpoint_path);
  return trainer;
}

}  // namespace dagman
