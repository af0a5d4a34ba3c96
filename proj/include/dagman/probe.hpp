#pragma once

// Downstream evaluation: pooled stage-4 features, linear probing on frozen
// features, fine-tuning of the whole encoder, and the metrics they report.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dagman/codistill.hpp"
#include "dagman/optim.hpp"
#include "dagman/volume.hpp"

namespace dagman {

enum class ProbeMode { lp, ft };

inline const char* probe_mode_name(ProbeMode m) { return m == ProbeMode::lp ? "lp" : "ft"; }

struct ProbeResult {
  ProbeMode mode = ProbeMode::lp;
  int num_classes = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();  // binary tasks only
  double accuracy = 0.0;
  std::vector<double> class_accuracy;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
};

struct ProbeOptions {
  int epochs = 300;
  double lr = 0.05;
  double weight_decay = 1e-4;
  double test_fraction = 0.5;  // held out per class before --train-frac applies
  double train_fraction = 1.0;
  std::uint64_t seed = 0;
  // fine-tuning only
  int ft_epochs = 5;
  double ft_lr = 1e-4;
  int ft_batch = 8;
};

// Mann-Whitney estimate of the ROC AUC; tied scores count one half.
inline double rank_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  detail::require(scores.size() == labels.size(), "labels", "score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    i = j;
  }
  for (int l : labels) {
    detail::require(l == 0 || l == 1, "labels", "AUC needs binary labels");
    (l == 1 ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0) throw ValidationError("labels", "AUC undefined: only one class present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

// Pooled stage-4 embedding of the center crop.
template <class T>
std::vector<double> extract_features(const Network<T>& net, const Volume& volume) {
  const Volume view = center_crop(volume, net.encoder_config().input_shape);
  Tape<T> tape(false);
  auto out = net.encoder().forward(tape, view);
  std::vector<double> f(static_cast<std::size_t>(out.pooled->value.cols()));
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = double(out.pooled->value(0, static_cast<Eigen::Index>(i)));
  return f;
}

template <class T>
std::vector<std::vector<double>> extract_features(const Network<T>& net, const std::vector<Volume>& volumes) {
  std::vector<std::vector<double>> out;
  out.reserve(volumes.size());
  for (const auto& v : volumes) out.push_back(extract_features(net, v));
  return out;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Per class: shuffle, hold out round(test_fraction * n_c) for testing, then
// keep floor(train_fraction * remaining) for training.
inline Split stratified_split(const std::vector<int>& labels, double test_fraction, double train_fraction,
                              std::uint64_t seed) {
  detail::require(test_fraction > 0.0 && test_fraction < 1.0, "test_fraction", "must lie in (0, 1)");
  detail::require(train_fraction > 0.0 && train_fraction <= 1.0, "train_frac", "must lie in (0, 1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Split s;
  for (auto& [c, idx] : by_class) {
    Engine eng = make_engine(seed, {0x5b1, static_cast<std::uint64_t>(c)});
    std::shuffle(idx.begin(), idx.end(), eng);
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * double(idx.size())));
    const std::size_t pool = idx.size() - n_test;
    const std::size_t n_train = floor_count(train_fraction, pool);
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                   idx.begin() + static_cast<std::ptrdiff_t>(n_test + n_train));
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace detail {

inline int class_count(const std::vector<int>& labels) {
  std::set<int> classes(labels.begin(), labels.end());
  for (int c : classes) require(c >= 0, "labels", "class ids must be >= 0");
  const int k = classes.empty() ? 0 : *classes.rbegin() + 1;
  if (classes.size() < 2) throw ValidationError("labels", "need at least two classes");
  return k;
}

// Fills accuracy/AUC fields from test logits.
inline void score(ProbeResult& r, const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  r.class_accuracy.assign(static_cast<std::size_t>(r.num_classes), 0.0);
  std::vector<double> per_class_n(static_cast<std::size_t>(r.num_classes), 0.0);
  double correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    per_class_n[y] += 1;
    if (arg == static_cast<Eigen::Index>(y)) {
      correct += 1;
      r.class_accuracy[y] += 1;
    }
  }
  for (std::size_t c = 0; c < per_class_n.size(); ++c)
    r.class_accuracy[c] = per_class_n[c] > 0 ? r.class_accuracy[c] / per_class_n[c] : 0.0;
  r.accuracy = logits.rows() > 0 ? correct / double(logits.rows()) : 0.0;
  if (r.num_classes == 2) {
    std::vector<double> s(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) s[static_cast<std::size_t>(i)] = logits(i, 1) - logits(i, 0);
    r.auc = rank_auc(s, labels);
  }
}

}  // namespace detail

// Softmax regression on standardized features, trained full-batch with Adam
// on mean cross-entropy plus L2.
class LinearClassifier {
 public:
  void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y, int num_classes,
           const ProbeOptions& opt) {
    detail::require(!x.empty() && x.size() == y.size(), "features", "need one label per feature vector");
    const auto n = static_cast<Eigen::Index>(x.size());
    const auto d = static_cast<Eigen::Index>(x[0].size());
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) X(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    mean_ = X.colwise().mean();
    scale_ = ((X.rowwise() - mean_).array().square().colwise().mean()).sqrt().matrix();
    for (Eigen::Index j = 0; j < d; ++j) scale_(j) = scale_(j) > 1e-12 ? 1.0 / scale_(j) : 0.0;
    const Eigen::MatrixXd Z = standardize(X);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, num_classes);
    for (Eigen::Index i = 0; i < n; ++i) Y(i, y[static_cast<std::size_t>(i)]) = 1.0;

    W_ = Eigen::MatrixXd::Zero(d, num_classes);
    b_ = Eigen::RowVectorXd::Zero(num_classes);
    Eigen::MatrixXd mW = W_, vW = W_;
    Eigen::RowVectorXd mb = b_, vb = b_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int t = 1; t <= opt.epochs; ++t) {
      Eigen::MatrixXd P = softmax(Z * W_ + Eigen::VectorXd::Ones(n) * b_);
      const Eigen::MatrixXd G = (P - Y) / double(n);
      const Eigen::MatrixXd gW = Z.transpose() * G + opt.weight_decay * W_;
      const Eigen::RowVectorXd gb = G.colwise().sum();
      mW = b1 * mW + (1 - b1) * gW;
      vW = b2 * vW + (1 - b2) * gW.cwiseAbs2();
      mb = b1 * mb + (1 - b1) * gb;
      vb = b2 * vb + (1 - b2) * gb.cwiseAbs2();
      const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
      W_.array() -= opt.lr * (mW.array() / c1) / ((vW.array() / c2).sqrt() + eps);
      b_.array() -= opt.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
    }
  }

  Eigen::MatrixXd logits(const std::vector<std::vector<double>>& x) const {
    const auto n = static_cast<Eigen::Index>(x.size());
    Eigen::MatrixXd X(n, mean_.size());
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return standardize(X) * W_ + Eigen::VectorXd::Ones(n) * b_;
  }

 private:
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& X) const {
    return ((X.rowwise() - mean_).array().rowwise() * scale_.array()).matrix();
  }
  static Eigen::MatrixXd softmax(Eigen::MatrixXd z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      z.row(i).array() -= z.row(i).maxCoeff();
      z.row(i) = z.row(i).array().exp().matrix();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  }

  Eigen::RowVectorXd mean_, scale_, b_;
  Eigen::MatrixXd W_;
};

// Linear probe on precomputed features.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                const ProbeOptions& opt) {
  detail::require(features.size() == labels.size(), "labels", "volume and label counts differ");
  ProbeResult r;
  r.mode = ProbeMode::lp;
  r.seed = opt.seed;
  r.num_classes = detail::class_count(labels);
  const Split split = stratified_split(labels, opt.test_fraction, opt.train_fraction, opt.seed);
  std::vector<std::vector<double>> xtr, xte;
  std::vector<int> ytr, yte;
  for (auto i : split.train) xtr.push_back(features[i]), ytr.push_back(labels[i]);
  for (auto i : split.test) xte.push_back(features[i]), yte.push_back(labels[i]);
  detail::require(!xtr.empty() && !xte.empty(), "train_frac", "split leaves an empty train or test set");
  LinearClassifier clf;
  clf.fit(xtr, ytr, r.num_classes, opt);
  r.n_train = xtr.size();
  r.n_test = xte.size();
  detail::score(r, clf.logits(xte), yte);
  return r;
}

// Linear probe with the encoder frozen.
template <class T>
ProbeResult linear_probe(const Network<T>& net, const std::vector<Volume>& volumes, const std::vector<int>& labels,
                         const ProbeOptions& opt) {
  detail::require(volumes.size() == labels.size(), "labels", "volume and label counts differ");
  return linear_probe(extract_features(net, volumes), labels, opt);
}

// Trains every encoder parameter plus a linear head on the pooled feature.
// `net` is updated in place.
template <class T>
ProbeResult fine_tune(Network<T>& net, const std::vector<Volume>& volumes, const std::vector<int>& labels,
                      const ProbeOptions& opt) {
  detail::require(volumes.size() == labels.size(), "labels", "volume and label counts differ");
  ProbeResult r;
  r.mode = ProbeMode::ft;
  r.seed = opt.seed;
  r.num_classes = detail::class_count(labels);
  const Split split = stratified_split(labels, opt.test_fraction, opt.train_fraction, opt.seed);
  detail::require(!split.train.empty() && !split.test.empty(), "train_frac", "split leaves an empty train or test set");
  const auto& cfg = net.encoder_config();

  ParamSet<T> head_ps;
  Engine eng = make_engine(opt.seed, {0xf17e});
  LinearParams<T> head = make_linear(head_ps, "probe.head", cfg.stage_width(kStages), r.num_classes, eng);
  typename AdamW<T>::Options ao;
  ao.weight_decay = opt.weight_decay;
  AdamW<T> enc_opt(net.params(), ao), head_opt(head_ps, ao);

  std::vector<Volume> views;
  for (const auto& v : volumes) views.push_back(center_crop(v, cfg.input_shape));
  std::vector<std::size_t> order = split.train;
  for (int e = 0; e < opt.ft_epochs; ++e) {
    Engine shuf = make_engine(opt.seed, {0xf17f, static_cast<std::uint64_t>(e)});
    std::shuffle(order.begin(), order.end(), shuf);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.ft_batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.ft_batch));
      net.params().zero_grad();
      head_ps.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        Tape<T> tape;
        auto out = net.encoder().forward(tape, views[order[k]]);
        Var<T> logits = apply(tape, head, out.pooled);
        Matrix<T> target = Matrix<T>::Zero(1, r.num_classes);
        target(0, labels[order[k]]) = T(1);
        Var<T> loss = ag::soft_cross_entropy(tape, logits, std::move(target), T(1), std::vector<T>{T(1)},
                                             T(end - start));
        tape.backward(loss);
      }
      enc_opt.step(opt.ft_lr);
      head_opt.step(opt.ft_lr * 10.0);
    }
  }
  net.params().zero_grad();

  Eigen::MatrixXd logits(static_cast<Eigen::Index>(split.test.size()), r.num_classes);
  std::vector<int> yte;
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    Tape<T> tape(false);
    auto out = net.encoder().forward(tape, views[split.test[i]]);
    logits.row(static_cast<Eigen::Index>(i)) = apply(tape, head, out.pooled)->value.row(0).template cast<double>();
    yte.push_back(labels[split.test[i]]);
  }
  r.n_train = split.train.size();
  r.n_test = split.test.size();
  detail::score(r, logits, yte);
  return r;
}

}  // namespace dagman
