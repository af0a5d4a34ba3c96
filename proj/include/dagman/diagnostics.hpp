#pragma once

// Analysis instruments: attention-distance entropy per (stage, layer, head),
// S_ATT attention maps, and cluster separation of pooled features.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dagman/codistill.hpp"
#include "dagman/config.hpp"
#include "dagman/probe.hpp"

namespace dagman {

// ---------------------------------------------------------------------------
// Attention-distance entropy

// Normalized Shannon entropy (by ln B) of a B-bin histogram of `distances`
// over [0, d_max]. A degenerate range (d_max == 0) has entropy 0.
inline double distance_entropy(const std::vector<double>& distances, double d_max, int bins) {
  detail::require(bins >= 2, "bins", "need at least two bins");
  detail::require(!distances.empty(), "batch", "no attention distances to histogram");
  if (d_max <= 0.0) return 0.0;
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  for (double d : distances) {
    int b = static_cast<int>(std::floor(d / d_max * bins));
    b = std::clamp(b, 0, bins - 1);
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  double h = 0.0;
  const double n = double(distances.size());
  for (double c : hist)
    if (c > 0) h -= (c / n) * std::log(c / n);
  return std::clamp(h / std::log(double(bins)), 0.0, 1.0);
}

// Largest Euclidean distance between two cells of a window.
inline double window_max_distance(const Triple& window) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += double(window[i] - 1) * double(window[i] - 1);
  return std::sqrt(s);
}

// Attention-weighted mean query-to-key distance for every query of one head.
// probs: [windows][heads][q][k] as captured by the encoder.
template <class T>
void append_query_distances(const std::vector<T>& probs, const Triple& window, std::int64_t windows, int heads,
                            int head, std::vector<double>& out) {
  const auto n = product(window);
  detail::require(static_cast<std::int64_t>(probs.size()) == windows * heads * n * n, "attention",
                  "probability buffer does not match the window layout");
  std::vector<double> dist(static_cast<std::size_t>(n * n));
  for (std::int64_t q = 0; q < n; ++q) {
    const Triple a = unflatten(window, q);
    for (std::int64_t k = 0; k < n; ++k) {
      const Triple b = unflatten(window, k);
      double s = 0.0;
      for (int i = 0; i < 3; ++i) s += double(a[i] - b[i]) * double(a[i] - b[i]);
      dist[static_cast<std::size_t>(q * n + k)] = std::sqrt(s);
    }
  }
  for (std::int64_t w = 0; w < windows; ++w) {
    const T* p = probs.data() + ((w * heads + head) * n) * n;
    for (std::int64_t q = 0; q < n; ++q) {
      double d = 0.0;
      for (std::int64_t k = 0; k < n; ++k) d += double(p[q * n + k]) * dist[static_cast<std::size_t>(q * n + k)];
      out.push_back(d);
    }
  }
}

struct EntropyEntry {
  int stage = 0;
  int layer = 0;
  int head = 0;
  double entropy = 0.0;
  double d_max = 0.0;
  std::size_t samples = 0;
};

struct EntropyReport {
  int bins = 16;
  std::string metric = "attention-weighted mean Euclidean token distance within the attention window";
  std::vector<EntropyEntry> entries;
};

template <class T>
EntropyReport attention_distance_entropy(const Network<T>& net, const std::vector<Volume>& batch, int bins = 16) {
  detail::require(bins >= 2, "bins", "need at least two bins");
  detail::require(!batch.empty(), "batch", "empty batch");
  const auto& cfg = net.encoder_config();
  // distances[(stage, layer)][head]
  std::map<std::pair<int, int>, std::vector<std::vector<double>>> pooled;
  std::map<std::pair<int, int>, double> d_max;
  for (const auto& vol : batch) {
    const Volume view = center_crop(vol, cfg.input_shape);
    std::vector<LayerAttention<T>> layers;
    Tape<T> tape(false);
    ForwardOptions<T> opt;
    opt.attention = &layers;
    net.encoder().forward(tape, view, opt);
    for (const auto& l : layers) {
      auto& per_head = pooled[{l.stage, l.layer}];
      per_head.resize(static_cast<std::size_t>(l.heads));
      d_max[{l.stage, l.layer}] = window_max_distance(l.window);
      for (int h = 0; h < l.heads; ++h)
        append_query_distances(l.probs, l.window, l.windows, l.heads, h, per_head[static_cast<std::size_t>(h)]);
    }
  }
  EntropyReport rep;
  rep.bins = bins;
  for (const auto& [key, per_head] : pooled)
    for (std::size_t h = 0; h < per_head.size(); ++h)
      rep.entries.push_back({key.first, key.second, static_cast<int>(h),
                             distance_entropy(per_head[h], d_max[key], bins), d_max[key], per_head[h].size()});
  return rep;
}

inline json to_json(const EntropyReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"stage", e.stage},
                       {"layer", e.layer},
                       {"head", e.head},
                       {"entropy", e.entropy},
                       {"d_max", e.d_max},
                       {"samples", e.samples}});
  return {{"bins", r.bins}, {"metric", r.metric}, {"entries", entries}};
}

// ---------------------------------------------------------------------------
// Attention maps

struct AttentionMap {
  std::vector<double> values;  // min-max normalized S_ATT in grid order
  Triple grid{};
  std::string source = "pretrained";

  Volume to_volume() const {
    Volume v;
    v.shape = grid;
    v.spacing = {1.0, 1.0, 1.0};
    v.data.assign(values.begin(), values.end());
    return v;
  }
};

// Min-max normalization; a constant input maps to all zeros.
inline std::vector<double> min_max_normalize(const std::vector<double>& x) {
  if (x.empty()) return {};
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  std::vector<double> out(x.size(), 0.0);
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
  return out;
}

inline AttentionMap attention_map_from_satt(const SemanticAttention& satt, std::string source = "pretrained") {
  return {min_max_normalize(satt.values), satt.grid, std::move(source)};
}

template <class T>
SemanticAttention semantic_attention_of(const Network<T>& net, const Volume& volume) {
  const auto& cfg = net.encoder_config();
  if (!cfg.semantic_attention)
    throw ValidationError("encoder.semantic_attention", "model has no semantic attention module");
  const Volume view = center_crop(volume, cfg.input_shape);
  Tape<T> tape(false);
  ForwardOptions<T> opt;
  opt.stop_after_tap = true;
  auto out = net.encoder().forward(tape, view, opt);
  return compute_satt(out.cls_attention, cfg.resolved_sa_heads(), cfg.sa_grid());
}

template <class T>
AttentionMap extract_attention_map(const Network<T>& net, const Volume& volume, std::string source = "pretrained") {
  return attention_map_from_satt(semantic_attention_of(net, volume), std::move(source));
}

// ---------------------------------------------------------------------------
// Cluster metrics

struct ClusterReport {
  double intra_mean = 0.0;
  double intra_sd = 0.0;
  double inter_mean = 0.0;
  double inter_sd = 0.0;
  int classes = 0;
  int dim = 0;

  double ratio() const { return intra_mean > 0.0 ? inter_mean / intra_mean : std::numeric_limits<double>::infinity(); }
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / double(v.size()))};
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

inline ClusterReport cluster_metrics(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) {
  detail::require(features.size() == labels.size(), "labels", "feature and label counts differ");
  detail::require(!features.empty(), "features", "no feature vectors");
  const std::size_t dim = features[0].size();
  for (const auto& f : features) detail::require(f.size() == dim, "features", "feature vectors differ in length");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  if (members.size() < 2) throw ValidationError("labels", "cluster metrics need at least two classes");

  std::map<int, std::vector<double>> centroid;
  for (const auto& [c, idx] : members) {
    std::vector<double> m(dim, 0.0);
    for (auto i : idx)
      for (std::size_t j = 0; j < dim; ++j) m[j] += features[i][j];
    for (auto& x : m) x /= double(idx.size());
    centroid[c] = std::move(m);
  }
  std::vector<double> intra;
  for (std::size_t i = 0; i < features.size(); ++i) intra.push_back(detail::euclidean(features[i], centroid[labels[i]]));
  std::vector<double> inter;
  for (auto a = centroid.begin(); a != centroid.end(); ++a)
    for (auto b = std::next(a); b != centroid.end(); ++b) inter.push_back(detail::euclidean(a->second, b->second));

  ClusterReport r;
  std::tie(r.intra_mean, r.intra_sd) = detail::mean_sd(intra);
  std::tie(r.inter_mean, r.inter_sd) = detail::mean_sd(inter);
  r.classes = static_cast<int>(members.size());
  r.dim = static_cast<int>(dim);
  return r;
}

inline json to_json(const ClusterReport& r) {
  return {{"intra", {{"mean", r.intra_mean}, {"sd", r.intra_sd}}},
          {"inter", {{"mean", r.inter_mean}, {"sd", r.inter_sd}}},
          {"classes", r.classes},
          {"dim", r.dim}};
}

inline json to_json(const ProbeResult& r) {
  json j{{"mode", probe_mode_name(r.mode)},
         {"accuracy", r.accuracy},
         {"class_accuracy", r.class_accuracy},
         {"num_classes", r.num_classes},
         {"n_train", r.n_train},
         {"n_test", r.n_test},
         {"seed", r.seed}};
  j["auc"] = std::isnan(r.auc) ? json(nullptr) : json(r.auc);
  return j;
}

}  // namespace dagman
