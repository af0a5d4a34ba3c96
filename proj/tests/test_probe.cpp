#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace dagman;
using testing_support::param_hash;

namespace {

// AUC by direct pair counting.
double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

std::vector<std::vector<double>> gaussian_features(std::size_t n, int d, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> x(n, std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : x)
    for (auto& v : row) v = g(eng);
  return x;
}

}  // namespace

TEST(RankAuc, MatchesPairCountingWithTies) {
  Engine eng = make_engine(11);
  std::uniform_int_distribution<int> score(0, 5), label(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(30);
    std::vector<int> y(30);
    for (auto& v : s) v = score(eng);
    for (auto& v : y) v = label(eng);
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(rank_auc(s, y), pair_auc(s, y), 1e-12);
  }
  EXPECT_DOUBLE_EQ(rank_auc({1, 2, 3, 4}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(rank_auc({4, 3, 2, 1}, {0, 0, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(rank_auc({1, 1, 1, 1}, {0, 1, 0, 1}), 0.5);
}

TEST(RankAuc, RejectsSingleClassAndNonBinaryLabels) {
  EXPECT_THROW(rank_auc({0.1, 0.2}, {1, 1}), ValidationError);
  EXPECT_THROW(rank_auc({0.1, 0.2}, {0, 2}), ValidationError);
  EXPECT_THROW(rank_auc({0.1}, {0, 1}), ValidationError);
}

TEST(Split, StratifiedFractions) {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 3 == 0 ? 1 : 0);  // 40 / 20
  const Split full = stratified_split(labels, 0.5, 1.0, 3);
  const Split quarter = stratified_split(labels, 0.5, 0.25, 3);
  EXPECT_EQ(full.test, quarter.test);
  EXPECT_EQ(full.test.size(), 30u);
  EXPECT_EQ(full.train.size(), 30u);
  int pos = 0;
  for (auto i : quarter.train) pos += labels[i];
  EXPECT_EQ(pos, 2);  // floor(0.25 * 10)
  EXPECT_EQ(quarter.train.size() - pos, 5u);  // floor(0.25 * 20)
  std::set<std::size_t> all(full.train.begin(), full.train.end());
  for (auto i : full.test) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), labels.size());
  for (auto i : quarter.train) EXPECT_TRUE(std::find(full.train.begin(), full.train.end(), i) != full.train.end());
  EXPECT_EQ(stratified_split(labels, 0.5, 0.25, 3).train, quarter.train);
  EXPECT_NE(stratified_split(labels, 0.5, 1.0, 4).test, full.test);
  EXPECT_THROW(stratified_split(labels, 0.5, 0.0, 3), ValidationError);
  EXPECT_THROW(stratified_split(labels, 1.0, 1.0, 3), ValidationError);
}

TEST(LinearProbe, SeparableFeaturesReachPerfectAuc) {
  auto x = gaussian_features(80, 6, 5);
  std::vector<int> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<int>(i % 2);
    x[i][2] += y[i] ? 4.0 : -4.0;
  }
  ProbeOptions o;
  o.seed = 2;
  const ProbeResult r = linear_probe(x, y, o);
  EXPECT_DOUBLE_EQ(r.auc, 1.0);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.n_train + r.n_test, x.size());
}

TEST(LinearProbe, ShuffledLabelsSitAtChance) {
  double mean = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = gaussian_features(200, 8, 100 + seed);
    Engine eng = make_engine(200 + seed);
    std::vector<int> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 2);
    std::shuffle(y.begin(), y.end(), eng);
    ProbeOptions o;
    o.seed = seed;
    mean += linear_probe(x, y, o).auc / 5.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.08);
}

TEST(LinearProbe, MulticlassReportsAccuracyOnly) {
  auto x = gaussian_features(90, 4, 9);
  std::vector<int> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<int>(i % 3);
    x[i][static_cast<std::size_t>(y[i])] += 5.0;
  }
  const ProbeResult r = linear_probe(x, y, ProbeOptions{});
  EXPECT_EQ(r.num_classes, 3);
  EXPECT_TRUE(std::isnan(r.auc));
  EXPECT_GT(r.accuracy, 0.9);
  EXPECT_EQ(r.class_accuracy.size(), 3u);
  EXPECT_TRUE(to_json(r)["auc"].is_null());
  std::vector<int> one(x.size(), 0);
  EXPECT_THROW(linear_probe(x, one, ProbeOptions{}), ValidationError);
}

TEST(Features, DeterministicPooledStageFour) {
  const EncoderConfig c = testing_support::tiny_encoder();
  Network<double> net(c, testing_support::tiny_distill(), 4);
  const auto vols = testing_support::tiny_volumes(2);
  const auto a = extract_features(net, vols[0]);
  EXPECT_EQ(a.size(), static_cast<std::size_t>(c.stage_width(4)));
  EXPECT_EQ(a, extract_features(net, vols[0]));
  EXPECT_NE(a, extract_features(net, vols[1]));

  Volume pos;
  pos.shape = c.input_shape;
  pos.data.assign(static_cast<std::size_t>(product(c.input_shape)), 1.0f);
  Volume neg = pos;
  for (auto& v : neg.data) v = -1.0f;
  EXPECT_NE(extract_features(net, pos), extract_features(net, neg));
}

TEST(Probe, LinearProbeFreezesTheEncoderAndFineTuneDoesNot) {
  const EncoderConfig c = testing_support::tiny_encoder();
  Network<float> net(c, testing_support::tiny_distill(), 4);
  const auto vols = testing_support::tiny_volumes(8);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(i % 2);
  const auto before = param_hash(net.params());
  ProbeOptions o;
  o.epochs = 20;
  const ProbeResult lp = linear_probe(net, vols, labels, o);
  EXPECT_EQ(lp.mode, ProbeMode::lp);
  EXPECT_EQ(param_hash(net.params()), before);

  o.ft_epochs = 1;
  o.ft_batch = 2;
  o.ft_lr = 1e-3;
  const ProbeResult ft = fine_tune(net, vols, labels, o);
  EXPECT_EQ(ft.mode, ProbeMode::ft);
  EXPECT_NE(param_hash(net.params()), before);
  EXPECT_GE(ft.auc, 0.0);
  EXPECT_LE(ft.auc, 1.0);
  const json j = to_json(ft);
  for (const char* k : {"mode", "auc", "accuracy", "n_train", "n_test", "seed"}) EXPECT_TRUE(j.contains(k)) << k;
}
