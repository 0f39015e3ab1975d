#pragma once

// Binary random forest: bootstrap per tree, Gini-best axis-aligned splits
// over a random feature subset at each node.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/error.hpp"
#include "cuecan/rng.hpp"

namespace cuecan {

struct ForestParams {
  std::size_t trees = 50;
  std::size_t max_depth = 8;
  std::size_t min_leaf = 2;
  std::size_t mtry = 0;  // 0: ceil(sqrt(n_features))

  void validate() const {
    if (trees == 0) throw UsageError("forest: need at least one tree");
    if (min_leaf == 0) throw UsageError("forest: min_leaf must be positive");
  }
};

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;  // x[feature] <= threshold goes left
  int left = -1;
  int right = -1;
  std::array<std::size_t, 2> counts{0, 0};

  bool leaf() const { return feature < 0; }
  int majority() const { return counts[1] > counts[0] ? 1 : 0; }
  bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<std::uint8_t> in_bag;  // per training sample

  int predict(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes[i].leaf()) {
      const TreeNode& n = nodes[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return nodes[i].majority();
  }
  std::size_t depth() const {
    std::vector<std::size_t> d(nodes.size(), 0);
    std::size_t best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      best = std::max(best, d[i]);
      if (!nodes[i].leaf()) {
        d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
        d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
      }
    }
    return best;
  }
  bool operator==(const DecisionTree& o) const { return nodes == o.nodes; }
};

struct ForestVote {
  int label = 0;
  double fraction = 0.0;  // share of trees voting for `label`
};

struct RandomForest {
  ForestParams params;
  std::uint64_t seed = 0;
  std::size_t n_features = 0;
  std::vector<DecisionTree> trees;
  // Single-class training data: no trees, every prediction is this class.
  std::optional<int> degenerate;

  bool operator==(const RandomForest& o) const {
    return n_features == o.n_features && trees == o.trees && degenerate == o.degenerate;
  }
};

namespace detail {

inline double gini(std::size_t n0, std::size_t n1) {
  const double n = static_cast<double>(n0 + n1);
  if (n == 0.0) return 0.0;
  const double p = static_cast<double>(n1) / n;
  return 2.0 * p * (1.0 - p);
}

struct TreeBuilder {
  const std::vector<std::vector<double>>& X;
  const std::vector<int>& y;
  const ForestParams& hp;
  std::size_t mtry;
  Rng& rng;
  DecisionTree tree;

  int build(std::vector<std::size_t>& idx, std::size_t depth) {
    TreeNode node;
    for (std::size_t i : idx) ++node.counts[static_cast<std::size_t>(y[i])];
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(node);
    if (depth >= hp.max_depth || node.counts[0] == 0 || node.counts[1] == 0 || idx.size() < 2 * hp.min_leaf) return id;

    const std::size_t d = X.front().size();
    std::vector<std::size_t> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    for (std::size_t k = 0; k < mtry; ++k) std::swap(feats[k], feats[k + rng.index(d - k)]);

    const double parent = gini(node.counts[0], node.counts[1]);
    double best_score = parent - 1e-12;
    int best_f = -1;
    double best_t = 0.0;
    std::vector<std::size_t> order = idx;
    for (std::size_t k = 0; k < mtry; ++k) {
      const std::size_t f = feats[k];
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return X[a][f] < X[b][f] || (X[a][f] == X[b][f] && a < b);
      });
      std::array<std::size_t, 2> left{0, 0};
      for (std::size_t j = 0; j + 1 < order.size(); ++j) {
        ++left[static_cast<std::size_t>(y[order[j]])];
        const double a = X[order[j]][f], b = X[order[j + 1]][f];
        if (a == b) continue;
        const std::size_t nl = j + 1, nr = order.size() - nl;
        if (nl < hp.min_leaf || nr < hp.min_leaf) continue;
        const std::size_t r0 = node.counts[0] - left[0], r1 = node.counts[1] - left[1];
        const double score = (static_cast<double>(nl) * gini(left[0], left[1]) + static_cast<double>(nr) * gini(r0, r1)) /
                             static_cast<double>(order.size());
        if (score < best_score) {
          best_score = score;
          best_f = static_cast<int>(f);
          best_t = 0.5 * (a + b);
        }
      }
    }
    if (best_f < 0) return id;

    std::vector<std::size_t> li, ri;
    for (std::size_t i : idx) (X[i][static_cast<std::size_t>(best_f)] <= best_t ? li : ri).push_back(i);
    tree.nodes[static_cast<std::size_t>(id)].feature = best_f;
    tree.nodes[static_cast<std::size_t>(id)].threshold = best_t;
    const int l = build(li, depth + 1);
    const int r = build(ri, depth + 1);
    tree.nodes[static_cast<std::size_t>(id)].left = l;
    tree.nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }
};

inline void check_dataset(const std::vector<std::vector<double>>& X, const std::vector<int>& y) {
  if (X.empty()) throw DataError("forest: empty training set");
  if (X.size() != y.size()) throw ShapeError("forest: feature rows and labels differ in count");
  const std::size_t d = X.front().size();
  if (d == 0) throw ShapeError("forest: zero features");
  for (const auto& row : X) {
    if (row.size() != d) throw ShapeError("forest: ragged feature rows");
    for (double v : row) {
      if (!std::isfinite(v)) throw NumericError("forest: non-finite feature value");
    }
  }
  for (int v : y) {
    if (v != 0 && v != 1) throw DataError("forest: labels must be 0 or 1");
  }
}

}  // namespace detail

inline std::size_t resolved_mtry(const ForestParams& hp, std::size_t n_features) {
  const std::size_t m = hp.mtry == 0 ? static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_features))))
                                     : hp.mtry;
  return std::min(m, n_features);
}

// Tree t draws its bootstrap and feature subsets from stream (seed, t).
inline RandomForest forest_train(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                                 const ForestParams& hp, std::uint64_t seed) {
  hp.validate();
  detail::check_dataset(X, y);
  RandomForest f;
  f.params = hp;
  f.seed = seed;
  f.n_features = X.front().size();
  const auto ones = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
  if (ones == 0 || ones == y.size()) {
    f.degenerate = ones == 0 ? 0 : 1;
    return f;
  }
  if (X.size() < hp.min_leaf) throw DataError("forest: fewer samples than min_leaf");
  const std::size_t mtry = resolved_mtry(hp, f.n_features);
  const std::size_t n = X.size();
  for (std::size_t t = 0; t < hp.trees; ++t) {
    Rng rng(seed, t);
    std::vector<std::size_t> idx(n);
    std::vector<std::uint8_t> in_bag(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      idx[i] = rng.index(n);
      in_bag[idx[i]] = 1;
    }
    detail::TreeBuilder b{X, y, hp, mtry, rng, {}};
    b.build(idx, 0);
    b.tree.in_bag = std::move(in_bag);
    f.trees.push_back(std::move(b.tree));
  }
  return f;
}

// Majority of tree votes; an exact tie goes to class 0.
inline ForestVote forest_predict(const RandomForest& f, std::span<const double> x) {
  if (x.size() != f.n_features) throw ShapeError("forest_predict: feature count mismatch");
  if (f.degenerate) return {*f.degenerate, 1.0};
  std::size_t ones = 0;
  for (const DecisionTree& t : f.trees) ones += static_cast<std::size_t>(t.predict(x));
  const std::size_t n = f.trees.size();
  const int label = 2 * ones > n ? 1 : 0;
  const std::size_t agree = label == 1 ? ones : n - ones;
  return {label, static_cast<double>(agree) / static_cast<double>(n)};
}

inline double forest_accuracy(const RandomForest& f, const std::vector<std::vector<double>>& X, const std::vector<int>& y) {
  if (X.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < X.size(); ++i) ok += forest_predict(f, X[i]).label == y[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(X.size());
}

// Out-of-bag error of the ensemble over samples with at least one OOB tree.
// Absent when no sample is out of bag anywhere.
inline std::optional<double> oob_error(const RandomForest& f, const std::vector<std::vector<double>>& X,
                                       const std::vector<int>& y) {
  if (f.trees.empty()) return std::nullopt;
  std::size_t counted = 0, wrong = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    std::size_t votes = 0, ones = 0;
    for (const DecisionTree& t : f.trees) {
      if (t.in_bag.at(i)) continue;
      ++votes;
      ones += static_cast<std::size_t>(t.predict(X[i]));
    }
    if (votes == 0) continue;
    ++counted;
    wrong += ((2 * ones > votes ? 1 : 0) != y[i]) ? 1 : 0;
  }
  if (counted == 0) return std::nullopt;
  return static_cast<double>(wrong) / static_cast<double>(counted);
}

// Error of one tree on its own out-of-bag samples.
inline std::optional<double> tree_oob_error(const DecisionTree& t, const std::vector<std::vector<double>>& X,
                                            const std::vector<int>& y) {
  std::size_t counted = 0, wrong = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (t.in_bag.at(i)) continue;
    ++counted;
    wrong += t.predict(X[i]) != y[i] ? 1 : 0;
  }
  if (counted == 0) return std::nullopt;
  return static_cast<double>(wrong) / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json forest_to_json(const RandomForest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const DecisionTree& t : f.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.counts[0], n.counts[1]});
    trees.push_back(nodes);
  }
  nlohmann::json j{{"format", "cuecan-forest-1"},
                   {"trees", f.params.trees},
                   {"max_depth", f.params.max_depth},
                   {"min_leaf", f.params.min_leaf},
                   {"mtry", f.params.mtry},
                   {"seed", f.seed},
                   {"n_features", f.n_features},
                   {"nodes", trees}};
  j["degenerate"] = f.degenerate ? nlohmann::json(*f.degenerate) : nlohmann::json(nullptr);
  return j;
}

inline RandomForest forest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "cuecan-forest-1") throw DataError("forest: unknown format");
    RandomForest f;
    f.params.trees = j.at("trees").get<std::size_t>();
    f.params.max_depth = j.at("max_depth").get<std::size_t>();
    f.params.min_leaf = j.at("min_leaf").get<std::size_t>();
    f.params.mtry = j.at("mtry").get<std::size_t>();
    f.seed = j.at("seed").get<std::uint64_t>();
    f.n_features = j.at("n_features").get<std::size_t>();
    if (!j.at("degenerate").is_null()) f.degenerate = j.at("degenerate").get<int>();
    for (const auto& tj : j.at("nodes")) {
      DecisionTree t;
      for (const auto& nj : tj) {
        TreeNode n;
        n.feature = nj.at(0).get<int>();
        n.threshold = nj.at(1).get<double>();
        n.left = nj.at(2).get<int>();
        n.right = nj.at(3).get<int>();
        n.counts = {nj.at(4).get<std::size_t>(), nj.at(5).get<std::size_t>()};
        t.nodes.push_back(n);
      }
      const auto count = static_cast<int>(t.nodes.size());
      if (count == 0) throw DataError("forest: empty tree");
      for (int i = 0; i < count; ++i) {
        const TreeNode& n = t.nodes[static_cast<std::size_t>(i)];
        if (n.leaf()) continue;
        // Children follow their parent, so prediction always terminates.
        if (n.feature >= static_cast<int>(f.n_features) || n.left <= i || n.right <= i || n.left >= count ||
            n.right >= count) {
          throw DataError("forest: malformed node");
        }
      }
      f.trees.push_back(std::move(t));
    }
    if (!f.degenerate && f.trees.empty()) throw DataError("forest: no trees");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("forest: ") + e.what());
  }
}

}  // namespace cuecan
