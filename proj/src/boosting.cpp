#include "pulsegate/boosting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "pulsegate/container.hpp"
#include "pulsegate/error.hpp"

namespace pulsegate::boosting {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double logistic_loss(std::span<const double> score, std::span<const int> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    // log(1 + e^z) - y z, written to stay finite for large |z|
    const double z = score[i];
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += softplus - y[i] * z;
  }
  return total / static_cast<double>(y.size());
}

struct Split {
  double gain = 0.0;
  int feature = -1;
  std::uint16_t threshold = 0;
};

struct Leaf {
  int node = 0;
  std::vector<std::uint32_t> rows;
  double grad = 0.0;
  double hess = 0.0;
  Split best;
};

Split best_split(const kernels::BinnedFeatures& binned, std::span<const kernels::HistogramBin> hist, double g,
                 double h, std::size_t n, int min_leaf) {
  Split best;
  const double parent = g * g / h;
  for (std::size_t f = 0; f < binned.features; ++f) {
    double gl = 0.0, hl = 0.0;
    std::size_t nl = 0;
    // the last bin as a threshold would leave the right side empty
    for (std::size_t b = binned.offsets[f]; b + 1 < binned.offsets[f + 1]; ++b) {
      gl += hist[b].grad;
      hl += hist[b].hess;
      nl += hist[b].count;
      const std::size_t nr = n - nl;
      if (nl < static_cast<std::size_t>(min_leaf)) continue;
      if (nr < static_cast<std::size_t>(min_leaf)) break;
      const double gr = g - gl, hr = h - hl;
      if (hl <= 0.0 || hr <= 0.0) continue;
      const double gain = gl * gl / hl + gr * gr / hr - parent;
      if (gain > best.gain) {
        best.gain = gain;
        best.feature = static_cast<int>(f);
        best.threshold = static_cast<std::uint16_t>(b - binned.offsets[f]);
      }
    }
  }
  return best;
}

void evaluate_leaf(Leaf& leaf, const kernels::BinnedFeatures& binned, std::span<const double> grad,
                   std::span<const double> hess, int min_leaf, kernels::Backend backend) {
  leaf.grad = 0.0;
  leaf.hess = 0.0;
  for (auto r : leaf.rows) {
    leaf.grad += grad[r];
    leaf.hess += hess[r];
  }
  leaf.best = {};
  if (leaf.rows.size() < 2 || leaf.hess <= 0.0) return;
  std::vector<kernels::HistogramBin> hist(binned.total_bins());
  kernels::build_histograms(binned, leaf.rows, grad, hess, hist, backend);
  leaf.best = best_split(binned, hist, leaf.grad, leaf.hess, leaf.rows.size(), min_leaf);
}

Tree grow_tree(const kernels::BinnedFeatures& binned, std::span<const double> grad, std::span<const double> hess,
               const GbdtParams& params, kernels::Backend backend) {
  Tree tree;
  tree.nodes.emplace_back();
  std::vector<Leaf> leaves(1);
  leaves[0].rows.resize(binned.rows);
  std::iota(leaves[0].rows.begin(), leaves[0].rows.end(), 0u);
  evaluate_leaf(leaves[0], binned, grad, hess, params.min_samples_leaf, backend);

  while (static_cast<int>(leaves.size()) < params.num_leaves) {
    std::size_t pick = leaves.size();
    double top = 0.0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (leaves[i].best.feature >= 0 && leaves[i].best.gain > top) {
        top = leaves[i].best.gain;
        pick = i;
      }
    }
    if (pick == leaves.size()) break;

    Leaf parent = std::move(leaves[pick]);
    Leaf left, right;
    const auto f = static_cast<std::size_t>(parent.best.feature);
    for (auto r : parent.rows) (binned.at(r, f) <= parent.best.threshold ? left.rows : right.rows).push_back(r);

    left.node = static_cast<int>(tree.nodes.size());
    right.node = left.node + 1;
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    auto& node = tree.nodes[static_cast<std::size_t>(parent.node)];
    node.feature = parent.best.feature;
    node.bin_threshold = parent.best.threshold;
    node.left = left.node;
    node.right = right.node;

    evaluate_leaf(left, binned, grad, hess, params.min_samples_leaf, backend);
    evaluate_leaf(right, binned, grad, hess, params.min_samples_leaf, backend);
    leaves[pick] = std::move(left);
    leaves.push_back(std::move(right));
  }

  for (const auto& leaf : leaves) {
    double sg = 0.0, sh = 0.0;
    for (auto r : leaf.rows) {
      sg += grad[r];
      sh += hess[r];
    }
    tree.nodes[static_cast<std::size_t>(leaf.node)].value = sh > 0.0 ? -sg / sh * params.learning_rate : 0.0;
  }
  return tree;
}

/// Row permutation that sorts samples by (features..., label), so every
/// downstream sum runs in an order that does not depend on the input order.
std::vector<std::size_t> canonical_order(MatrixView<const double> x, std::span<const int> y) {
  std::vector<std::size_t> order(x.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t c = 0; c < x.cols; ++c) {
      if (x(a, c) != x(b, c)) return x(a, c) < x(b, c);
    }
    return y[a] < y[b];
  });
  return order;
}

void write_tree(container::ByteWriter& w, const Tree& tree, int index) {
  const auto& node = tree.nodes[static_cast<std::size_t>(index)];
  if (node.is_leaf()) {
    w.u8(1);
    w.f64(node.value);
    return;
  }
  w.u8(0);
  w.u8(static_cast<std::uint8_t>(node.feature));
  w.u16(node.bin_threshold);
  write_tree(w, tree, node.left);
  write_tree(w, tree, node.right);
}

int read_tree(container::ByteReader& r, Tree& tree, const BinMap& bins, int depth) {
  if (depth > 4096) throw Error(ErrorKind::ChecksumMismatch, "tree nesting too deep");
  const int index = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (r.u8() == 1) {
    tree.nodes.back().value = r.f64();
    return index;
  }
  const int feature = r.u8();
  const auto threshold = r.u16();
  if (static_cast<std::size_t>(feature) >= bins.features())
    throw Error(ErrorKind::ChecksumMismatch, "tree references an unknown feature");
  const int left = read_tree(r, tree, bins, depth + 1);
  const int right = read_tree(r, tree, bins, depth + 1);
  auto& node = tree.nodes[static_cast<std::size_t>(index)];
  node.feature = feature;
  node.bin_threshold = threshold;
  node.left = left;
  node.right = right;
  return index;
}

}  // namespace

void GbdtParams::validate() const {
  if (num_leaves < 2) throw Error(ErrorKind::BadSpec, "num_leaves must be >= 2");
  if (max_bin < 2 || max_bin > 65535) throw Error(ErrorKind::BadSpec, "max_bin must be in [2, 65535]");
  if (!(learning_rate >= 0.0 && learning_rate <= 1.0)) throw Error(ErrorKind::BadSpec, "learning_rate must be in [0, 1]");
  if (n_trees < 1) throw Error(ErrorKind::BadSpec, "n_trees must be >= 1");
  if (min_samples_leaf < 1) throw Error(ErrorKind::BadSpec, "min_samples_leaf must be >= 1");
}

std::uint16_t BinMap::bin(std::size_t feature, double value) const {
  const auto& c = cuts[feature];
  return static_cast<std::uint16_t>(std::lower_bound(c.begin(), c.end(), value) - c.begin());
}

kernels::BinnedFeatures BinMap::apply(MatrixView<const double> x) const {
  require_shape(x.cols == features(), "binned feature count");
  kernels::BinnedFeatures out;
  out.rows = x.rows;
  out.features = x.cols;
  out.offsets.resize(x.cols + 1, 0);
  for (std::size_t f = 0; f < x.cols; ++f) out.offsets[f + 1] = out.offsets[f] + bin_count(f);
  out.bins.resize(x.rows * x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t f = 0; f < x.cols; ++f) out.bins[r * x.cols + f] = bin(f, x(r, f));
  }
  return out;
}

std::size_t Tree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

double Tree::evaluate(const BinMap& bins, std::span<const double> x) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf()) {
    const auto& n = nodes[i];
    const auto f = static_cast<std::size_t>(n.feature);
    i = static_cast<std::size_t>(bins.bin(f, x[f]) <= n.bin_threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

BinMap build_bins(MatrixView<const double> x, int max_bin) {
  if (x.rows == 0) throw Error(ErrorKind::ShapeMismatch, "build_bins needs at least one row");
  if (max_bin < 2) throw Error(ErrorKind::BadSpec, "max_bin must be >= 2");
  BinMap map;
  map.cuts.resize(x.cols);
  std::vector<double> sorted(x.rows);
  for (std::size_t f = 0; f < x.cols; ++f) {
    for (std::size_t r = 0; r < x.rows; ++r) sorted[r] = x(r, f);
    std::sort(sorted.begin(), sorted.end());
    auto& cuts = map.cuts[f];
    std::vector<double> uniq(sorted);
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() <= static_cast<std::size_t>(max_bin)) {
      for (std::size_t i = 1; i < uniq.size(); ++i) cuts.push_back(uniq[i - 1] + (uniq[i] - uniq[i - 1]) / 2);
      continue;
    }
    const std::size_t n = sorted.size();
    for (std::size_t q = 1; q < static_cast<std::size_t>(max_bin); ++q) {
      std::size_t idx = q * n / static_cast<std::size_t>(max_bin);
      // slide to the next boundary between distinct values
      while (idx < n && idx > 0 && sorted[idx - 1] == sorted[idx]) ++idx;
      if (idx == 0 || idx >= n) continue;
      const double cut = sorted[idx - 1] + (sorted[idx] - sorted[idx - 1]) / 2;
      if (cuts.empty() || cut > cuts.back()) cuts.push_back(cut);
    }
  }
  return map;
}

GbdtModel fit(MatrixView<const double> x_in, std::span<const int> y_in, const GbdtParams& params,
              kernels::Backend backend) {
  params.validate();
  require_shape(x_in.rows == y_in.size(), "gbdt labels");
  const std::size_t n = x_in.rows;
  std::size_t positives = 0;
  for (int v : y_in) {
    if (v != 0 && v != 1) throw Error(ErrorKind::BadSpec, "labels must be 0 or 1");
    positives += static_cast<std::size_t>(v);
  }
  if (n == 0 || positives == 0 || positives == n) throw Error(ErrorKind::SingleClass, "gbdt training needs both classes");

  const auto order = canonical_order(x_in, y_in);
  Matrix<double> x(n, x_in.cols);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < x_in.cols; ++c) x(i, c) = x_in(order[i], c);
    y[i] = y_in[order[i]];
  }

  GbdtModel model;
  model.params = params;
  model.bins = build_bins(x.view(), params.max_bin);
  const auto binned = model.bins.apply(x.view());
  const double base = static_cast<double>(positives) / static_cast<double>(n);
  model.init_score = std::log(base / (1.0 - base));

  std::vector<double> score(n, model.init_score), grad(n), hess(n);
  model.train_loss.push_back(logistic_loss(score, y));
  for (int t = 0; t < params.n_trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(score[i]);
      grad[i] = p - y[i];
      hess[i] = p * (1.0 - p);
    }
    auto tree = grow_tree(binned, grad, hess, params, backend);
    for (std::size_t i = 0; i < n; ++i) score[i] += tree.evaluate(model.bins, x.row(i));
    model.trees.push_back(std::move(tree));
    model.train_loss.push_back(logistic_loss(score, y));
  }
  return model;
}

Matrix<double> feature_matrix(const windowing::LabeledDataset& ds) {
  Matrix<double> x(ds.windows.size(), windowing::kWindowHours);
  for (std::size_t i = 0; i < ds.windows.size(); ++i) std::copy_n(ds.windows[i].values.begin(), windowing::kWindowHours, x.row(i).begin());
  return x;
}

std::vector<int> label_vector(const windowing::LabeledDataset& ds) {
  std::vector<int> y;
  y.reserve(ds.windows.size());
  for (const auto& w : ds.windows) y.push_back(w.label == windowing::Label::sepsis ? 1 : 0);
  return y;
}

GbdtModel fit(const windowing::LabeledDataset& train, const GbdtParams& params, kernels::Backend backend) {
  const auto x = feature_matrix(train);
  const auto y = label_vector(train);
  return fit(x.view(), y, params, backend);
}

double predict_raw(const GbdtModel& model, std::span<const double> x) {
  require_shape(x.size() == model.bins.features(), "gbdt input width");
  double z = model.init_score;
  for (const auto& tree : model.trees) z += tree.evaluate(model.bins, x);
  return z;
}

double predict_gbdt(const GbdtModel& model, std::span<const double> x) { return sigmoid(predict_raw(model, x)); }

std::string params_json(const GbdtParams& p) {
  nlohmann::ordered_json j;
  j["family"] = "gbdt";
  j["layer_widths"] = nlohmann::json::array();
  j["hyper"] = {{"num_leaves", p.num_leaves},
                {"max_bin", p.max_bin},
                {"learning_rate", p.learning_rate},
                {"n_trees", p.n_trees},
                {"min_samples_leaf", p.min_samples_leaf}};
  return j.dump();
}

GbdtParams params_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& h = j.at("hyper");
    GbdtParams p;
    p.num_leaves = static_cast<int>(h.value("num_leaves", static_cast<double>(p.num_leaves)));
    p.max_bin = static_cast<int>(h.value("max_bin", static_cast<double>(p.max_bin)));
    p.learning_rate = h.value("learning_rate", p.learning_rate);
    p.n_trees = static_cast<int>(h.value("n_trees", static_cast<double>(p.n_trees)));
    p.min_samples_leaf = static_cast<int>(h.value("min_samples_leaf", static_cast<double>(p.min_samples_leaf)));
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadSpec, std::string("gbdt spec: ") + e.what());
  }
}

std::vector<std::byte> encode_payload(const GbdtModel& model) {
  container::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(model.bins.features()));
  for (const auto& cuts : model.bins.cuts) {
    w.u32(static_cast<std::uint32_t>(cuts.size()));
    for (double c : cuts) w.f64(c);
  }
  w.f64(model.init_score);
  w.u32(static_cast<std::uint32_t>(model.trees.size()));
  for (const auto& tree : model.trees) write_tree(w, tree, 0);
  return w.take();
}

GbdtModel decode_payload(std::span<const std::byte> payload, const GbdtParams& params) {
  container::ByteReader r(payload);
  GbdtModel model;
  model.params = params;
  const auto features = r.u32();
  if (features > 4096) throw Error(ErrorKind::ChecksumMismatch, "implausible feature count");
  model.bins.cuts.resize(features);
  for (auto& cuts : model.bins.cuts) {
    const auto count = r.u32();
    if (count > r.remaining() / 8) throw Error(ErrorKind::ChecksumMismatch, "cut list exceeds payload");
    cuts.resize(count);
    for (auto& c : cuts) c = r.f64();
  }
  model.init_score = r.f64();
  const auto trees = r.u32();
  if (trees > r.remaining()) throw Error(ErrorKind::ChecksumMismatch, "tree count exceeds payload");
  model.trees.resize(trees);
  for (auto& tree : model.trees) read_tree(r, tree, model.bins, 0);
  if (!r.done()) throw Error(ErrorKind::ChecksumMismatch, "trailing bytes after trees");
  return model;
}

std::vector<std::byte> serialize_gbdt(const GbdtModel& model, int horizon_hours) {
  container::Frame frame;
  frame.family = container::FamilyTag::gbdt;
  frame.horizon = static_cast<std::uint8_t>(horizon_hours);
  frame.spec_json = params_json(model.params);
  frame.payload = encode_payload(model);
  return container::write_frame(frame);
}

GbdtModel deserialize_gbdt(std::span<const std::byte> bytes, int* horizon_hours) {
  const auto frame = container::read_frame(bytes);
  if (frame.family != container::FamilyTag::gbdt) throw Error(ErrorKind::BadMagic, "not a gbdt model file");
  if (horizon_hours) *horizon_hours = frame.horizon;
  return decode_payload(frame.payload, params_from_json(frame.spec_json));
}

}  // namespace pulsegate::boosting
