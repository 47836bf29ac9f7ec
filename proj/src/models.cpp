#include "pulsegate/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "pulsegate/container.hpp"
#include "pulsegate/error.hpp"

namespace pulsegate::models {

using nn::Activation;
using nn::LossKind;
using nn::Mode;
using nn::ReturnMode;

namespace {

constexpr std::size_t kInputs = windowing::kWindowHours;
constexpr std::size_t kPredictChunk = 256;

template <typename T>
T sigmoid(T z) {
  return T{1} / (T{1} + std::exp(-z));
}

/// Keeps inference probabilities strictly inside (0, 1).
double open_unit(double p) {
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

std::size_t width(const ModelSpec& spec, std::size_t i) { return static_cast<std::size_t>(spec.layer_widths.at(i)); }

template <typename T>
void glorot(nn::ParamBlock<T>& block, Rng& rng) {
  nn::glorot_uniform(block.value, block.value.rows(), block.value.cols(), rng);
}

template <typename T>
void init_lstm(nn::Lstm<T>& layer, Rng& rng) {
  glorot(layer.kernel, rng);
  glorot(layer.recurrent, rng);
  const std::size_t h = layer.hidden_size();
  for (std::size_t j = 0; j < h; ++j) layer.bias.value(0, h + j) = T{1};  // forget gate
}

template <typename T>
void init_conv(nn::Conv1d<T>& conv, Rng& rng) {
  const std::size_t k = conv.kernel_width();
  nn::glorot_uniform(conv.weight.value, k * conv.in_channels(), k * conv.filters(), rng);
}

/// Sigmoid head on a single logit column: returns the loss and writes dL/dz.
template <typename T>
T sigmoid_head_loss(const Matrix<T>& z, const Matrix<T>& target, LossKind kind, Matrix<T>& dz) {
  if (kind == LossKind::categorical_ce) throw Error(ErrorKind::BadSpec, "single-output models need mse or binary_ce");
  Matrix<T> p(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) p.values()[i] = sigmoid(z.values()[i]);
  auto loss = nn::compute_loss(kind, p, target);
  dz = std::move(loss.grad);
  for (std::size_t i = 0; i < dz.size(); ++i) {
    const T pi = p.values()[i];
    dz.values()[i] *= pi * (T{1} - pi);
  }
  return loss.value;
}

template <typename T>
nn::SequenceBatch<T> relu(const nn::SequenceBatch<T>& x) {
  nn::SequenceBatch<T> out = x;
  for (auto& step : out)
    for (auto& v : step.values()) v = std::max(v, T{0});
  return out;
}

template <typename T>
void relu_backward(const nn::SequenceBatch<T>& output, nn::SequenceBatch<T>& grad) {
  for (std::size_t t = 0; t < grad.size(); ++t) {
    auto g = grad[t].values();
    const auto y = output[t].values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(y[i] > T{0})) g[i] = T{0};
  }
}

template <typename Net>
std::size_t stored_values(const Net& net) {
  std::size_t n = 0;
  for (const auto* m : const_cast<Net&>(net).state()) n += m->size();
  return n;
}

template <typename Net>
std::size_t trainable_values(const Net& net) {
  std::size_t n = 0;
  for (const auto* p : const_cast<Net&>(net).parameters()) n += p->value.size();
  return n;
}

void require_widths(const ModelSpec& spec, std::size_t count) {
  if (spec.layer_widths.size() != count)
    throw Error(ErrorKind::BadSpec, std::string(to_string(spec.family)) + " expects " + std::to_string(count) +
                                        " layer widths, got " + std::to_string(spec.layer_widths.size()));
}

}  // namespace

// ------------------------------------------------------------------ spec

std::string_view to_string(Family family) noexcept {
  switch (family) {
    case Family::mlp: return "mlp";
    case Family::lstm: return "lstm";
    case Family::lstm_fcn: return "lstm_fcn";
    case Family::gbdt: return "gbdt";
  }
  return "unknown";
}

Family family_from_string(std::string_view name) {
  for (auto f : {Family::mlp, Family::lstm, Family::lstm_fcn, Family::gbdt})
    if (to_string(f) == name) return f;
  throw Error(ErrorKind::BadSpec, "unknown model family '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  for (int w : layer_widths)
    if (w < 1) throw Error(ErrorKind::BadSpec, "layer widths must be >= 1");
  switch (family) {
    case Family::mlp: require_widths(*this, 3); break;
    case Family::lstm: require_widths(*this, 4); break;
    case Family::lstm_fcn: {
      require_widths(*this, 4);
      const double rate = hyper_or("dropout", 0.4);
      if (!(rate >= 0.0 && rate < 1.0)) throw Error(ErrorKind::BadSpec, "dropout must lie in [0, 1)");
      for (int b = 1; b <= 3; ++b) {
        const double k = hyper_or("kernel" + std::to_string(b), 3);
        const double s = hyper_or("stride" + std::to_string(b), 3);
        if (k < 1 || s < 1) throw Error(ErrorKind::BadSpec, "conv kernel and stride must be >= 1");
        if (k > static_cast<double>(kInputs)) throw Error(ErrorKind::KernelTooLarge, "conv kernel longer than the window");
      }
      break;
    }
    case Family::gbdt:
      require_widths(*this, 0);
      gbdt_params(*this).validate();
      break;
  }
  if (hyper_or("input_scale", 1.0) <= 0.0) throw Error(ErrorKind::BadSpec, "input_scale must be positive");
}

double ModelSpec::hyper_or(const std::string& key, double fallback) const {
  const auto it = hyper.find(key);
  return it == hyper.end() ? fallback : it->second;
}

std::string ModelSpec::to_json() const {
  nlohmann::ordered_json j;
  j["family"] = std::string(to_string(family));
  j["layer_widths"] = layer_widths;
  j["hyper"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : hyper) j["hyper"][k] = v;
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelSpec spec;
    spec.family = family_from_string(j.at("family").get<std::string>());
    spec.layer_widths = j.value("layer_widths", std::vector<int>{});
    if (j.contains("hyper"))
      for (const auto& [k, v] : j.at("hyper").items()) spec.hyper[k] = v.get<double>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadSpec, std::string("model spec JSON: ") + e.what());
  }
}

ModelSpec reference_spec(Family family) {
  ModelSpec spec;
  spec.family = family;
  switch (family) {
    case Family::mlp: spec.layer_widths = {100, 148, 74}; break;
    case Family::lstm: spec.layer_widths = {48, 108, 52, 20}; break;
    case Family::lstm_fcn:
      spec.layer_widths = {32, 16, 32, 16};
      spec.hyper = {{"dropout", 0.4},  {"kernel1", 3}, {"kernel2", 3},      {"kernel3", 3},
                    {"stride1", 3},    {"stride2", 3}, {"stride3", 2},      {"bn_momentum", 0.99},
                    {"bn_epsilon", 1e-3}};
      break;
    case Family::gbdt: spec = gbdt_spec(boosting::GbdtParams{}); break;
  }
  return spec;
}

boosting::GbdtParams gbdt_params(const ModelSpec& spec) {
  boosting::GbdtParams p;
  p.num_leaves = static_cast<int>(spec.hyper_or("num_leaves", p.num_leaves));
  p.max_bin = static_cast<int>(spec.hyper_or("max_bin", p.max_bin));
  p.learning_rate = spec.hyper_or("learning_rate", p.learning_rate);
  p.n_trees = static_cast<int>(spec.hyper_or("n_trees", p.n_trees));
  p.min_samples_leaf = static_cast<int>(spec.hyper_or("min_samples_leaf", p.min_samples_leaf));
  return p;
}

ModelSpec gbdt_spec(const boosting::GbdtParams& p) {
  ModelSpec spec;
  spec.family = Family::gbdt;
  spec.hyper = {{"num_leaves", p.num_leaves},
                {"max_bin", p.max_bin},
                {"learning_rate", p.learning_rate},
                {"n_trees", p.n_trees},
                {"min_samples_leaf", p.min_samples_leaf}};
  return spec;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::BadSpec, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::BadSpec, "batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw Error(ErrorKind::BadSpec, "learning_rate must be positive");
}

TrainConfig TrainConfig::defaults(Family family) {
  TrainConfig c;
  switch (family) {
    case Family::mlp: c.epochs = 390; c.loss_kind = LossKind::mse; break;
    case Family::lstm: c.epochs = 190; c.loss_kind = LossKind::binary_ce; break;
    case Family::lstm_fcn: c.epochs = 300; c.loss_kind = LossKind::categorical_ce; break;
    case Family::gbdt: c.epochs = 1; c.loss_kind = LossKind::binary_ce; break;
  }
  return c;
}

int default_fine_tune_epochs(Family family) { return family == Family::lstm_fcn ? 100 : 50; }

// ------------------------------------------------------------------- MLP

template <typename T>
MlpNetwork<T>::MlpNetwork(const ModelSpec& spec, Rng& rng)
    : hidden1("hidden1", kInputs, width(spec, 0), Activation::relu),
      hidden2("hidden2", width(spec, 0), width(spec, 1), Activation::relu),
      hidden3("hidden3", width(spec, 1), width(spec, 2), Activation::relu),
      output("output", width(spec, 2), 1, Activation::linear) {
  for (auto* dense : {&hidden1, &hidden2, &hidden3, &output}) glorot(dense->weight, rng);
}

template <typename T>
Matrix<T> MlpNetwork<T>::logits(const Matrix<T>& x) const {
  return output.forward(hidden3.forward(hidden2.forward(hidden1.forward(x))));
}

template <typename T>
T MlpNetwork<T>::accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, LossKind loss, Rng&) {
  nn::DenseCache<T> c1, c2, c3, co;
  const auto z = output.forward(hidden3.forward(hidden2.forward(hidden1.forward(x, &c1), &c2), &c3), &co);
  Matrix<T> dz;
  const T value = sigmoid_head_loss(z, target, loss, dz);
  hidden1.backward(c1, hidden2.backward(c2, hidden3.backward(c3, output.backward(co, dz))));
  return value;
}

template <typename T>
std::vector<nn::ParamBlock<T>*> MlpNetwork<T>::parameters() {
  return {&hidden1.weight, &hidden1.bias, &hidden2.weight, &hidden2.bias,
          &hidden3.weight, &hidden3.bias, &output.weight,  &output.bias};
}

template <typename T>
std::vector<Matrix<T>*> MlpNetwork<T>::state() {
  std::vector<Matrix<T>*> out;
  for (auto* p : parameters()) out.push_back(&p->value);
  return out;
}

// ------------------------------------------------------------------ LSTM

template <typename T>
LstmNetwork<T>::LstmNetwork(const ModelSpec& spec, Rng& rng)
    : lstm1("lstm1", 1, width(spec, 0)),
      lstm2("lstm2", width(spec, 0), width(spec, 1)),
      lstm3("lstm3", width(spec, 1), width(spec, 2)),
      dense("dense", width(spec, 2), width(spec, 3), Activation::tanh),
      output("output", width(spec, 3), 1, Activation::linear) {
  init_lstm(lstm1, rng);
  init_lstm(lstm2, rng);
  init_lstm(lstm3, rng);
  glorot(dense.weight, rng);
  glorot(output.weight, rng);
}

template <typename T>
Matrix<T> LstmNetwork<T>::logits(const Matrix<T>& x) const {
  const auto seq = nn::to_sequence_batch(x);
  const auto h = lstm3.forward(lstm2.forward(lstm1.forward(seq, ReturnMode::full_sequence), ReturnMode::full_sequence),
                               ReturnMode::last_state);
  return output.forward(dense.forward(h[0]));
}

template <typename T>
T LstmNetwork<T>::accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, LossKind loss, Rng&) {
  nn::LstmCache<T> c1, c2, c3;
  nn::DenseCache<T> cd, co;
  const auto seq = nn::to_sequence_batch(x);
  const auto s1 = lstm1.forward(seq, ReturnMode::full_sequence, &c1);
  const auto s2 = lstm2.forward(s1, ReturnMode::full_sequence, &c2);
  const auto s3 = lstm3.forward(s2, ReturnMode::last_state, &c3);
  const auto z = output.forward(dense.forward(s3[0], &cd), &co);
  Matrix<T> dz;
  const T value = sigmoid_head_loss(z, target, loss, dz);
  const auto dh = dense.backward(cd, output.backward(co, dz));
  lstm1.backward(c1, lstm2.backward(c2, lstm3.backward(c3, {dh})));
  return value;
}

template <typename T>
std::vector<nn::ParamBlock<T>*> LstmNetwork<T>::parameters() {
  return {&lstm1.kernel, &lstm1.recurrent, &lstm1.bias, &lstm2.kernel, &lstm2.recurrent, &lstm2.bias,
          &lstm3.kernel, &lstm3.recurrent, &lstm3.bias, &dense.weight, &dense.bias,      &output.weight,
          &output.bias};
}

template <typename T>
std::vector<Matrix<T>*> LstmNetwork<T>::state() {
  std::vector<Matrix<T>*> out;
  for (auto* p : parameters()) out.push_back(&p->value);
  return out;
}

// -------------------------------------------------------------- LSTM-FCN

template <typename T>
LstmFcnNetwork<T>::LstmFcnNetwork(const ModelSpec& spec, Rng& rng)
    : lstm("lstm", kInputs, width(spec, 0)), dropout_rate(static_cast<T>(spec.hyper_or("dropout", 0.4))) {
  const T momentum = static_cast<T>(spec.hyper_or("bn_momentum", 0.99));
  const T epsilon = static_cast<T>(spec.hyper_or("bn_epsilon", 1e-3));
  const double default_stride[3] = {3, 3, 2};
  std::size_t concat = width(spec, 0);
  for (std::size_t b = 0; b < 3; ++b) {
    const auto tag = std::to_string(b + 1);
    const auto k = static_cast<std::size_t>(spec.hyper_or("kernel" + tag, 3));
    const auto s = static_cast<std::size_t>(spec.hyper_or("stride" + tag, default_stride[b]));
    nn::Conv1d<T>::output_length(kInputs, k, s);
    blocks.push_back({nn::Conv1d<T>("conv" + tag, 1, width(spec, b + 1), k, s),
                      nn::BatchNorm<T>("norm" + tag, width(spec, b + 1), momentum, epsilon)});
    concat += width(spec, b + 1);
  }
  head = nn::Dense<T>("head", concat, 2, Activation::linear);

  init_lstm(lstm, rng);
  for (auto& block : blocks) init_conv(block.conv, rng);
  glorot(head.weight, rng);
}

template <typename T>
Matrix<T> LstmFcnNetwork<T>::logits(const Matrix<T>& x) const {
  const auto seq = nn::to_sequence_batch(x);
  const auto a = lstm.forward(nn::dimension_shuffle(seq), ReturnMode::last_state);
  std::vector<Matrix<T>> pooled;
  for (const auto& block : blocks) pooled.push_back(nn::global_avg_pool(relu(block.norm.infer(block.conv.forward(seq)))));
  return head.forward(nn::concat_cols<T>({&a[0], &pooled[0], &pooled[1], &pooled[2]}));
}

template <typename T>
T LstmFcnNetwork<T>::accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, LossKind loss, Rng& rng) {
  if (loss != LossKind::categorical_ce) throw Error(ErrorKind::BadSpec, "lstm_fcn trains with categorical_ce");
  const auto seq = nn::to_sequence_batch(x);

  nn::LstmCache<T> lc;
  const auto a = lstm.forward(nn::dimension_shuffle(seq), ReturnMode::last_state, &lc);
  Matrix<T> mask;
  const auto a_drop = nn::dropout(a[0], dropout_rate, Mode::train, &rng, &mask);

  const std::size_t nb = blocks.size();
  std::vector<nn::Conv1dCache<T>> conv_cache(nb);
  std::vector<nn::BatchNormCache<T>> norm_cache(nb);
  std::vector<nn::SequenceBatch<T>> activated(nb);
  std::vector<Matrix<T>> pooled(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    activated[b] = relu(blocks[b].norm.forward(blocks[b].conv.forward(seq, &conv_cache[b]), Mode::train, &norm_cache[b]));
    pooled[b] = nn::global_avg_pool(activated[b]);
  }

  nn::DenseCache<T> hc;
  const auto z = head.forward(nn::concat_cols<T>({&a_drop, &pooled[0], &pooled[1], &pooled[2]}), &hc);
  const auto probs = nn::softmax(z);
  const auto result = nn::compute_loss(loss, probs, target);
  const auto dcat = head.backward(hc, nn::softmax_backward(probs, result.grad));

  std::vector<std::size_t> widths{a_drop.cols()};
  for (const auto& p : pooled) widths.push_back(p.cols());
  auto parts = nn::split_cols(dcat, widths);

  auto& da = parts[0];
  for (std::size_t i = 0; i < da.size(); ++i) da.values()[i] *= mask.values()[i];
  lstm.backward(lc, {da});
  for (std::size_t b = 0; b < nb; ++b) {
    auto dr = nn::global_avg_pool_backward(parts[b + 1], activated[b].size());
    relu_backward(activated[b], dr);
    blocks[b].conv.backward(conv_cache[b], blocks[b].norm.backward(norm_cache[b], dr));
  }
  return result.value;
}

template <typename T>
std::vector<nn::ParamBlock<T>*> LstmFcnNetwork<T>::parameters() {
  std::vector<nn::ParamBlock<T>*> out{&lstm.kernel, &lstm.recurrent, &lstm.bias};
  for (auto& block : blocks) {
    out.push_back(&block.conv.weight);
    out.push_back(&block.conv.bias);
    out.push_back(&block.norm.gamma);
    out.push_back(&block.norm.beta);
  }
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

template <typename T>
std::vector<Matrix<T>*> LstmFcnNetwork<T>::state() {
  std::vector<Matrix<T>*> out;
  for (auto* p : parameters()) out.push_back(&p->value);
  for (auto& block : blocks) {
    out.push_back(&block.norm.running_mean);
    out.push_back(&block.norm.running_var);
  }
  return out;
}

template class MlpNetwork<float>;
template class MlpNetwork<double>;
template class LstmNetwork<float>;
template class LstmNetwork<double>;
template class LstmFcnNetwork<float>;
template class LstmFcnNetwork<double>;

// ---------------------------------------------------------- trained model

std::size_t TrainedModel::parameter_count() const {
  return std::visit(
      [](const auto& net) -> std::size_t {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (std::is_same_v<Net, boosting::GbdtModel>) {
          std::size_t n = 1;
          for (const auto& c : net.bins.cuts) n += c.size();
          for (const auto& t : net.trees) n += t.nodes.size();
          return n;
        } else {
          return stored_values(net);
        }
      },
      network);
}

std::size_t TrainedModel::trainable_parameter_count() const {
  return std::visit(
      [&](const auto& net) -> std::size_t {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (std::is_same_v<Net, boosting::GbdtModel>) {
          return parameter_count();
        } else {
          return trainable_values(net);
        }
      },
      network);
}

TrainedModel build_mlp(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::mlp) throw Error(ErrorKind::BadSpec, "build_mlp needs an mlp spec");
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  return TrainedModel{spec, 1, {}, {}, MlpNetwork<float>(spec, rng)};
}

TrainedModel build_lstm(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::lstm) throw Error(ErrorKind::BadSpec, "build_lstm needs an lstm spec");
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  return TrainedModel{spec, 1, {}, {}, LstmNetwork<float>(spec, rng)};
}

TrainedModel build_lstm_fcn(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.family != Family::lstm_fcn) throw Error(ErrorKind::BadSpec, "build_lstm_fcn needs an lstm_fcn spec");
  spec.validate();
  Rng rng(derive_seed(seed, "init"));
  return TrainedModel{spec, 1, {}, {}, LstmFcnNetwork<float>(spec, rng)};
}

TrainedModel build(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.family) {
    case Family::mlp: return build_mlp(spec, seed);
    case Family::lstm: return build_lstm(spec, seed);
    case Family::lstm_fcn: return build_lstm_fcn(spec, seed);
    case Family::gbdt: break;
  }
  spec.validate();
  return TrainedModel{spec, 1, {}, {}, boosting::GbdtModel{gbdt_params(spec), {}, 0.0, {}, {}}};
}

// -------------------------------------------------------------- training

namespace {

struct Normalizer {
  double mean = 0.0;
  double scale = 1.0;
};

Normalizer normalizer(const ModelSpec& spec) { return {spec.hyper_or("input_mean", 0.0), spec.hyper_or("input_scale", 1.0)}; }

void fit_normalizer(ModelSpec& spec, const windowing::LabeledDataset& ds) {
  if (spec.hyper.count("input_mean") && spec.hyper.count("input_scale")) return;
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& w : ds.windows)
    for (double v : w.values) {
      sum += v;
      ++n;
    }
  const double mean = n ? sum / static_cast<double>(n) : 0.0;
  for (const auto& w : ds.windows)
    for (double v : w.values) sq += (v - mean) * (v - mean);
  const double sd = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
  spec.hyper["input_mean"] = mean;
  spec.hyper["input_scale"] = sd > 0.0 ? sd : 1.0;
}

template <typename T>
Matrix<T> normalized_inputs(const Matrix<double>& raw, const Normalizer& norm) {
  Matrix<T> x(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.size(); ++i) x.values()[i] = static_cast<T>((raw.values()[i] - norm.mean) / norm.scale);
  return x;
}

template <typename T>
Matrix<T> targets(const windowing::LabeledDataset& ds, bool one_hot) {
  Matrix<T> y(ds.windows.size(), one_hot ? 2 : 1);
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    const bool sepsis = ds.windows[i].label == windowing::Label::sepsis;
    if (one_hot) {
      y(i, 0) = sepsis ? T{0} : T{1};
      y(i, 1) = sepsis ? T{1} : T{0};
    } else {
      y(i, 0) = sepsis ? T{1} : T{0};
    }
  }
  return y;
}

Matrix<float> gather_rows(const Matrix<float>& m, std::span<const std::size_t> rows) {
  Matrix<float> out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
  return out;
}

/// Probabilities from logits, computed in double: one column for the
/// sigmoid families, two (non-sepsis, sepsis) for lstm_fcn.
Matrix<double> probabilities(const Matrix<float>& z) {
  Matrix<double> p(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (z.cols() == 1) {
      p(r, 0) = open_unit(sigmoid(static_cast<double>(z(r, 0))));
    } else {
      const double z0 = z(r, 0), z1 = z(r, 1);
      p(r, 1) = open_unit(1.0 / (1.0 + std::exp(z0 - z1)));
      p(r, 0) = 1.0 / (1.0 + std::exp(z1 - z0));
    }
  }
  return p;
}

template <typename Net>
void run_epochs(Net& net, TrainedModel& model, const windowing::LabeledDataset& train_set,
                const windowing::LabeledDataset& val_set, const TrainConfig& config) {
  const bool one_hot = config.loss_kind == LossKind::categorical_ce;
  const auto norm = normalizer(model.spec);
  const auto x = normalized_inputs<float>(boosting::feature_matrix(train_set), norm);
  const auto y = targets<float>(train_set, one_hot);

  nn::AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  Rng dropout_rng(derive_seed(config.shuffle_seed, "dropout"));
  const std::uint64_t shuffle_stream = derive_seed(config.shuffle_seed, "shuffle");
  const std::size_t n = x.rows();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  auto params = net.parameters();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(shuffle_stream, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(bs, n - start));
      const float loss = net.accumulate_gradients(gather_rows(x, rows), gather_rows(y, rows), config.loss_kind, dropout_rng);
      if (!std::isfinite(loss))
        throw Error(ErrorKind::NonFiniteLoss, "loss became non-finite in epoch " + std::to_string(epoch + 1));
      for (auto* p : params) nn::adam_step(*p, adam);
      total += static_cast<double>(loss) * static_cast<double>(rows.size());
    }
    model.train_log.push_back(total / static_cast<double>(n));
    if (!val_set.windows.empty()) model.val_log.push_back(dataset_loss(model, val_set, config.loss_kind));
  }
}

void check_horizon(const windowing::LabeledDataset& ds, int horizon, const char* what) {
  if (ds.horizon_hours != horizon)
    throw Error(ErrorKind::HorizonMismatch, std::string(what) + " has horizon " + std::to_string(ds.horizon_hours) +
                                                "h, expected " + std::to_string(horizon) + "h");
  for (const auto& w : ds.windows)
    if (w.horizon_hours != horizon) throw Error(ErrorKind::HorizonMismatch, std::string(what) + " mixes horizons");
}

}  // namespace

double dataset_loss(const TrainedModel& model, const windowing::LabeledDataset& ds, LossKind loss) {
  if (ds.windows.empty()) throw Error(ErrorKind::BadSpec, "loss over an empty dataset");
  const auto p1 = predict_batch(model, ds);
  const bool one_hot = loss == LossKind::categorical_ce;
  Matrix<double> p(p1.size(), one_hot ? 2 : 1);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    if (one_hot) {
      p(i, 0) = 1.0 - p1[i];
      p(i, 1) = p1[i];
    } else {
      p(i, 0) = p1[i];
    }
  }
  return nn::compute_loss(loss, p, targets<double>(ds, one_hot)).value;
}

TrainedModel train(TrainedModel model, const windowing::LabeledDataset& train_set,
                   const windowing::LabeledDataset& val_set, const TrainConfig& config) {
  config.validate();
  if (train_set.windows.empty()) throw Error(ErrorKind::BadSpec, "training set is empty");
  if (model.train_log.empty()) model.horizon_hours = train_set.horizon_hours;
  check_horizon(train_set, model.horizon_hours, "training set");
  if (!val_set.windows.empty()) check_horizon(val_set, model.horizon_hours, "validation set");

  if (auto* gbdt = std::get_if<boosting::GbdtModel>(&model.network)) {
    *gbdt = boosting::fit(train_set, gbdt_params(model.spec));
    model.train_log.assign(gbdt->train_loss.begin() + 1, gbdt->train_loss.end());
    if (!val_set.windows.empty()) model.val_log = {dataset_loss(model, val_set, LossKind::binary_ce)};
    return model;
  }

  if ((config.loss_kind == LossKind::categorical_ce) != (model.spec.family == Family::lstm_fcn))
    throw Error(ErrorKind::BadSpec, "categorical_ce is the lstm_fcn loss and only its loss");
  fit_normalizer(model.spec, train_set);
  model.spec.hyper["learning_rate"] = config.learning_rate;
  model.spec.hyper["batch_size"] = config.batch_size;
  model.spec.hyper["loss_kind"] = static_cast<double>(config.loss_kind);
  std::visit(
      [&](auto& net) {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (!std::is_same_v<Net, boosting::GbdtModel>) run_epochs(net, model, train_set, val_set, config);
      },
      model.network);
  return model;
}

TrainedModel fine_tune(TrainedModel model, const windowing::LabeledDataset& dataset, int epochs, std::uint64_t seed) {
  if (model.horizon_hours != 1)
    throw Error(ErrorKind::HorizonMismatch, "fine-tuning starts from a 1h model, got " + std::to_string(model.horizon_hours) + "h");
  check_horizon(dataset, 4, "fine-tuning set");
  if (model.spec.family == Family::gbdt) throw Error(ErrorKind::BadSpec, "gbdt models are not fine-tuned");

  TrainConfig config = TrainConfig::defaults(model.spec.family);
  config.epochs = epochs;
  config.learning_rate = model.spec.hyper_or("learning_rate", config.learning_rate);
  config.batch_size = static_cast<int>(model.spec.hyper_or("batch_size", config.batch_size));
  config.loss_kind = static_cast<LossKind>(static_cast<int>(model.spec.hyper_or("loss_kind", static_cast<double>(config.loss_kind))));
  config.shuffle_seed = derive_seed(seed, "fine_tune");
  config.validate();
  // no-op when the 1h model already carries its input scaling
  fit_normalizer(model.spec, dataset);
  model.horizon_hours = 4;
  std::visit(
      [&](auto& net) {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (!std::is_same_v<Net, boosting::GbdtModel>) run_epochs(net, model, dataset, {}, config);
      },
      model.network);
  return model;
}

// ------------------------------------------------------------ prediction

std::vector<double> predict_batch(const TrainedModel& model, const Matrix<double>& windows, kernels::Backend backend) {
  require_shape(windows.cols() == kInputs, "windows must have 12 values");
  std::vector<double> out(windows.rows());
  if (const auto* gbdt = std::get_if<boosting::GbdtModel>(&model.network)) {
    kernels::map_indices(
        windows.rows(), [&](std::size_t i) { return open_unit(boosting::predict_gbdt(*gbdt, windows.row(i))); }, out,
        backend);
    return out;
  }
  const auto x = normalized_inputs<float>(windows, normalizer(model.spec));
  const std::size_t chunks = (x.rows() + kPredictChunk - 1) / kPredictChunk;
  std::vector<double> scratch(chunks);
  // each chunk writes its own rows of `out`; rows never interact, so chunking does not change results
  kernels::map_indices(
      chunks,
      [&](std::size_t c) {
        const std::size_t first = c * kPredictChunk;
        const std::size_t count = std::min(kPredictChunk, x.rows() - first);
        Matrix<float> xb(count, kInputs);
        std::copy_n(x.row(first).begin(), count * kInputs, xb.values().begin());
        const auto z = std::visit(
            [&](const auto& net) -> Matrix<float> {
              using Net = std::decay_t<decltype(net)>;
              if constexpr (std::is_same_v<Net, boosting::GbdtModel>) {
                return {};
              } else {
                return net.logits(xb);
              }
            },
            model.network);
        const auto p = probabilities(z);
        for (std::size_t r = 0; r < count; ++r) out[first + r] = p(r, p.cols() - 1);
        return 0.0;
      },
      scratch, backend);
  return out;
}

std::vector<double> predict_batch(const TrainedModel& model, const windowing::LabeledDataset& ds, kernels::Backend backend) {
  return predict_batch(model, boosting::feature_matrix(ds), backend);
}

std::array<double, 2> predict_classes(const TrainedModel& model, const windowing::WindowValues& window) {
  if (const auto* gbdt = std::get_if<boosting::GbdtModel>(&model.network)) {
    const double p = open_unit(boosting::predict_gbdt(*gbdt, window));
    return {1.0 - p, p};
  }
  const auto norm = normalizer(model.spec);
  Matrix<float> x(1, kInputs);
  for (std::size_t t = 0; t < kInputs; ++t) x(0, t) = static_cast<float>((window[t] - norm.mean) / norm.scale);
  const auto z = std::visit(
      [&](const auto& net) -> Matrix<float> {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (std::is_same_v<Net, boosting::GbdtModel>) {
          return {};
        } else {
          return net.logits(x);
        }
      },
      model.network);
  const auto p = probabilities(z);
  if (p.cols() == 2) return {p(0, 0), p(0, 1)};
  return {1.0 - p(0, 0), p(0, 0)};
}

double predict(const TrainedModel& model, const windowing::WindowValues& window) {
  return predict_classes(model, window)[1];
}

// --------------------------------------------------------- serialization

std::vector<std::byte> serialize(const TrainedModel& model) {
  container::Frame frame;
  frame.family = static_cast<container::FamilyTag>(model.spec.family);
  frame.horizon = static_cast<std::uint8_t>(model.horizon_hours);
  frame.spec_json = model.spec.to_json();
  std::visit(
      [&](const auto& net) {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (std::is_same_v<Net, boosting::GbdtModel>) {
          frame.payload = boosting::encode_payload(net);
        } else {
          container::ByteWriter w;
          for (const auto* m : const_cast<Net&>(net).state())
            for (float v : m->values()) w.f32(v);
          frame.payload = w.take();
        }
      },
      model.network);
  return container::write_frame(frame);
}

TrainedModel deserialize(std::span<const std::byte> bytes) {
  const auto frame = container::read_frame(bytes);
  auto spec = ModelSpec::from_json(frame.spec_json);
  if (static_cast<std::uint8_t>(spec.family) != static_cast<std::uint8_t>(frame.family))
    throw Error(ErrorKind::BadSpec, "family tag disagrees with the stored spec");
  if (spec.family == Family::gbdt) {
    TrainedModel model{spec, frame.horizon, {}, {}, boosting::decode_payload(frame.payload, gbdt_params(spec))};
    return model;
  }
  TrainedModel model = build(spec, 0);
  model.horizon_hours = frame.horizon;
  std::visit(
      [&](auto& net) {
        using Net = std::decay_t<decltype(net)>;
        if constexpr (!std::is_same_v<Net, boosting::GbdtModel>) {
          container::ByteReader r(frame.payload);
          for (auto* m : net.state())
            for (auto& v : m->values()) v = r.f32();
          if (!r.done()) throw Error(ErrorKind::ChecksumMismatch, "payload longer than the spec's parameters");
        }
      },
      model.network);
  return model;
}

}  // namespace pulsegate::models
