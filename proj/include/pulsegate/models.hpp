#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pulsegate/boosting.hpp"
#include "pulsegate/kernels.hpp"
#include "pulsegate/matrix.hpp"
#include "pulsegate/nncore.hpp"
#include "pulsegate/windowing.hpp"

namespace pulsegate::models {

enum class Family : std::uint8_t { mlp = 0, lstm = 1, lstm_fcn = 2, gbdt = 3 };

std::string_view to_string(Family family) noexcept;
/// Throws BadSpec.
Family family_from_string(std::string_view name);

/// Architecture descriptor. layer_widths per family:
///   mlp       three hidden widths
///   lstm      three LSTM widths, then the dense width
///   lstm_fcn  LSTM units, then the three conv filter counts
///   gbdt      empty (parameters live in hyper)
struct ModelSpec {
  Family family = Family::mlp;
  std::vector<int> layer_widths;
  std::map<std::string, double> hyper;

  /// Throws BadSpec.
  void validate() const;
  double hyper_or(const std::string& key, double fallback) const;
  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);
  bool operator==(const ModelSpec&) const = default;
};

ModelSpec reference_spec(Family family);
boosting::GbdtParams gbdt_params(const ModelSpec& spec);
ModelSpec gbdt_spec(const boosting::GbdtParams& params);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 0.001;
  nn::LossKind loss_kind = nn::LossKind::mse;
  std::uint64_t shuffle_seed = 0;

  void validate() const;
  /// mlp: mse, 390 epochs; lstm: bce, 190; lstm_fcn: categorical CE, 300.
  static TrainConfig defaults(Family family);
};

int default_fine_tune_epochs(Family family);

// ---------------------------------------------------------------------------
// Networks. Each exposes its trainable blocks and its full stored state in a
// fixed order; the state order is the model file's payload order.

template <typename T>
class MlpNetwork {
 public:
  MlpNetwork() = default;
  MlpNetwork(const ModelSpec& spec, Rng& rng);

  /// Rows of x are normalized windows; returns one logit per row.
  Matrix<T> logits(const Matrix<T>& x) const;
  /// Accumulates gradients for one mini-batch and returns its loss.
  T accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, nn::LossKind loss, Rng& rng);

  std::vector<nn::ParamBlock<T>*> parameters();
  std::vector<Matrix<T>*> state();

  nn::Dense<T> hidden1, hidden2, hidden3, output;
};

template <typename T>
class LstmNetwork {
 public:
  LstmNetwork() = default;
  LstmNetwork(const ModelSpec& spec, Rng& rng);

  Matrix<T> logits(const Matrix<T>& x) const;
  T accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, nn::LossKind loss, Rng& rng);

  std::vector<nn::ParamBlock<T>*> parameters();
  std::vector<Matrix<T>*> state();

  nn::Lstm<T> lstm1, lstm2, lstm3;
  nn::Dense<T> dense, output;
};

template <typename T>
class LstmFcnNetwork {
 public:
  LstmFcnNetwork() = default;
  LstmFcnNetwork(const ModelSpec& spec, Rng& rng);

  /// Two logits per row: column 0 non-sepsis, column 1 sepsis.
  Matrix<T> logits(const Matrix<T>& x) const;
  T accumulate_gradients(const Matrix<T>& x, const Matrix<T>& target, nn::LossKind loss, Rng& rng);

  std::vector<nn::ParamBlock<T>*> parameters();
  /// Trainable blocks first, then running mean/var of the three norms.
  std::vector<Matrix<T>*> state();

  struct ConvBlock {
    nn::Conv1d<T> conv;
    nn::BatchNorm<T> norm;
  };

  nn::Lstm<T> lstm;
  T dropout_rate = T(0.4);
  std::vector<ConvBlock> blocks;
  nn::Dense<T> head;
};

using Network = std::variant<MlpNetwork<float>, LstmNetwork<float>, LstmFcnNetwork<float>, boosting::GbdtModel>;

struct TrainedModel {
  ModelSpec spec;
  int horizon_hours = 1;
  std::vector<double> train_log;  // per-epoch mean training loss (per tree for gbdt)
  std::vector<double> val_log;
  Network network;

  /// Stored values: weights, biases and batch-norm statistics.
  std::size_t parameter_count() const;
  std::size_t trainable_parameter_count() const;
};

/// Builders throw BadSpec when the spec does not fit the family.
TrainedModel build_mlp(const ModelSpec& spec, std::uint64_t seed = 0);
TrainedModel build_lstm(const ModelSpec& spec, std::uint64_t seed = 0);
TrainedModel build_lstm_fcn(const ModelSpec& spec, std::uint64_t seed = 0);
TrainedModel build(const ModelSpec& spec, std::uint64_t seed = 0);

/// Trains in place on copies; throws NonFiniteLoss, HorizonMismatch, BadSpec.
TrainedModel train(TrainedModel model, const windowing::LabeledDataset& train_set,
                   const windowing::LabeledDataset& val_set, const TrainConfig& config);
/// Continues training a 1-hour model on a 4-hour dataset. Throws HorizonMismatch.
TrainedModel fine_tune(TrainedModel model, const windowing::LabeledDataset& dataset, int epochs,
                       std::uint64_t seed = 0);

double predict(const TrainedModel& model, const windowing::WindowValues& window);
/// Both class probabilities (non-sepsis, sepsis).
std::array<double, 2> predict_classes(const TrainedModel& model, const windowing::WindowValues& window);
std::vector<double> predict_batch(const TrainedModel& model, const windowing::LabeledDataset& ds,
                                  kernels::Backend backend = kernels::Backend::automatic);
std::vector<double> predict_batch(const TrainedModel& model, const Matrix<double>& windows,
                                  kernels::Backend backend = kernels::Backend::automatic);

/// Mean loss of the model's training objective over a dataset, in inference mode.
double dataset_loss(const TrainedModel& model, const windowing::LabeledDataset& ds, nn::LossKind loss);

std::vector<std::byte> serialize(const TrainedModel& model);
/// Throws BadMagic, VersionMismatch, ChecksumMismatch, BadSpec.
TrainedModel deserialize(std::span<const std::byte> bytes);

}  // namespace pulsegate::models
