#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/matrix.hpp"
#include "pulsegate/random.hpp"

namespace pulsegate::nn {

enum class Activation { relu, tanh, sigmoid, linear };
enum class Mode { train, infer };
enum class LossKind { mse, binary_ce, categorical_ce };
enum class ReturnMode { last_state, full_sequence };

/// Trainable tensor with its gradient and Adam moments.
template <typename T>
struct ParamBlock {
  std::string name;
  Matrix<T> value, grad, adam_m, adam_v;
  std::int64_t step_count = 0;

  ParamBlock() = default;
  ParamBlock(std::string block_name, std::size_t rows, std::size_t cols)
      : name(std::move(block_name)), value(rows, cols), grad(rows, cols), adam_m(rows, cols), adam_v(rows, cols) {}

  void zero_grad() { grad.fill(T{0}); }
};

/// One sample's (timesteps x channels) sequence, time-major.
template <typename T>
struct SequenceTensor {
  std::size_t timesteps = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  SequenceTensor() = default;
  SequenceTensor(std::size_t t, std::size_t c, std::vector<T> values = {})
      : timesteps(t), channels(c), data(values.empty() ? std::vector<T>(t * c) : std::move(values)) {
    require_shape(data.size() == t * c, "sequence tensor size");
  }
  T& at(std::size_t t, std::size_t c) { return data[t * channels + c]; }
  const T& at(std::size_t t, std::size_t c) const { return data[t * channels + c]; }
  bool operator==(const SequenceTensor&) const = default;
};

/// A mini-batch of sequences: one (batch x channels) matrix per timestep.
template <typename T>
using SequenceBatch = std::vector<Matrix<T>>;

/// (batch x timesteps) univariate windows -> timesteps steps of (batch x 1).
template <typename T>
SequenceBatch<T> to_sequence_batch(const Matrix<T>& windows);

/// Transposes time and channel axes: (T, C) -> (C, T).
template <typename T>
SequenceTensor<T> dimension_shuffle(const SequenceTensor<T>& x);
/// Batched form: T steps of (B x C) -> C steps of (B x T).
template <typename T>
SequenceBatch<T> dimension_shuffle(const SequenceBatch<T>& x);

template <typename T>
T activate(Activation act, T z);
/// Derivative expressed through the activation's output.
template <typename T>
T activation_grad_from_output(Activation act, T y);

template <typename T>
void glorot_uniform(Matrix<T>& m, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// ---------------------------------------------------------------- dense

template <typename T>
struct DenseCache {
  Matrix<T> input;
  Matrix<T> output;
};

/// y = act(x W + b) over a (batch x in) input.
template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, Activation act);

  Matrix<T> forward(const Matrix<T>& x, DenseCache<T>* cache = nullptr) const;
  /// Accumulates into weight.grad / bias.grad and returns dL/dx.
  Matrix<T> backward(const DenseCache<T>& cache, const Matrix<T>& upstream);

  std::size_t input_size() const { return weight.value.rows(); }
  std::size_t output_size() const { return weight.value.cols(); }

  ParamBlock<T> weight;  // in x out
  ParamBlock<T> bias;    // 1 x out
  Activation activation = Activation::linear;
};

// ---------------------------------------------------------------- lstm

template <typename T>
struct LstmCache {
  ReturnMode mode = ReturnMode::full_sequence;
  SequenceBatch<T> inputs;
  SequenceBatch<T> hidden;  // h_t
  SequenceBatch<T> cell;    // c_t
  SequenceBatch<T> gates;   // activated [i | f | g | o], batch x 4h
  SequenceBatch<T> tanh_cell;
};

/// Standard LSTM: sigmoid input/forget/output gates, tanh candidate and
/// output nonlinearity, zero initial state. Gate columns are laid out
/// [input | forget | candidate | output], each `hidden` wide.
template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(const std::string& name, std::size_t input_size, std::size_t hidden);

  /// full_sequence returns h_1..h_T; last_state returns {h_T}.
  SequenceBatch<T> forward(const SequenceBatch<T>& x, ReturnMode mode, LstmCache<T>* cache = nullptr) const;
  /// Full BPTT. `upstream` matches the forward output (one entry for last_state).
  SequenceBatch<T> backward(const LstmCache<T>& cache, const SequenceBatch<T>& upstream);

  std::size_t input_size() const { return kernel.value.rows(); }
  std::size_t hidden_size() const { return recurrent.value.rows(); }

  ParamBlock<T> kernel;     // in x 4h
  ParamBlock<T> recurrent;  // h x 4h
  ParamBlock<T> bias;       // 1 x 4h
};

// ---------------------------------------------------------------- conv1d

template <typename T>
struct Conv1dCache {
  SequenceBatch<T> input;
};

/// Unpadded temporal convolution. Weight rows are indexed k * in_channels + c.
template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(const std::string& name, std::size_t in_channels, std::size_t filters, std::size_t kernel,
         std::size_t stride);

  /// floor((timesteps - kernel) / stride) + 1; throws Error{KernelTooLarge}.
  static std::size_t output_length(std::size_t timesteps, std::size_t kernel, std::size_t stride);

  SequenceBatch<T> forward(const SequenceBatch<T>& x, Conv1dCache<T>* cache = nullptr) const;
  SequenceBatch<T> backward(const Conv1dCache<T>& cache, const SequenceBatch<T>& upstream);

  std::size_t kernel_width() const { return kernel_; }
  std::size_t stride() const { return stride_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t filters() const { return weight.value.cols(); }

  ParamBlock<T> weight;  // (kernel * in) x filters
  ParamBlock<T> bias;    // 1 x filters

 private:
  std::size_t in_channels_ = 0;
  std::size_t kernel_ = 1;
  std::size_t stride_ = 1;
};

// ---------------------------------------------------------------- batchnorm

template <typename T>
struct BatchNormCache {
  SequenceBatch<T> normalized;
  std::vector<T> inv_std;
  std::size_t count = 0;
};

/// Per-channel normalization over batch and time. Train mode uses batch
/// statistics (population variance) and updates the running statistics
/// as running <- momentum * running + (1 - momentum) * batch.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels, T momentum = T(0.99), T epsilon = T(0.001));

  /// Throws Error{DegenerateBatch} in train mode with fewer than 2 values per channel.
  SequenceBatch<T> forward(const SequenceBatch<T>& x, Mode mode, BatchNormCache<T>* cache = nullptr);
  SequenceBatch<T> infer(const SequenceBatch<T>& x) const;
  SequenceBatch<T> backward(const BatchNormCache<T>& cache, const SequenceBatch<T>& upstream);

  ParamBlock<T> gamma;  // 1 x C
  ParamBlock<T> beta;   // 1 x C
  Matrix<T> running_mean;
  Matrix<T> running_var;
  T momentum = T(0.99);
  T epsilon = T(0.001);
};

// ---------------------------------------------------------------- stateless ops

/// Inverted dropout. `mask` receives the per-element scale (0 or 1/(1-rate)).
template <typename T>
Matrix<T> dropout(const Matrix<T>& x, T rate, Mode mode, Rng* rng, Matrix<T>* mask = nullptr);

template <typename T>
std::vector<T> global_avg_pool(const SequenceTensor<T>& x);
template <typename T>
Matrix<T> global_avg_pool(const SequenceBatch<T>& x);
template <typename T>
SequenceBatch<T> global_avg_pool_backward(const Matrix<T>& upstream, std::size_t timesteps);

/// Row-wise max-subtracted softmax.
template <typename T>
Matrix<T> softmax(const Matrix<T>& logits);
template <typename T>
std::vector<T> softmax(std::span<const T> logits);
template <typename T>
Matrix<T> softmax_backward(const Matrix<T>& probs, const Matrix<T>& upstream);

/// Column-wise concatenation of equal-height blocks, and its inverse.
template <typename T>
Matrix<T> concat_cols(const std::vector<const Matrix<T>*>& blocks);
template <typename T>
std::vector<Matrix<T>> split_cols(const Matrix<T>& m, const std::vector<std::size_t>& widths);

template <typename T>
struct LossResult {
  T value{};
  Matrix<T> grad;  // dL/dprediction
};

inline constexpr double kProbabilityClamp = 1e-12;

/// Mean over the batch (rows). mse additionally averages over columns.
/// Cross-entropy predictions are clamped to [1e-12, 1 - 1e-12].
template <typename T>
LossResult<T> compute_loss(LossKind kind, const Matrix<T>& prediction, const Matrix<T>& target);

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update; zeroes the gradient afterwards.
template <typename T>
void adam_step(ParamBlock<T>& block, const AdamConfig& config);

template <typename T>
struct GradientProbe {
  std::span<T> values;
  std::span<const T> analytic;
};

/// Central differences of `loss` around every probed value. Returns the worst
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename T>
double finite_difference_check(const std::function<T()>& loss, std::span<const GradientProbe<T>> probes,
                               T h = T(1e-5));

}  // namespace pulsegate::nn
