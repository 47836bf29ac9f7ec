#include "pulsegate/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pulsegate/error.hpp"
#include "pulsegate/kernels.hpp"

namespace pulsegate::nn {

using kernels::Trans;

namespace {

template <typename T>
T sigmoid(T z) {
  return z >= T{0} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
}

template <typename T>
void add_row_broadcast(Matrix<T>& m, const Matrix<T>& row) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto dst = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] += row(0, c);
  }
}

template <typename T>
void accumulate_column_sums(Matrix<T>& acc, const Matrix<T>& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) acc(0, c) += src[c];
  }
}

}  // namespace

template <typename T>
SequenceBatch<T> to_sequence_batch(const Matrix<T>& windows) {
  SequenceBatch<T> out(windows.cols(), Matrix<T>(windows.rows(), 1));
  for (std::size_t b = 0; b < windows.rows(); ++b) {
    for (std::size_t t = 0; t < windows.cols(); ++t) out[t](b, 0) = windows(b, t);
  }
  return out;
}

template <typename T>
SequenceTensor<T> dimension_shuffle(const SequenceTensor<T>& x) {
  SequenceTensor<T> out(x.channels, x.timesteps);
  for (std::size_t t = 0; t < x.timesteps; ++t) {
    for (std::size_t c = 0; c < x.channels; ++c) out.at(c, t) = x.at(t, c);
  }
  return out;
}

template <typename T>
SequenceBatch<T> dimension_shuffle(const SequenceBatch<T>& x) {
  if (x.empty()) return {};
  const std::size_t steps = x.size();
  const std::size_t batch = x[0].rows();
  const std::size_t channels = x[0].cols();
  SequenceBatch<T> out(channels, Matrix<T>(batch, steps));
  for (std::size_t t = 0; t < steps; ++t) {
    require_shape(x[t].rows() == batch && x[t].cols() == channels, "ragged sequence batch");
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) out[c](b, t) = x[t](b, c);
    }
  }
  return out;
}

template <typename T>
T activate(Activation act, T z) {
  switch (act) {
    case Activation::relu: return z > T{0} ? z : T{0};
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return sigmoid(z);
    case Activation::linear: return z;
  }
  return z;
}

template <typename T>
T activation_grad_from_output(Activation act, T y) {
  switch (act) {
    case Activation::relu: return y > T{0} ? T{1} : T{0};
    case Activation::tanh: return T{1} - y * y;
    case Activation::sigmoid: return y * (T{1} - y);
    case Activation::linear: return T{1};
  }
  return T{1};
}

template <typename T>
void glorot_uniform(Matrix<T>& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : m.values()) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------- dense

template <typename T>
Dense<T>::Dense(const std::string& name, std::size_t in, std::size_t out, Activation act)
    : weight(name + ".weight", in, out), bias(name + ".bias", 1, out), activation(act) {}

template <typename T>
Matrix<T> Dense<T>::forward(const Matrix<T>& x, DenseCache<T>* cache) const {
  require_shape(x.cols() == input_size(), "dense input width");
  Matrix<T> y(x.rows(), output_size());
  add_row_broadcast(y, bias.value);
  kernels::gemm<T>(x.view(), Trans::no, weight.value.view(), Trans::no, y.view());
  for (auto& v : y.values()) v = activate(activation, v);
  if (cache) {
    cache->input = x;
    cache->output = y;
  }
  return y;
}

template <typename T>
Matrix<T> Dense<T>::backward(const DenseCache<T>& cache, const Matrix<T>& upstream) {
  require_shape(upstream.same_shape(cache.output), "dense upstream gradient");
  Matrix<T> dz = upstream;
  const auto y = cache.output.values();
  auto d = dz.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= activation_grad_from_output(activation, y[i]);

  kernels::gemm<T>(cache.input.view(), Trans::yes, dz.view(), Trans::no, weight.grad.view());
  accumulate_column_sums(bias.grad, dz);
  Matrix<T> dx(cache.input.rows(), input_size());
  kernels::gemm<T>(dz.view(), Trans::no, weight.value.view(), Trans::yes, dx.view());
  return dx;
}

// ---------------------------------------------------------------- lstm

template <typename T>
Lstm<T>::Lstm(const std::string& name, std::size_t input_size, std::size_t hidden)
    : kernel(name + ".kernel", input_size, 4 * hidden),
      recurrent(name + ".recurrent", hidden, 4 * hidden),
      bias(name + ".bias", 1, 4 * hidden) {}

template <typename T>
SequenceBatch<T> Lstm<T>::forward(const SequenceBatch<T>& x, ReturnMode mode, LstmCache<T>* cache) const {
  require_shape(!x.empty(), "lstm needs at least one timestep");
  const std::size_t batch = x[0].rows();
  const std::size_t h = hidden_size();
  Matrix<T> h_prev(batch, h);
  Matrix<T> c_prev(batch, h);

  if (cache) {
    *cache = LstmCache<T>{};
    cache->mode = mode;
    cache->inputs = x;
  }
  SequenceBatch<T> outputs;
  for (std::size_t t = 0; t < x.size(); ++t) {
    require_shape(x[t].rows() == batch && x[t].cols() == input_size(), "lstm input shape");
    Matrix<T> z(batch, 4 * h);
    add_row_broadcast(z, bias.value);
    kernels::gemm<T>(x[t].view(), Trans::no, kernel.value.view(), Trans::no, z.view());
    if (t > 0) kernels::gemm<T>(h_prev.view(), Trans::no, recurrent.value.view(), Trans::no, z.view());

    Matrix<T> c(batch, h);
    Matrix<T> tc(batch, h);
    Matrix<T> hh(batch, h);
    for (std::size_t b = 0; b < batch; ++b) {
      auto g = z.row(b);
      for (std::size_t j = 0; j < h; ++j) {
        g[j] = sigmoid(g[j]);
        g[h + j] = sigmoid(g[h + j]);
        g[2 * h + j] = std::tanh(g[2 * h + j]);
        g[3 * h + j] = sigmoid(g[3 * h + j]);
        c(b, j) = g[h + j] * c_prev(b, j) + g[j] * g[2 * h + j];
        tc(b, j) = std::tanh(c(b, j));
        hh(b, j) = g[3 * h + j] * tc(b, j);
      }
    }
    if (mode == ReturnMode::full_sequence) outputs.push_back(hh);
    if (cache) {
      cache->gates.push_back(std::move(z));
      cache->cell.push_back(c);
      cache->tanh_cell.push_back(std::move(tc));
      cache->hidden.push_back(hh);
    }
    h_prev = std::move(hh);
    c_prev = std::move(c);
  }
  if (mode == ReturnMode::last_state) outputs.push_back(std::move(h_prev));
  return outputs;
}

template <typename T>
SequenceBatch<T> Lstm<T>::backward(const LstmCache<T>& cache, const SequenceBatch<T>& upstream) {
  const std::size_t steps = cache.inputs.size();
  require_shape(steps > 0 && cache.gates.size() == steps, "lstm cache");
  const std::size_t expected = cache.mode == ReturnMode::full_sequence ? steps : 1;
  require_shape(upstream.size() == expected, "lstm upstream length");
  const std::size_t batch = cache.inputs[0].rows();
  const std::size_t h = hidden_size();

  SequenceBatch<T> dx(steps);
  Matrix<T> dh_next(batch, h);
  Matrix<T> dc_next(batch, h);
  for (std::size_t t = steps; t-- > 0;) {
    Matrix<T> dh = dh_next;
    const Matrix<T>* up = nullptr;
    if (cache.mode == ReturnMode::full_sequence) {
      up = &upstream[t];
    } else if (t == steps - 1) {
      up = &upstream[0];
    }
    if (up) {
      require_shape(up->rows() == batch && up->cols() == h, "lstm upstream shape");
      auto d = dh.values();
      const auto u = up->values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += u[i];
    }

    const Matrix<T>& gates = cache.gates[t];
    const Matrix<T>& tc = cache.tanh_cell[t];
    Matrix<T> dz(batch, 4 * h);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto g = gates.row(b);
      auto d = dz.row(b);
      for (std::size_t j = 0; j < h; ++j) {
        const T i_g = g[j], f_g = g[h + j], c_g = g[2 * h + j], o_g = g[3 * h + j];
        const T c_prev = t > 0 ? cache.cell[t - 1](b, j) : T{0};
        const T d_o = dh(b, j) * tc(b, j);
        const T dc = dh(b, j) * o_g * (T{1} - tc(b, j) * tc(b, j)) + dc_next(b, j);
        d[j] = dc * c_g * i_g * (T{1} - i_g);
        d[h + j] = dc * c_prev * f_g * (T{1} - f_g);
        d[2 * h + j] = dc * i_g * (T{1} - c_g * c_g);
        d[3 * h + j] = d_o * o_g * (T{1} - o_g);
        dc_next(b, j) = dc * f_g;
      }
    }

    kernels::gemm<T>(cache.inputs[t].view(), Trans::yes, dz.view(), Trans::no, kernel.grad.view());
    accumulate_column_sums(bias.grad, dz);
    dx[t] = Matrix<T>(batch, input_size());
    kernels::gemm<T>(dz.view(), Trans::no, kernel.value.view(), Trans::yes, dx[t].view());
    dh_next = Matrix<T>(batch, h);
    if (t > 0) {
      kernels::gemm<T>(cache.hidden[t - 1].view(), Trans::yes, dz.view(), Trans::no, recurrent.grad.view());
      kernels::gemm<T>(dz.view(), Trans::no, recurrent.value.view(), Trans::yes, dh_next.view());
    }
  }
  return dx;
}

// ---------------------------------------------------------------- conv1d

template <typename T>
Conv1d<T>::Conv1d(const std::string& name, std::size_t in_channels, std::size_t filters, std::size_t kernel,
                  std::size_t stride)
    : weight(name + ".weight", kernel * in_channels, filters),
      bias(name + ".bias", 1, filters),
      in_channels_(in_channels),
      kernel_(kernel),
      stride_(stride) {
  if (kernel == 0 || stride == 0 || in_channels == 0 || filters == 0) {
    throw Error(ErrorKind::BadSpec, "conv1d dimensions must be positive");
  }
}

template <typename T>
std::size_t Conv1d<T>::output_length(std::size_t timesteps, std::size_t kernel, std::size_t stride) {
  if (kernel > timesteps) {
    throw Error(ErrorKind::KernelTooLarge,
                "kernel " + std::to_string(kernel) + " exceeds " + std::to_string(timesteps) + " timesteps");
  }
  return (timesteps - kernel) / stride + 1;
}

template <typename T>
SequenceBatch<T> Conv1d<T>::forward(const SequenceBatch<T>& x, Conv1dCache<T>* cache) const {
  const std::size_t out_len = output_length(x.size(), kernel_, stride_);
  const std::size_t batch = x[0].rows();
  SequenceBatch<T> y(out_len, Matrix<T>(batch, filters()));
  for (std::size_t p = 0; p < out_len; ++p) {
    add_row_broadcast(y[p], bias.value);
    for (std::size_t k = 0; k < kernel_; ++k) {
      const Matrix<T>& xt = x[p * stride_ + k];
      require_shape(xt.rows() == batch && xt.cols() == in_channels_, "conv1d input shape");
      kernels::gemm<T>(xt.view(), Trans::no, weight.value.row_block(k * in_channels_, in_channels_), Trans::no,
                       y[p].view());
    }
  }
  if (cache) cache->input = x;
  return y;
}

template <typename T>
SequenceBatch<T> Conv1d<T>::backward(const Conv1dCache<T>& cache, const SequenceBatch<T>& upstream) {
  const auto& x = cache.input;
  const std::size_t out_len = output_length(x.size(), kernel_, stride_);
  require_shape(upstream.size() == out_len, "conv1d upstream length");
  const std::size_t batch = x[0].rows();
  SequenceBatch<T> dx(x.size(), Matrix<T>(batch, in_channels_));
  for (std::size_t p = 0; p < out_len; ++p) {
    require_shape(upstream[p].rows() == batch && upstream[p].cols() == filters(), "conv1d upstream shape");
    accumulate_column_sums(bias.grad, upstream[p]);
    for (std::size_t k = 0; k < kernel_; ++k) {
      const std::size_t t = p * stride_ + k;
      kernels::gemm<T>(x[t].view(), Trans::yes, upstream[p].view(), Trans::no,
                       weight.grad.row_block(k * in_channels_, in_channels_));
      kernels::gemm<T>(upstream[p].view(), Trans::no, weight.value.row_block(k * in_channels_, in_channels_),
                       Trans::yes, dx[t].view());
    }
  }
  return dx;
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
BatchNorm<T>::BatchNorm(const std::string& name, std::size_t channels, T mom, T eps)
    : gamma(name + ".gamma", 1, channels),
      beta(name + ".beta", 1, channels),
      running_mean(1, channels, T{0}),
      running_var(1, channels, T{1}),
      momentum(mom),
      epsilon(eps) {
  gamma.value.fill(T{1});
}

template <typename T>
SequenceBatch<T> BatchNorm<T>::forward(const SequenceBatch<T>& x, Mode mode, BatchNormCache<T>* cache) {
  if (mode == Mode::infer) return infer(x);
  const std::size_t channels = gamma.value.cols();
  const std::size_t batch = x.empty() ? 0 : x[0].rows();
  const std::size_t count = batch * x.size();
  if (count < 2) throw Error(ErrorKind::DegenerateBatch, "train-mode batch normalization needs >= 2 values");

  std::vector<T> mean(channels, T{0});
  std::vector<T> var(channels, T{0});
  for (const auto& step : x) {
    require_shape(step.rows() == batch && step.cols() == channels, "batchnorm input shape");
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) mean[c] += step(b, c);
    }
  }
  for (auto& m : mean) m /= static_cast<T>(count);
  for (const auto& step : x) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T d = step(b, c) - mean[c];
        var[c] += d * d;
      }
    }
  }
  for (auto& v : var) v /= static_cast<T>(count);

  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = T{1} / std::sqrt(var[c] + epsilon);

  SequenceBatch<T> normalized(x.size(), Matrix<T>(batch, channels));
  SequenceBatch<T> y(x.size(), Matrix<T>(batch, channels));
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T n = (x[t](b, c) - mean[c]) * inv_std[c];
        normalized[t](b, c) = n;
        y[t](b, c) = gamma.value(0, c) * n + beta.value(0, c);
      }
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    running_mean(0, c) = momentum * running_mean(0, c) + (T{1} - momentum) * mean[c];
    running_var(0, c) = momentum * running_var(0, c) + (T{1} - momentum) * var[c];
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->count = count;
  }
  return y;
}

template <typename T>
SequenceBatch<T> BatchNorm<T>::infer(const SequenceBatch<T>& x) const {
  const std::size_t channels = gamma.value.cols();
  SequenceBatch<T> y;
  y.reserve(x.size());
  for (const auto& step : x) {
    require_shape(step.cols() == channels, "batchnorm input shape");
    Matrix<T> out(step.rows(), channels);
    for (std::size_t b = 0; b < step.rows(); ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        out(b, c) = gamma.value(0, c) * (step(b, c) - running_mean(0, c)) / std::sqrt(running_var(0, c) + epsilon) +
                    beta.value(0, c);
      }
    }
    y.push_back(std::move(out));
  }
  return y;
}

template <typename T>
SequenceBatch<T> BatchNorm<T>::backward(const BatchNormCache<T>& cache, const SequenceBatch<T>& upstream) {
  const std::size_t channels = gamma.value.cols();
  require_shape(upstream.size() == cache.normalized.size(), "batchnorm upstream length");
  const T n = static_cast<T>(cache.count);
  std::vector<T> sum_dxhat(channels, T{0});
  std::vector<T> sum_dxhat_xhat(channels, T{0});
  for (std::size_t t = 0; t < upstream.size(); ++t) {
    require_shape(upstream[t].same_shape(cache.normalized[t]), "batchnorm upstream shape");
    for (std::size_t b = 0; b < upstream[t].rows(); ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T dy = upstream[t](b, c);
        const T xhat = cache.normalized[t](b, c);
        gamma.grad(0, c) += dy * xhat;
        beta.grad(0, c) += dy;
        const T dxhat = dy * gamma.value(0, c);
        sum_dxhat[c] += dxhat;
        sum_dxhat_xhat[c] += dxhat * xhat;
      }
    }
  }
  SequenceBatch<T> dx(upstream.size());
  for (std::size_t t = 0; t < upstream.size(); ++t) {
    dx[t] = Matrix<T>(upstream[t].rows(), channels);
    for (std::size_t b = 0; b < upstream[t].rows(); ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T dxhat = upstream[t](b, c) * gamma.value(0, c);
        const T xhat = cache.normalized[t](b, c);
        dx[t](b, c) = cache.inv_std[c] / n * (n * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- stateless ops

template <typename T>
Matrix<T> dropout(const Matrix<T>& x, T rate, Mode mode, Rng* rng, Matrix<T>* mask) {
  if (!(rate >= T{0} && rate < T{1})) throw Error(ErrorKind::BadSpec, "dropout rate must lie in [0,1)");
  if (mode == Mode::infer || rate == T{0}) {
    if (mask) *mask = Matrix<T>(x.rows(), x.cols(), T{1});
    return x;
  }
  if (!rng) throw Error(ErrorKind::BadSpec, "train-mode dropout needs a random stream");
  Matrix<T> m(x.rows(), x.cols());
  const T keep_scale = T{1} / (T{1} - rate);
  std::bernoulli_distribution drop(static_cast<double>(rate));
  for (auto& v : m.values()) v = drop(*rng) ? T{0} : keep_scale;
  Matrix<T> y = x;
  auto yv = y.values();
  const auto mv = m.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] *= mv[i];
  if (mask) *mask = std::move(m);
  return y;
}

template <typename T>
std::vector<T> global_avg_pool(const SequenceTensor<T>& x) {
  require_shape(x.timesteps >= 1, "pooling needs at least one timestep");
  std::vector<T> out(x.channels, T{0});
  for (std::size_t t = 0; t < x.timesteps; ++t) {
    for (std::size_t c = 0; c < x.channels; ++c) out[c] += x.at(t, c);
  }
  for (auto& v : out) v /= static_cast<T>(x.timesteps);
  return out;
}

template <typename T>
Matrix<T> global_avg_pool(const SequenceBatch<T>& x) {
  require_shape(!x.empty(), "pooling needs at least one timestep");
  Matrix<T> out(x[0].rows(), x[0].cols());
  for (const auto& step : x) {
    require_shape(step.same_shape(out), "pooling input shape");
    auto o = out.values();
    const auto s = step.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += s[i];
  }
  for (auto& v : out.values()) v /= static_cast<T>(x.size());
  return out;
}

template <typename T>
SequenceBatch<T> global_avg_pool_backward(const Matrix<T>& upstream, std::size_t timesteps) {
  Matrix<T> share = upstream;
  for (auto& v : share.values()) v /= static_cast<T>(timesteps);
  return SequenceBatch<T>(timesteps, share);
}

template <typename T>
Matrix<T> softmax(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto p = softmax<T>(logits.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.size());
  if (logits.empty()) return out;
  const T max = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

template <typename T>
Matrix<T> softmax_backward(const Matrix<T>& probs, const Matrix<T>& upstream) {
  require_shape(probs.same_shape(upstream), "softmax upstream shape");
  Matrix<T> dz(probs.rows(), probs.cols());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    T dot{0};
    for (std::size_t c = 0; c < probs.cols(); ++c) dot += upstream(r, c) * probs(r, c);
    for (std::size_t c = 0; c < probs.cols(); ++c) dz(r, c) = probs(r, c) * (upstream(r, c) - dot);
  }
  return dz;
}

template <typename T>
Matrix<T> concat_cols(const std::vector<const Matrix<T>*>& blocks) {
  require_shape(!blocks.empty(), "concat needs blocks");
  const std::size_t rows = blocks[0]->rows();
  std::size_t cols = 0;
  for (const auto* b : blocks) {
    require_shape(b->rows() == rows, "concat row mismatch");
    cols += b->cols();
  }
  Matrix<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row(r).begin();
    for (const auto* b : blocks) dst = std::copy(b->row(r).begin(), b->row(r).end(), dst);
  }
  return out;
}

template <typename T>
std::vector<Matrix<T>> split_cols(const Matrix<T>& m, const std::vector<std::size_t>& widths) {
  require_shape(std::accumulate(widths.begin(), widths.end(), std::size_t{0}) == m.cols(), "split widths");
  std::vector<Matrix<T>> out;
  std::size_t offset = 0;
  for (std::size_t w : widths) {
    Matrix<T> part(m.rows(), w);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto src = m.row(r).subspan(offset, w);
      std::copy(src.begin(), src.end(), part.row(r).begin());
    }
    out.push_back(std::move(part));
    offset += w;
  }
  return out;
}

template <typename T>
LossResult<T> compute_loss(LossKind kind, const Matrix<T>& prediction, const Matrix<T>& target) {
  require_shape(prediction.same_shape(target) && prediction.rows() > 0, "loss operand shapes");
  LossResult<T> out;
  out.grad = Matrix<T>(prediction.rows(), prediction.cols());
  const auto p = prediction.values();
  const auto y = target.values();
  auto g = out.grad.values();
  const T batch = static_cast<T>(prediction.rows());
  // 1 - 1e-12 rounds to 1 in float
  const T lo = std::max(static_cast<T>(kProbabilityClamp), std::numeric_limits<T>::epsilon());
  const T hi = T{1} - lo;
  T total{0};
  switch (kind) {
    case LossKind::mse: {
      const T n = static_cast<T>(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - y[i];
        total += d * d;
        g[i] = T{2} * d / n;
      }
      out.value = total / n;
      return out;
    }
    case LossKind::binary_ce: {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T pc = std::clamp(p[i], lo, hi);
        total -= y[i] * std::log(pc) + (T{1} - y[i]) * std::log(T{1} - pc);
        g[i] = (-y[i] / pc + (T{1} - y[i]) / (T{1} - pc)) / batch;
      }
      out.value = total / batch;
      return out;
    }
    case LossKind::categorical_ce: {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T pc = std::clamp(p[i], lo, hi);
        total -= y[i] * std::log(pc);
        g[i] = -y[i] / pc / batch;
      }
      out.value = total / batch;
      return out;
    }
  }
  return out;
}

template <typename T>
void adam_step(ParamBlock<T>& block, const AdamConfig& config) {
  ++block.step_count;
  const double t = static_cast<double>(block.step_count);
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(config.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(config.beta2, t));
  const T lr = static_cast<T>(config.learning_rate);
  const T eps = static_cast<T>(config.epsilon);
  auto w = block.value.values();
  auto g = block.grad.values();
  auto m = block.adam_m.values();
  auto v = block.adam_v.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * g[i];
    v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
    const T m_hat = m[i] / correction1;
    const T v_hat = v[i] / correction2;
    w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    g[i] = T{0};
  }
}

template <typename T>
double finite_difference_check(const std::function<T()>& loss, std::span<const GradientProbe<T>> probes, T h) {
  double worst = 0.0;
  for (const auto& probe : probes) {
    require_shape(probe.values.size() == probe.analytic.size(), "gradient probe sizes");
    for (std::size_t i = 0; i < probe.values.size(); ++i) {
      const T saved = probe.values[i];
      probe.values[i] = saved + h;
      const T up = loss();
      probe.values[i] = saved - h;
      const T down = loss();
      probe.values[i] = saved;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(h));
      const double analytic = static_cast<double>(probe.analytic[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

#define PULSEGATE_NN_INSTANTIATE(T)                                                                          \
  template SequenceBatch<T> to_sequence_batch<T>(const Matrix<T>&);                                          \
  template SequenceTensor<T> dimension_shuffle<T>(const SequenceTensor<T>&);                                 \
  template SequenceBatch<T> dimension_shuffle<T>(const SequenceBatch<T>&);                                   \
  template T activate<T>(Activation, T);                                                                     \
  template T activation_grad_from_output<T>(Activation, T);                                                  \
  template void glorot_uniform<T>(Matrix<T>&, std::size_t, std::size_t, Rng&);                               \
  template class Dense<T>;                                                                                   \
  template class Lstm<T>;                                                                                    \
  template class Conv1d<T>;                                                                                  \
  template class BatchNorm<T>;                                                                               \
  template Matrix<T> dropout<T>(const Matrix<T>&, T, Mode, Rng*, Matrix<T>*);                                \
  template std::vector<T> global_avg_pool<T>(const SequenceTensor<T>&);                                      \
  template Matrix<T> global_avg_pool<T>(const SequenceBatch<T>&);                                            \
  template SequenceBatch<T> global_avg_pool_backward<T>(const Matrix<T>&, std::size_t);                      \
  template Matrix<T> softmax<T>(const Matrix<T>&);                                                           \
  template std::vector<T> softmax<T>(std::span<const T>);                                                    \
  template Matrix<T> softmax_backward<T>(const Matrix<T>&, const Matrix<T>&);                                \
  template Matrix<T> concat_cols<T>(const std::vector<const Matrix<T>*>&);                                   \
  template std::vector<Matrix<T>> split_cols<T>(const Matrix<T>&, const std::vector<std::size_t>&);          \
  template LossResult<T> compute_loss<T>(LossKind, const Matrix<T>&, const Matrix<T>&);                      \
  template void adam_step<T>(ParamBlock<T>&, const AdamConfig&);                                             \
  template double finite_difference_check<T>(const std::function<T()>&, std::span<const GradientProbe<T>>, T);

PULSEGATE_NN_INSTANTIATE(float)
PULSEGATE_NN_INSTANTIATE(double)

#undef PULSEGATE_NN_INSTANTIATE

}  // namespace pulsegate::nn
