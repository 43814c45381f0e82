#pragma once

// Small 3D convolutional network for patch-wise segmentation, written out
// directly: forward pass, backpropagation, AdaGrad, rotational augmentation
// and patch-stitched inference.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "voxseg/io.hpp"
#include "voxseg/patches.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

enum class Activation { identity, relu, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw FormatError("unknown activation '" + s + "'");
}

struct CnnParams {
  Extent3 patch_shape{5, 10, 10};
  std::vector<std::size_t> filters{8, 16, 32};  ///< strictly ascending
  Extent3 kernel_shape{3, 3, 3};
  double dropout_ratio_r = 0.2;
  double learning_rate_eta = 0.01;
  double adagrad_epsilon = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double binarize_threshold = 0.5;
  /// Background-only training patches kept per patch touching foreground;
  /// negative keeps every patch.
  double background_ratio = -1.0;

  void validate() const {
    if (patch_shape.voxel_count() == 0) throw ParameterError("cnn patch shape must be positive");
    if (filters.empty()) throw ParameterError("cnn needs at least one hidden filter count");
    for (std::size_t i = 1; i < filters.size(); ++i)
      if (filters[i] <= filters[i - 1]) throw ParameterError("cnn filter counts must be strictly ascending");
    if (kernel_shape.z % 2 == 0 || kernel_shape.y % 2 == 0 || kernel_shape.x % 2 == 0)
      throw ParameterError("cnn kernel extents must be odd");
    if (!(dropout_ratio_r >= 0.0 && dropout_ratio_r < 1.0)) throw ParameterError("dropout ratio must be in [0, 1)");
    if (!(learning_rate_eta > 0.0)) throw ParameterError("learning rate must be > 0");
    if (!(adagrad_epsilon > 0.0)) throw ParameterError("adagrad epsilon must be > 0");
    if (batch_size == 0) throw ParameterError("batch size must be >= 1");
    if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0))
      throw ParameterError("binarize threshold must be in (0, 1)");
  }

  /// Half the patch extent per axis, at least 1.
  Extent3 half_stride() const {
    return {std::max<std::size_t>(1, patch_shape.z / 2), std::max<std::size_t>(1, patch_shape.y / 2),
            std::max<std::size_t>(1, patch_shape.x / 2)};
  }
};

/// Same-padded 3D convolution followed by an activation and optional dropout.
template <typename T>
struct ConvLayer {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Extent3 kernel{1, 1, 1};
  Activation activation = Activation::identity;
  double dropout = 0.0;
  std::vector<T> weights;  ///< out x in x kz x ky x kx
  std::vector<T> biases;   ///< out
  std::vector<T> weight_accum;
  std::vector<T> bias_accum;

  std::size_t taps() const { return kernel.voxel_count(); }
  std::size_t fan_in() const { return in_channels * taps(); }
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

template <typename T>
struct CnnModel {
  Extent3 patch_shape{5, 10, 10};
  std::vector<ConvLayer<T>> layers;
  /// Bumped on every parameter update; forward caches record it.
  std::uint64_t revision = 0;

  ConvLayer<T>& add_layer(std::size_t in, std::size_t out, Extent3 kernel, Activation act, double dropout = 0.0) {
    if (!layers.empty() && layers.back().out_channels != in)
      throw DimensionError("layer input channels do not chain with previous layer output");
    ConvLayer<T> l;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = kernel;
    l.activation = act;
    l.dropout = dropout;
    l.weights.assign(out * in * kernel.voxel_count(), T(0));
    l.biases.assign(out, T(0));
    l.weight_accum.assign(l.weights.size(), T(0));
    l.bias_accum.assign(out, T(0));
    layers.push_back(std::move(l));
    return layers.back();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.biases.size();
    return n;
  }

  friend bool operator==(const CnnModel& a, const CnnModel& b) {
    return a.patch_shape == b.patch_shape && a.layers == b.layers && a.revision == b.revision;
  }
};

/// Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.
template <typename T>
void glorot_init(CnnModel<T>& model, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "cnn-init"));
  for (auto& l : model.layers) {
    const double fan_out = static_cast<double>(l.out_channels * l.taps());
    const double limit = std::sqrt(6.0 / (static_cast<double>(l.fan_in()) + fan_out));
    for (auto& w : l.weights) w = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
    std::fill(l.biases.begin(), l.biases.end(), T(0));
  }
}

/// CONV-ReLU-DROP per hidden filter count (no dropout after the last
/// hidden layer), then a 1x1x1 convolution to one channel with sigmoid.
template <typename T>
CnnModel<T> make_cnn(const CnnParams& p, std::uint64_t seed) {
  p.validate();
  CnnModel<T> m;
  m.patch_shape = p.patch_shape;
  std::size_t in = 1;
  for (std::size_t i = 0; i < p.filters.size(); ++i) {
    const double drop = i + 1 < p.filters.size() ? p.dropout_ratio_r : 0.0;
    m.add_layer(in, p.filters[i], p.kernel_shape, Activation::relu, drop);
    in = p.filters[i];
  }
  m.add_layer(in, 1, {1, 1, 1}, Activation::sigmoid);
  glorot_init(m, seed);
  return m;
}

enum class Mode { train, infer };

template <typename T>
struct ForwardCache {
  struct Sample {
    std::vector<std::vector<T>> inputs;   ///< per layer, post-dropout input
    std::vector<std::vector<T>> outputs;  ///< per layer, post-activation (pre-dropout)
    std::vector<std::vector<T>> masks;    ///< per layer, dropout scale (empty if none)
  };
  std::vector<Sample> samples;
  std::uint64_t revision = 0;
  bool train = false;
  bool valid = false;
};

template <typename T>
struct ForwardResult {
  std::vector<std::vector<T>> outputs;
  ForwardCache<T> cache;
};

template <typename T>
struct Gradients {
  std::vector<std::vector<T>> weights;
  std::vector<std::vector<T>> biases;

  static Gradients zeros_like(const CnnModel<T>& m) {
    Gradients g;
    for (const auto& l : m.layers) {
      g.weights.emplace_back(l.weights.size(), T(0));
      g.biases.emplace_back(l.biases.size(), T(0));
    }
    return g;
  }
};

namespace detail {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Every GEMM and reduction operand is an owning Eigen matrix. Their storage
// is aligned, so the vectorized summation order does not depend on where the
// heap put a buffer and results are reproducible run to run.
template <typename T>
MatR<T> aligned_copy(const T* p, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const MatR<T>>(p, rows, cols);
}

// Column matrix for same-padded convolution: row (c, kz, ky, kx), column voxel.
template <typename T>
void im2col(const T* in, std::size_t channels, const Extent3& d, const Extent3& k, MatR<T>& col) {
  const std::size_t V = d.voxel_count();
  col.setZero(static_cast<Eigen::Index>(channels * k.voxel_count()), static_cast<Eigen::Index>(V));
  const auto pz = static_cast<std::ptrdiff_t>(k.z / 2), py = static_cast<std::ptrdiff_t>(k.y / 2),
             px = static_cast<std::ptrdiff_t>(k.x / 2);
  const auto nz = static_cast<std::ptrdiff_t>(d.z), ny = static_cast<std::ptrdiff_t>(d.y),
             nx = static_cast<std::ptrdiff_t>(d.x);
  T* row = col.data();
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in + c * V;
    for (std::ptrdiff_t kz = 0; kz < static_cast<std::ptrdiff_t>(k.z); ++kz)
      for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(k.y); ++ky)
        for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(k.x); ++kx, row += V) {
          const std::ptrdiff_t oz = kz - pz, oy = ky - py, ox = kx - px;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox), x1 = std::min(nx, nx - ox);
          for (std::ptrdiff_t z = std::max<std::ptrdiff_t>(0, -oz); z < std::min(nz, nz - oz); ++z)
            for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -oy); y < std::min(ny, ny - oy); ++y) {
              T* dst = row + (z * ny + y) * nx;
              const T* s = src + ((z + oz) * ny + (y + oy)) * nx + ox;
              for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] = s[x];
            }
        }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, const Extent3& d, const Extent3& k, T* out) {
  const std::size_t V = d.voxel_count();
  const auto pz = static_cast<std::ptrdiff_t>(k.z / 2), py = static_cast<std::ptrdiff_t>(k.y / 2),
             px = static_cast<std::ptrdiff_t>(k.x / 2);
  const auto nz = static_cast<std::ptrdiff_t>(d.z), ny = static_cast<std::ptrdiff_t>(d.y),
             nx = static_cast<std::ptrdiff_t>(d.x);
  const T* row = col;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = out + c * V;
    for (std::ptrdiff_t kz = 0; kz < static_cast<std::ptrdiff_t>(k.z); ++kz)
      for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(k.y); ++ky)
        for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(k.x); ++kx, row += V) {
          const std::ptrdiff_t oz = kz - pz, oy = ky - py, ox = kx - px;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox), x1 = std::min(nx, nx - ox);
          for (std::ptrdiff_t z = std::max<std::ptrdiff_t>(0, -oz); z < std::min(nz, nz - oz); ++z)
            for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -oy); y < std::min(ny, ny - oy); ++y) {
              const T* s = row + (z * ny + y) * nx;
              T* t = dst + ((z + oz) * ny + (y + oy)) * nx + ox;
              for (std::ptrdiff_t x = x0; x < x1; ++x) t[x] += s[x];
            }
        }
  }
}

inline bool is_pointwise(const Extent3& k) { return k.z == 1 && k.y == 1 && k.x == 1; }

template <typename T>
void conv_forward(const ConvLayer<T>& l, const std::vector<T>& in, const Extent3& d, MatR<T>& col,
                  std::vector<T>& out) {
  const auto V = static_cast<Eigen::Index>(d.voxel_count());
  const auto rows = static_cast<Eigen::Index>(l.fan_in());
  const auto outc = static_cast<Eigen::Index>(l.out_channels);
  const MatR<T> W = aligned_copy(l.weights.data(), outc, rows);
  if (is_pointwise(l.kernel)) col = aligned_copy(in.data(), rows, V);
  else im2col(in.data(), l.in_channels, d, l.kernel, col);
  MatR<T> Z(outc, V);
  Z.noalias() = W * col;
  out.resize(l.out_channels * d.voxel_count());
  for (Eigen::Index c = 0; c < outc; ++c) {
    const T b = l.biases[static_cast<std::size_t>(c)];
    T* dst = out.data() + c * V;
    for (Eigen::Index i = 0; i < V; ++i) dst[i] = Z(c, i) + b;
  }
}

template <typename T>
T sigmoid(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
void activate(Activation a, std::vector<T>& v) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu:
      for (auto& x : v) x = x > T(0) ? x : T(0);
      break;
    case Activation::sigmoid:
      for (auto& x : v) x = sigmoid(x);
      break;
  }
}

// Multiplies `grad` (w.r.t. activation output) by the activation derivative.
template <typename T>
void activation_backward(Activation a, const std::vector<T>& out, std::vector<T>& grad) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(out[i] > T(0))) grad[i] = T(0);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= out[i] * (T(1) - out[i]);
      break;
  }
}

}  // namespace detail

template <typename T>
void check_patch(const CnnModel<T>& m, const std::vector<T>& patch) {
  if (patch.size() != m.patch_shape.voxel_count())
    throw DimensionError("patch has " + std::to_string(patch.size()) + " voxels, model expects " + m.patch_shape.str());
}

/// Runs the network on a batch of single-channel patches. Train mode applies
/// inverted dropout (kept units scaled by 1/(1-r)); infer mode is dropout-free.
template <typename T>
ForwardResult<T> cnn_forward(const CnnModel<T>& model, const std::vector<std::vector<T>>& batch, Mode mode,
                             std::uint64_t seed = 0) {
  if (model.layers.empty()) throw StateError("model has no layers");
  if (model.layers.front().in_channels != 1 || model.layers.back().out_channels != 1)
    throw DimensionError("model must map one channel to one channel");
  ForwardResult<T> r;
  const bool train = mode == Mode::train;
  r.cache.train = train;
  r.cache.revision = model.revision;
  const Extent3& d = model.patch_shape;
  detail::MatR<T> col;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    check_patch(model, batch[s]);
    typename ForwardCache<T>::Sample cs;
    Rng drop_rng(derive_seed(seed, "dropout") ^ splitmix64(s));
    std::vector<T> a = batch[s];
    for (const auto& l : model.layers) {
      std::vector<T> h;
      detail::conv_forward(l, a, d, col, h);
      detail::activate(l.activation, h);
      std::vector<T> mask;
      if (train) cs.inputs.push_back(std::move(a));
      std::vector<T> next = h;
      if (train && l.dropout > 0.0) {
        const T keep_scale = T(1) / T(1 - l.dropout);
        mask.resize(h.size());
        for (std::size_t i = 0; i < h.size(); ++i) {
          mask[i] = drop_rng.uniform() < l.dropout ? T(0) : keep_scale;
          next[i] *= mask[i];
        }
      }
      if (train) {
        cs.outputs.push_back(std::move(h));
        cs.masks.push_back(std::move(mask));
      }
      a = std::move(next);
    }
    r.outputs.push_back(std::move(a));
    if (train) r.cache.samples.push_back(std::move(cs));
  }
  r.cache.valid = train;
  return r;
}

/// Mean squared error over every voxel of the batch.
template <typename T>
double cnn_loss(const std::vector<std::vector<T>>& outputs, const std::vector<std::vector<T>>& targets) {
  if (outputs.size() != targets.size()) throw DimensionError("output and target batch sizes differ");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    if (outputs[b].size() != targets[b].size()) throw DimensionError("output and target patch sizes differ");
    for (std::size_t i = 0; i < outputs[b].size(); ++i) {
      const double e = static_cast<double>(outputs[b][i]) - static_cast<double>(targets[b][i]);
      s += e * e;
    }
    n += outputs[b].size();
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Gradients of `loss_scale * cnn_loss` for the batch held in `cache`.
template <typename T>
Gradients<T> cnn_backward(const CnnModel<T>& model, const ForwardCache<T>& cache,
                          const std::vector<std::vector<T>>& targets, double loss_scale = 1.0) {
  if (!cache.valid || !cache.train) throw StateError("backward needs a cache from a train-mode forward pass");
  if (cache.revision != model.revision) throw StateError("forward cache is stale: model was updated since");
  if (targets.size() != cache.samples.size()) throw DimensionError("target batch size does not match the cache");
  const Extent3& d = model.patch_shape;
  const std::size_t V = d.voxel_count();
  const auto Vi = static_cast<Eigen::Index>(V);
  const std::size_t L = model.layers.size();
  Gradients<T> g = Gradients<T>::zeros_like(model);
  const T scale = static_cast<T>(2.0 * loss_scale / static_cast<double>(targets.size() * V));
  detail::MatR<T> col, dW, next_cols;
  for (std::size_t s = 0; s < targets.size(); ++s) {
    const auto& cs = cache.samples[s];
    const auto& out = cs.outputs[L - 1];
    if (targets[s].size() != V) throw DimensionError("target patch size does not match the model");
    // d loss / d final output; the final layer output is the network output
    // when it carries no dropout.
    std::vector<T> grad(V);
    const auto& final_mask = cs.masks[L - 1];
    for (std::size_t i = 0; i < V; ++i) {
      const T o = final_mask.empty() ? out[i] : out[i] * final_mask[i];
      grad[i] = scale * (o - targets[s][i]);
    }
    for (std::size_t li = L; li-- > 0;) {
      const auto& l = model.layers[li];
      if (!cs.masks[li].empty())
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= cs.masks[li][i];
      detail::activation_backward(l.activation, cs.outputs[li], grad);
      const auto rows = static_cast<Eigen::Index>(l.fan_in());
      const auto outc = static_cast<Eigen::Index>(l.out_channels);
      const detail::MatR<T> DZ = detail::aligned_copy(grad.data(), outc, Vi);
      if (detail::is_pointwise(l.kernel)) col = detail::aligned_copy(cs.inputs[li].data(), rows, Vi);
      else detail::im2col(cs.inputs[li].data(), l.in_channels, d, l.kernel, col);
      dW.noalias() = DZ * col.transpose();
      auto& gw = g.weights[li];
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dW.data()[i];
      for (Eigen::Index c = 0; c < outc; ++c) g.biases[li][static_cast<std::size_t>(c)] += DZ.row(c).sum();
      if (li == 0) break;
      const detail::MatR<T> W = detail::aligned_copy(l.weights.data(), outc, rows);
      next_cols.noalias() = W.transpose() * DZ;
      if (detail::is_pointwise(l.kernel)) {
        grad.assign(next_cols.data(), next_cols.data() + next_cols.size());
      } else {
        std::vector<T> next(l.in_channels * V, T(0));
        detail::col2im_add(next_cols.data(), l.in_channels, d, l.kernel, next.data());
        grad = std::move(next);
      }
    }
  }
  return g;
}

/// Per parameter: G += g^2; w -= eta * g / (sqrt(G) + eps).
template <typename T>
void adagrad_step(CnnModel<T>& model, const Gradients<T>& grads, double eta, double epsilon) {
  if (grads.weights.size() != model.layers.size() || grads.biases.size() != model.layers.size())
    throw DimensionError("gradient layer count does not match model");
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    if (grads.weights[li].size() != model.layers[li].weights.size() ||
        grads.biases[li].size() != model.layers[li].biases.size())
      throw DimensionError("gradient shape does not match layer " + std::to_string(li));
    for (T v : grads.weights[li])
      if (!std::isfinite(v)) throw NumericError("non-finite weight gradient");
    for (T v : grads.biases[li])
      if (!std::isfinite(v)) throw NumericError("non-finite bias gradient");
  }
  auto update = [&](std::vector<T>& w, std::vector<T>& acc, const std::vector<T>& g) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc[i] += g[i] * g[i];
      w[i] -= static_cast<T>(eta) * g[i] / (std::sqrt(acc[i]) + static_cast<T>(epsilon));
    }
  };
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    auto& l = model.layers[li];
    update(l.weights, l.weight_accum, grads.weights[li]);
    update(l.biases, l.bias_accum, grads.biases[li]);
  }
  ++model.revision;
}

template <typename T>
struct TrainingSample {
  std::vector<T> patch;
  std::vector<T> label;
};

/// Rotates a (z, y, x) block by 90 degrees in the axial (y, x) plane.
template <typename T>
std::vector<T> rotate_axial_90(const std::vector<T>& v, const Extent3& shape) {
  if (shape.y != shape.x) throw DimensionError("axial rotation needs square in-plane dims, got " + shape.str());
  const std::size_t n = shape.x;
  std::vector<T> out(v.size());
  for (std::size_t z = 0; z < shape.z; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) out[(z * n + y) * n + x] = v[(z * n + (n - 1 - x)) * n + y];
  return out;
}

/// Each sample under 0, 90, 180 and 270 degree axial rotations, in that order.
template <typename T>
std::vector<TrainingSample<T>> augment_rotations(const std::vector<TrainingSample<T>>& samples, const Extent3& shape) {
  if (shape.y != shape.x) throw DimensionError("axial rotation needs square in-plane dims, got " + shape.str());
  std::vector<TrainingSample<T>> out;
  out.reserve(samples.size() * 4);
  for (const auto& s : samples) {
    TrainingSample<T> cur = s;
    for (int r = 0; r < 4; ++r) {
      out.push_back(cur);
      cur.patch = rotate_axial_90(cur.patch, shape);
      cur.label = rotate_axial_90(cur.label, shape);
    }
  }
  return out;
}

struct LabeledVolume {
  Volume3 volume;
  BinaryMask3 mask;
};

/// Volumes are normalized to [0, 1]; patches enter the network shifted by
/// this value so intensities are centered on zero.
inline constexpr double kCnnInputCenter = 0.5;

namespace detail {

template <typename T>
void network_patch(const Volume3& v, const Index3& origin, const Extent3& shape, std::vector<T>& out) {
  copy_block(v, origin, shape, out);
  for (auto& x : out) x -= static_cast<T>(kCnnInputCenter);
}

}  // namespace detail

/// Patch/label pairs at half-patch stride from every case, optionally
/// thinning background-only patches. Patches are centered.
template <typename T>
std::vector<TrainingSample<T>> cnn_training_samples(const std::vector<LabeledVolume>& cases, const CnnParams& p,
                                                    std::uint64_t seed) {
  std::vector<TrainingSample<T>> fg, bg;
  for (const auto& c : cases) {
    require_same_dims(c.volume.dims(), c.mask.dims(), "cnn training case");
    for (const auto& o : patch_origins(c.volume.dims(), p.patch_shape, p.half_stride())) {
      TrainingSample<T> s;
      detail::network_patch(c.volume, o, p.patch_shape, s.patch);
      copy_block(c.mask, o, p.patch_shape, s.label);
      const bool any = std::any_of(s.label.begin(), s.label.end(), [](T v) { return v != T(0); });
      (any ? fg : bg).push_back(std::move(s));
    }
  }
  if (p.background_ratio >= 0.0) {
    const auto keep = std::min(bg.size(), static_cast<std::size_t>(p.background_ratio * static_cast<double>(fg.size())));
    Rng rng(derive_seed(seed, "cnn-background"));
    for (std::size_t i = 0; i < keep; ++i) std::swap(bg[i], bg[i + rng.below(bg.size() - i)]);
    bg.resize(keep);
  }
  fg.insert(fg.end(), std::make_move_iterator(bg.begin()), std::make_move_iterator(bg.end()));
  return fg;
}

/// Mini-batch AdaGrad over pre-built samples; returns the per-epoch mean loss.
template <typename T>
std::vector<double> cnn_train_samples(CnnModel<T>& model, const std::vector<TrainingSample<T>>& samples,
                                      const CnnParams& p, std::uint64_t seed) {
  p.validate();
  std::vector<double> trace;
  if (p.epochs == 0) return trace;
  if (samples.empty()) throw InputError("cnn training needs at least one sample");
  Rng order_rng(derive_seed(seed, "cnn-shuffle"));
  std::vector<std::size_t> order(samples.size());
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < p.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += p.batch_size) {
      const std::size_t end = std::min(order.size(), b + p.batch_size);
      std::vector<std::vector<T>> x, y;
      for (std::size_t i = b; i < end; ++i) {
        x.push_back(samples[order[i]].patch);
        y.push_back(samples[order[i]].label);
      }
      auto fwd = cnn_forward(model, x, Mode::train, derive_seed(seed, "cnn-step") ^ splitmix64(step++));
      sum += cnn_loss(fwd.outputs, y) * static_cast<double>(end - b);
      adagrad_step(model, cnn_backward(model, fwd.cache, y), p.learning_rate_eta, p.adagrad_epsilon);
    }
    trace.push_back(sum / static_cast<double>(order.size()));
  }
  return trace;
}

/// Extracts, augments and trains; deterministic for a given seed.
template <typename T>
std::vector<double> cnn_train(CnnModel<T>& model, const std::vector<LabeledVolume>& cases, const CnnParams& p,
                              std::uint64_t seed) {
  p.validate();
  if (cases.empty()) throw InputError("cnn training needs at least one volume");
  if (p.epochs == 0) return {};
  const auto base = cnn_training_samples<T>(cases, p, seed);
  if (base.empty()) throw InputError("no training patches could be extracted");
  return cnn_train_samples(model, augment_rotations(base, p.patch_shape), p, seed);
}

namespace detail {

template <typename T>
PatchAccumulator cnn_accumulate(const CnnModel<T>& model, const Volume3& volume) {
  const Extent3& shape = model.patch_shape;
  if (!shape.fits_in(volume.dims()))
    throw DimensionError("volume " + volume.dims().str() + " smaller than patch " + shape.str());
  const Extent3 stride{std::max<std::size_t>(1, shape.z / 2), std::max<std::size_t>(1, shape.y / 2),
                       std::max<std::size_t>(1, shape.x / 2)};
  PatchAccumulator acc(volume.dims());
  const auto origins = patch_origins(volume.dims(), shape, stride);
  constexpr std::size_t chunk = 64;
  for (std::size_t b = 0; b < origins.size(); b += chunk) {
    const std::size_t end = std::min(origins.size(), b + chunk);
    std::vector<std::vector<T>> batch(end - b);
    for (std::size_t i = b; i < end; ++i) network_patch(volume, origins[i], shape, batch[i - b]);
    const auto fwd = cnn_forward(model, batch, Mode::infer);
    for (std::size_t i = b; i < end; ++i) acc.add(origins[i], shape, fwd.outputs[i - b]);
  }
  return acc;
}

}  // namespace detail

/// Mean-stitched sigmoid output over half-stride patches.
template <typename T>
Volume3 cnn_soft_volume(const CnnModel<T>& model, const Volume3& volume) {
  return detail::cnn_accumulate(model, volume).mean(volume.spacing());
}

template <typename T>
BinaryMask3 cnn_segment_volume(const CnnModel<T>& model, const Volume3& volume, double threshold) {
  return detail::cnn_accumulate(model, volume).threshold(threshold, volume.spacing());
}

inline nlohmann::json cnn_params_to_json(const CnnParams& p) {
  return {{"patch_shape", {p.patch_shape.z, p.patch_shape.y, p.patch_shape.x}},
          {"filters", p.filters},
          {"kernel_shape", {p.kernel_shape.z, p.kernel_shape.y, p.kernel_shape.x}},
          {"dropout_ratio_r", p.dropout_ratio_r},
          {"learning_rate_eta", p.learning_rate_eta},
          {"adagrad_epsilon", p.adagrad_epsilon},
          {"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"binarize_threshold", p.binarize_threshold},
          {"background_ratio", p.background_ratio}};
}

inline CnnParams cnn_params_from_json(const nlohmann::json& j, CnnParams p = {}) {
  static const std::vector<std::string> known{"patch_shape", "filters", "kernel_shape", "dropout_ratio_r",
                                              "learning_rate_eta", "adagrad_epsilon", "epochs", "batch_size",
                                              "binarize_threshold", "background_ratio"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown cnn key '" + k + "'");
  auto ext = [&](const char* key, Extent3 def) {
    if (!j.contains(key)) return def;
    const auto s = j.at(key);
    return Extent3{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()};
  };
  try {
    p.patch_shape = ext("patch_shape", p.patch_shape);
    p.kernel_shape = ext("kernel_shape", p.kernel_shape);
    if (j.contains("filters")) p.filters = j.at("filters").get<std::vector<std::size_t>>();
    p.dropout_ratio_r = j.value("dropout_ratio_r", p.dropout_ratio_r);
    p.learning_rate_eta = j.value("learning_rate_eta", p.learning_rate_eta);
    p.adagrad_epsilon = j.value("adagrad_epsilon", p.adagrad_epsilon);
    p.epochs = j.value("epochs", p.epochs);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.binarize_threshold = j.value("binarize_threshold", p.binarize_threshold);
    p.background_ratio = j.value("background_ratio", p.background_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad cnn params: ") + e.what());
  }
  p.validate();
  return p;
}

/// Header JSON plus f32le payload: per layer weights, biases, weight
/// accumulators, bias accumulators.
inline void write_cnn_model(const CnnModel<float>& m, const fs::path& header, const nlohmann::json& params = {}) {
  const fs::path payload = default_payload_name(header);
  nlohmann::json layers = nlohmann::json::array();
  std::vector<float> flat;
  for (const auto& l : m.layers) {
    layers.push_back({{"in_channels", l.in_channels},
                      {"out_channels", l.out_channels},
                      {"kernel", {l.kernel.z, l.kernel.y, l.kernel.x}},
                      {"activation", to_string(l.activation)},
                      {"dropout", l.dropout}});
    for (const auto* v : {&l.weights, &l.biases, &l.weight_accum, &l.bias_accum}) flat.insert(flat.end(), v->begin(), v->end());
  }
  const nlohmann::json h = {{"kind", "cnn_model"},
                            {"patch_shape", {m.patch_shape.z, m.patch_shape.y, m.patch_shape.x}},
                            {"layers", layers},
                            {"revision", m.revision},
                            {"params", params},
                            {"dtype", "f32le"},
                            {"payload", payload.string()}};
  write_file_atomic(header.parent_path() / payload, encode_payload<float>(flat));
  write_json_file(header, h);
}

inline CnnModel<float> read_cnn_model(const fs::path& header, nlohmann::json* params = nullptr) {
  if (!fs::exists(header)) throw MissingFileError("model header not found: " + header.string());
  const auto h = read_json_file(header);
  CnnModel<float> m;
  std::string payload;
  try {
    if (h.at("kind").get<std::string>() != "cnn_model") throw FormatError("not a cnn model file: " + header.string());
    if (h.at("dtype").get<std::string>() != "f32le") throw UnsupportedDtypeError("model dtype must be f32le");
    const auto ps = h.at("patch_shape");
    m.patch_shape = {ps.at(0).get<std::size_t>(), ps.at(1).get<std::size_t>(), ps.at(2).get<std::size_t>()};
    for (const auto& l : h.at("layers")) {
      const auto k = l.at("kernel");
      m.add_layer(l.at("in_channels").get<std::size_t>(), l.at("out_channels").get<std::size_t>(),
                  {k.at(0).get<std::size_t>(), k.at(1).get<std::size_t>(), k.at(2).get<std::size_t>()},
                  parse_activation(l.at("activation").get<std::string>()), l.at("dropout").get<double>());
    }
    m.revision = h.at("revision").get<std::uint64_t>();
    payload = h.at("payload").get<std::string>();
    if (params) *params = h.value("params", nlohmann::json{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad model header " + header.string() + ": " + e.what());
  }
  std::size_t count = 0;
  for (const auto& l : m.layers) count += 2 * (l.weights.size() + l.biases.size());
  const fs::path pp = header.parent_path() / payload;
  if (!fs::exists(pp)) throw MissingFileError("model payload not found: " + pp.string());
  const auto flat = decode_payload<float>(read_file(pp), count, pp);
  std::size_t off = 0;
  for (auto& l : m.layers)
    for (auto* v : {&l.weights, &l.biases, &l.weight_accum, &l.bias_accum}) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + v->size()), v->begin());
      off += v->size();
    }
  for (float f : flat)
    if (!std::isfinite(f)) throw NonFiniteError("non-finite value in model payload");
  return m;
}

}  // namespace voxseg
