#pragma once

// Sample-level convolutional classifiers over raw waveforms.
//
// A model is a strided stem convolution followed by a stack of downsampling
// blocks, a global max pool over each tapped block, and a fully connected
// head. Blocks come in two kinds:
//   basic: conv -> bn -> relu -> maxpool
//   rese2: conv -> bn -> relu -> conv -> bn -> SE gate -> +residual -> relu
//          -> maxpool, with a 1-sized projection when channels change
// Block convolutions use 'same' padding (kernel 3 pads 1+1, kernel 2 pads
// 0+1), so only the stem stride and the pools downsample.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slcn/tensor.hpp"

namespace slcn {

enum class Mode { train, infer };
enum class BlockKind { basic, rese2 };
enum class OutputKind { sigmoid_multilabel, softmax_multiclass };

struct StemSpec {
  std::int64_t kernel = 3;
  std::int64_t stride = 3;
  std::int64_t filters = 128;
  bool batchnorm = true;  // stem bn+relu pair; false leaves the stem linear
};

struct BlockSpec {
  BlockKind kind = BlockKind::basic;
  std::int64_t filters = 128;
  std::int64_t pool_size = 3;
  std::int64_t conv_kernel = 3;
  std::int64_t se_reduction = 16;  // rese2 only
};

struct HeadSpec {
  std::int64_t hidden = 0;  // 0 skips the hidden layer
  std::int64_t n_classes = 2;
  OutputKind output = OutputKind::sigmoid_multilabel;
};

struct ModelConfig {
  std::int64_t input_len = 0;
  std::int64_t sample_rate = 16000;
  StemSpec stem;
  std::vector<BlockSpec> blocks;
  std::vector<std::int64_t> concat_taps;  // 0-based block indices feeding the head
  HeadSpec head;
};

// ---------------------------------------------------------------------------
// Geometry

/// Temporal extents after the stem and after each block.
inline std::vector<std::int64_t> extent_trace(const ModelConfig& cfg) {
  std::vector<std::int64_t> trace;
  if (cfg.input_len < cfg.stem.kernel)
    throw Error("model config: input_len " + std::to_string(cfg.input_len) +
                " shorter than stem kernel " + std::to_string(cfg.stem.kernel));
  std::int64_t t = (cfg.input_len - cfg.stem.kernel) / cfg.stem.stride + 1;
  trace.push_back(t);
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    // same-padded convs keep the extent; only the pool divides
    t = t / cfg.blocks[i].pool_size;
    if (t < 1)
      throw Error("model config: block " + std::to_string(i) + " pools extent to zero");
    trace.push_back(t);
  }
  return trace;
}

/// Input-sample span influencing one output frame after `block_index` blocks
/// (-1 addresses the stem alone). May exceed input_len for deep stacks.
inline std::int64_t receptive_field(const ModelConfig& cfg, std::int64_t block_index) {
  if (block_index < -1 || block_index >= static_cast<std::int64_t>(cfg.blocks.size()))
    throw Error("receptive_field: block index " + std::to_string(block_index) + " out of range");
  std::int64_t rf = cfg.stem.kernel;
  std::int64_t jump = cfg.stem.stride;
  for (std::int64_t i = 0; i <= block_index; ++i) {
    const auto& b = cfg.blocks[static_cast<std::size_t>(i)];
    std::int64_t convs = b.kind == BlockKind::rese2 ? 2 : 1;
    for (std::int64_t c = 0; c < convs; ++c) rf += (b.conv_kernel - 1) * jump;
    rf += (b.pool_size - 1) * jump;
    jump *= b.pool_size;
  }
  return rf;
}

/// Product of all strides: stem stride times every pool size.
inline std::int64_t total_downsampling(const ModelConfig& cfg) {
  std::int64_t d = cfg.stem.stride;
  for (const auto& b : cfg.blocks) d *= b.pool_size;
  return d;
}

inline void validate_config(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error("model config: " + msg); };
  if (cfg.input_len < 1) fail("input_len must be >= 1");
  if (cfg.sample_rate < 1) fail("sample_rate must be >= 1");
  if (cfg.stem.kernel < 1) fail("stem kernel must be >= 1");
  if (cfg.stem.stride < 1) fail("stem stride must be >= 1");
  if (cfg.stem.filters < 1) fail("stem filters must be >= 1");
  if (cfg.blocks.empty()) fail("at least one block required");
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const auto& b = cfg.blocks[i];
    std::string at = "block " + std::to_string(i) + ": ";
    if (b.filters < 1) fail(at + "filters must be >= 1");
    if (b.conv_kernel != 2 && b.conv_kernel != 3) fail(at + "conv_kernel must be 2 or 3");
    if (b.pool_size != 2 && b.pool_size != 3) fail(at + "pool_size must be 2 or 3");
    if (b.kind == BlockKind::rese2) {
      if (b.se_reduction < 1) fail(at + "se_reduction must be >= 1");
      if (b.filters % b.se_reduction != 0)
        fail(at + "se_reduction " + std::to_string(b.se_reduction) + " must divide filters " +
             std::to_string(b.filters));
    }
  }
  if (total_downsampling(cfg) > cfg.input_len)
    fail("total downsampling " + std::to_string(total_downsampling(cfg)) +
         " exceeds input_len " + std::to_string(cfg.input_len));
  if (cfg.concat_taps.empty()) fail("concat_taps must name at least one block");
  std::int64_t prev = -1;
  for (auto tap : cfg.concat_taps) {
    if (tap < 0 || tap >= static_cast<std::int64_t>(cfg.blocks.size()))
      fail("concat tap " + std::to_string(tap) + " out of range");
    if (tap <= prev) fail("concat_taps must be strictly increasing");
    prev = tap;
  }
  if (cfg.head.hidden < 0) fail("head hidden must be >= 0");
  if (cfg.head.n_classes < 2) fail("head n_classes must be >= 2");
  extent_trace(cfg);  // rejects configs that pool the extent away
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
struct Conv1dLayer {
  Tensor<T> w, b;
  std::int64_t stride = 1;
  std::int64_t pad_left = 0, pad_right = 0;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv1d(x, w, b, stride, pad_left, pad_right);
  }
};

template <class T>
struct BatchNorm1d {
  Tensor<T> gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  /// Train mode normalizes with batch statistics and folds them into the
  /// running estimates; infer mode uses the running estimates unchanged.
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    if (mode == Mode::infer)
      return batchnorm_infer(x, gamma, beta, running_mean, running_var, eps);
    BnStats<T> stats;
    Tensor<T> y = batchnorm_train(x, gamma, beta, eps, &stats);
    auto& rm = running_mean.data();
    auto& rv = running_var.data();
    const auto& bm = stats.mean.data();
    const auto& bv = stats.var.data();
    T m = static_cast<T>(momentum);
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (T(1) - m) * rm[c] + m * bm[c];
      rv[c] = (T(1) - m) * rv[c] + m * bv[c];
    }
    return y;
  }
};

/// Squeeze-and-excitation gate: mean over time, two fully connected layers,
/// sigmoid, channel-wise rescale of the input.
template <class T>
Tensor<T> se_module(const Tensor<T>& u, const Tensor<T>& fc1_w, const Tensor<T>& fc1_b,
                    const Tensor<T>& fc2_w, const Tensor<T>& fc2_b) {
  Tensor<T> z = mean_over_time(u);
  Tensor<T> a = relu(affine(z, fc1_w, fc1_b));
  Tensor<T> s = sigmoid(affine(a, fc2_w, fc2_b));
  return channel_scale(u, s);
}

template <class T>
struct SEGate {
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  Tensor<T> operator()(const Tensor<T>& u) const {
    return se_module(u, fc1_w, fc1_b, fc2_w, fc2_b);
  }
};

template <class T>
struct Block {
  BlockSpec spec;
  Conv1dLayer<T> conv1;
  BatchNorm1d<T> bn1;
  // rese2 only:
  Conv1dLayer<T> conv2;
  BatchNorm1d<T> bn2;
  SEGate<T> se;
  bool has_proj = false;
  Conv1dLayer<T> proj;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    if (spec.kind == BlockKind::basic)
      return maxpool1d(relu(bn1(conv1(x), mode)), spec.pool_size);
    Tensor<T> residual = has_proj ? proj(x) : x;
    Tensor<T> h = relu(bn1(conv1(x), mode));
    h = bn2(conv2(h), mode);
    h = se(h);
    h = add(h, residual);
    return maxpool1d(relu(h), spec.pool_size);
  }
};

// ---------------------------------------------------------------------------
// Model

namespace detail {

template <class T>
void fill_uniform(Tensor<T>& t, std::mt19937& rng, double limit) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

inline double fan_limit(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <class T>
Conv1dLayer<T> make_conv(std::int64_t cout, std::int64_t cin, std::int64_t k, std::int64_t stride,
                         std::int64_t pad_left, std::int64_t pad_right, std::mt19937& rng) {
  Conv1dLayer<T> layer;
  layer.w = Tensor<T>::zeros({cout, cin, k});
  layer.b = Tensor<T>::zeros({cout});
  layer.stride = stride;
  layer.pad_left = pad_left;
  layer.pad_right = pad_right;
  fill_uniform(layer.w, rng, fan_limit(cin * k, cout * k));
  layer.w.set_requires_grad(true);
  layer.b.set_requires_grad(true);
  return layer;
}

/// 'same' padding for stride-1 kernels of size 2 or 3.
inline std::pair<std::int64_t, std::int64_t> same_pad(std::int64_t k) {
  return k == 2 ? std::pair<std::int64_t, std::int64_t>{0, 1}
                : std::pair<std::int64_t, std::int64_t>{(k - 1) / 2, k / 2};
}

template <class T>
BatchNorm1d<T> make_bn(std::int64_t channels) {
  BatchNorm1d<T> bn;
  bn.gamma = Tensor<T>::full({channels}, T(1));
  bn.beta = Tensor<T>::zeros({channels});
  bn.running_mean = Tensor<T>::zeros({channels});
  bn.running_var = Tensor<T>::full({channels}, T(1));
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  return bn;
}

}  // namespace detail

template <class T>
struct Model {
  ModelConfig config;
  Conv1dLayer<T> stem;
  BatchNorm1d<T> stem_bn;  // used only when config.stem.batchnorm
  std::vector<Block<T>> blocks;
  Tensor<T> hidden_w, hidden_b;  // defined only when config.head.hidden > 0
  Tensor<T> out_w, out_b;

  /// Logits for a batch [N,1,T] (or a single [1,T] clip segment).
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = run_stem(x, mode);
    std::vector<Tensor<T>> taps;
    std::size_t next_tap = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward(h, mode);
      if (next_tap < config.concat_taps.size() &&
          config.concat_taps[next_tap] == static_cast<std::int64_t>(i)) {
        taps.push_back(max_over_time(h));
        ++next_tap;
      }
    }
    Tensor<T> feat = taps.size() == 1 ? taps[0] : concat_features(taps);
    if (config.head.hidden > 0) feat = relu(affine(feat, hidden_w, hidden_b));
    return affine(feat, out_w, out_b);
  }

  /// Class scores: sigmoid per class or softmax across classes.
  Tensor<T> scores(const Tensor<T>& x, Mode mode = Mode::infer) {
    Tensor<T> z = forward(x, mode);
    return config.head.output == OutputKind::sigmoid_multilabel ? sigmoid(z) : softmax_classes(z);
  }

  /// Activation of a stage counted from the input: 1 is the stem output,
  /// 1+k is the output of block k.
  Tensor<T> forward_to_layer(const Tensor<T>& x, std::int64_t layer, Mode mode = Mode::infer) {
    if (layer < 1 || layer > static_cast<std::int64_t>(blocks.size()) + 1)
      throw Error("forward_to_layer: layer " + std::to_string(layer) + " out of range [1," +
                  std::to_string(blocks.size() + 1) + "]");
    Tensor<T> h = run_stem(x, mode);
    for (std::int64_t i = 0; i < layer - 1; ++i)
      h = blocks[static_cast<std::size_t>(i)].forward(h, mode);
    return h;
  }

  /// All tensors the checkpoint carries, running statistics included, in a
  /// fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push_bn = [&out](const std::string& prefix, BatchNorm1d<T>& bn) {
      out.emplace_back(prefix + ".gamma", bn.gamma);
      out.emplace_back(prefix + ".beta", bn.beta);
      out.emplace_back(prefix + ".running_mean", bn.running_mean);
      out.emplace_back(prefix + ".running_var", bn.running_var);
    };
    out.emplace_back("stem.conv.w", stem.w);
    out.emplace_back("stem.conv.b", stem.b);
    if (config.stem.batchnorm) push_bn("stem.bn", stem_bn);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      std::string p = "blocks." + std::to_string(i);
      auto& blk = blocks[i];
      out.emplace_back(p + ".conv1.w", blk.conv1.w);
      out.emplace_back(p + ".conv1.b", blk.conv1.b);
      push_bn(p + ".bn1", blk.bn1);
      if (blk.spec.kind == BlockKind::rese2) {
        out.emplace_back(p + ".conv2.w", blk.conv2.w);
        out.emplace_back(p + ".conv2.b", blk.conv2.b);
        push_bn(p + ".bn2", blk.bn2);
        out.emplace_back(p + ".se.fc1.w", blk.se.fc1_w);
        out.emplace_back(p + ".se.fc1.b", blk.se.fc1_b);
        out.emplace_back(p + ".se.fc2.w", blk.se.fc2_w);
        out.emplace_back(p + ".se.fc2.b", blk.se.fc2_b);
        if (blk.has_proj) {
          out.emplace_back(p + ".proj.w", blk.proj.w);
          out.emplace_back(p + ".proj.b", blk.proj.b);
        }
      }
    }
    if (config.head.hidden > 0) {
      out.emplace_back("head.hidden.w", hidden_w);
      out.emplace_back("head.hidden.b", hidden_b);
    }
    out.emplace_back("head.out.w", out_w);
    out.emplace_back("head.out.b", out_b);
    return out;
  }

  /// Trainable parameters: everything except batch norm running statistics.
  std::vector<Tensor<T>> trainable() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_tensors())
      if (name.find("running_") == std::string::npos) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool flag) {
    for (auto& t : trainable()) t.set_requires_grad(flag);
  }

  void zero_grad() {
    for (auto& t : trainable()) t.zero_grad();
  }

 private:
  Tensor<T> run_stem(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = stem(x);
    if (config.stem.batchnorm) h = relu(stem_bn(h, mode));
    return h;
  }
};

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
  Model<T> m;
  m.config = cfg;

  m.stem = detail::make_conv<T>(cfg.stem.filters, 1, cfg.stem.kernel, cfg.stem.stride, 0, 0, rng);
  if (cfg.stem.batchnorm) m.stem_bn = detail::make_bn<T>(cfg.stem.filters);

  std::int64_t in_ch = cfg.stem.filters;
  for (const auto& spec : cfg.blocks) {
    Block<T> blk;
    blk.spec = spec;
    auto [pl, pr] = detail::same_pad(spec.conv_kernel);
    blk.conv1 = detail::make_conv<T>(spec.filters, in_ch, spec.conv_kernel, 1, pl, pr, rng);
    blk.bn1 = detail::make_bn<T>(spec.filters);
    if (spec.kind == BlockKind::rese2) {
      blk.conv2 = detail::make_conv<T>(spec.filters, spec.filters, spec.conv_kernel, 1, pl, pr, rng);
      blk.bn2 = detail::make_bn<T>(spec.filters);
      std::int64_t squeezed = spec.filters / spec.se_reduction;
      blk.se.fc1_w = Tensor<T>::zeros({squeezed, spec.filters});
      blk.se.fc1_b = Tensor<T>::zeros({squeezed});
      blk.se.fc2_w = Tensor<T>::zeros({spec.filters, squeezed});
      blk.se.fc2_b = Tensor<T>::zeros({spec.filters});
      detail::fill_uniform(blk.se.fc1_w, rng, detail::fan_limit(spec.filters, squeezed));
      detail::fill_uniform(blk.se.fc2_w, rng, detail::fan_limit(squeezed, spec.filters));
      blk.se.fc1_w.set_requires_grad(true);
      blk.se.fc1_b.set_requires_grad(true);
      blk.se.fc2_w.set_requires_grad(true);
      blk.se.fc2_b.set_requires_grad(true);
      if (in_ch != spec.filters) {
        blk.has_proj = true;
        blk.proj = detail::make_conv<T>(spec.filters, in_ch, 1, 1, 0, 0, rng);
      }
    }
    m.blocks.push_back(std::move(blk));
    in_ch = spec.filters;
  }

  std::int64_t feat = 0;
  for (auto tap : cfg.concat_taps) feat += cfg.blocks[static_cast<std::size_t>(tap)].filters;
  std::int64_t head_in = feat;
  if (cfg.head.hidden > 0) {
    m.hidden_w = Tensor<T>::zeros({cfg.head.hidden, feat});
    m.hidden_b = Tensor<T>::zeros({cfg.head.hidden});
    detail::fill_uniform(m.hidden_w, rng, detail::fan_limit(feat, cfg.head.hidden));
    m.hidden_w.set_requires_grad(true);
    m.hidden_b.set_requires_grad(true);
    head_in = cfg.head.hidden;
  }
  m.out_w = Tensor<T>::zeros({cfg.head.n_classes, head_in});
  m.out_b = Tensor<T>::zeros({cfg.head.n_classes});
  detail::fill_uniform(m.out_w, rng, detail::fan_limit(head_in, cfg.head.n_classes));
  m.out_w.set_requires_grad(true);
  m.out_b.set_requires_grad(true);
  return m;
}

}  // namespace slcn
