// SPDX-License-Identifier: Apache-2.0
//
// Tied-embedding LSTM language model.
//
// One [vocab x embed] matrix serves both as the input lookup table and as the
// output softmax coefficients, so the final LSTM layer must produce
// embed_dim-sized context vectors.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advlm/corpus.hpp"
#include "advlm/error.hpp"
#include "advlm/io.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

struct LMConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 64;  // every layer but the last, which uses embed_dim
  std::size_t num_layers = 1;
  double init_range = 0.1;

  std::size_t layer_input(std::size_t layer) const { return layer == 0 ? embed_dim : layer_hidden(layer - 1); }
  std::size_t layer_hidden(std::size_t layer) const {
    return layer + 1 == num_layers ? embed_dim : hidden_dim;
  }

  void validate() const {
    if (vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || num_layers == 0) {
      throw ConfigError("model: vocab_size, embed_dim, hidden_dim and num_layers must be positive");
    }
    if (num_layers == 1 && hidden_dim != embed_dim) {
      throw ConfigError("model: a single-layer model ties its output to the embedding, so hidden_dim (" +
                        std::to_string(hidden_dim) + ") must equal embed_dim (" +
                        std::to_string(embed_dim) + ")");
    }
    if (!(init_range >= 0.0) || !std::isfinite(init_range)) {
      throw ConfigError("model: init_range must be a finite non-negative number");
    }
  }

  bool operator==(const LMConfig&) const = default;
};

/// Gate blocks are laid out [input | forget | candidate | output] along the
/// 4*hidden axis.
struct LstmLayer {
  Tensor w_input;      // [in x 4H]
  Tensor w_recurrent;  // [H x 4H]
  Tensor bias;         // [4H]
};

struct LMParams {
  Tensor embedding;  // [vocab x embed], tied input/output embedding
  std::vector<LstmLayer> layers;

  /// Fixed order shared by the optimizer and the checkpoint format.
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out{embedding};
    for (const auto& l : layers) {
      out.push_back(l.w_input);
      out.push_back(l.w_recurrent);
      out.push_back(l.bias);
    }
    return out;
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out{"embedding"};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto p = "layer" + std::to_string(i) + ".";
      out.push_back(p + "w_input");
      out.push_back(p + "w_recurrent");
      out.push_back(p + "bias");
    }
    return out;
  }

  /// Deep copy with fresh storage.
  LMParams clone() const {
    LMParams p{embedding.clone(), {}};
    for (const auto& l : layers) p.layers.push_back({l.w_input.clone(), l.w_recurrent.clone(), l.bias.clone()});
    return p;
  }

  void zero_grad() {
    for (auto& t : tensors()) t.zero_grad();
  }
};

struct HiddenState {
  std::vector<Tensor> h;  // per layer, [batch x hidden]
  std::vector<Tensor> c;
};

inline HiddenState zero_state(const LMConfig& config, std::size_t batch) {
  HiddenState s;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    s.h.push_back(Tensor::zeros({batch, config.layer_hidden(l)}));
    s.c.push_back(Tensor::zeros({batch, config.layer_hidden(l)}));
  }
  return s;
}

inline HiddenState detach_state(const HiddenState& state) {
  HiddenState s;
  for (const auto& t : state.h) s.h.push_back(Tape::detach(t));
  for (const auto& t : state.c) s.c.push_back(Tape::detach(t));
  return s;
}

/// Uniform(-init_range, init_range) everywhere. With init_range > 0 the
/// forget-gate bias starts at 1.0; init_range == 0 gives an all-zero model.
inline LMParams init_params(const LMConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-config.init_range, config.init_range);
  auto fill = [&](Shape shape) {
    std::vector<double> v(numel(shape));
    if (config.init_range > 0.0)
      for (auto& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  LMParams p;
  p.embedding = fill({config.vocab_size, config.embed_dim});
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::size_t in = config.layer_input(l), h = config.layer_hidden(l);
    LstmLayer layer{fill({in, 4 * h}), fill({h, 4 * h}), fill({4 * h})};
    if (config.init_range > 0.0) {
      auto b = layer.bias.mutable_values();
      for (std::size_t j = h; j < 2 * h; ++j) b[j] = 1.0;
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

struct ForwardResult {
  Tensor contexts;  // [len*batch x embed], row t*batch + b
  HiddenState state;
};

/// Runs the LSTM stack over a [len x batch] window of ids (row-major, time
/// major). Gaussian noise with std `input_noise_std` is added to the looked-up
/// input embeddings only; the output side always uses the clean matrix.
inline ForwardResult forward(Tape& tape, const LMConfig& config, const LMParams& params,
                             std::span<const TokenId> inputs, std::size_t len, std::size_t batch,
                             const HiddenState& state, double input_noise_std, std::mt19937_64& rng) {
  if (len == 0 || batch == 0 || inputs.size() != len * batch) {
    throw DimensionError("forward: " + std::to_string(inputs.size()) + " ids for a " +
                         std::to_string(len) + "x" + std::to_string(batch) + " window");
  }
  if (state.h.size() != config.num_layers || state.c.size() != config.num_layers) {
    throw DimensionError("forward: state has " + std::to_string(state.h.size()) + " layers, model has " +
                         std::to_string(config.num_layers));
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const Shape want{batch, config.layer_hidden(l)};
    if (state.h[l].shape() != want || state.c[l].shape() != want) {
      throw DimensionError("forward: layer " + std::to_string(l) + " state " + to_string(state.h[l].shape()) +
                           " expected " + to_string(want));
    }
  }

  Tensor x = tape.gather_rows(params.embedding, inputs);
  if (input_noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, input_noise_std);
    std::vector<double> n(x.size());
    for (auto& v : n) v = noise(rng);
    x = tape.add(x, Tensor::from(x.shape(), std::move(n)));
  }

  ForwardResult out;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto& layer = params.layers[l];
    const std::size_t hdim = config.layer_hidden(l);
    Tensor projected = tape.matmul(x, layer.w_input);  // all time steps at once
    Tensor h = state.h[l], c = state.c[l];
    std::vector<Tensor> outputs;
    outputs.reserve(len);
    for (std::size_t t = 0; t < len; ++t) {
      Tensor gates = tape.add_bias(
          tape.add(tape.slice_rows(projected, t * batch, batch), tape.matmul(h, layer.w_recurrent)), layer.bias);
      Tensor in_gate = tape.sigmoid(tape.slice_cols(gates, 0, hdim));
      Tensor forget_gate = tape.sigmoid(tape.slice_cols(gates, hdim, hdim));
      Tensor candidate = tape.tanh(tape.slice_cols(gates, 2 * hdim, hdim));
      Tensor out_gate = tape.sigmoid(tape.slice_cols(gates, 3 * hdim, hdim));
      c = tape.add(tape.mul(forget_gate, c), tape.mul(in_gate, candidate));
      h = tape.mul(out_gate, tape.tanh(c));
      outputs.push_back(h);
    }
    out.state.h.push_back(h);
    out.state.c.push_back(c);
    x = tape.concat_rows(outputs);
  }
  out.contexts = x;
  return out;
}

// Checkpoint layout (little-endian):
//   "ADVLM001"
//   i64 vocab_size, i64 embed_dim, i64 hidden_dim, i64 num_layers, f64 init_range
//   per tensor in LMParams::tensors() order: i64 rank, i64 dims[rank], f64 values[]
namespace checkpoint {

inline constexpr std::string_view kMagic = "ADVLM001";

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u64(const std::string& section) {
    if (pos_ + 8 > bytes_.size()) throw FormatError("checkpoint truncated in section '" + section + "'");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64(const std::string& section) { return static_cast<std::int64_t>(u64(section)); }
  double f64(const std::string& section) { return std::bit_cast<double>(u64(section)); }
  std::string_view raw(std::size_t n, const std::string& section) {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated in section '" + section + "'");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace checkpoint

inline std::string serialize_checkpoint(const LMConfig& config, const LMParams& params) {
  using namespace checkpoint;
  std::string out(kMagic);
  put_i64(out, static_cast<std::int64_t>(config.vocab_size));
  put_i64(out, static_cast<std::int64_t>(config.embed_dim));
  put_i64(out, static_cast<std::int64_t>(config.hidden_dim));
  put_i64(out, static_cast<std::int64_t>(config.num_layers));
  put_f64(out, config.init_range);
  for (const auto& t : params.tensors()) {
    put_i64(out, static_cast<std::int64_t>(t.rank()));
    for (auto d : t.shape()) put_i64(out, static_cast<std::int64_t>(d));
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

struct Checkpoint {
  LMConfig config;
  LMParams params;
};

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  using namespace checkpoint;
  Reader r(bytes);
  if (r.raw(kMagic.size(), "magic") != kMagic) throw FormatError("checkpoint: bad magic in section 'magic'");
  Checkpoint ck;
  auto dim = [&](const char* name) {
    const auto v = r.i64("config");
    if (v <= 0 || v > (std::int64_t{1} << 32)) {
      throw FormatError(std::string("checkpoint: invalid ") + name + " in section 'config'");
    }
    return static_cast<std::size_t>(v);
  };
  ck.config.vocab_size = dim("vocab_size");
  ck.config.embed_dim = dim("embed_dim");
  ck.config.hidden_dim = dim("hidden_dim");
  ck.config.num_layers = dim("num_layers");
  ck.config.init_range = r.f64("config");
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: section 'config': ") + e.what());
  }

  // The expected shapes come from a zero-initialized model of the same config.
  LMConfig zero = ck.config;
  zero.init_range = 0.0;
  ck.params = init_params(zero, 0);
  const auto names = ck.params.tensor_names();
  auto tensors = ck.params.tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const std::string section = "tensor " + names[k];
    const auto rank = r.i64(section);
    if (rank != static_cast<std::int64_t>(tensors[k].rank())) {
      throw FormatError("checkpoint: rank mismatch in section '" + section + "'");
    }
    for (std::size_t d = 0; d < tensors[k].rank(); ++d) {
      if (r.i64(section) != static_cast<std::int64_t>(tensors[k].dim(d))) {
        throw FormatError("checkpoint: shape mismatch in section '" + section + "'");
      }
    }
    auto v = tensors[k].mutable_values();
    for (auto& x : v) {
      x = r.f64(section);
      if (!std::isfinite(x)) throw FormatError("checkpoint: non-finite value in section '" + section + "'");
    }
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after section 'tensor " + names.back() + "'");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const LMConfig& config, const LMParams& params) {
  atomic_write(path, serialize_checkpoint(config, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

}  // namespace advlm
