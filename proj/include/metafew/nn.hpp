#pragma once

// Parameterized networks: the Conv4 encoder, the linear classifier head, and
// the update-generating hypernetwork.

#include "metafew/tensor.hpp"

namespace metafew {

enum class EncoderVariant : uint8_t { linear2d, mlp, conv4 };

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::conv4;
  Shape input;              // {C,H,W} for conv4, {D} for mlp / linear2d
  int64_t embed_dim = 64;   // mlp output width; conv4 embeds to `channels`
  int64_t channels = 64;    // conv4 width
  int64_t hidden = 64;      // mlp hidden width
  bool use_batch_norm = true;
  double bn_eps = 1e-5;

  int64_t out_dim() const;
  void validate() const;
};

struct HyperNetConfig {
  int64_t hidden = 256;  // 256 or 512 in the reference setups
  int depth = 3;
  int64_t embed_dim = 64;
  int64_t n_way = 5;
  bool enhancement = true;  // concat detached predictions next to the one-hot labels

  // per-class input row: embedding (+ prediction vector) + one-hot label
  int64_t input_width() const { return embed_dim + (enhancement ? 2 : 1) * n_way; }
  // per-class output slice: one head weight column + one bias element
  int64_t output_width() const { return embed_dim + 1; }
  void validate() const;
};

// Declarative initialization: Kaiming-uniform fan-in scaling for weights,
// zeros for biases and batch-norm shifts, ones for batch-norm scales.
enum class InitKind : uint8_t { kaiming, zero, one };

struct ParamInit {
  std::string name;
  Shape shape;
  InitKind kind = InitKind::kaiming;
  int64_t fan_in = 0;  // required for kaiming
};

ParamSet init_params(const std::vector<ParamInit>& spec, Rng& rng, Dtype dt = Dtype::f32,
                     Role role = Role::generic);

ParamSet build_encoder(const EncoderConfig& cfg, Rng& rng, Dtype dt = Dtype::f32);
ParamSet build_head(int64_t embed_dim, int64_t n_way, Rng& rng, Dtype dt = Dtype::f32);
ParamSet build_hypernetwork(const HyperNetConfig& cfg, Rng& rng, Dtype dt = Dtype::f32);

// batch -> (B, out_dim) embeddings
Tensor encode(const EncoderConfig& cfg, const ParamSet& gamma, const Tensor& batch);

// embeddings -> (B, n_way) logits, logits = e W + b
Tensor classify(const ParamSet& head, const Tensor& embeddings);

// enhanced (n_way, input_width) -> (n_way, embed_dim + 1) update slices
Tensor hypernet_forward(const HyperNetConfig& cfg, const ParamSet& eta, const Tensor& enhanced);

// dense helper shared by the forwards: x W + b
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace metafew
