#include "metafew/nn.hpp"

namespace metafew {

int64_t EncoderConfig::out_dim() const {
  switch (variant) {
    case EncoderVariant::linear2d: return input.empty() ? 2 : input[0];
    case EncoderVariant::mlp: return embed_dim;
    case EncoderVariant::conv4: return channels;
  }
  return 0;
}

void EncoderConfig::validate() const {
  if (embed_dim <= 0 || channels <= 0 || hidden <= 0)
    throw ConfigError("encoder: widths must be positive");
  if (variant == EncoderVariant::conv4) {
    if (input.size() != 3)
      throw ConfigError("encoder: conv4 requires image-shaped input {C,H,W}");
    int64_t h = input[1], w = input[2];
    for (int stage = 0; stage < 4; ++stage) {
      if (h < 2 || w < 2)
        throw ConfigError("encoder: input " + shape_str(input) +
                          " too small for 4 pooling stages");
      h /= 2;
      w /= 2;
    }
  } else if (input.size() != 1) {
    throw ConfigError("encoder: mlp/linear2d require flat input {D}");
  }
}

void HyperNetConfig::validate() const {
  if (depth != 3) throw ConfigError("hypernetwork: depth is fixed at 3");
  if (hidden <= 0 || embed_dim <= 0 || n_way <= 0)
    throw ConfigError("hypernetwork: widths must be positive");
}

ParamSet init_params(const std::vector<ParamInit>& spec, Rng& rng, Dtype dt, Role role) {
  ParamSet out(role);
  for (const ParamInit& pi : spec) {
    Tensor t = Tensor::zeros(pi.shape, dt);
    switch (pi.kind) {
      case InitKind::kaiming: {
        if (pi.fan_in <= 0) throw ConfigError("init_params: kaiming needs fan_in");
        double bound = std::sqrt(6.0 / double(pi.fan_in));
        for (int64_t i = 0; i < t.numel(); ++i) t.set(size_t(i), rng.uniform(-bound, bound));
        break;
      }
      case InitKind::zero:
        break;
      case InitKind::one:
        for (int64_t i = 0; i < t.numel(); ++i) t.set(size_t(i), 1.0);
        break;
    }
    out.add(pi.name, std::move(t));
  }
  return out;
}

ParamSet build_encoder(const EncoderConfig& cfg, Rng& rng, Dtype dt) {
  cfg.validate();
  std::vector<ParamInit> spec;
  switch (cfg.variant) {
    case EncoderVariant::linear2d:
      break;  // identity embedding, no parameters
    case EncoderVariant::mlp: {
      int64_t d = cfg.input[0], h = cfg.hidden, e = cfg.embed_dim;
      spec = {
          {"fc1.w", {d, h}, InitKind::kaiming, d}, {"fc1.b", {h}, InitKind::zero},
          {"fc2.w", {h, h}, InitKind::kaiming, h}, {"fc2.b", {h}, InitKind::zero},
          {"fc3.w", {h, e}, InitKind::kaiming, h}, {"fc3.b", {e}, InitKind::zero},
      };
      break;
    }
    case EncoderVariant::conv4: {
      int64_t c = cfg.channels;
      int64_t in_c = cfg.input[0];
      for (int l = 1; l <= 4; ++l) {
        std::string p = "conv" + std::to_string(l);
        int64_t ic = l == 1 ? in_c : c;
        spec.push_back({p + ".w", {c, ic, 3, 3}, InitKind::kaiming, ic * 9});
        spec.push_back({p + ".b", {c}, InitKind::zero});
        if (cfg.use_batch_norm) {
          std::string b = "bn" + std::to_string(l);
          spec.push_back({b + ".scale", {c}, InitKind::one});
          spec.push_back({b + ".shift", {c}, InitKind::zero});
        }
      }
      break;
    }
  }
  return init_params(spec, rng, dt, Role::encoder);
}

ParamSet build_head(int64_t embed_dim, int64_t n_way, Rng& rng, Dtype dt) {
  std::vector<ParamInit> spec = {
      {"W", {embed_dim, n_way}, InitKind::kaiming, embed_dim},
      {"b", {n_way}, InitKind::zero},
  };
  return init_params(spec, rng, dt, Role::head);
}

ParamSet build_hypernetwork(const HyperNetConfig& cfg, Rng& rng, Dtype dt) {
  cfg.validate();
  int64_t in = cfg.input_width(), h = cfg.hidden, out = cfg.output_width();
  std::vector<ParamInit> spec = {
      {"fc1.w", {in, h}, InitKind::kaiming, in}, {"fc1.b", {h}, InitKind::zero},
      {"fc2.w", {h, h}, InitKind::kaiming, h},   {"fc2.b", {h}, InitKind::zero},
      // zero final layer: a fresh hypernetwork emits the zero update, so the
      // adapted model starts as the identity update over the base head
      {"out.w", {h, out}, InitKind::zero},       {"out.b", {out}, InitKind::zero},
  };
  return init_params(spec, rng, dt, Role::hypernet);
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), broadcast_rows(b, x.shape()[0]));
}

Tensor encode(const EncoderConfig& cfg, const ParamSet& gamma, const Tensor& batch) {
  switch (cfg.variant) {
    case EncoderVariant::linear2d:
      if (batch.rank() != 2) throw ShapeError("encode: linear2d expects (B,D) input");
      return batch;
    case EncoderVariant::mlp: {
      if (batch.rank() != 2 || batch.shape()[1] != cfg.input[0])
        throw ShapeError("encode: mlp input must be (B," + std::to_string(cfg.input[0]) + ")");
      Tensor h = relu(dense(batch, gamma.at("fc1.w"), gamma.at("fc1.b")));
      h = relu(dense(h, gamma.at("fc2.w"), gamma.at("fc2.b")));
      return dense(h, gamma.at("fc3.w"), gamma.at("fc3.b"));
    }
    case EncoderVariant::conv4: {
      if (batch.rank() != 4 || batch.shape()[1] != cfg.input[0] ||
          batch.shape()[2] != cfg.input[1] || batch.shape()[3] != cfg.input[2])
        throw ShapeError("encode: conv4 input must be (B," + shape_str(cfg.input) + ")");
      Tensor x = batch;
      for (int l = 1; l <= 4; ++l) {
        std::string p = "conv" + std::to_string(l);
        x = conv2d(x, gamma.at(p + ".w"), 1, 1);
        x = add(x, channel_broadcast(gamma.at(p + ".b"), x.shape()));
        if (cfg.use_batch_norm) {
          std::string b = "bn" + std::to_string(l);
          x = batch_norm(x, gamma.at(b + ".scale"), gamma.at(b + ".shift"), cfg.bn_eps);
        }
        x = relu(x);
        x = maxpool2x2(x);
      }
      // average-pool any remaining spatial extent down to (B, channels)
      if (x.shape()[2] == 1 && x.shape()[3] == 1)
        return reshape(x, {x.shape()[0], x.shape()[1]});
      return global_avg_pool(x);
    }
  }
  throw ConfigError("encode: unknown encoder variant");
}

Tensor classify(const ParamSet& head, const Tensor& embeddings) {
  const Tensor& w = head.at("W");
  if (embeddings.rank() != 2 || embeddings.shape()[1] != w.shape()[0])
    throw ShapeError("classify: embedding width " + shape_str(embeddings.shape()) +
                     " does not match head input " + shape_str(w.shape()));
  return dense(embeddings, w, head.at("b"));
}

Tensor hypernet_forward(const HyperNetConfig& cfg, const ParamSet& eta, const Tensor& enhanced) {
  if (enhanced.rank() != 2 || enhanced.shape()[1] != cfg.input_width())
    throw ShapeError("hypernet_forward: expected (n_way," +
                     std::to_string(cfg.input_width()) + "), got " +
                     shape_str(enhanced.shape()));
  Tensor h = relu(dense(enhanced, eta.at("fc1.w"), eta.at("fc1.b")));
  h = relu(dense(h, eta.at("fc2.w"), eta.at("fc2.b")));
  return dense(h, eta.at("out.w"), eta.at("out.b"));
}

}  // namespace metafew
