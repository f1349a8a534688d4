#pragma once

// Meta-learning algorithms: MAML adaptation and meta-updates, the
// hypernetwork update path with support enhancement, the warm-up switch
// between the two, and the optimizer/schedules driving them.

#include "metafew/nn.hpp"
#include "metafew/tasks.hpp"

namespace metafew {

enum class Algorithm : uint8_t { maml, fomaml, hypermaml };

struct MamlConfig {
  double inner_lr = 0.01;  // alpha
  int inner_steps = 1;
  bool first_order = false;
  double meta_lr = 0.001;  // beta
  void validate() const;
};

enum class SwitchMode : uint8_t { update_blend, loss_blend };

struct HyperMamlConfig {
  int64_t milestone1 = 51, milestone2 = 550;  // warm-up window, in epochs
  SwitchMode switch_mode = SwitchMode::update_blend;
  bool enhancement = true;
  HyperNetConfig hypernet;
  double meta_lr = 0.01;
  double warmup_inner_lr = 0.01;  // alpha of the blended gradient term
  void validate() const;
};

// base head, task-specific delta, and their sum
struct AdaptedModel {
  ParamSet base;
  ParamSet delta;
  ParamSet effective;
};

// encoder + head (+ hypernetwork) with detached master parameters
struct ModelBundle {
  Algorithm algorithm = Algorithm::maml;
  EncoderConfig enc_cfg;
  HyperNetConfig hyper_cfg;
  int64_t n_way = 5;
  ParamSet encoder, head, hypernet;

  static ModelBundle build(Algorithm alg, const EncoderConfig& enc, int64_t n_way,
                           const HyperNetConfig& hyper, uint64_t seed, Dtype dt = Dtype::f32);

  // shallow role-prefixed view: "enc.*", "head.*", "hyper.*"
  ParamSet joint() const;
};

ParamSet with_prefix(const ParamSet& p, const std::string& prefix);
ParamSet strip_prefix(const ParamSet& p, const std::string& prefix);

// encoder+head pair used during adaptation; tensors may be attached or detached
struct EncHead {
  ParamSet encoder;
  ParamSet head;
};

// ---------------------------------------------------------------------------
// losses and prediction
// ---------------------------------------------------------------------------

Tensor episode_logits(const EncoderConfig& enc, const EncHead& model, const Tensor& x);
Tensor episode_loss(const EncoderConfig& enc, const EncHead& model, const Tensor& x,
                    const std::vector<int32_t>& y);

// softmax(classify(theta', encode(gamma, query))); rows sum to 1
Tensor predict_query(const EncoderConfig& enc, const ParamSet& encoder_params,
                     const ParamSet& effective_head, const Tensor& query_x);

double accuracy(const Tensor& probs, const std::vector<int32_t>& labels);

// ---------------------------------------------------------------------------
// MAML
// ---------------------------------------------------------------------------

// repeats p <- p - alpha * dL_S/dp over every tensor in the model;
// differentiable w.r.t. the originals unless first_order is set
EncHead maml_adapt(const EncoderConfig& enc, const EncHead& model, const Tensor& sx,
                   const std::vector<int32_t>& sy, const MamlConfig& cfg);

// one-step gradient update restricted to the head (warm-up term of the blend)
ParamSet head_gradient_step(const EncoderConfig& enc, const EncHead& model, const Tensor& sx,
                            const std::vector<int32_t>& sy, double alpha, bool create_graph);

// ---------------------------------------------------------------------------
// HyperMAML
// ---------------------------------------------------------------------------

// per class: mean embedding (+ mean detached prediction) + one-hot label
Tensor enhance_support(const Tensor& embeddings, const std::vector<int32_t>& labels,
                       const Tensor& predictions, int64_t n_way, int64_t k_shot,
                       bool enhancement = true);

// theta' = theta + H(enhanced); row c of the hypernetwork output is the update
// slice for class c's weight column and bias entry
AdaptedModel hyper_update(const ParamSet& head, const Tensor& enhanced,
                          const HyperNetConfig& cfg, const ParamSet& eta);

// lambda = 0 before m1, 1 after m2, linear in between
double switch_lambda(double epoch, int64_t m1, int64_t m2);

// theta' = theta + lambda * H(...) - (1 - lambda) * alpha * grad_head L_S
AdaptedModel hypermaml_adapt(const EncoderConfig& enc, const EncHead& model,
                             const HyperMamlConfig& cfg, const ParamSet& eta, const Tensor& sx,
                             const std::vector<int32_t>& sy, double lambda);

// ---------------------------------------------------------------------------
// optimizer and schedules
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> moments;  // name -> (m, v)
  int64_t t = 0;

  static AdamState init(const ParamSet& params);
  std::pair<Tensor, Tensor>& at(const std::string& name);
  bool has(const std::string& name) const;
};

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// base_lr * decay^k where k = number of milestones <= epoch
double lr_schedule(int64_t epoch, const std::vector<int64_t>& milestones, double base_lr,
                   double decay = 0.3);

// ---------------------------------------------------------------------------
// meta steps (one optimizer update from a batch of episodes)
// ---------------------------------------------------------------------------

struct MetaStepResult {
  double loss = 0.0;        // summed query loss over the batch
  double grad_norm = 0.0;
};

MetaStepResult maml_meta_step(ModelBundle& model, const std::vector<Episode>& batch,
                              const MamlConfig& cfg, AdamState& opt, double lr, int threads = 1);

MetaStepResult hypermaml_meta_step(ModelBundle& model, const std::vector<Episode>& batch,
                                   const HyperMamlConfig& cfg, AdamState& opt, double lr,
                                   double lambda, int threads = 1);

// adapt + predict for evaluation; lambda applies to hypermaml only
Tensor adapt_and_predict(const ModelBundle& model, const Episode& ep, const MamlConfig& mcfg,
                         const HyperMamlConfig& hcfg, double lambda);

}  // namespace metafew
