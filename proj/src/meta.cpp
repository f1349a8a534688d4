#include "metafew/meta.hpp"

#include <algorithm>
#include <atomic>
#include <future>

namespace metafew {

void MamlConfig::validate() const {
  if (inner_lr < 0) throw ConfigError("maml: inner_lr must be >= 0");
  if (inner_steps < 0) throw ConfigError("maml: inner_steps must be >= 0");
  if (meta_lr <= 0) throw ConfigError("maml: meta_lr must be > 0");
}

void HyperMamlConfig::validate() const {
  if (milestone1 >= milestone2) throw ConfigError("hypermaml: milestones must satisfy m1 < m2");
  if (meta_lr <= 0) throw ConfigError("hypermaml: meta_lr must be > 0");
  if (warmup_inner_lr < 0) throw ConfigError("hypermaml: warmup_inner_lr must be >= 0");
  hypernet.validate();
}

ParamSet with_prefix(const ParamSet& p, const std::string& prefix) {
  ParamSet out(p.role());
  for (auto& kv : p) out.add(prefix + kv.first, kv.second);
  return out;
}

ParamSet strip_prefix(const ParamSet& p, const std::string& prefix) {
  ParamSet out;
  for (auto& kv : p)
    if (kv.first.rfind(prefix, 0) == 0) out.add(kv.first.substr(prefix.size()), kv.second);
  return out;
}

ModelBundle ModelBundle::build(Algorithm alg, const EncoderConfig& enc, int64_t n_way,
                               const HyperNetConfig& hyper, uint64_t seed, Dtype dt) {
  ModelBundle m;
  m.algorithm = alg;
  m.enc_cfg = enc;
  m.hyper_cfg = hyper;
  m.n_way = n_way;
  Rng rng(seed);
  m.encoder = build_encoder(enc, rng, dt);
  m.head = build_head(enc.out_dim(), n_way, rng, dt);
  if (alg == Algorithm::hypermaml) {
    m.hyper_cfg.embed_dim = enc.out_dim();
    m.hyper_cfg.n_way = n_way;
    m.hypernet = build_hypernetwork(m.hyper_cfg, rng, dt);
  }
  return m;
}

ParamSet ModelBundle::joint() const {
  ParamSet out;
  for (auto& kv : encoder) out.add("enc." + kv.first, kv.second);
  for (auto& kv : head) out.add("head." + kv.first, kv.second);
  for (auto& kv : hypernet) out.add("hyper." + kv.first, kv.second);
  return out;
}

// ---------------------------------------------------------------------------

Tensor episode_logits(const EncoderConfig& enc, const EncHead& model, const Tensor& x) {
  return classify(model.head, encode(enc, model.encoder, x));
}

Tensor episode_loss(const EncoderConfig& enc, const EncHead& model, const Tensor& x,
                    const std::vector<int32_t>& y) {
  return softmax_xent(episode_logits(enc, model, x), y);
}

Tensor predict_query(const EncoderConfig& enc, const ParamSet& encoder_params,
                     const ParamSet& effective_head, const Tensor& query_x) {
  return softmax(classify(effective_head, encode(enc, encoder_params, query_x)));
}

double accuracy(const Tensor& probs, const std::vector<int32_t>& labels) {
  int64_t B = probs.shape()[0], N = probs.shape()[1];
  if (int64_t(labels.size()) != B) throw ShapeError("accuracy: label count mismatch");
  int64_t correct = 0;
  for (int64_t i = 0; i < B; ++i) {
    int64_t best = 0;  // ties resolve to the lowest class index
    for (int64_t c = 1; c < N; ++c)
      if (probs.at(size_t(i * N + c)) > probs.at(size_t(i * N + best))) best = c;
    if (best == labels[size_t(i)]) ++correct;
  }
  return double(correct) / double(B);
}

// ---------------------------------------------------------------------------
// MAML
// ---------------------------------------------------------------------------

namespace {

// collect (name, tensor) across encoder+head in a stable order
std::vector<std::pair<std::string, Tensor>> model_items(const EncHead& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& kv : m.encoder) out.emplace_back("enc." + kv.first, kv.second);
  for (auto& kv : m.head) out.emplace_back("head." + kv.first, kv.second);
  return out;
}

EncHead model_from_items(const EncHead& like,
                         const std::vector<std::pair<std::string, Tensor>>& items) {
  EncHead out;
  size_t i = 0;
  for (auto& kv : like.encoder) out.encoder.add(kv.first, items[i++].second);
  for (auto& kv : like.head) out.head.add(kv.first, items[i++].second);
  return out;
}

std::shared_ptr<Tape> tape_of(const EncHead& m) {
  for (auto& kv : m.head)
    if (kv.second.on_tape()) return kv.second.tape();
  for (auto& kv : m.encoder)
    if (kv.second.on_tape()) return kv.second.tape();
  return nullptr;
}

}  // namespace

EncHead maml_adapt(const EncoderConfig& enc, const EncHead& model, const Tensor& sx,
                   const std::vector<int32_t>& sy, const MamlConfig& cfg) {
  cfg.validate();
  EncHead cur = model;
  auto tape = tape_of(model);
  if (!tape) throw ShapeError("maml_adapt: model parameters must be watched on a tape");
  for (int step = 0; step < cfg.inner_steps; ++step) {
    Tensor loss = episode_loss(enc, cur, sx, sy);
    if (!loss.all_finite()) throw NumericError("maml_adapt: non-finite support loss");
    auto items = model_items(cur);
    std::vector<Tensor> wrt;
    for (auto& kv : items) wrt.push_back(kv.second);
    std::vector<Tensor> grads = tape->gradients(loss, wrt, /*create_graph=*/!cfg.first_order);
    for (size_t i = 0; i < items.size(); ++i)
      items[i].second = sub(items[i].second, scale(grads[i], cfg.inner_lr));
    cur = model_from_items(model, items);
  }
  return cur;
}

ParamSet head_gradient_step(const EncoderConfig& enc, const EncHead& model, const Tensor& sx,
                            const std::vector<int32_t>& sy, double alpha, bool create_graph) {
  auto tape = tape_of(model);
  if (!tape) throw ShapeError("head_gradient_step: model parameters must be watched on a tape");
  Tensor loss = episode_loss(enc, model, sx, sy);
  std::vector<Tensor> wrt = {model.head.at("W"), model.head.at("b")};
  std::vector<Tensor> grads = tape->gradients(loss, wrt, create_graph);
  ParamSet out(Role::head);
  out.add("W", sub(model.head.at("W"), scale(grads[0], alpha)));
  out.add("b", sub(model.head.at("b"), scale(grads[1], alpha)));
  return out;
}

// ---------------------------------------------------------------------------
// HyperMAML
// ---------------------------------------------------------------------------

Tensor enhance_support(const Tensor& embeddings, const std::vector<int32_t>& labels,
                       const Tensor& predictions, int64_t n_way, int64_t k_shot,
                       bool enhancement) {
  int64_t L = embeddings.shape()[0];
  if (int64_t(labels.size()) != L) throw ShapeError("enhance_support: label count mismatch");
  std::vector<int64_t> counts(size_t(n_way), 0);
  for (int32_t y : labels) {
    if (y < 0 || y >= n_way) throw ShapeError("enhance_support: label out of range");
    counts[size_t(y)]++;
  }
  for (int64_t c = 0; c < n_way; ++c) {
    if (counts[size_t(c)] == 0)
      throw ShapeError("enhance_support: class " + std::to_string(c) + " missing from support");
    if (k_shot > 0 && counts[size_t(c)] != k_shot)
      throw ShapeError("enhance_support: class " + std::to_string(c) + " has " +
                       std::to_string(counts[size_t(c)]) + " support rows, expected k_shot=" +
                       std::to_string(k_shot));
  }

  // per-class mean as a constant selection matrix (differentiable through the
  // embeddings; the predictions arrive detached)
  Tensor sel = Tensor::zeros({n_way, L}, embeddings.dtype());
  for (int64_t i = 0; i < L; ++i) {
    int64_t c = labels[size_t(i)];
    sel.set(size_t(c * L + i), 1.0 / double(counts[size_t(c)]));
  }
  Tensor mean_emb = matmul(sel, embeddings);  // (n_way, embed)
  Tensor onehot = Tensor::zeros({n_way, n_way}, embeddings.dtype());
  for (int64_t c = 0; c < n_way; ++c) onehot.set(size_t(c * n_way + c), 1.0);

  if (!enhancement) return concat_cols({mean_emb, onehot});

  if (predictions.shape() != Shape({L, n_way}))
    throw ShapeError("enhance_support: predictions must be (L, n_way), got " +
                     shape_str(predictions.shape()));
  Tensor mean_pred = matmul(sel, predictions.detached());
  return concat_cols({mean_emb, mean_pred, onehot});
}

AdaptedModel hyper_update(const ParamSet& head, const Tensor& enhanced, const HyperNetConfig& cfg,
                          const ParamSet& eta) {
  int64_t embed = cfg.embed_dim, n_way = cfg.n_way;
  if (enhanced.shape()[0] != n_way)
    throw ShapeError("hyper_update: enhanced row count must equal n_way");
  Tensor slices = hypernet_forward(cfg, eta, enhanced);  // (n_way, embed + 1)
  Tensor dW = transpose2d(slice_cols(slices, 0, embed));  // (embed, n_way)
  Tensor db = reshape(slice_cols(slices, embed, 1), {n_way});
  const Tensor& W = head.at("W");
  const Tensor& b = head.at("b");
  if (dW.shape() != W.shape() || db.shape() != b.shape())
    throw ShapeError("hyper_update: hypernetwork output does not match the head slice");

  AdaptedModel out;
  out.base.add("W", W);
  out.base.add("b", b);
  out.delta.add("W", dW);
  out.delta.add("b", db);
  out.effective.add("W", add(W, dW));
  out.effective.add("b", add(b, db));
  return out;
}

double switch_lambda(double epoch, int64_t m1, int64_t m2) {
  if (m1 >= m2) throw ConfigError("switch_lambda: milestones must satisfy m1 < m2");
  if (epoch <= double(m1)) return 0.0;
  if (epoch >= double(m2)) return 1.0;
  return (epoch - double(m1)) / double(m2 - m1);
}

AdaptedModel hypermaml_adapt(const EncoderConfig& enc, const EncHead& model,
                             const HyperMamlConfig& cfg, const ParamSet& eta, const Tensor& sx,
                             const std::vector<int32_t>& sy, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("hypermaml_adapt: lambda must be in [0,1]");
  int64_t n_way = cfg.hypernet.n_way, k_shot = int64_t(sy.size()) / n_way;

  // pure warm-up endpoint: exactly one gradient step on the head
  if (lambda == 0.0) {
    ParamSet stepped =
        head_gradient_step(enc, model, sx, sy, cfg.warmup_inner_lr, /*create_graph=*/true);
    AdaptedModel out;
    out.base.add("W", model.head.at("W"));
    out.base.add("b", model.head.at("b"));
    out.delta.add("W", sub(stepped.at("W"), model.head.at("W")));
    out.delta.add("b", sub(stepped.at("b"), model.head.at("b")));
    out.effective = std::move(stepped);
    return out;
  }

  Tensor emb = encode(enc, model.encoder, sx);
  Tensor predictions;
  if (cfg.hypernet.enhancement) {
    // the base classifier is frozen for this prediction pass: no gradient
    // flows through it, only the detached probabilities are consumed
    auto tape = tape_of(model);
    if (tape) {
      RecordPause pause(*tape);
      predictions = softmax(classify(model.head, emb.detached()));
    } else {
      predictions = softmax(classify(model.head, emb));
    }
  }
  Tensor enhanced = enhance_support(emb, sy, predictions, n_way, k_shot, cfg.hypernet.enhancement);
  AdaptedModel hyper = hyper_update(model.head, enhanced, cfg.hypernet, eta);
  if (lambda == 1.0) return hyper;

  // blended update: theta + lambda*H - (1-lambda)*alpha*grad
  ParamSet grad_step = head_gradient_step(enc, model, sx, sy, (1.0 - lambda) * cfg.warmup_inner_lr,
                                          /*create_graph=*/true);
  AdaptedModel out;
  out.base = hyper.base;
  out.effective.add("W", add(grad_step.at("W"), scale(hyper.delta.at("W"), lambda)));
  out.effective.add("b", add(grad_step.at("b"), scale(hyper.delta.at("b"), lambda)));
  out.delta.add("W", sub(out.effective.at("W"), model.head.at("W")));
  out.delta.add("b", sub(out.effective.at("b"), model.head.at("b")));
  return out;
}

// ---------------------------------------------------------------------------
// optimizer / schedules
// ---------------------------------------------------------------------------

AdamState AdamState::init(const ParamSet& params) {
  AdamState st;
  for (auto& kv : params)
    st.moments.emplace_back(kv.first, std::make_pair(Tensor::zeros(kv.second.shape(), kv.second.dtype()),
                                                     Tensor::zeros(kv.second.shape(), kv.second.dtype())));
  return st;
}

std::pair<Tensor, Tensor>& AdamState::at(const std::string& name) {
  for (auto& kv : moments)
    if (kv.first == name) return kv.second;
  throw ShapeError("adam: no state for parameter " + name);
}

bool AdamState::has(const std::string& name) const {
  for (auto& kv : moments)
    if (kv.first == name) return true;
  return false;
}

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  state.t += 1;
  double bc1 = 1.0 - std::pow(beta1, double(state.t));
  double bc2 = 1.0 - std::pow(beta2, double(state.t));
  for (auto& kv : params) {
    const Tensor& g = grads.at(kv.first);
    if (g.shape() != kv.second.shape())
      throw ShapeError("adam: gradient shape mismatch for " + kv.first);
    auto& mv = state.at(kv.first);
    Tensor& m = mv.first;
    Tensor& v = mv.second;
    for (int64_t i = 0; i < g.numel(); ++i) {
      double gi = g.at(size_t(i));
      double mi = beta1 * m.at(size_t(i)) + (1.0 - beta1) * gi;
      double vi = beta2 * v.at(size_t(i)) + (1.0 - beta2) * gi * gi;
      m.set(size_t(i), mi);
      v.set(size_t(i), vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      kv.second.set(size_t(i), kv.second.at(size_t(i)) - update);
    }
  }
}

double lr_schedule(int64_t epoch, const std::vector<int64_t>& milestones, double base_lr,
                   double decay) {
  for (size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw ConfigError("lr_schedule: milestones must be strictly increasing");
  double lr = base_lr;
  for (int64_t m : milestones)
    if (m <= epoch) lr *= decay;
  return lr;
}

// ---------------------------------------------------------------------------
// meta steps
// ---------------------------------------------------------------------------

namespace {

struct EpisodeGrad {
  double loss = 0.0;
  GradMap grads;
};

void accumulate(GradMap& acc, const GradMap& g) {
  if (acc.size() == 0) {
    acc = g;
    return;
  }
  GradMap out;
  for (auto& kv : acc) out.add(kv.first, add(kv.second, g.at(kv.first)));
  acc = std::move(out);
}

// run `fn(i)` for i in [0,n) and return results in index order
template <class F>
auto ordered_parallel(int64_t n, int threads, F&& fn) {
  using R = decltype(fn(int64_t(0)));
  std::vector<R> out;
  out.resize(size_t(n));
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] = fn(i);
    return out;
  }
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      int64_t i = next.fetch_add(1);
      if (i >= n) return;
      out[size_t(i)] = fn(i);
    }
  };
  std::vector<std::future<void>> futs;
  for (int t = 0; t < std::min<int>(threads, int(n)); ++t)
    futs.push_back(std::async(std::launch::async, worker));
  for (auto& f : futs) f.get();
  return out;
}

}  // namespace

MetaStepResult maml_meta_step(ModelBundle& model, const std::vector<Episode>& batch,
                              const MamlConfig& cfg, AdamState& opt, double lr, int threads) {
  if (batch.empty()) throw ConfigError("maml_meta_step: batch must be nonempty");

  auto episode_pass = [&](int64_t i) -> EpisodeGrad {
    const Episode& ep = batch[size_t(i)];
    auto tape = Tape::make(model.head.at("b").dtype());
    EncHead attached{tape->watch_all(model.encoder), tape->watch_all(model.head)};
    EncHead adapted = maml_adapt(model.enc_cfg, attached, ep.support_x, ep.support_y, cfg);
    Tensor loss = episode_loss(model.enc_cfg, adapted, ep.query_x, ep.query_y);
    ParamSet wrt;
    for (auto& kv : attached.encoder) wrt.add("enc." + kv.first, kv.second);
    for (auto& kv : attached.head) wrt.add("head." + kv.first, kv.second);
    EpisodeGrad out;
    out.loss = loss.item();
    out.grads = tape->backward(loss, wrt);
    return out;
  };

  auto per_episode = ordered_parallel(int64_t(batch.size()), threads, episode_pass);
  MetaStepResult res;
  GradMap total;
  for (auto& eg : per_episode) {
    res.loss += eg.loss;
    accumulate(total, eg.grads);
  }
  if (!std::isfinite(res.loss)) throw NumericError("maml_meta_step: non-finite meta loss");

  ParamSet joint;
  for (auto& kv : model.encoder) joint.add("enc." + kv.first, kv.second);
  for (auto& kv : model.head) joint.add("head." + kv.first, kv.second);
  adam_step(joint, total, opt, lr);
  res.grad_norm = total.norm();
  return res;
}

MetaStepResult hypermaml_meta_step(ModelBundle& model, const std::vector<Episode>& batch,
                                   const HyperMamlConfig& cfg, AdamState& opt, double lr,
                                   double lambda, int threads) {
  if (batch.empty()) throw ConfigError("hypermaml_meta_step: batch must be nonempty");

  auto episode_pass = [&](int64_t i) -> EpisodeGrad {
    const Episode& ep = batch[size_t(i)];
    auto tape = Tape::make(model.head.at("b").dtype());
    EncHead attached{tape->watch_all(model.encoder), tape->watch_all(model.head)};
    ParamSet eta = tape->watch_all(model.hypernet);

    Tensor loss;
    if (cfg.switch_mode == SwitchMode::update_blend) {
      AdaptedModel am = hypermaml_adapt(model.enc_cfg, attached, cfg, eta, ep.support_x,
                                        ep.support_y, lambda);
      EncHead adapted{attached.encoder, am.effective};
      loss = episode_loss(model.enc_cfg, adapted, ep.query_x, ep.query_y);
    } else {
      // loss blend: p * L_maml + (1-p) * L_hyper with p = 1 - lambda
      double p = 1.0 - lambda;
      Tensor total;
      if (p > 0.0) {
        ParamSet stepped = head_gradient_step(model.enc_cfg, attached, ep.support_x, ep.support_y,
                                              cfg.warmup_inner_lr, /*create_graph=*/true);
        EncHead adapted{attached.encoder, stepped};
        Tensor lm = episode_loss(model.enc_cfg, adapted, ep.query_x, ep.query_y);
        total = scale(lm, p);
      }
      if (lambda > 0.0) {
        AdaptedModel am = hypermaml_adapt(model.enc_cfg, attached, cfg, eta, ep.support_x,
                                          ep.support_y, 1.0);
        EncHead adapted{attached.encoder, am.effective};
        Tensor lh = scale(episode_loss(model.enc_cfg, adapted, ep.query_x, ep.query_y), lambda);
        total = total.defined() ? add(total, lh) : lh;
      }
      loss = total;
    }
    if (!loss.all_finite()) throw NumericError("hypermaml_meta_step: non-finite query loss");

    ParamSet wrt;
    for (auto& kv : attached.encoder) wrt.add("enc." + kv.first, kv.second);
    for (auto& kv : attached.head) wrt.add("head." + kv.first, kv.second);
    for (auto& kv : eta) wrt.add("hyper." + kv.first, kv.second);
    EpisodeGrad out;
    out.loss = loss.item();
    out.grads = tape->backward(loss, wrt);
    return out;
  };

  auto per_episode = ordered_parallel(int64_t(batch.size()), threads, episode_pass);
  MetaStepResult res;
  GradMap total;
  for (auto& eg : per_episode) {
    res.loss += eg.loss;
    accumulate(total, eg.grads);
  }
  if (!std::isfinite(res.loss)) throw NumericError("hypermaml_meta_step: non-finite meta loss");

  ParamSet joint = model.joint();
  adam_step(joint, total, opt, lr);
  res.grad_norm = total.norm();
  return res;
}

Tensor adapt_and_predict(const ModelBundle& model, const Episode& ep, const MamlConfig& mcfg,
                         const HyperMamlConfig& hcfg, double lambda) {
  auto tape = Tape::make(model.head.at("b").dtype());
  EncHead attached{tape->watch_all(model.encoder), tape->watch_all(model.head)};
  ParamSet effective_head;
  ParamSet encoder_params = attached.encoder;

  if (model.algorithm == Algorithm::hypermaml) {
    ParamSet eta = tape->watch_all(model.hypernet);
    AdaptedModel am =
        hypermaml_adapt(model.enc_cfg, attached, hcfg, eta, ep.support_x, ep.support_y, lambda);
    effective_head = am.effective;
  } else {
    MamlConfig eval_cfg = mcfg;
    eval_cfg.first_order = true;  // adapted values are identical; skip create_graph at eval
    EncHead adapted = maml_adapt(model.enc_cfg, attached, ep.support_x, ep.support_y, eval_cfg);
    encoder_params = adapted.encoder;
    effective_head = adapted.head;
  }

  // query prediction does not need the tape; detach to keep it off the graph
  ParamSet enc_detached, head_detached;
  for (auto& kv : encoder_params) enc_detached.add(kv.first, kv.second.detached());
  for (auto& kv : effective_head) head_detached.add(kv.first, kv.second.detached());
  return predict_query(model.enc_cfg, enc_detached, head_detached, ep.query_x);
}

}  // namespace metafew
