#include "metafew/train.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "metafew/bench.hpp"

namespace fs = std::filesystem;

namespace metafew {

Checkpoint snapshot(const ModelBundle& model, const AdamState& opt, const RunConfig& cfg,
                    int64_t epoch) {
  Checkpoint ck;
  ck.config_hash = cfg.hash();
  ck.epoch = epoch;
  ck.tensors = model.joint().clone();
  for (auto& kv : opt.moments) {
    ck.opt_state.add("adam.m." + kv.first, kv.second.first.clone());
    ck.opt_state.add("adam.v." + kv.first, kv.second.second.clone());
  }
  ck.opt_state.add("adam.t", Tensor::from({1}, {double(opt.t)}, Dtype::f32));
  return ck;
}

void restore_model(ModelBundle& model, AdamState* opt, const Checkpoint& ck) {
  ParamSet joint = model.joint();
  if (joint.size() != ck.tensors.size())
    throw ConfigError("restore: checkpoint holds " + std::to_string(ck.tensors.size()) +
                      " tensors, model expects " + std::to_string(joint.size()));
  for (auto& kv : joint) {
    const Tensor& src = ck.tensors.at(kv.first);
    if (src.shape() != kv.second.shape())
      throw ConfigError("restore: shape mismatch for " + kv.first);
    for (int64_t i = 0; i < src.numel(); ++i) kv.second.set(size_t(i), src.at(size_t(i)));
  }
  if (opt) {
    *opt = AdamState::init(joint);
    if (ck.opt_state.has("adam.t")) {
      opt->t = int64_t(ck.opt_state.at("adam.t").at(0));
      for (auto& kv : opt->moments) {
        const Tensor& m = ck.opt_state.at("adam.m." + kv.first);
        const Tensor& v = ck.opt_state.at("adam.v." + kv.first);
        for (int64_t i = 0; i < m.numel(); ++i) {
          kv.second.first.set(size_t(i), m.at(size_t(i)));
          kv.second.second.set(size_t(i), v.at(size_t(i)));
        }
      }
    }
  }
}

void write_epoch_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("train: cannot write " + path);
  os << "epoch,train_loss,lambda,lr,val_accuracy\n";
  os.precision(17);
  for (const EpochLog& e : log) {
    os << e.epoch << "," << e.train_loss << "," << e.lambda << "," << e.lr << ",";
    if (e.val_accuracy >= 0) os << e.val_accuracy;
    os << "\n";
  }
}

TrainResult train_loop(const RunConfig& cfg, std::ostream* progress, const Checkpoint* resume) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  EpisodeSampler sampler = cfg.make_sampler();
  TrainResult res;
  res.model = cfg.make_model();
  ParamSet joint = res.model.joint();
  res.opt = AdamState::init(joint);
  if (resume) restore_model(res.model, &res.opt, *resume);

  MamlConfig mcfg = cfg.maml_config();
  HyperMamlConfig hcfg = cfg.algorithm == "hypermaml" ? cfg.hypermaml_config() : HyperMamlConfig{};
  const bool hyper = cfg.algorithm == "hypermaml";
  const std::vector<int64_t> lr_ms = cfg.effective_lr_milestones();
  const int64_t steps_per_epoch = std::max<int64_t>(1, cfg.episodes_per_epoch / cfg.meta_batch);

  uint64_t episode_counter = 0;
  const std::string last_path = cfg.out_dir + "/last.ckpt";
  const std::string best_path = cfg.out_dir + "/best.ckpt";

  auto validate_now = [&](double lambda) {
    EpisodeAdapter adapter = make_adapter(res.model, mcfg, hcfg, lambda);
    Report rep = evaluate(adapter, sampler, Split::val, cfg.val_episodes, int(cfg.threads));
    return rep.accuracy_mean;
  };

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lambda = hyper ? switch_lambda(double(epoch), hcfg.milestone1, hcfg.milestone2) : 0.0;
    double lr = lr_schedule(epoch, lr_ms, cfg.meta_lr, cfg.lr_decay);

    double loss_sum = 0.0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<Episode> batch;
      batch.reserve(size_t(cfg.meta_batch));
      for (int64_t b = 0; b < cfg.meta_batch; ++b)
        batch.push_back(sampler.sample(Split::train, episode_counter++));
      try {
        MetaStepResult r =
            hyper ? hypermaml_meta_step(res.model, batch, hcfg, res.opt, lr, lambda,
                                        int(cfg.threads))
                  : maml_meta_step(res.model, batch, mcfg, res.opt, lr, int(cfg.threads));
        loss_sum += r.loss;
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / double(steps_per_epoch * cfg.meta_batch);
    log.lambda = lambda;
    log.lr = lr;

    bool last_epoch = epoch + 1 == cfg.epochs;
    if ((cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0) || last_epoch) {
      log.val_accuracy = validate_now(lambda);
      if (log.val_accuracy > res.best_val_accuracy) {
        res.best_val_accuracy = log.val_accuracy;
        save_checkpoint(best_path, snapshot(res.model, res.opt, cfg, epoch));
        res.best_checkpoint = best_path;
      }
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.out_dir + "/epoch_" + std::to_string(epoch) + ".ckpt",
                      snapshot(res.model, res.opt, cfg, epoch));

    res.log.push_back(log);
    if (progress) {
      (*progress) << "epoch " << epoch << " loss " << log.train_loss << " lr " << lr;
      if (hyper) (*progress) << " lambda " << lambda;
      if (log.val_accuracy >= 0) (*progress) << " val " << log.val_accuracy;
      (*progress) << "\n";
    }
  }

  save_checkpoint(last_path, snapshot(res.model, res.opt, cfg, cfg.epochs ? cfg.epochs - 1 : 0));
  res.last_checkpoint = last_path;
  write_epoch_log_csv(res.log, cfg.out_dir + "/train_log.csv");
  return res;
}

}  // namespace metafew
