#pragma once

#include <string>
#include <vector>

#include "metafew/bench.hpp"
#include "metafew/meta.hpp"
#include "metafew/tasks.hpp"

namespace metafew {

// Everything a run needs, flat so the CLI and config files map 1:1 onto it.
struct RunConfig {
  std::string algorithm = "maml";  // maml | fomaml | hypermaml
  std::string encoder = "conv4";   // linear2d | mlp | conv4

  // encoder geometry
  int64_t channels = 64;
  int64_t embed_dim = 64;
  int64_t mlp_hidden = 64;
  bool batch_norm = true;

  // task family
  std::string family = "glyphs";  // gaussian2d | glyphs | image-folder
  std::string data_path;
  std::string eval_data_path;  // cross-domain: val/test from this folder
  int64_t image_size = 28;
  int64_t image_channels = 1;
  int64_t glyph_classes = 64;
  int64_t n_way = 5, k_shot = 1, q_per_class = 16;
  double split_train = 0.6, split_val = 0.2, split_test = 0.2;
  double gauss_center = 1.0, gauss_var_major = 16.0, gauss_var_minor = 0.01;

  // maml
  double inner_lr = 0.01;
  int64_t inner_steps = 1;
  bool first_order = false;

  // hypermaml
  int64_t milestone1 = 51, milestone2 = 550;
  std::string switch_mode = "update_blend";  // update_blend | loss_blend
  bool enhancement = true;
  int64_t hyper_hidden = 256;
  double warmup_inner_lr = 0.01;

  // training
  double meta_lr = 0.01;
  double lr_decay = 0.3;
  std::vector<int64_t> lr_milestones;  // empty -> warm-up milestones
  int64_t epochs = 100;
  int64_t episodes_per_epoch = 16;
  int64_t meta_batch = 4;
  int64_t val_episodes = 40;
  int64_t val_every = 10;
  int64_t checkpoint_every = 0;  // 0 -> only last/best
  uint64_t seed = 0;
  int64_t threads = 1;
  std::string out_dir = "runs/out";

  void validate() const;
  std::string canonical() const;
  uint64_t hash() const;
  std::string hash_hex() const;

  Algorithm algorithm_enum() const;
  EncoderConfig encoder_config() const;
  HyperNetConfig hyper_config() const;
  MamlConfig maml_config() const;
  HyperMamlConfig hypermaml_config() const;
  EpisodeSampler make_sampler() const;
  ModelBundle make_model() const;
  std::vector<int64_t> effective_lr_milestones() const;

  static RunConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

}  // namespace metafew
