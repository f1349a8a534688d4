#include "metafew/config.hpp"

#include <sstream>

namespace metafew {

void RunConfig::validate() const {
  if (algorithm != "maml" && algorithm != "fomaml" && algorithm != "hypermaml")
    throw ConfigError("config: unknown algorithm '" + algorithm + "'");
  if (encoder != "linear2d" && encoder != "mlp" && encoder != "conv4")
    throw ConfigError("config: unknown encoder '" + encoder + "'");
  if (family != "gaussian2d" && family != "glyphs" && family != "image-folder")
    throw ConfigError("config: unknown family '" + family + "'");
  if (switch_mode != "update_blend" && switch_mode != "loss_blend")
    throw ConfigError("config: unknown switch_mode '" + switch_mode + "'");
  if (family == "image-folder" && data_path.empty())
    throw ConfigError("config: image-folder family needs data_path");
  if (n_way < 2 || k_shot < 1 || q_per_class < 1)
    throw ConfigError("config: n_way >= 2, k_shot >= 1, q_per_class >= 1 required");
  if (epochs < 0 || episodes_per_epoch < 1 || meta_batch < 1)
    throw ConfigError("config: bad training sizes");
  if (meta_batch > episodes_per_epoch)
    throw ConfigError("config: meta_batch cannot exceed episodes_per_epoch");
  if (threads < 1) throw ConfigError("config: threads must be >= 1");
  encoder_config().validate();
  maml_config().validate();
  if (algorithm == "hypermaml") hypermaml_config().validate();
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "algorithm=" << algorithm << ";encoder=" << encoder << ";channels=" << channels
     << ";embed_dim=" << embed_dim << ";mlp_hidden=" << mlp_hidden << ";batch_norm=" << batch_norm
     << ";family=" << family << ";data_path=" << data_path << ";eval_data_path=" << eval_data_path
     << ";image_size=" << image_size << ";image_channels=" << image_channels
     << ";glyph_classes=" << glyph_classes << ";n_way=" << n_way << ";k_shot=" << k_shot
     << ";q_per_class=" << q_per_class << ";split=" << split_train << "," << split_val << ","
     << split_test << ";gauss=" << gauss_center << "," << gauss_var_major << "," << gauss_var_minor
     << ";inner_lr=" << inner_lr << ";inner_steps=" << inner_steps << ";first_order=" << first_order
     << ";milestones=" << milestone1 << "," << milestone2 << ";switch_mode=" << switch_mode
     << ";enhancement=" << enhancement << ";hyper_hidden=" << hyper_hidden
     << ";warmup_inner_lr=" << warmup_inner_lr << ";meta_lr=" << meta_lr
     << ";lr_decay=" << lr_decay << ";lr_milestones=";
  for (int64_t m : lr_milestones) os << m << ",";
  os << ";epochs=" << epochs << ";episodes_per_epoch=" << episodes_per_epoch
     << ";meta_batch=" << meta_batch << ";seed=" << seed;
  return os.str();
}

uint64_t RunConfig::hash() const { return fnv1a(canonical()); }

std::string RunConfig::hash_hex() const {
  std::ostringstream os;
  os << std::hex << hash();
  return os.str();
}

Algorithm RunConfig::algorithm_enum() const {
  if (algorithm == "maml") return Algorithm::maml;
  if (algorithm == "fomaml") return Algorithm::fomaml;
  return Algorithm::hypermaml;
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.variant = encoder == "linear2d" ? EncoderVariant::linear2d
              : encoder == "mlp"    ? EncoderVariant::mlp
                                    : EncoderVariant::conv4;
  if (e.variant == EncoderVariant::conv4)
    e.input = {family == "image-folder" ? image_channels : int64_t(1), image_size, image_size};
  else if (family == "gaussian2d")
    e.input = {2};
  else
    e.input = {image_size * image_size * (family == "image-folder" ? image_channels : 1)};
  e.channels = channels;
  e.embed_dim = embed_dim;
  e.hidden = mlp_hidden;
  e.use_batch_norm = batch_norm;
  return e;
}

HyperNetConfig RunConfig::hyper_config() const {
  HyperNetConfig h;
  h.hidden = hyper_hidden;
  h.embed_dim = encoder_config().out_dim();
  h.n_way = n_way;
  h.enhancement = enhancement;
  return h;
}

MamlConfig RunConfig::maml_config() const {
  MamlConfig m;
  m.inner_lr = inner_lr;
  m.inner_steps = int(inner_steps);
  m.first_order = first_order || algorithm == "fomaml";
  m.meta_lr = meta_lr;
  return m;
}

HyperMamlConfig RunConfig::hypermaml_config() const {
  HyperMamlConfig h;
  h.milestone1 = milestone1;
  h.milestone2 = milestone2;
  h.switch_mode = switch_mode == "loss_blend" ? SwitchMode::loss_blend : SwitchMode::update_blend;
  h.enhancement = enhancement;
  h.hypernet = hyper_config();
  h.meta_lr = meta_lr;
  h.warmup_inner_lr = warmup_inner_lr;
  return h;
}

std::vector<int64_t> RunConfig::effective_lr_milestones() const {
  if (!lr_milestones.empty()) return lr_milestones;
  return {milestone1, milestone2};
}

EpisodeSampler RunConfig::make_sampler() const {
  EpisodeSpec spec{n_way, k_shot, q_per_class};
  if (family == "gaussian2d") {
    Gaussian2dConfig g;
    g.center = gauss_center;
    g.var_major = gauss_var_major;
    g.var_minor = gauss_var_minor;
    g.q_per_class = q_per_class;
    return EpisodeSampler(make_gaussian2d_family(g, seed), spec);
  }
  if (family == "glyphs") {
    GlyphFamilyConfig g;
    g.n_classes = glyph_classes;
    g.image_size = image_size;
    g.seed = seed;
    return EpisodeSampler(make_glyph_family(g, split_train, split_val, split_test), spec);
  }
  TaskFamily train_fam = load_image_folder(data_path, image_size, image_channels,
                                           k_shot + q_per_class, split_train, split_val,
                                           split_test, seed);
  if (!eval_data_path.empty()) {
    TaskFamily eval_fam = load_image_folder(eval_data_path, image_size, image_channels,
                                            k_shot + q_per_class, split_train, split_val,
                                            split_test, seed + 1);
    return EpisodeSampler(std::move(train_fam), std::move(eval_fam), spec);
  }
  return EpisodeSampler(std::move(train_fam), spec);
}

ModelBundle RunConfig::make_model() const {
  return ModelBundle::build(algorithm_enum(), encoder_config(), n_way, hyper_config(), seed);
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  auto toy_base = [&] {
    c.family = "gaussian2d";
    c.encoder = "linear2d";
    c.n_way = 2;
    c.k_shot = 10;
    c.q_per_class = 15;
    c.meta_lr = 0.01;
    c.epochs = 300;
    c.episodes_per_epoch = 32;
    c.meta_batch = 4;
    c.val_episodes = 40;
    c.val_every = 25;
    c.milestone1 = 10;
    c.milestone2 = 80;
    c.lr_milestones = {150, 250};
    c.out_dir = "runs/" + name;
  };
  if (name == "toy2d-maml1") {
    toy_base();
    c.algorithm = "maml";
    c.inner_steps = 1;
    c.inner_lr = 0.05;
  } else if (name == "toy2d-maml5") {
    toy_base();
    c.algorithm = "maml";
    c.inner_steps = 5;
    c.inner_lr = 0.05;
  } else if (name == "toy2d-hypermaml") {
    toy_base();
    c.algorithm = "hypermaml";
    c.hyper_hidden = 256;
    c.warmup_inner_lr = 0.05;
  } else if (name == "glyphs-5w1s" || name == "glyphs-5w5s") {
    c.algorithm = "hypermaml";
    c.family = "glyphs";
    c.encoder = "conv4";
    c.n_way = 5;
    c.k_shot = name == "glyphs-5w5s" ? 5 : 1;
    c.q_per_class = 16;
    c.glyph_classes = 64;
    c.image_size = 28;
    c.meta_lr = 0.01;
    c.epochs = 60;
    c.episodes_per_epoch = 8;
    c.meta_batch = 4;
    c.val_episodes = 20;
    c.val_every = 10;
    c.milestone1 = 5;
    c.milestone2 = 30;
    c.lr_milestones = {40};
    c.hyper_hidden = 256;
    c.out_dir = "runs/" + name;
  } else {
    throw ConfigError("config: unknown preset '" + name + "'");
  }
  return c;
}

std::vector<std::string> RunConfig::preset_names() {
  return {"toy2d-maml1", "toy2d-maml5", "toy2d-hypermaml", "glyphs-5w1s", "glyphs-5w5s"};
}

}  // namespace metafew
