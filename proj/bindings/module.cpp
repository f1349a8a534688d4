#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metafew/bench.hpp"
#include "metafew/checkpoint.hpp"
#include "metafew/config.hpp"
#include "metafew/train.hpp"

namespace py = pybind11;
using namespace metafew;

namespace {

Tensor tensor_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[size_t(i)] = arr.shape(i);
  Tensor t = Tensor::zeros(shape, Dtype::f32);
  const float* src = arr.data();
  for (int64_t i = 0; i < t.numel(); ++i) t.set(size_t(i), double(src[i]));
  return t;
}

py::array_t<float> numpy_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> arr(shape);
  float* dst = arr.mutable_data();
  for (int64_t i = 0; i < t.numel(); ++i) dst[i] = float(t.at(size_t(i)));
  return arr;
}

py::dict episode_to_dict(const Episode& ep) {
  py::dict d;
  d["support_x"] = numpy_from_tensor(ep.support_x);
  d["support_y"] = py::array_t<int32_t>(py::ssize_t(ep.support_y.size()), ep.support_y.data());
  d["query_x"] = numpy_from_tensor(ep.query_x);
  d["query_y"] = py::array_t<int32_t>(py::ssize_t(ep.query_y.size()), ep.query_y.data());
  d["n_way"] = ep.n_way;
  d["k_shot"] = ep.k_shot;
  d["q_per_class"] = ep.q_per_class;
  return d;
}

RunConfig config_from_kwargs(const py::kwargs& kwargs) {
  RunConfig cfg;
  if (kwargs.contains("preset")) cfg = RunConfig::preset(kwargs["preset"].cast<std::string>());
  auto set_if = [&](const char* key, auto&& setter) {
    if (kwargs.contains(key)) setter(kwargs[key]);
  };
  set_if("algorithm", [&](py::handle v) { cfg.algorithm = v.cast<std::string>(); });
  set_if("encoder", [&](py::handle v) { cfg.encoder = v.cast<std::string>(); });
  set_if("family", [&](py::handle v) { cfg.family = v.cast<std::string>(); });
  set_if("channels", [&](py::handle v) { cfg.channels = v.cast<int64_t>(); });
  set_if("image_size", [&](py::handle v) { cfg.image_size = v.cast<int64_t>(); });
  set_if("glyph_classes", [&](py::handle v) { cfg.glyph_classes = v.cast<int64_t>(); });
  set_if("n_way", [&](py::handle v) { cfg.n_way = v.cast<int64_t>(); });
  set_if("k_shot", [&](py::handle v) { cfg.k_shot = v.cast<int64_t>(); });
  set_if("q_per_class", [&](py::handle v) { cfg.q_per_class = v.cast<int64_t>(); });
  set_if("inner_lr", [&](py::handle v) { cfg.inner_lr = v.cast<double>(); });
  set_if("inner_steps", [&](py::handle v) { cfg.inner_steps = v.cast<int64_t>(); });
  set_if("first_order", [&](py::handle v) { cfg.first_order = v.cast<bool>(); });
  set_if("meta_lr", [&](py::handle v) { cfg.meta_lr = v.cast<double>(); });
  set_if("epochs", [&](py::handle v) { cfg.epochs = v.cast<int64_t>(); });
  set_if("episodes_per_epoch", [&](py::handle v) { cfg.episodes_per_epoch = v.cast<int64_t>(); });
  set_if("meta_batch", [&](py::handle v) { cfg.meta_batch = v.cast<int64_t>(); });
  set_if("milestone1", [&](py::handle v) { cfg.milestone1 = v.cast<int64_t>(); });
  set_if("milestone2", [&](py::handle v) { cfg.milestone2 = v.cast<int64_t>(); });
  set_if("switch_mode", [&](py::handle v) { cfg.switch_mode = v.cast<std::string>(); });
  set_if("enhancement", [&](py::handle v) { cfg.enhancement = v.cast<bool>(); });
  set_if("hyper_hidden", [&](py::handle v) { cfg.hyper_hidden = v.cast<int64_t>(); });
  set_if("seed", [&](py::handle v) { cfg.seed = v.cast<uint64_t>(); });
  set_if("threads", [&](py::handle v) { cfg.threads = v.cast<int64_t>(); });
  set_if("out_dir", [&](py::handle v) { cfg.out_dir = v.cast<std::string>(); });
  set_if("val_every", [&](py::handle v) { cfg.val_every = v.cast<int64_t>(); });
  set_if("val_episodes", [&](py::handle v) { cfg.val_episodes = v.cast<int64_t>(); });
  return cfg;
}

// training/evaluation session around one RunConfig
class Session {
 public:
  explicit Session(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    sampler_ = std::make_unique<EpisodeSampler>(cfg_.make_sampler());
    model_ = cfg_.make_model();
    opt_ = AdamState::init(model_.joint());
  }

  py::list train(int64_t epochs) {
    RunConfig run = cfg_;
    run.epochs = epochs;
    run.val_every = 0;
    TrainResult res = train_loop(run);
    model_ = std::move(res.model);
    opt_ = std::move(res.opt);
    epoch_ = epochs;
    py::list log;
    for (const EpochLog& e : res.log) {
      py::dict d;
      d["epoch"] = e.epoch;
      d["train_loss"] = e.train_loss;
      d["lambda"] = e.lambda;
      d["lr"] = e.lr;
      log.append(d);
    }
    return log;
  }

  py::dict evaluate(int64_t episodes, const std::string& split) {
    Split sp = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
    double lambda = current_lambda();
    EpisodeAdapter adapter =
        make_adapter(model_, cfg_.maml_config(), cfg_.hypermaml_config(), lambda);
    Report rep = metafew::evaluate(adapter, *sampler_, sp, episodes, int(cfg_.threads));
    py::dict d;
    d["accuracy_mean"] = rep.accuracy_mean;
    d["accuracy_ci95"] = rep.accuracy_ci95;
    d["episodes"] = rep.episodes;
    d["episode_accuracies"] = rep.episode_accuracies;
    return d;
  }

  py::array_t<float> adapt_predict(uint64_t episode_index, const std::string& split) {
    Split sp = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
    Episode ep = sampler_->sample(sp, episode_index);
    EpisodeAdapter adapter =
        make_adapter(model_, cfg_.maml_config(), cfg_.hypermaml_config(), current_lambda());
    return numpy_from_tensor(adapter(ep, ep.query_x));
  }

  py::dict sample_episode(uint64_t index, const std::string& split) {
    Split sp = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
    return episode_to_dict(sampler_->sample(sp, index));
  }

  void save(const std::string& path) { save_checkpoint(path, snapshot(model_, opt_, cfg_, epoch_)); }
  void load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.config_hash != cfg_.hash())
      throw ConfigError("checkpoint was written under a different config");
    restore_model(model_, &opt_, ck);
    epoch_ = ck.epoch;
  }

  std::string config_hash() const { return cfg_.hash_hex(); }

 private:
  double current_lambda() const {
    if (cfg_.algorithm != "hypermaml") return 0.0;
    return switch_lambda(double(epoch_ > 0 ? epoch_ - 1 : 0), cfg_.milestone1, cfg_.milestone2);
  }

  RunConfig cfg_;
  std::unique_ptr<EpisodeSampler> sampler_;
  ModelBundle model_;
  AdamState opt_;
  int64_t epoch_ = 0;
};

}  // namespace

PYBIND11_MODULE(_metafew, m) {
  m.doc() = "few-shot meta-learning engine: MAML and hypernetwork-based adaptation";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ShapeError>(m, "ShapeError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<ConfigError>(m, "ConfigurationError");
  py::register_exception<IoError>(m, "IoError");

  m.def(
      "switch_lambda",
      [](double epoch, int64_t m1, int64_t m2) { return switch_lambda(epoch, m1, m2); },
      py::arg("epoch"), py::arg("milestone1"), py::arg("milestone2"),
      "warm-up coefficient: 0 before milestone1, 1 after milestone2, linear between");

  m.def(
      "lr_schedule",
      [](int64_t epoch, std::vector<int64_t> milestones, double base_lr, double decay) {
        return lr_schedule(epoch, milestones, base_lr, decay);
      },
      py::arg("epoch"), py::arg("milestones"), py::arg("base_lr"), py::arg("decay") = 0.3);

  m.def(
      "softmax_xent",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> logits,
         std::vector<int32_t> labels) {
        return softmax_xent(tensor_from_numpy(logits), labels).item();
      },
      py::arg("logits"), py::arg("labels"), "mean cross-entropy of rows against integer labels");

  m.def(
      "softmax_xent_grad",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> logits,
         std::vector<int32_t> labels) {
        auto tape = Tape::make(Dtype::f32);
        ParamSet p;
        p.add("z", tensor_from_numpy(logits));
        ParamSet a = tape->watch_all(p);
        GradMap g = tape->backward(softmax_xent(a.at("z"), labels), a);
        return numpy_from_tensor(g.at("z"));
      },
      py::arg("logits"), py::arg("labels"), "gradient of the mean cross-entropy w.r.t. logits");

  m.def(
      "adam_step",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> param,
         py::array_t<float, py::array::c_style | py::array::forcecast> grad,
         py::array_t<float, py::array::c_style | py::array::forcecast> m_state,
         py::array_t<float, py::array::c_style | py::array::forcecast> v_state, int64_t t,
         double lr, double beta1, double beta2, double eps) {
        ParamSet p;
        p.add("x", tensor_from_numpy(param));
        GradMap g;
        g.add("x", tensor_from_numpy(grad));
        AdamState st;
        st.t = t;
        st.moments.emplace_back(
            "x", std::make_pair(tensor_from_numpy(m_state), tensor_from_numpy(v_state)));
        adam_step(p, g, st, lr, beta1, beta2, eps);
        return py::make_tuple(numpy_from_tensor(p.at("x")), numpy_from_tensor(st.at("x").first),
                              numpy_from_tensor(st.at("x").second), st.t);
      },
      py::arg("param"), py::arg("grad"), py::arg("m"), py::arg("v"), py::arg("t"),
      py::arg("lr") = 0.001, py::arg("beta1") = 0.9, py::arg("beta2") = 0.999,
      py::arg("eps") = 1e-8,
      "one Adam update; returns (param, m, v, t) with t incremented");

  m.def(
      "gaussian2d_episode",
      [](int task_id, int64_t n_per_cluster, int64_t q_per_class, uint64_t seed) {
        Gaussian2dConfig cfg;
        cfg.q_per_class = q_per_class;
        Rng rng(seed);
        return episode_to_dict(gaussian2d_episode(task_id, n_per_cluster, rng, cfg));
      },
      py::arg("task_id"), py::arg("n_per_cluster") = 10, py::arg("q_per_class") = 15,
      py::arg("seed") = 0, "one of the four permuted-ellipse 2D tasks");

  m.def(
      "glyph_image",
      [](int64_t class_id, uint64_t sample_seed, int64_t image_size, uint64_t family_seed) {
        GlyphFamilyConfig cfg;
        cfg.image_size = image_size;
        cfg.seed = family_seed;
        return numpy_from_tensor(glyph_sample(cfg, class_id, sample_seed));
      },
      py::arg("class_id"), py::arg("sample_seed") = 0, py::arg("image_size") = 28,
      py::arg("family_seed") = 0, "one procedural glyph sample (1,S,S) in [0,1]");

  m.def("presets", [] { return RunConfig::preset_names(); });

  py::class_<Session>(m, "Session",
                      "training/evaluation session; construct with preset=... or keyword "
                      "overrides matching the CLI flags")
      .def(py::init([](const py::kwargs& kwargs) { return Session(config_from_kwargs(kwargs)); }))
      .def("train", &Session::train, py::arg("epochs"),
           "run meta-training epochs; returns the epoch log")
      .def("evaluate", &Session::evaluate, py::arg("episodes") = 40, py::arg("split") = "test")
      .def("adapt_predict", &Session::adapt_predict, py::arg("episode_index") = 0,
           py::arg("split") = "test", "adapt on an episode's support set, predict its query set")
      .def("sample_episode", &Session::sample_episode, py::arg("index") = 0,
           py::arg("split") = "train")
      .def("save", &Session::save, py::arg("path"))
      .def("load", &Session::load, py::arg("path"))
      .def_property_readonly("config_hash", &Session::config_hash);
}
