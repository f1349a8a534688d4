#include "metafew/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "metafew/bench.hpp"
#include "metafew/train.hpp"

namespace fs = std::filesystem;

namespace metafew {

namespace {

constexpr const char* kVersion = "metafew 0.1.0";

// Binds every RunConfig field to a CLI option; resolve() layers preset
// defaults under any values provided on the command line or config file.
struct ConfigOptions {
  RunConfig values;
  std::string preset_name;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&, const RunConfig&)>>> fields;

  template <class T>
  void bind(CLI::App* app, const std::string& flag, T RunConfig::* member,
            const std::string& help) {
    CLI::Option* opt = app->add_option(flag, values.*member, help)
                           ->capture_default_str()
                           ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    fields.emplace_back(opt, [member](RunConfig& dst, const RunConfig& src) { dst.*member = src.*member; });
  }

  void bind_flag(CLI::App* app, const std::string& flag, bool RunConfig::* member,
                 const std::string& help) {
    CLI::Option* opt = app->add_flag(flag, values.*member, help);
    fields.emplace_back(opt, [member](RunConfig& dst, const RunConfig& src) { dst.*member = src.*member; });
  }

  void attach(CLI::App* app, bool with_training = true) {
    app->add_option("--preset", preset_name,
                    "start from a named preset (toy2d-maml1, toy2d-maml5, toy2d-hypermaml, "
                    "glyphs-5w1s, glyphs-5w5s)");
    bind(app, "--algorithm", &RunConfig::algorithm, "maml | fomaml | hypermaml");
    bind(app, "--encoder", &RunConfig::encoder, "linear2d | mlp | conv4");
    bind(app, "--channels", &RunConfig::channels, "conv4 channel width");
    bind(app, "--embed-dim", &RunConfig::embed_dim, "mlp embedding width");
    bind(app, "--mlp-hidden", &RunConfig::mlp_hidden, "mlp hidden width");
    bind(app, "--family", &RunConfig::family, "gaussian2d | glyphs | image-folder");
    bind(app, "--data", &RunConfig::data_path, "image-folder root (class-named subdirectories)");
    bind(app, "--eval-data", &RunConfig::eval_data_path,
         "second image-folder for cross-domain val/test");
    bind(app, "--image-size", &RunConfig::image_size, "side length images are resized to");
    bind(app, "--image-channels", &RunConfig::image_channels, "channel count for image folders");
    bind(app, "--glyph-classes", &RunConfig::glyph_classes, "procedural glyph class count");
    bind(app, "--gauss-center", &RunConfig::gauss_center, "2D toy cluster center magnitude");
    bind(app, "--gauss-var-major", &RunConfig::gauss_var_major, "2D toy major-axis variance");
    bind(app, "--gauss-var-minor", &RunConfig::gauss_var_minor, "2D toy minor-axis variance");
    bind(app, "--n-way", &RunConfig::n_way, "classes per episode");
    bind(app, "--k-shot", &RunConfig::k_shot, "support examples per class");
    bind(app, "--q-per-class", &RunConfig::q_per_class, "query examples per class");
    bind(app, "--inner-lr", &RunConfig::inner_lr, "MAML inner step size alpha");
    bind(app, "--inner-steps", &RunConfig::inner_steps, "MAML inner gradient steps");
    bind_flag(app, "--first-order", &RunConfig::first_order, "first-order MAML meta-gradients");
    bind(app, "--milestone1", &RunConfig::milestone1, "warm-up start epoch (lambda leaves 0)");
    bind(app, "--milestone2", &RunConfig::milestone2, "warm-up end epoch (lambda reaches 1)");
    bind(app, "--switch-mode", &RunConfig::switch_mode, "update_blend | loss_blend");
    {
      CLI::Option* opt = app->add_flag(
          "--no-enhancement",
          [this](int64_t count) {
            if (count) values.enhancement = false;
          },
          "feed the hypernetwork embeddings + labels only (no predictions)");
      fields.emplace_back(opt, [](RunConfig& dst, const RunConfig& src) {
        dst.enhancement = src.enhancement;
      });
    }
    bind(app, "--hyper-hidden", &RunConfig::hyper_hidden, "hypernetwork hidden width (256 or 512)");
    bind(app, "--warmup-inner-lr", &RunConfig::warmup_inner_lr,
         "alpha of the blended warm-up gradient step");
    if (with_training) {
      bind(app, "--meta-lr", &RunConfig::meta_lr, "meta learning rate beta");
      bind(app, "--lr-decay", &RunConfig::lr_decay, "learning-rate decay per milestone");
      bind(app, "--lr-milestones", &RunConfig::lr_milestones,
           "epochs at which the meta lr decays (default: warm-up milestones)");
      bind(app, "--epochs", &RunConfig::epochs, "training epochs");
      bind(app, "--episodes-per-epoch", &RunConfig::episodes_per_epoch, "episodes per epoch");
      bind(app, "--meta-batch", &RunConfig::meta_batch, "tasks per meta-step");
      bind(app, "--val-episodes", &RunConfig::val_episodes, "episodes per validation pass");
      bind(app, "--val-every", &RunConfig::val_every, "validate every N epochs");
      bind(app, "--checkpoint-every", &RunConfig::checkpoint_every,
           "extra checkpoint every N epochs (0 = only last/best)");
    }
    bind(app, "--seed", &RunConfig::seed, "seed for all randomness");
    bind(app, "--threads", &RunConfig::threads, "episode-level worker threads (1 = sequential)");
    bind(app, "--out", &RunConfig::out_dir, "output directory");
  }

  RunConfig resolve() const {
    RunConfig base = preset_name.empty() ? RunConfig{} : RunConfig::preset(preset_name);
    for (auto& [opt, copy] : fields)
      if (opt->count() > 0) copy(base, values);
    return base;
  }
};

// key=value config files; entries become ordinary options injected before the
// command-line flags, so explicit flags win
std::vector<std::string> load_config_args(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::vector<std::string> args;
  std::string line;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  const std::vector<std::string> bool_flags = {"first-order", "no-enhancement", "force"};
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';' || t[0] == '[') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (!value.empty() && value.front() == '"' && value.back() == '"' && value.size() >= 2)
      value = value.substr(1, value.size() - 2);
    if (key == "config") continue;
    if (std::find(bool_flags.begin(), bool_flags.end(), key) != bool_flags.end()) {
      std::string v = value;
      std::transform(v.begin(), v.end(), v.begin(), ::tolower);
      if (v == "true" || v == "1" || v == "yes" || v == "on") args.push_back("--" + key);
      else if (v != "false" && v != "0" && v != "no" && v != "off")
        throw ConfigError(path + ":" + std::to_string(lineno) + ": bad boolean '" + value + "'");
      continue;
    }
    args.push_back("--" + key);
    // split list values on commas/spaces for vector options
    std::string tok;
    for (char c : value + " ") {
      if (c == ',' || c == ' ' || c == '\t') {
        if (!tok.empty()) args.push_back(tok);
        tok.clear();
      } else {
        tok += c;
      }
    }
  }
  return args;
}

int fail_config(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return 2;
}

int fail_runtime(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return 1;
}

void write_reports(const std::vector<Report>& reports, const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv")
    write_report_csv(reports, path);
  else
    write_report_json(reports, path);
}

Report finalize_report(Report r, const std::string& variant, const RunConfig& cfg) {
  r.variant = variant;
  r.seed = cfg.seed;
  r.config_hash = cfg.hash_hex();
  r.version = kVersion;
  return r;
}

double lambda_for_eval(const RunConfig& cfg, int64_t epoch) {
  if (cfg.algorithm != "hypermaml") return 0.0;
  return switch_lambda(double(epoch), cfg.milestone1, cfg.milestone2);
}

// --------------------------------------------------------------------------
// subcommand bodies
// --------------------------------------------------------------------------

int do_train(const RunConfig& cfg, const std::string& resume, bool force) {
  RunConfig c = cfg;
  c.validate();
  Checkpoint ck;
  bool resuming = !resume.empty();
  if (resuming) {
    ck = load_checkpoint(resume);
    if (ck.config_hash != c.hash() && !force)
      return fail_config("checkpoint " + resume +
                         " was written under a different config (use --force to override)");
    std::cout << "resuming from " << resume << " (epoch " << ck.epoch << ")\n";
  }
  TrainResult res = train_loop(c, &std::cout, resuming ? &ck : nullptr);
  std::cout << "final checkpoint: " << res.last_checkpoint << "\n";
  if (res.best_val_accuracy >= 0)
    std::cout << "best validation accuracy: " << res.best_val_accuracy << " ("
              << res.best_checkpoint << ")\n";
  return 0;
}

int do_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& split_name,
            int64_t episodes, const std::string& out_path, bool force) {
  RunConfig c = cfg;
  c.validate();
  Checkpoint ck = load_checkpoint(ckpt_path);
  if (ck.config_hash != c.hash() && !force)
    return fail_config("checkpoint " + ckpt_path +
                       " was written under a different config (use --force to override)");
  ModelBundle model = c.make_model();
  restore_model(model, nullptr, ck);

  Split split = split_name == "train" ? Split::train
                : split_name == "val" ? Split::val
                                      : Split::test;
  EpisodeSampler sampler = c.make_sampler();
  EpisodeAdapter adapter = make_adapter(model, c.maml_config(), c.hypermaml_config(),
                                        lambda_for_eval(c, ck.epoch));
  Report rep = evaluate(adapter, sampler, split, episodes, int(c.threads));
  rep = finalize_report(std::move(rep), c.algorithm, c);
  std::cout << "split " << split_name << " episodes " << rep.episodes << " accuracy "
            << rep.accuracy_mean << " +- " << rep.accuracy_ci95 << "\n";
  if (!out_path.empty()) write_reports({rep}, out_path);
  return 0;
}

int do_bench_time(const RunConfig& cfg, const std::vector<int64_t>& steps, int64_t tasks,
                  int64_t repeats, const std::string& out_path) {
  RunConfig c = cfg;
  c.validate();
  EpisodeSampler sampler = c.make_sampler();
  std::vector<Episode> episodes;
  for (int64_t i = 0; i < tasks; ++i) episodes.push_back(sampler.sample(Split::test, uint64_t(i)));

  std::vector<TimedVariant> variants;
  for (int64_t s : steps) {
    RunConfig mc = c;
    mc.algorithm = "maml";
    mc.inner_steps = s;
    ModelBundle model = mc.make_model();
    variants.push_back({"maml-" + std::to_string(s) + "step",
                        make_adapter(model, mc.maml_config(), mc.hypermaml_config(), 0.0)});
  }
  {
    RunConfig hc = c;
    hc.algorithm = "hypermaml";
    ModelBundle model = hc.make_model();
    variants.push_back(
        {"hypermaml", make_adapter(model, hc.maml_config(), hc.hypermaml_config(), 1.0)});
  }

  std::vector<Report> reports = time_adaptation(variants, episodes, int(repeats));
  for (auto& r : reports) {
    r = finalize_report(std::move(r), r.variant, c);
    std::cout << r.variant << ": " << r.time_mean_s << " +- " << r.time_std_s << " s over "
              << tasks << " tasks (accuracy " << r.accuracy_mean << ")\n";
  }
  if (!out_path.empty()) write_reports(reports, out_path);
  return 0;
}

std::vector<Episode> toy_tasks(const RunConfig& cfg) {
  EpisodeSampler sampler = cfg.make_sampler();
  std::vector<Episode> tasks;
  for (uint64_t i = 0; i < 4; ++i) tasks.push_back(sampler.sample(Split::test, i));
  return tasks;
}

int do_toy2d(RunConfig cfg, int64_t grid, const std::string& report_name) {
  cfg.validate();
  if (cfg.family != "gaussian2d")
    return fail_config("toy2d requires the gaussian2d family (use a toy2d-* preset)");
  TrainResult res = train_loop(cfg, &std::cout);
  EpisodeAdapter adapter = make_adapter(res.model, cfg.maml_config(), cfg.hypermaml_config(),
                                        lambda_for_eval(cfg, cfg.epochs - 1));

  EpisodeSampler sampler = cfg.make_sampler();
  std::vector<Episode> eval_eps;
  for (uint64_t i = 0; i < 40; ++i) eval_eps.push_back(sampler.sample(Split::test, i));
  Report rep = finalize_report(evaluate_episodes(adapter, eval_eps, int(cfg.threads)),
                               cfg.algorithm, cfg);
  std::cout << "toy2d " << cfg.algorithm << " mean query accuracy over the 4 tasks: "
            << rep.accuracy_mean << " +- " << rep.accuracy_ci95 << "\n";

  fs::create_directories(cfg.out_dir);
  std::string svg = cfg.out_dir + "/boundary.svg";
  plot_decision_boundary_2d(adapter, toy_tasks(cfg), grid, 6.0, svg);
  std::cout << "decision boundaries: " << svg << "\n";
  write_reports({rep}, cfg.out_dir + "/" + report_name);
  return 0;
}

int do_plot(const RunConfig& cfg, const std::string& ckpt_path, const std::string& out_svg,
            int64_t grid, bool force) {
  RunConfig c = cfg;
  c.validate();
  if (c.family != "gaussian2d")
    return fail_config("plot renders the 2D toy family only (use a toy2d-* preset)");
  Checkpoint ck = load_checkpoint(ckpt_path);
  if (ck.config_hash != c.hash() && !force)
    return fail_config("checkpoint " + ckpt_path +
                       " was written under a different config (use --force to override)");
  ModelBundle model = c.make_model();
  restore_model(model, nullptr, ck);
  EpisodeAdapter adapter =
      make_adapter(model, c.maml_config(), c.hypermaml_config(), lambda_for_eval(c, ck.epoch));
  plot_decision_boundary_2d(adapter, toy_tasks(c), grid, 6.0, out_svg);
  std::cout << "wrote " << out_svg << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"few-shot meta-learning engine: MAML and hypernetwork-based adaptation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // a missing config file is reported before CLI11 parsing so the exit code
  // and message are stable; file entries are injected as options ahead of the
  // explicit flags (which therefore override them)
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  for (size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      if (!fs::exists(args[i + 1]))
        return fail_config("config file not found: " + args[i + 1]);
      std::vector<std::string> injected;
      try {
        injected = load_config_args(args[i + 1]);
      } catch (const ConfigError& e) {
        return fail_config(e.what());
      }
      args.erase(args.begin() + long(i), args.begin() + long(i) + 2);
      // insert after the subcommand token
      size_t at = 0;
      while (at < args.size() && !args[at].empty() && args[at][0] == '-') ++at;
      if (at < args.size()) ++at;
      args.insert(args.begin() + long(at), injected.begin(), injected.end());
      break;
    }
  }
  std::vector<const char*> cargv;
  cargv.push_back(argc > 0 ? argv[0] : "metafew");
  for (auto& a : args) cargv.push_back(a.c_str());

  ConfigOptions train_opts, eval_opts, bench_opts, toy_opts, plot_opts;
  std::string resume, ckpt, split_name = "test", out_path, plot_out = "boundary.svg";
  std::string toy_report = "report.json";
  int64_t episodes = 600, tasks = 600, repeats = 3, grid = 200;
  std::vector<int64_t> steps = {0, 1, 2, 5};
  bool force = false;
  int rc = 0;

  std::string config_doc;  // consumed before parsing; registered for --help
  CLI::App* train = app.add_subcommand("train", "meta-train a model and write checkpoints");
  train->add_option("--config", config_doc, "key-value config file; flags override file values");
  train_opts.attach(train);
  train->add_option("--checkpoint", resume, "resume from this checkpoint");
  train->add_flag("--force", force, "ignore config-hash mismatches on resume");
  train->callback([&] { rc = do_train(train_opts.resolve(), resume, force); });

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on an episode stream");
  eval->add_option("--config", config_doc, "key-value config file; flags override file values");
  eval_opts.attach(eval);
  eval->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--split", split_name, "train | val | test")->capture_default_str();
  eval->add_option("--episodes", episodes, "number of evaluation episodes")->capture_default_str();
  eval->add_option("--report", out_path, "write the report here (.csv or .json)");
  eval->add_flag("--force", force, "ignore config-hash mismatches");
  eval->callback(
      [&] { rc = do_eval(eval_opts.resolve(), ckpt, split_name, episodes, out_path, force); });

  CLI::App* bench = app.add_subcommand(
      "bench-time", "time adaptation+inference for MAML step counts and the hypernetwork update");
  bench->add_option("--config", config_doc, "key-value config file; flags override file values");
  bench_opts.attach(bench);
  bench->add_option("--steps", steps, "MAML inner-step counts to time")->capture_default_str();
  bench->add_option("--tasks", tasks, "episodes per timing pass")->capture_default_str();
  bench->add_option("--repeats", repeats, "timing repetitions")->capture_default_str();
  bench->add_option("--report", out_path, "write the report here (.csv or .json)");
  bench->callback(
      [&] { rc = do_bench_time(bench_opts.resolve(), steps, tasks, repeats, out_path); });

  CLI::App* toy = app.add_subcommand(
      "toy2d", "train on the four permuted-ellipse tasks, then plot and report");
  toy->add_option("--config", config_doc, "key-value config file; flags override file values");
  toy_opts.attach(toy);
  toy->add_option("--grid", grid, "decision-boundary grid resolution")->capture_default_str();
  toy->add_option("--report-name", toy_report, "report filename inside --out")
      ->capture_default_str();
  toy->callback([&] {
    ConfigOptions& o = toy_opts;
    if (o.preset_name.empty()) {
      // pick the preset matching --algorithm/--inner-steps, then re-resolve
      RunConfig probe = o.resolve();
      o.preset_name = probe.algorithm == "hypermaml" ? "toy2d-hypermaml"
                      : probe.inner_steps >= 5       ? "toy2d-maml5"
                                                     : "toy2d-maml1";
    }
    rc = do_toy2d(o.resolve(), grid, toy_report);
  });

  CLI::App* plot = app.add_subcommand("plot", "render decision boundaries from a toy checkpoint");
  plot->add_option("--config", config_doc, "key-value config file; flags override file values");
  plot_opts.attach(plot);
  plot->add_option("--checkpoint", ckpt, "toy2d checkpoint")->required();
  plot->add_option("--svg", plot_out, "output SVG path")->capture_default_str();
  plot->add_option("--grid", grid, "grid resolution")->capture_default_str();
  plot->add_flag("--force", force, "ignore config-hash mismatches");
  plot->callback(
      [&] { rc = do_plot(plot_opts.resolve(), ckpt, plot_out, grid, force); });

  try {
    app.parse(int(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    return fail_config(e.what());
  } catch (const IoError& e) {
    return fail_config(e.what());
  } catch (const std::exception& e) {
    return fail_runtime(e.what());
  }
  return rc;
}

}  // namespace metafew
