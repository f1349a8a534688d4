#include "metafew/bench.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>

#include <json.hpp>

namespace metafew {

using json = nlohmann::json;

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / double(xs.size() - 1));
}

EpisodeAdapter make_adapter(const ModelBundle& model, const MamlConfig& mcfg,
                            const HyperMamlConfig& hcfg, double lambda) {
  // copy the bundle: the adapter must stay valid while training continues
  auto snapshot = std::make_shared<ModelBundle>(model);
  snapshot->encoder = model.encoder.clone();
  snapshot->head = model.head.clone();
  snapshot->hypernet = model.hypernet.clone();
  return [snapshot, mcfg, hcfg, lambda](const Episode& ep, const Tensor& query_x) {
    auto tape = Tape::make(snapshot->head.at("b").dtype());
    EncHead attached{tape->watch_all(snapshot->encoder), tape->watch_all(snapshot->head)};
    ParamSet enc_params = attached.encoder;
    ParamSet eff_head;
    if (snapshot->algorithm == Algorithm::hypermaml) {
      ParamSet eta = tape->watch_all(snapshot->hypernet);
      AdaptedModel am =
          hypermaml_adapt(snapshot->enc_cfg, attached, hcfg, eta, ep.support_x, ep.support_y, lambda);
      eff_head = am.effective;
    } else {
      MamlConfig eval_cfg = mcfg;
      eval_cfg.first_order = true;  // identical adapted values, no second-order tape
      EncHead adapted =
          maml_adapt(snapshot->enc_cfg, attached, ep.support_x, ep.support_y, eval_cfg);
      enc_params = adapted.encoder;
      eff_head = adapted.head;
    }
    ParamSet enc_d, head_d;
    for (auto& kv : enc_params) enc_d.add(kv.first, kv.second.detached());
    for (auto& kv : eff_head) head_d.add(kv.first, kv.second.detached());
    return predict_query(snapshot->enc_cfg, enc_d, head_d, query_x);
  };
}

namespace {

template <class F>
std::vector<double> ordered_parallel_acc(int64_t n, int threads, F&& fn) {
  std::vector<double> out(size_t(n), 0.0);
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

Report summarize_accuracies(std::vector<double> accs) {
  Report r;
  r.episodes = int64_t(accs.size());
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= double(accs.size());
  r.accuracy_mean = mean;
  r.accuracy_ci95 = 1.96 * sample_std(accs) / std::sqrt(double(accs.size()));
  r.episode_accuracies = std::move(accs);
  return r;
}

}  // namespace

Report evaluate_episodes(const EpisodeAdapter& adapter, const std::vector<Episode>& episodes,
                         int threads) {
  if (episodes.size() < 2) throw ConfigError("evaluate: need at least 2 episodes");
  std::vector<double> accs =
      ordered_parallel_acc(int64_t(episodes.size()), threads, [&](int64_t i) {
        const Episode& ep = episodes[size_t(i)];
        Tensor probs = adapter(ep, ep.query_x);
        return accuracy(probs, ep.query_y);
      });
  return summarize_accuracies(std::move(accs));
}

Report evaluate(const EpisodeAdapter& adapter, const EpisodeSampler& sampler, Split split,
                int64_t n_episodes, int threads) {
  if (n_episodes < 2) throw ConfigError("evaluate: need at least 2 episodes");
  std::vector<Episode> eps;
  eps.reserve(size_t(n_episodes));
  for (int64_t i = 0; i < n_episodes; ++i) eps.push_back(sampler.sample(split, uint64_t(i)));
  Report r = evaluate_episodes(adapter, eps, threads);
  r.seed = sampler.family_for(split).seed;
  return r;
}

std::vector<Report> time_adaptation(const std::vector<TimedVariant>& variants,
                                    const std::vector<Episode>& episodes, int repeats) {
  if (episodes.empty()) throw ConfigError("time_adaptation: no episodes");
  if (repeats < 1) throw ConfigError("time_adaptation: repeats must be >= 1");
  std::vector<Report> out;
  for (const TimedVariant& v : variants) {
    std::vector<double> times;
    std::vector<double> accs;
    for (int r = 0; r < repeats; ++r) {
      accs.clear();
      auto t0 = std::chrono::steady_clock::now();
      for (const Episode& ep : episodes) {
        Tensor probs = v.adapter(ep, ep.query_x);
        accs.push_back(accuracy(probs, ep.query_y));
      }
      auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    Report r = summarize_accuracies(std::move(accs));
    r.variant = v.name;
    double tm = 0;
    for (double t : times) tm += t;
    r.time_mean_s = tm / double(times.size());
    r.time_std_s = sample_std(times);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

namespace {

const char* kClassFill[2] = {"#f6c3b5", "#b5cdf6"};
const char* kClassStroke[2] = {"#c0392b", "#2457a8"};

void svg_panel(std::ostream& os, const EpisodeAdapter& adapter, const Episode& ep,
               int64_t grid_resolution, double extent, double ox, double oy, double panel_px,
               int index) {
  const int64_t G = grid_resolution;
  // classify the dense grid in one batch
  Tensor grid = Tensor::zeros({G * G, 2}, Dtype::f32);
  for (int64_t gy = 0; gy < G; ++gy)
    for (int64_t gx = 0; gx < G; ++gx) {
      double x = -extent + 2.0 * extent * (double(gx) + 0.5) / double(G);
      double y = extent - 2.0 * extent * (double(gy) + 0.5) / double(G);
      grid.set(size_t((gy * G + gx) * 2), x);
      grid.set(size_t((gy * G + gx) * 2 + 1), y);
    }
  Tensor probs = adapter(ep, grid);
  int64_t n_way = probs.shape()[1];

  double cell = panel_px / double(G);
  os << "<g transform=\"translate(" << ox << "," << oy << ")\">\n";
  // run-length rectangles per row keep the file compact
  for (int64_t gy = 0; gy < G; ++gy) {
    int64_t run_start = 0;
    auto argmax = [&](int64_t gx) {
      int64_t best = 0;
      for (int64_t c = 1; c < n_way; ++c)
        if (probs.at(size_t((gy * G + gx) * n_way + c)) >
            probs.at(size_t((gy * G + gx) * n_way + best)))
          best = c;
      return best;
    };
    int64_t cur = argmax(0);
    for (int64_t gx = 1; gx <= G; ++gx) {
      int64_t cls = gx < G ? argmax(gx) : -1;
      if (cls != cur) {
        os << "<rect x=\"" << run_start * cell << "\" y=\"" << gy * cell << "\" width=\""
           << (gx - run_start) * cell << "\" height=\"" << cell << "\" fill=\""
           << kClassFill[cur % 2] << "\"/>\n";
        run_start = gx;
        cur = cls;
      }
    }
  }
  auto to_px = [&](double v, bool is_y) {
    double t = is_y ? (extent - v) / (2.0 * extent) : (v + extent) / (2.0 * extent);
    return t * panel_px;
  };
  auto scatter = [&](const Tensor& xs, const std::vector<int32_t>& ys, double radius,
                     double opacity) {
    for (int64_t i = 0; i < xs.shape()[0]; ++i) {
      double px = to_px(xs.at(size_t(i * 2)), false), py = to_px(xs.at(size_t(i * 2 + 1)), true);
      os << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"" << radius << "\" fill=\""
         << kClassStroke[size_t(ys[size_t(i)]) % 2] << "\" fill-opacity=\"" << opacity
         << "\" stroke=\"black\" stroke-width=\"0.4\"/>\n";
    }
  };
  scatter(ep.query_x, ep.query_y, 2.2, 0.55);
  scatter(ep.support_x, ep.support_y, 4.0, 1.0);
  os << "<rect x=\"0\" y=\"0\" width=\"" << panel_px << "\" height=\"" << panel_px
     << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  os << "<text x=\"4\" y=\"14\" font-family=\"sans-serif\" font-size=\"12\">task " << index
     << "</text>\n";
  os << "</g>\n";
}

}  // namespace

void plot_decision_boundary_2d(const EpisodeAdapter& adapter, const std::vector<Episode>& tasks,
                               int64_t grid_resolution, double extent, const std::string& path) {
  const double panel = 220.0, margin = 12.0;
  double width = margin + double(tasks.size()) * (panel + margin);
  double height = panel + 2 * margin;
  std::ofstream os(path);
  if (!os) throw IoError("plot: cannot write " + path);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t i = 0; i < tasks.size(); ++i)
    svg_panel(os, adapter, tasks[i], grid_resolution, extent, margin + double(i) * (panel + margin),
              margin, panel, int(i));
  os << "</svg>\n";
  if (!os) throw IoError("plot: write failed for " + path);
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

void write_report_csv(const std::vector<Report>& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("report: cannot write " + path);
  os << "variant,episodes,accuracy_mean,accuracy_ci95,time_mean_s,time_std_s,seed\n";
  os.precision(17);
  for (const Report& r : reports)
    os << r.variant << "," << r.episodes << "," << r.accuracy_mean << "," << r.accuracy_ci95 << ","
       << r.time_mean_s << "," << r.time_std_s << "," << r.seed << "\n";
  if (!os) throw IoError("report: write failed for " + path);
}

namespace {
json report_to_json(const Report& r) {
  return json{{"variant", r.variant},
              {"episodes", r.episodes},
              {"episode_accuracies", r.episode_accuracies},
              {"accuracy_mean", r.accuracy_mean},
              {"accuracy_ci95", r.accuracy_ci95},
              {"time_mean_s", r.time_mean_s},
              {"time_std_s", r.time_std_s},
              {"seed", r.seed},
              {"config_hash", r.config_hash},
              {"version", r.version},
              {"ci_definition", r.ci_definition}};
}

Report report_from_json(const json& j) {
  Report r;
  r.variant = j.at("variant").get<std::string>();
  r.episodes = j.at("episodes").get<int64_t>();
  r.episode_accuracies = j.at("episode_accuracies").get<std::vector<double>>();
  r.accuracy_mean = j.at("accuracy_mean").get<double>();
  r.accuracy_ci95 = j.at("accuracy_ci95").get<double>();
  r.time_mean_s = j.at("time_mean_s").get<double>();
  r.time_std_s = j.at("time_std_s").get<double>();
  r.seed = j.at("seed").get<uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.version = j.at("version").get<std::string>();
  r.ci_definition = j.at("ci_definition").get<std::string>();
  return r;
}
}  // namespace

void write_report_json(const std::vector<Report>& reports, const std::string& path) {
  json out = json::array();
  for (const Report& r : reports) out.push_back(report_to_json(r));
  std::ofstream os(path);
  if (!os) throw IoError("report: cannot write " + path);
  os << out.dump(2) << "\n";
  if (!os) throw IoError("report: write failed for " + path);
}

std::vector<Report> read_report_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("report: cannot read " + path);
  json in = json::parse(is);
  std::vector<Report> out;
  for (const auto& j : in) out.push_back(report_from_json(j));
  return out;
}

}  // namespace metafew
