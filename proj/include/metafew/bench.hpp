#pragma once

// Evaluation, timing, plotting, and report emission.

#include <functional>
#include <string>
#include <vector>

#include "metafew/meta.hpp"
#include "metafew/tasks.hpp"

namespace metafew {

struct Report {
  std::string variant;
  int64_t episodes = 0;
  std::vector<double> episode_accuracies;
  double accuracy_mean = 0.0;
  double accuracy_ci95 = 0.0;  // 1.96 * sample std / sqrt(n)
  double time_mean_s = 0.0;
  double time_std_s = 0.0;
  uint64_t seed = 0;
  std::string config_hash;
  std::string version;
  std::string ci_definition = "normal-approximation 95% radius: 1.96*std/sqrt(n)";
};

// adapts on the episode's support set, then predicts class probabilities for
// arbitrary query rows (the episode's own query set during evaluation)
using EpisodeAdapter = std::function<Tensor(const Episode&, const Tensor& query_x)>;

EpisodeAdapter make_adapter(const ModelBundle& model, const MamlConfig& mcfg,
                            const HyperMamlConfig& hcfg, double lambda);

// mean query accuracy with a 95% normal-approximation radius
Report evaluate(const EpisodeAdapter& adapter, const EpisodeSampler& sampler, Split split,
                int64_t n_episodes, int threads = 1);
Report evaluate_episodes(const EpisodeAdapter& adapter, const std::vector<Episode>& episodes,
                         int threads = 1);

struct TimedVariant {
  std::string name;
  EpisodeAdapter adapter;
};

// wall-clock of adapt+predict over pre-generated episodes (sampling cost is
// excluded); strictly sequential, repeated `repeats` times
std::vector<Report> time_adaptation(const std::vector<TimedVariant>& variants,
                                    const std::vector<Episode>& episodes, int repeats);

// one panel per episode: decision regions from a dense grid of argmax
// predictions plus the support/query scatter; written as a standalone SVG
void plot_decision_boundary_2d(const EpisodeAdapter& adapter, const std::vector<Episode>& tasks,
                               int64_t grid_resolution, double extent, const std::string& path);

// csv header: variant,episodes,accuracy_mean,accuracy_ci95,time_mean_s,time_std_s,seed
void write_report_csv(const std::vector<Report>& reports, const std::string& path);
void write_report_json(const std::vector<Report>& reports, const std::string& path);
std::vector<Report> read_report_json(const std::string& path);

double sample_std(const std::vector<double>& xs);

}  // namespace metafew
