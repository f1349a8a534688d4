#pragma once

// Episodic task generation: the 2D four-Gaussian family, a procedural glyph
// family, an image-folder ingester, and class-level splits.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "metafew/tensor.hpp"

namespace metafew {

struct Episode {
  Tensor support_x;  // (L, sample shape), L = n_way * k_shot
  std::vector<int32_t> support_y;
  Tensor query_x;  // (M, sample shape), M = n_way * q_per_class
  std::vector<int32_t> query_y;
  int64_t n_way = 0, k_shot = 0, q_per_class = 0;

  // class-count and label-range invariants
  void validate() const;
};

enum class Split : uint8_t { train, val, test };

// deterministic disjoint class partition
struct ClassSplits {
  std::vector<int64_t> train, val, test;
};
ClassSplits split_classes(const std::vector<int64_t>& pool, double r_train, double r_val,
                          double r_test, uint64_t seed);

// ---------------------------------------------------------------------------
// 2D toy family: four fixed anisotropic Gaussian clusters at (+-c, +-c). A
// task takes the two clusters sharing an orientation as its two classes;
// odd task ids swap the labels.
// ---------------------------------------------------------------------------

struct Gaussian2dConfig {
  double center = 1.0;
  double var_major = 16.0;  // long overlapping ellipses: the class-mean
  double var_minor = 0.01;  // direction alone cannot separate the clusters
  int64_t q_per_class = 15;
};

// cluster mean/axis table for task_id in 0..3, class c in {0,1}
struct GaussianCluster {
  double cx, cy;
  bool horizontal;  // major axis along x
};
GaussianCluster gaussian2d_cluster(int task_id, int cls, const Gaussian2dConfig& cfg);

Episode gaussian2d_episode(int task_id, int64_t n_per_cluster, Rng& rng,
                           const Gaussian2dConfig& cfg = {});

// ---------------------------------------------------------------------------
// Procedural glyph family: deterministic stroke patterns per class, per-sample
// affine jitter and pixel noise.
// ---------------------------------------------------------------------------

struct GlyphFamilyConfig {
  int64_t n_classes = 64;
  int64_t image_size = 28;  // 1 x S x S samples
  uint64_t seed = 0;
  double noise_std = 0.04;
  double jitter = 1.0;  // scales the affine jitter; 0 disables it
};

// canonical (noise-free, jitter-free) pattern of one class
Tensor glyph_canonical(const GlyphFamilyConfig& cfg, int64_t class_id);
// one sample, bit-identical for equal (class-seed, sample-seed)
Tensor glyph_sample(const GlyphFamilyConfig& cfg, int64_t class_id, uint64_t sample_seed);

// ---------------------------------------------------------------------------
// Task families and episode sampling
// ---------------------------------------------------------------------------

struct TaskFamily {
  enum class Kind : uint8_t { gaussian2d, glyphs, image_folder } kind = Kind::glyphs;
  uint64_t seed = 0;
  Shape sample_shape;
  ClassSplits splits;

  Gaussian2dConfig gaussian;
  GlyphFamilyConfig glyphs;

  // image-folder payload: class id -> stack of (C,H,W) tensors
  std::vector<std::vector<Tensor>> images;
  std::vector<std::string> class_names;
};

TaskFamily make_gaussian2d_family(const Gaussian2dConfig& cfg, uint64_t seed);
TaskFamily make_glyph_family(const GlyphFamilyConfig& cfg, double r_train = 0.6,
                             double r_val = 0.2, double r_test = 0.2);

// `root/<class-name>/*.png|jpg|ppm|pgm`; undecodable images are skipped with a
// warning, classes with fewer than min_per_class usable images are excluded
TaskFamily load_image_folder(const std::string& path, int64_t image_size, int64_t channels = 3,
                             int64_t min_per_class = 0, double r_train = 0.6, double r_val = 0.2,
                             double r_test = 0.2, uint64_t seed = 0);

struct EpisodeSpec {
  int64_t n_way = 5, k_shot = 1, q_per_class = 16;
};

// Stateless sampler: (family, split, episode index) fully determines the
// episode. Cross-domain mode draws train episodes from one family and
// val/test episodes from another.
class EpisodeSampler {
 public:
  explicit EpisodeSampler(TaskFamily family, EpisodeSpec spec);
  EpisodeSampler(TaskFamily train_family, TaskFamily eval_family, EpisodeSpec spec);

  Episode sample(Split split, uint64_t episode_index) const;
  const TaskFamily& family_for(Split split) const;
  const EpisodeSpec& spec() const { return spec_; }
  bool cross_domain() const { return eval_family_.has_value(); }

 private:
  TaskFamily family_;
  std::optional<TaskFamily> eval_family_;
  EpisodeSpec spec_;
};

}  // namespace metafew
