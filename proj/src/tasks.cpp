#include "metafew/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>

#include "metafew/image_io.hpp"

namespace fs = std::filesystem;

namespace metafew {

void Episode::validate() const {
  if (n_way <= 0 || k_shot <= 0 || q_per_class <= 0)
    throw ShapeError("episode: n_way/k_shot/q_per_class must be positive");
  if (support_x.shape()[0] != n_way * k_shot || int64_t(support_y.size()) != n_way * k_shot)
    throw ShapeError("episode: support size != n_way*k_shot");
  if (query_x.shape()[0] != n_way * q_per_class || int64_t(query_y.size()) != n_way * q_per_class)
    throw ShapeError("episode: query size != n_way*q_per_class");
  std::vector<int64_t> sc(size_t(n_way), 0), qc(size_t(n_way), 0);
  for (int32_t y : support_y) {
    if (y < 0 || y >= n_way) throw ShapeError("episode: support label out of range");
    sc[size_t(y)]++;
  }
  for (int32_t y : query_y) {
    if (y < 0 || y >= n_way) throw ShapeError("episode: query label out of range");
    qc[size_t(y)]++;
  }
  for (int64_t c = 0; c < n_way; ++c) {
    if (sc[size_t(c)] != k_shot) throw ShapeError("episode: class support count != k_shot");
    if (qc[size_t(c)] != q_per_class) throw ShapeError("episode: class query count != q_per_class");
  }
}

ClassSplits split_classes(const std::vector<int64_t>& pool, double r_train, double r_val,
                          double r_test, uint64_t seed) {
  if (r_train <= 0 || r_val < 0 || r_test < 0)
    throw ConfigError("split_classes: ratios must be positive");
  double total = r_train + r_val + r_test;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split_classes: ratios must sum to 1");
  std::vector<int64_t> ids = pool;
  Rng rng(hash_combine(seed, 0x5b17));
  rng.shuffle(ids);
  int64_t n = int64_t(ids.size());
  int64_t n_train = int64_t(std::llround(r_train * double(n)));
  int64_t n_val = int64_t(std::llround(r_val * double(n)));
  if (n_train < 1 || (r_val > 0 && n_val < 1) || (r_test > 0 && n - n_train - n_val < 1))
    throw ConfigError("split_classes: pool of " + std::to_string(n) +
                      " classes is too small for a nonempty split");
  ClassSplits out;
  out.train.assign(ids.begin(), ids.begin() + n_train);
  out.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  out.test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---------------------------------------------------------------------------
// gaussian2d
// ---------------------------------------------------------------------------

GaussianCluster gaussian2d_cluster(int task_id, int cls, const Gaussian2dConfig& cfg) {
  if (task_id < 0 || task_id > 3) throw ConfigError("gaussian2d: task_id must be 0..3");
  // four fixed clusters: two horizontal ellipses on the (-c,+c)/(+c,-c)
  // diagonal, two vertical on the other; odd tasks swap the class labels
  const double c = cfg.center;
  const GaussianCluster horiz[2] = {{-c, c, true}, {c, -c, true}};
  const GaussianCluster vert[2] = {{c, c, false}, {-c, -c, false}};
  bool swapped = (task_id % 2) == 1;
  int slot = swapped ? 1 - cls : cls;
  return task_id < 2 ? horiz[slot] : vert[slot];
}

namespace {
void sample_cluster(const GaussianCluster& cl, const Gaussian2dConfig& cfg, Rng& rng, double& x,
                    double& y) {
  double major = std::sqrt(cfg.var_major) * rng.normal();
  double minor = std::sqrt(cfg.var_minor) * rng.normal();
  x = cl.cx + (cl.horizontal ? major : minor);
  y = cl.cy + (cl.horizontal ? minor : major);
}
}  // namespace

Episode gaussian2d_episode(int task_id, int64_t n_per_cluster, Rng& rng,
                           const Gaussian2dConfig& cfg) {
  Episode ep;
  ep.n_way = 2;
  ep.k_shot = n_per_cluster;
  ep.q_per_class = cfg.q_per_class;
  ep.support_x = Tensor::zeros({2 * n_per_cluster, 2}, Dtype::f32);
  ep.query_x = Tensor::zeros({2 * cfg.q_per_class, 2}, Dtype::f32);
  int64_t si = 0, qi = 0;
  for (int cls = 0; cls < 2; ++cls) {
    GaussianCluster cl = gaussian2d_cluster(task_id, cls, cfg);
    for (int64_t i = 0; i < n_per_cluster; ++i, ++si) {
      double x, y;
      sample_cluster(cl, cfg, rng, x, y);
      ep.support_x.set(size_t(2 * si), x);
      ep.support_x.set(size_t(2 * si + 1), y);
      ep.support_y.push_back(cls);
    }
    for (int64_t i = 0; i < cfg.q_per_class; ++i, ++qi) {
      double x, y;
      sample_cluster(cl, cfg, rng, x, y);
      ep.query_x.set(size_t(2 * qi), x);
      ep.query_x.set(size_t(2 * qi + 1), y);
      ep.query_y.push_back(cls);
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------
// glyphs
// ---------------------------------------------------------------------------

namespace {

struct Stroke {
  double x0, y0, x1, y1, sigma;
};

void stamp_stroke(std::vector<float>& img, int64_t S, const Stroke& st) {
  double len = std::hypot(st.x1 - st.x0, st.y1 - st.y0) * double(S);
  int steps = std::max(2, int(len * 2.0));
  double sig_px = st.sigma * double(S);
  int rad = std::max(1, int(std::ceil(sig_px * 2.5)));
  for (int t = 0; t <= steps; ++t) {
    double a = double(t) / double(steps);
    double px = (st.x0 + a * (st.x1 - st.x0)) * double(S);
    double py = (st.y0 + a * (st.y1 - st.y0)) * double(S);
    int cx = int(std::lround(px)), cy = int(std::lround(py));
    for (int dy = -rad; dy <= rad; ++dy)
      for (int dx = -rad; dx <= rad; ++dx) {
        int x = cx + dx, y = cy + dy;
        if (x < 0 || x >= S || y < 0 || y >= S) continue;
        double d2 = (double(x) - px) * (double(x) - px) + (double(y) - py) * (double(y) - py);
        float v = float(std::exp(-d2 / (2.0 * sig_px * sig_px)));
        float& cell = img[size_t(y * S + x)];
        cell = std::max(cell, v);
      }
  }
}

}  // namespace

Tensor glyph_canonical(const GlyphFamilyConfig& cfg, int64_t class_id) {
  const int64_t S = cfg.image_size;
  Rng rng = Rng::stream(hash_combine(cfg.seed, 0x91f7), uint64_t(class_id));
  std::vector<float> img(size_t(S * S), 0.0f);

  int n_strokes = 3 + int(rng.below(3));
  for (int s = 0; s < n_strokes; ++s) {
    Stroke st;
    st.x0 = rng.uniform(0.15, 0.85);
    st.y0 = rng.uniform(0.15, 0.85);
    st.x1 = rng.uniform(0.15, 0.85);
    st.y1 = rng.uniform(0.15, 0.85);
    st.sigma = rng.uniform(0.03, 0.06);
    stamp_stroke(img, S, st);
  }
  // low-amplitude class-specific interference pattern
  double fx = rng.uniform(1.5, 4.0), fy = rng.uniform(1.5, 4.0);
  double px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x) {
      double u = double(x) / double(S), v = double(y) / double(S);
      img[size_t(y * S + x)] +=
          0.15f * float(std::sin(6.28318 * fx * u + px) * std::sin(6.28318 * fy * v + py));
    }
  Tensor t = Tensor::zeros({1, S, S}, Dtype::f32);
  for (int64_t i = 0; i < S * S; ++i)
    t.set(size_t(i), std::clamp(img[size_t(i)], 0.0f, 1.0f));
  return t;
}

Tensor glyph_sample(const GlyphFamilyConfig& cfg, int64_t class_id, uint64_t sample_seed) {
  const int64_t S = cfg.image_size;
  Tensor canon = glyph_canonical(cfg, class_id);
  Rng rng = Rng::stream(hash_combine(cfg.seed, hash_combine(0x30d7, uint64_t(class_id))),
                        sample_seed);
  double j = cfg.jitter;
  double theta = rng.uniform(-0.12, 0.12) * j;
  double sc = 1.0 + rng.uniform(-0.08, 0.08) * j;
  double tx = rng.uniform(-0.06, 0.06) * j, ty = rng.uniform(-0.06, 0.06) * j;
  double ct = std::cos(theta) / sc, st = std::sin(theta) / sc;

  Tensor out = Tensor::zeros({1, S, S}, Dtype::f32);
  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x) {
      // inverse affine around the image center
      double u = (double(x) + 0.5) / double(S) - 0.5 - tx;
      double v = (double(y) + 0.5) / double(S) - 0.5 - ty;
      double su = (ct * u + st * v + 0.5) * double(S) - 0.5;
      double sv = (-st * u + ct * v + 0.5) * double(S) - 0.5;
      double val = 0.0;
      int64_t x0 = int64_t(std::floor(su)), y0 = int64_t(std::floor(sv));
      double wx = su - double(x0), wy = sv - double(y0);
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          int64_t xs = x0 + dx, ys = y0 + dy;
          if (xs < 0 || xs >= S || ys < 0 || ys >= S) continue;
          double w = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy);
          val += w * canon.at(size_t(ys * S + xs));
        }
      val += cfg.noise_std * rng.normal();
      out.set(size_t(y * S + x), std::clamp(val, 0.0, 1.0));
    }
  return out;
}

// ---------------------------------------------------------------------------
// families and sampling
// ---------------------------------------------------------------------------

TaskFamily make_gaussian2d_family(const Gaussian2dConfig& cfg, uint64_t seed) {
  TaskFamily f;
  f.kind = TaskFamily::Kind::gaussian2d;
  f.seed = seed;
  f.sample_shape = {2};
  f.gaussian = cfg;
  // the four permuted-ellipse tasks are shared across splits by construction
  f.splits.train = {0, 1, 2, 3};
  f.splits.val = {0, 1, 2, 3};
  f.splits.test = {0, 1, 2, 3};
  return f;
}

TaskFamily make_glyph_family(const GlyphFamilyConfig& cfg, double r_train, double r_val,
                             double r_test) {
  TaskFamily f;
  f.kind = TaskFamily::Kind::glyphs;
  f.seed = cfg.seed;
  f.sample_shape = {1, cfg.image_size, cfg.image_size};
  f.glyphs = cfg;
  std::vector<int64_t> pool(size_t(cfg.n_classes));
  for (int64_t i = 0; i < cfg.n_classes; ++i) pool[size_t(i)] = i;
  f.splits = split_classes(pool, r_train, r_val, r_test, cfg.seed);
  return f;
}

TaskFamily load_image_folder(const std::string& path, int64_t image_size, int64_t channels,
                             int64_t min_per_class, double r_train, double r_val, double r_test,
                             uint64_t seed) {
  if (!fs::is_directory(path)) throw IoError("image folder: not a directory: " + path);
  TaskFamily f;
  f.kind = TaskFamily::Kind::image_folder;
  f.seed = seed;
  f.sample_shape = {channels, image_size, image_size};

  std::vector<fs::path> class_dirs;
  for (auto& entry : fs::directory_iterator(path))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("image folder: no class subdirectories in " + path);

  for (const fs::path& dir : class_dirs) {
    std::vector<Tensor> stack;
    std::vector<fs::path> files;
    for (auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
      std::string err;
      auto im = load_image(file.string(), &err);
      if (!im) {
        std::cerr << "warning: skipping " << file.string() << " (" << err << ")\n";
        continue;
      }
      Image fixed = convert_channels(resize_bilinear(*im, image_size, image_size), channels);
      Tensor t = Tensor::zeros({channels, image_size, image_size}, Dtype::f32);
      for (size_t i = 0; i < fixed.data.size(); ++i) t.set(i, fixed.data[i]);
      stack.push_back(std::move(t));
    }
    if (int64_t(stack.size()) < std::max<int64_t>(min_per_class, 1)) {
      std::cerr << "warning: excluding class " << dir.filename().string() << " ("
                << stack.size() << " usable images, need " << std::max<int64_t>(min_per_class, 1)
                << ")\n";
      continue;
    }
    f.class_names.push_back(dir.filename().string());
    f.images.push_back(std::move(stack));
  }
  if (f.images.empty()) throw IoError("image folder: no usable classes in " + path);

  std::vector<int64_t> pool(f.images.size());
  for (size_t i = 0; i < pool.size(); ++i) pool[i] = int64_t(i);
  f.splits = split_classes(pool, r_train, r_val, r_test, seed);
  return f;
}

EpisodeSampler::EpisodeSampler(TaskFamily family, EpisodeSpec spec)
    : family_(std::move(family)), spec_(spec) {}

EpisodeSampler::EpisodeSampler(TaskFamily train_family, TaskFamily eval_family, EpisodeSpec spec)
    : family_(std::move(train_family)), eval_family_(std::move(eval_family)), spec_(spec) {}

const TaskFamily& EpisodeSampler::family_for(Split split) const {
  if (split != Split::train && eval_family_) return *eval_family_;
  return family_;
}

Episode EpisodeSampler::sample(Split split, uint64_t episode_index) const {
  const TaskFamily& fam = family_for(split);
  uint64_t tag = hash_combine(fam.seed, hash_combine(uint64_t(split) + 1, episode_index));
  Rng rng = Rng::stream(tag, 0xe15);

  if (fam.kind == TaskFamily::Kind::gaussian2d) {
    int task_id = int(episode_index % 4);
    return gaussian2d_episode(task_id, spec_.k_shot, rng, fam.gaussian);
  }

  const std::vector<int64_t>& pool = split == Split::train ? fam.splits.train
                                    : split == Split::val  ? fam.splits.val
                                                           : fam.splits.test;
  if (int64_t(pool.size()) < spec_.n_way)
    throw ConfigError("sample: split has " + std::to_string(pool.size()) +
                      " classes, need n_way=" + std::to_string(spec_.n_way));

  // classes without replacement
  std::vector<int64_t> chosen = pool;
  rng.shuffle(chosen);
  chosen.resize(size_t(spec_.n_way));

  int64_t L = spec_.n_way * spec_.k_shot, M = spec_.n_way * spec_.q_per_class;
  Shape sxs = fam.sample_shape, qxs = fam.sample_shape;
  sxs.insert(sxs.begin(), L);
  qxs.insert(qxs.begin(), M);
  Episode ep;
  ep.n_way = spec_.n_way;
  ep.k_shot = spec_.k_shot;
  ep.q_per_class = spec_.q_per_class;
  ep.support_x = Tensor::zeros(sxs, Dtype::f32);
  ep.query_x = Tensor::zeros(qxs, Dtype::f32);
  int64_t sample_elems = numel_of(fam.sample_shape);

  auto emit = [&](Tensor& dst, int64_t row, const Tensor& src) {
    for (int64_t i = 0; i < sample_elems; ++i)
      dst.set(size_t(row * sample_elems + i), src.at(size_t(i)));
  };

  int64_t si = 0, qi = 0;
  for (int64_t cls = 0; cls < spec_.n_way; ++cls) {
    int64_t cid = chosen[size_t(cls)];
    if (fam.kind == TaskFamily::Kind::glyphs) {
      for (int64_t k = 0; k < spec_.k_shot + spec_.q_per_class; ++k) {
        Tensor img = glyph_sample(fam.glyphs, cid, rng.next_u64());
        if (k < spec_.k_shot) {
          emit(ep.support_x, si, img);
          ep.support_y.push_back(int32_t(cls));
          ++si;
        } else {
          emit(ep.query_x, qi, img);
          ep.query_y.push_back(int32_t(cls));
          ++qi;
        }
      }
    } else {  // image_folder
      const auto& stack = fam.images[size_t(cid)];
      int64_t need = spec_.k_shot + spec_.q_per_class;
      if (int64_t(stack.size()) < need)
        throw ConfigError("sample: class " + fam.class_names[size_t(cid)] + " has " +
                          std::to_string(stack.size()) + " images, need " + std::to_string(need));
      std::vector<int64_t> order(stack.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
      rng.shuffle(order);
      for (int64_t k = 0; k < need; ++k) {
        const Tensor& img = stack[size_t(order[size_t(k)])];
        if (k < spec_.k_shot) {
          emit(ep.support_x, si, img);
          ep.support_y.push_back(int32_t(cls));
          ++si;
        } else {
          emit(ep.query_x, qi, img);
          ep.query_y.push_back(int32_t(cls));
          ++qi;
        }
      }
    }
  }
  return ep;
}

}  // namespace metafew
