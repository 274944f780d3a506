#include "vidt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include "vidt/container.hpp"
#include "vidt/error.hpp"

namespace vidt {

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disk: return "disk";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

namespace {

struct PixelBox {
  long x0, y0, x1, y1;  // inclusive

  bool overlaps(const PixelBox& o, long margin) const {
    return x0 - margin <= o.x1 && o.x0 - margin <= x1 && y0 - margin <= o.y1 && o.y0 - margin <= y1;
  }
};

// Rasterizes one shape inside [left, left + w) x [top, top + h) by testing
// pixel centres.
std::vector<std::uint8_t> rasterize(ShapeKind kind, std::size_t size, Real left, Real top, Real w, Real h,
                                    std::mt19937_64& rng) {
  std::vector<std::uint8_t> mask(size * size, 0);
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  // Triangle vertices: apex on the top edge, base on the bottom edge, with a
  // random orientation among the four axis directions.
  std::array<std::array<Real, 2>, 3> tri{};
  int orientation = 0;
  if (kind == ShapeKind::triangle) {
    orientation = static_cast<int>(rng() % 4);
    const Real apex = 0.2 + 0.6 * unit(rng);
    tri = {{{apex, 0.0}, {0.0, 1.0}, {1.0, 1.0}}};
  }
  auto edge = [](const std::array<Real, 2>& a, const std::array<Real, 2>& b, Real x, Real y) {
    return (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
  };
  for (std::size_t py = 0; py < size; ++py) {
    for (std::size_t px = 0; px < size; ++px) {
      const Real u = (static_cast<Real>(px) + 0.5 - left) / w;
      const Real v = (static_cast<Real>(py) + 0.5 - top) / h;
      if (u < 0 || u > 1 || v < 0 || v > 1) continue;
      bool inside = false;
      switch (kind) {
        case ShapeKind::rectangle: inside = true; break;
        case ShapeKind::disk: inside = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25; break;
        case ShapeKind::triangle: {
          Real x = u, y = v;
          if (orientation == 1) y = 1 - v;
          if (orientation == 2) std::swap(x, y);
          if (orientation == 3) { std::swap(x, y); y = 1 - y; }
          const Real e0 = edge(tri[0], tri[1], x, y), e1 = edge(tri[1], tri[2], x, y), e2 = edge(tri[2], tri[0], x, y);
          inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
          break;
        }
      }
      if (inside) mask[py * size + px] = 1;
    }
  }
  return mask;
}

Real quantize(Real v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 256.0; }

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, std::size_t index, std::size_t size) {
  if (size < 16) throw ConfigError("generate_dataset: image size " + std::to_string(size) + " is below 16");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  std::normal_distribution<Real> noise(0.0, 0.02);

  std::array<Real, 3> background{};
  for (auto& c : background) c = 0.3 * unit(rng);
  Buffer pixels(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    for (std::size_t c = 0; c < 3; ++c) pixels[i * 3 + c] = background[c] + noise(rng);
  }

  SyntheticScene scene;
  const std::size_t objects = index % 10 == 0 ? 0 : 1 + rng() % 4;
  const auto s = static_cast<Real>(size);
  const Real min_side = std::max<Real>(6.0, s * 0.12), max_side = s * 0.4;
  std::vector<PixelBox> taken;
  for (std::size_t o = 0; o < objects; ++o) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const auto kind = static_cast<ShapeKind>(rng() % kShapeKinds);
      const Real w = min_side + (max_side - min_side) * unit(rng);
      const Real h = kind == ShapeKind::disk ? w : min_side + (max_side - min_side) * unit(rng);
      const Real left = (s - w) * unit(rng), top = (s - h) * unit(rng);
      const auto mask = rasterize(kind, size, left, top, w, h, rng);
      PixelBox box{static_cast<long>(size), static_cast<long>(size), -1, -1};
      for (std::size_t py = 0; py < size; ++py) {
        for (std::size_t px = 0; px < size; ++px) {
          if (!mask[py * size + px]) continue;
          box.x0 = std::min<long>(box.x0, static_cast<long>(px));
          box.y0 = std::min<long>(box.y0, static_cast<long>(py));
          box.x1 = std::max<long>(box.x1, static_cast<long>(px));
          box.y1 = std::max<long>(box.y1, static_cast<long>(py));
        }
      }
      if (box.x1 < 0 || box.x1 - box.x0 < 3 || box.y1 - box.y0 < 3) continue;
      if (std::any_of(taken.begin(), taken.end(), [&](const PixelBox& t) { return t.overlaps(box, 2); })) continue;
      taken.push_back(box);
      std::array<Real, 3> colour{};
      for (auto& c : colour) c = 0.45 + 0.55 * unit(rng);
      for (std::size_t i = 0; i < size * size; ++i) {
        if (!mask[i]) continue;
        for (std::size_t c = 0; c < 3; ++c) pixels[i * 3 + c] = colour[c] + noise(rng);
      }
      scene.gt.boxes.push_back(from_corners({box.x0 / s, box.y0 / s, (box.x1 + 1) / s, (box.y1 + 1) / s}));
      scene.gt.labels.push_back(static_cast<std::size_t>(kind));
      break;
    }
  }
  for (auto& v : pixels) v = quantize(v);
  scene.image = Tensor::from({size, size, 3}, std::move(pixels));
  return scene;
}

std::vector<SyntheticScene> generate_dataset(std::size_t n, std::uint64_t seed, std::size_t size,
                                             std::size_t threads) {
  if (n == 0) throw ConfigError("generate_dataset: need at least one scene");
  if (size < 16) throw ConfigError("generate_dataset: image size " + std::to_string(size) + " is below 16");
  std::vector<SyntheticScene> scenes(n);
  threads = std::clamp<std::size_t>(threads, 1, n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) scenes[i] = generate_scene(seed, i, size);
    });
  }
  for (auto& th : pool) th.join();
  return scenes;
}

void save_dataset(const std::string& path, const std::vector<SyntheticScene>& scenes) {
  if (scenes.empty()) throw ContractError("save_dataset: empty dataset");
  const auto shape = scenes[0].image.shape();
  Buffer images, boxes, labels, counts;
  for (const auto& s : scenes) {
    if (s.image.shape() != shape) throw DimensionError("save_dataset: scenes differ in image shape");
    images.insert(images.end(), s.image.data().begin(), s.image.data().end());
    counts.push_back(static_cast<Real>(s.gt.size()));
    for (std::size_t i = 0; i < s.gt.size(); ++i) {
      boxes.insert(boxes.end(), s.gt.boxes[i].begin(), s.gt.boxes[i].end());
      labels.push_back(static_cast<Real>(s.gt.labels[i]));
    }
  }
  const std::size_t n = scenes.size(), total = labels.size();
  NamedTensors entries;
  entries.emplace_back("images", Tensor::from({n, shape[0], shape[1], shape[2]}, std::move(images)));
  entries.emplace_back("counts", Tensor::from({n}, std::move(counts)));
  entries.emplace_back("boxes", Tensor::from({total, 4}, std::move(boxes)));
  entries.emplace_back("labels", Tensor::from({total}, std::move(labels)));
  save_tensors(path, entries, Precision::f64);
}

std::vector<SyntheticScene> load_dataset(const std::string& path) {
  const auto entries = load_tensors(path);
  const auto& images = find_tensor(entries, "images");
  const auto& counts = find_tensor(entries, "counts");
  const auto& boxes = find_tensor(entries, "boxes");
  const auto& labels = find_tensor(entries, "labels");
  if (images.rank() != 4 || counts.rank() != 1 || counts.dim(0) != images.dim(0) || boxes.rank() != 2 ||
      boxes.dim(1) != 4 || labels.rank() != 1 || labels.dim(0) != boxes.dim(0)) {
    throw DimensionError("load_dataset: inconsistent entry shapes in " + path);
  }
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  const std::size_t per = h * w * c;
  std::vector<SyntheticScene> scenes(n);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = images.data().begin() + static_cast<std::ptrdiff_t>(i * per);
    scenes[i].image = Tensor::from({h, w, c}, Buffer(first, first + static_cast<std::ptrdiff_t>(per)));
    const auto m = static_cast<std::size_t>(counts.data()[i]);
    if (cursor + m > labels.dim(0)) throw DimensionError("load_dataset: box counts exceed stored boxes");
    for (std::size_t j = 0; j < m; ++j, ++cursor) {
      Box b;
      for (std::size_t k = 0; k < 4; ++k) b[k] = boxes.data()[cursor * 4 + k];
      scenes[i].gt.boxes.push_back(b);
      scenes[i].gt.labels.push_back(static_cast<std::size_t>(labels.data()[cursor]));
    }
  }
  if (cursor != labels.dim(0)) throw DimensionError("load_dataset: stored boxes exceed box counts");
  return scenes;
}

void validate_ground_truth(const GroundTruth& gt, std::size_t classes) {
  if (gt.boxes.size() != gt.labels.size()) throw ContractError("ground truth: box and label counts differ");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto c = to_corners(gt.boxes[i]);
    constexpr Real slack = 1e-9;
    if (!(c[0] >= -slack && c[1] >= -slack && c[2] <= 1 + slack && c[3] <= 1 + slack && c[2] > c[0] &&
          c[3] > c[1])) {
      throw ContractError("ground truth: box " + std::to_string(i) + " is degenerate or outside [0, 1]");
    }
    if (gt.labels[i] >= classes) {
      throw ContractError("ground truth: label " + std::to_string(gt.labels[i]) + " is not below " +
                          std::to_string(classes));
    }
  }
}

std::size_t env_threads() {
  const char* raw = std::getenv("VIDT_THREADS");
  if (!raw || !*raw) return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) {
    throw ConfigError(std::string("VIDT_THREADS must be an integer in [1, 1024], got '") + raw + "'");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace vidt
