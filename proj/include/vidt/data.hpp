#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vidt/losses.hpp"

namespace vidt {

enum class ShapeKind : std::size_t { rectangle = 0, disk = 1, triangle = 2 };
inline constexpr std::size_t kShapeKinds = 3;

std::string to_string(ShapeKind kind);

struct SyntheticScene {
  Tensor image;  // [H x W x 3], values in [0, 1]
  GroundTruth gt;
};

// Scenes of 0-4 non-overlapping filled shapes on a noisy background. Class is
// the shape kind; colour is drawn independently of the class. Every tenth
// scene is empty. Boxes are normalized (cx, cy, w, h) of the tight bounds of
// the rasterized shape. Scenes are generated in parallel over `threads`
// workers; each scene has its own seed, so the result does not depend on the
// thread count.
std::vector<SyntheticScene> generate_dataset(std::size_t n, std::uint64_t seed, std::size_t size = 64,
                                             std::size_t threads = 1);

SyntheticScene generate_scene(std::uint64_t seed, std::size_t index, std::size_t size);

// Dataset file: the named-tensor container with entries images [n x H x W x
// 3], counts [n], boxes [total x 4] and labels [total], stored as f64.
void save_dataset(const std::string& path, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> load_dataset(const std::string& path);

// Throws ContractError if a box is outside [0, 1], degenerate, or a label is
// not below `classes`.
void validate_ground_truth(const GroundTruth& gt, std::size_t classes);

// Thread count from the VIDT_THREADS environment variable (default 1).
std::size_t env_threads();

}  // namespace vidt
