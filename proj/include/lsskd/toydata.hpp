#pragma once

#include <cstdint>
#include <string>

#include "lsskd/data.hpp"

namespace lsskd {

/// Synthetic grayscale classification set written in IDX layout, for runs
/// that need labeled data without any external download. Each class is a
/// random prototype pattern; samples add pixel noise on top, so accuracy
/// saturates below 100% and training gains stay measurable.
struct ToySpec {
    int num_classes = 10;
    std::size_t height = 8, width = 8;
    std::size_t train_per_class = 500;
    std::size_t test_per_class = 100;
    double contrast = 70.0; // prototype amplitude around mid-gray, byte units
    double noise = 64.0;    // per-pixel Gaussian sigma, byte units
    std::uint64_t seed = 7;
};

/// Writes train/test IDX files under `<dir>/<name>/` with MNIST-style names,
/// loadable through load_dataset(name, dir).
void write_toy_idx_dataset(const ToySpec& spec, const std::string& dir, const std::string& name);

} // namespace lsskd
