#include "lsskd/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace fs = std::filesystem;

namespace lsskd {

namespace {

std::uint8_t clamp_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

// Smooth blob-constellation prototype. Blob layout encodes the class and has
// a definite orientation, so both the class and the rotation of a sample are
// recoverable from local structure (unlike iid pixel noise, which is
// rotation-symmetric in distribution).
std::vector<double> make_prototype(std::size_t h, std::size_t w, double contrast, Rng& rng) {
    const int blobs = 6;
    std::vector<double> proto(h * w, 0.0);
    for (int b = 0; b < blobs; ++b) {
        double cx = rng.next_double() * static_cast<double>(w - 1);
        double cy = rng.next_double() * static_cast<double>(h - 1);
        double sigma = 0.9 + rng.next_double() * 1.3;
        double sign = (b % 2 == 0) ? 1.0 : -1.0;
        double amp = sign * (0.6 + rng.next_double() * 0.4);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                proto[y * w + x] += amp * std::exp(-d2 / (2.0 * sigma * sigma));
            }
    }
    double peak = 1e-9;
    for (double v : proto) peak = std::max(peak, std::fabs(v));
    for (auto& v : proto) v *= contrast / peak;
    return proto;
}

void emit_split(const ToySpec& spec, const std::vector<std::vector<double>>& prototypes,
                std::size_t per_class, Rng& rng, IdxImages& images,
                std::vector<std::uint8_t>& labels) {
    const std::size_t hw = spec.height * spec.width;
    images.rows = spec.height;
    images.cols = spec.width;
    // class-interleaved so any prefix is roughly balanced
    for (std::size_t i = 0; i < per_class; ++i) {
        for (int c = 0; c < spec.num_classes; ++c) {
            std::vector<std::uint8_t> img(hw);
            for (std::size_t p = 0; p < hw; ++p)
                img[p] = clamp_byte(128.0 + prototypes[c][p] + rng.next_normal() * spec.noise);
            images.images.push_back(std::move(img));
            labels.push_back(static_cast<std::uint8_t>(c));
        }
    }
}

} // namespace

void write_toy_idx_dataset(const ToySpec& spec, const std::string& dir, const std::string& name) {
    Rng rng(spec.seed);
    std::vector<std::vector<double>> prototypes(spec.num_classes);
    for (auto& proto : prototypes)
        proto = make_prototype(spec.height, spec.width, spec.contrast, rng);

    IdxImages train_images, test_images;
    std::vector<std::uint8_t> train_labels, test_labels;
    emit_split(spec, prototypes, spec.train_per_class, rng, train_images, train_labels);
    emit_split(spec, prototypes, spec.test_per_class, rng, test_images, test_labels);

    const fs::path root = fs::path(dir) / name;
    fs::create_directories(root);
    write_file_bytes((root / "train-images-idx3-ubyte").string(),
                     serialize_idx_images(train_images));
    write_file_bytes((root / "train-labels-idx1-ubyte").string(),
                     serialize_idx_labels(train_labels));
    write_file_bytes((root / "t10k-images-idx3-ubyte").string(),
                     serialize_idx_images(test_images));
    write_file_bytes((root / "t10k-labels-idx1-ubyte").string(),
                     serialize_idx_labels(test_labels));
}

} // namespace lsskd
