#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "lsskd/data.hpp"

namespace lsskd {

/// N classes x M input transforms, flattened class-major: k = n*M + m.
struct JointLabelSpace {
    int num_classes = 0;   // N
    int num_transforms = 4; // M

    int joint_count() const { return num_classes * num_transforms; } // K

    int encode(int class_label, int transform) const;
    std::pair<int, int> decode(int joint_index) const; // (class, transform)

    /// One-hot distribution of length K at encode(class, transform).
    std::vector<double> joint_one_hot(int class_label, int transform) const;
};

/// m successive 90-degree clockwise rotations of a planar C x H x W image.
/// Odd m requires H == W. Pure element permutation.
std::vector<float> rotate(const std::vector<float>& pixels, std::size_t channels,
                          std::size_t height, std::size_t width, int m);

struct ExpandedBatch {
    std::vector<ImageSample> samples;  // M blocks of B, transform-major
    std::vector<int> joint_labels;     // per expanded sample, k = n*M + j
    std::vector<int> transforms;       // block id j per expanded sample
    std::size_t base_count = 0;        // B
};

/// Duplicates the batch under every transform: for j = 0..M-1 the block
/// [j*B, (j+1)*B) holds each input rotated j times, in input order.
ExpandedBatch expand_batch(const std::vector<ImageSample>& batch, std::size_t channels,
                           std::size_t height, std::size_t width, const JointLabelSpace& space);

} // namespace lsskd
