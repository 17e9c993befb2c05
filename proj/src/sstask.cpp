#include "lsskd/sstask.hpp"

#include <stdexcept>
#include <string>

namespace lsskd {

int JointLabelSpace::encode(int class_label, int transform) const {
    if (class_label < 0 || class_label >= num_classes || transform < 0 ||
        transform >= num_transforms)
        throw std::invalid_argument("JointLabelSpace::encode: index out of range");
    return class_label * num_transforms + transform;
}

std::pair<int, int> JointLabelSpace::decode(int joint_index) const {
    if (joint_index < 0 || joint_index >= joint_count())
        throw std::invalid_argument("JointLabelSpace::decode: index out of range");
    return {joint_index / num_transforms, joint_index % num_transforms};
}

std::vector<double> JointLabelSpace::joint_one_hot(int class_label, int transform) const {
    std::vector<double> v(static_cast<std::size_t>(joint_count()), 0.0);
    v[static_cast<std::size_t>(encode(class_label, transform))] = 1.0;
    return v;
}

std::vector<float> rotate(const std::vector<float>& pixels, std::size_t channels,
                          std::size_t height, std::size_t width, int m) {
    m = ((m % 4) + 4) % 4;
    if (m == 0) return pixels;
    if ((m % 2) != 0 && height != width)
        throw std::invalid_argument("rotate: odd quarter-turns need a square image, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    std::vector<float> cur = pixels;
    std::size_t h = height, w = width;
    for (int step = 0; step < m; ++step) {
        // one clockwise quarter turn: out(r, c) = in(h-1-c, r)
        std::vector<float> next(cur.size());
        for (std::size_t c = 0; c < channels; ++c) {
            const float* src = cur.data() + c * h * w;
            float* dst = next.data() + c * h * w;
            for (std::size_t r = 0; r < w; ++r)
                for (std::size_t col = 0; col < h; ++col)
                    dst[r * h + col] = src[(h - 1 - col) * w + r];
        }
        cur.swap(next);
        std::swap(h, w);
    }
    return cur;
}

ExpandedBatch expand_batch(const std::vector<ImageSample>& batch, std::size_t channels,
                           std::size_t height, std::size_t width, const JointLabelSpace& space) {
    ExpandedBatch out;
    out.base_count = batch.size();
    const int M = space.num_transforms;
    out.samples.reserve(batch.size() * static_cast<std::size_t>(M));
    for (int j = 0; j < M; ++j) {
        for (const auto& s : batch) {
            ImageSample t;
            t.class_label = s.class_label;
            t.sample_id = s.sample_id;
            t.pixels = rotate(s.pixels, channels, height, width, j);
            out.samples.push_back(std::move(t));
            out.joint_labels.push_back(space.encode(s.class_label, j));
            out.transforms.push_back(j);
        }
    }
    return out;
}

} // namespace lsskd
