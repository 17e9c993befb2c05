#include "lsskd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;

namespace lsskd {

namespace {

constexpr std::size_t kCifarPixelBytes = 3072; // 3 planes of 32x32
constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

ImageSample normalize_planar(const std::uint8_t* bytes, std::size_t channels, std::size_t hw,
                             const std::vector<double>& means, const std::vector<double>& stds,
                             int label, std::int64_t id) {
    ImageSample s;
    s.class_label = label;
    s.sample_id = id;
    s.pixels.resize(channels * hw);
    for (std::size_t c = 0; c < channels; ++c) {
        float mean = static_cast<float>(means[c]);
        float inv = static_cast<float>(1.0 / stds[c]);
        for (std::size_t i = 0; i < hw; ++i) {
            float v = static_cast<float>(bytes[c * hw + i]) / 255.0f;
            s.pixels[c * hw + i] = (v - mean) * inv;
        }
    }
    return s;
}

void require_channel_stats(const std::vector<double>& means, const std::vector<double>& stds,
                           std::size_t channels) {
    if (means.size() != channels || stds.size() != channels)
        throw DataError("normalization constants do not match channel count");
    for (double s : stds)
        if (s <= 0.0) throw DataError("channel std must be positive");
}

} // namespace

// ---- raw records ---------------------------------------------------------------

std::vector<CifarRecord> parse_cifar_records(const std::vector<std::uint8_t>& bytes,
                                             CifarVariant variant) {
    const std::size_t rec_len = (variant == CifarVariant::cifar10) ? 1 + kCifarPixelBytes
                                                                   : 2 + kCifarPixelBytes;
    if (bytes.empty() || bytes.size() % rec_len != 0)
        throw DataError("truncated CIFAR file: " + std::to_string(bytes.size()) +
                        " bytes is not a multiple of " + std::to_string(rec_len));
    const int n_classes = (variant == CifarVariant::cifar10) ? 10 : 100;
    std::vector<CifarRecord> out(bytes.size() / rec_len);
    for (std::size_t r = 0; r < out.size(); ++r) {
        const std::uint8_t* p = bytes.data() + r * rec_len;
        CifarRecord& rec = out[r];
        if (variant == CifarVariant::cifar100) {
            rec.coarse_label = p[0];
            rec.label = p[1];
            p += 2;
        } else {
            rec.label = p[0];
            p += 1;
        }
        if (rec.label >= n_classes)
            throw DataError("record " + std::to_string(r) + ": label byte " +
                            std::to_string(rec.label) + " >= " + std::to_string(n_classes));
        rec.pixels.assign(p, p + kCifarPixelBytes);
    }
    return out;
}

std::vector<std::uint8_t> serialize_cifar_records(const std::vector<CifarRecord>& records,
                                                  CifarVariant variant) {
    std::vector<std::uint8_t> out;
    for (const auto& rec : records) {
        if (variant == CifarVariant::cifar100) out.push_back(rec.coarse_label);
        out.push_back(rec.label);
        out.insert(out.end(), rec.pixels.begin(), rec.pixels.end());
    }
    return out;
}

IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16) throw DataError("IDX image file too short for header");
    if (read_be32(bytes.data()) != kIdxImagesMagic)
        throw DataError("IDX image magic mismatch");
    IdxImages out;
    std::size_t count = read_be32(bytes.data() + 4);
    out.rows = read_be32(bytes.data() + 8);
    out.cols = read_be32(bytes.data() + 12);
    const std::size_t img = out.rows * out.cols;
    if (bytes.size() != 16 + count * img) throw DataError("IDX image payload size mismatch");
    out.images.resize(count);
    for (std::size_t i = 0; i < count; ++i)
        out.images[i].assign(bytes.begin() + 16 + i * img, bytes.begin() + 16 + (i + 1) * img);
    return out;
}

std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8) throw DataError("IDX label file too short for header");
    if (read_be32(bytes.data()) != kIdxLabelsMagic)
        throw DataError("IDX label magic mismatch");
    std::size_t count = read_be32(bytes.data() + 4);
    if (bytes.size() != 8 + count) throw DataError("IDX label payload size mismatch");
    return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

std::vector<std::uint8_t> serialize_idx_images(const IdxImages& images) {
    std::vector<std::uint8_t> out;
    write_be32(out, kIdxImagesMagic);
    write_be32(out, static_cast<std::uint32_t>(images.images.size()));
    write_be32(out, static_cast<std::uint32_t>(images.rows));
    write_be32(out, static_cast<std::uint32_t>(images.cols));
    for (const auto& img : images.images) out.insert(out.end(), img.begin(), img.end());
    return out;
}

std::vector<std::uint8_t> serialize_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    write_be32(out, kIdxLabelsMagic);
    write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

// ---- file IO --------------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

std::vector<ImageSample> load_cifar_binary(const std::string& path, CifarVariant variant,
                                           const std::vector<double>& means,
                                           const std::vector<double>& stds,
                                           std::int64_t id_base) {
    require_channel_stats(means, stds, 3);
    auto records = parse_cifar_records(read_file_bytes(path), variant);
    std::vector<ImageSample> out;
    out.reserve(records.size());
    for (std::size_t r = 0; r < records.size(); ++r)
        out.push_back(normalize_planar(records[r].pixels.data(), 3, 1024, means, stds,
                                       records[r].label, id_base + static_cast<std::int64_t>(r)));
    return out;
}

std::vector<ImageSample> load_idx(const std::string& images_path, const std::string& labels_path,
                                  const std::vector<double>& means,
                                  const std::vector<double>& stds,
                                  std::size_t* rows_out, std::size_t* cols_out) {
    require_channel_stats(means, stds, 1);
    IdxImages imgs = parse_idx_images(read_file_bytes(images_path));
    std::vector<std::uint8_t> labels = parse_idx_labels(read_file_bytes(labels_path));
    if (imgs.images.size() != labels.size())
        throw DataError("IDX image/label count mismatch: " + std::to_string(imgs.images.size()) +
                        " vs " + std::to_string(labels.size()));
    if (rows_out) *rows_out = imgs.rows;
    if (cols_out) *cols_out = imgs.cols;
    std::vector<ImageSample> out;
    out.reserve(imgs.images.size());
    for (std::size_t i = 0; i < imgs.images.size(); ++i)
        out.push_back(normalize_planar(imgs.images[i].data(), 1, imgs.rows * imgs.cols,
                                       means, stds, labels[i], static_cast<std::int64_t>(i)));
    return out;
}

std::vector<double> default_means(const std::string& dataset_name, std::size_t channels) {
    if (dataset_name == "cifar10") return {0.4914, 0.4822, 0.4465};
    if (dataset_name == "cifar100") return {0.5071, 0.4865, 0.4409};
    if (dataset_name == "mnist") return {0.1307};
    return std::vector<double>(channels, 0.5);
}

std::vector<double> default_stds(const std::string& dataset_name, std::size_t channels) {
    if (dataset_name == "cifar10") return {0.2470, 0.2435, 0.2616};
    if (dataset_name == "cifar100") return {0.2673, 0.2564, 0.2762};
    if (dataset_name == "mnist") return {0.3081};
    return std::vector<double>(channels, 0.5);
}

LoadedData load_dataset(const std::string& name, const std::string& dir,
                        std::vector<double> means, std::vector<double> stds) {
    const fs::path root = fs::path(dir) / name;
    if (!fs::exists(root)) throw DataError("dataset directory not found: " + root.string());

    LoadedData out;
    auto finish_meta = [&](DatasetMeta& m, std::size_t c, std::size_t h, std::size_t w, int n) {
        m.name = name;
        m.channels = c;
        m.height = h;
        m.width = w;
        m.num_classes = n;
        m.channel_means = means;
        m.channel_stds = stds;
    };

    if (name == "cifar10" || name == "cifar100") {
        if (means.empty()) means = default_means(name, 3);
        if (stds.empty()) stds = default_stds(name, 3);
        CifarVariant variant = (name == "cifar10") ? CifarVariant::cifar10 : CifarVariant::cifar100;
        std::vector<std::string> train_files;
        std::string test_file;
        if (name == "cifar10") {
            for (int i = 1; i <= 5; ++i) {
                fs::path p = root / ("data_batch_" + std::to_string(i) + ".bin");
                if (fs::exists(p)) train_files.push_back(p.string());
            }
            test_file = (root / "test_batch.bin").string();
        } else {
            fs::path p = root / "train.bin";
            if (fs::exists(p)) train_files.push_back(p.string());
            test_file = (root / "test.bin").string();
        }
        if (train_files.empty()) throw DataError("no training files under " + root.string());
        std::int64_t base = 0;
        for (const auto& f : train_files) {
            auto part = load_cifar_binary(f, variant, means, stds, base);
            base += static_cast<std::int64_t>(part.size());
            out.train.samples.insert(out.train.samples.end(), part.begin(), part.end());
        }
        if (!fs::exists(test_file)) throw DataError("missing test file " + test_file);
        out.test.samples = load_cifar_binary(test_file, variant, means, stds, 0);
        finish_meta(out.train.meta, 3, 32, 32, name == "cifar10" ? 10 : 100);
        finish_meta(out.test.meta, 3, 32, 32, name == "cifar10" ? 10 : 100);
    } else {
        // IDX with MNIST-style names; class count inferred from the labels
        if (means.empty()) means = default_means(name, 1);
        if (stds.empty()) stds = default_stds(name, 1);
        std::size_t rows = 0, cols = 0;
        out.train.samples = load_idx((root / "train-images-idx3-ubyte").string(),
                                     (root / "train-labels-idx1-ubyte").string(),
                                     means, stds, &rows, &cols);
        out.test.samples = load_idx((root / "t10k-images-idx3-ubyte").string(),
                                    (root / "t10k-labels-idx1-ubyte").string(),
                                    means, stds);
        int n = 0;
        for (const auto& s : out.train.samples) n = std::max(n, s.class_label + 1);
        for (const auto& s : out.test.samples) n = std::max(n, s.class_label + 1);
        finish_meta(out.train.meta, 1, rows, cols, n);
        finish_meta(out.test.meta, 1, rows, cols, n);
    }
    out.train.meta.train_count = out.train.samples.size();
    out.train.meta.test_count = out.test.samples.size();
    out.test.meta.train_count = out.train.samples.size();
    out.test.meta.test_count = out.test.samples.size();
    return out;
}

// ---- transforms -------------------------------------------------------------------

ImageSample crop_flip(const ImageSample& sample, std::size_t channels, std::size_t height,
                      std::size_t width, std::size_t dy, std::size_t dx, bool flip) {
    constexpr std::size_t pad = 4;
    ImageSample out;
    out.class_label = sample.class_label;
    out.sample_id = sample.sample_id;
    out.pixels.assign(sample.pixels.size(), 0.0f);
    for (std::size_t c = 0; c < channels; ++c) {
        const float* src = sample.pixels.data() + c * height * width;
        float* dst = out.pixels.data() + c * height * width;
        for (std::size_t r = 0; r < height; ++r) {
            // crop window row r maps to source row r + dy - pad; outside is zero fill
            std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r + dy) - pad;
            if (sr < 0 || sr >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t col = 0; col < width; ++col) {
                std::ptrdiff_t sc = static_cast<std::ptrdiff_t>(col + dx) - pad;
                float v = 0.0f;
                if (sc >= 0 && sc < static_cast<std::ptrdiff_t>(width))
                    v = src[sr * width + sc];
                dst[r * width + (flip ? width - 1 - col : col)] = v;
            }
        }
    }
    return out;
}

ImageSample augment(const ImageSample& sample, std::size_t channels, std::size_t height,
                    std::size_t width, Rng& rng) {
    constexpr std::size_t pad = 4;
    const std::size_t dy = static_cast<std::size_t>(rng.next_below(2 * pad + 1));
    const std::size_t dx = static_cast<std::size_t>(rng.next_below(2 * pad + 1));
    const bool flip = rng.next_bool();
    return crop_flip(sample, channels, height, width, dy, dx, flip);
}

std::vector<ImageSample> stratified_subset(const std::vector<ImageSample>& samples,
                                           int num_classes, double fraction, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i)
        by_class[samples[i].class_label].push_back(i);
    for (int c = 0; c < num_classes; ++c)
        if (by_class.find(c) == by_class.end() || by_class[c].empty())
            throw DataError("stratified_subset: class " + std::to_string(c) + " has no samples");

    std::vector<std::size_t> chosen;
    for (int c = 0; c < num_classes; ++c) {
        auto& idx = by_class[c];
        // half-up rounding of fraction * count
        std::size_t keep = static_cast<std::size_t>(
            std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
        keep = std::min(keep, idx.size());
        Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + keep);
    }
    std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
        return samples[a].sample_id < samples[b].sample_id;
    });
    std::vector<ImageSample> out;
    out.reserve(chosen.size());
    for (std::size_t i : chosen) out.push_back(samples[i]);
    return out;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t sample_count, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch size must be >= 1");
    std::vector<std::size_t> order(sample_count);
    for (std::size_t i = 0; i < sample_count; ++i) order[i] = i;
    Rng rng(seed ^ epoch);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t pos = 0; pos < sample_count; pos += batch_size) {
        std::size_t end = std::min(pos + batch_size, sample_count);
        batches.emplace_back(order.begin() + pos, order.begin() + end);
    }
    return batches;
}

} // namespace lsskd
