#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsskd/common.hpp"

namespace lsskd {

/// One image after decode + normalization: planar C x H x W floats.
struct ImageSample {
    std::vector<float> pixels;
    int class_label = 0;
    std::int64_t sample_id = 0; // record index within the source file(s)
};

struct DatasetMeta {
    std::string name;
    int num_classes = 0;
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<double> channel_means;
    std::vector<double> channel_stds;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<ImageSample> samples;
};

// ---- raw record layer (bit-exact round trip) --------------------------------

enum class CifarVariant { cifar10, cifar100 };

struct CifarRecord {
    std::uint8_t coarse_label = 0; // cifar100 only
    std::uint8_t label = 0;        // fine label
    std::vector<std::uint8_t> pixels; // 3072 planar RGB bytes
};

std::vector<CifarRecord> parse_cifar_records(const std::vector<std::uint8_t>& bytes,
                                             CifarVariant variant);
std::vector<std::uint8_t> serialize_cifar_records(const std::vector<CifarRecord>& records,
                                                  CifarVariant variant);

struct IdxImages {
    std::size_t rows = 0, cols = 0;
    std::vector<std::vector<std::uint8_t>> images; // each rows*cols bytes
};

IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> serialize_idx_images(const IdxImages& images);
std::vector<std::uint8_t> serialize_idx_labels(const std::vector<std::uint8_t>& labels);

// ---- file loaders ------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

/// Parses one CIFAR binary file; sample ids start at `id_base`.
std::vector<ImageSample> load_cifar_binary(const std::string& path, CifarVariant variant,
                                           const std::vector<double>& means,
                                           const std::vector<double>& stds,
                                           std::int64_t id_base = 0);

std::vector<ImageSample> load_idx(const std::string& images_path, const std::string& labels_path,
                                  const std::vector<double>& means,
                                  const std::vector<double>& stds,
                                  std::size_t* rows_out = nullptr, std::size_t* cols_out = nullptr);

/// Resolves `<dir>/<name>/...` by the dataset convention: cifar10 reads
/// data_batch_*.bin / test_batch.bin, cifar100 reads train.bin / test.bin,
/// anything else is treated as an IDX set with MNIST-style file names.
/// Empty mean/std vectors select the per-dataset defaults.
struct LoadedData {
    Dataset train;
    Dataset test;
};
LoadedData load_dataset(const std::string& name, const std::string& dir,
                        std::vector<double> means = {}, std::vector<double> stds = {});

std::vector<double> default_means(const std::string& dataset_name, std::size_t channels);
std::vector<double> default_stds(const std::string& dataset_name, std::size_t channels);

// ---- training-time transforms -------------------------------------------------

/// Deterministic core of the crop/flip augmentation: crop window offset
/// (dy, dx) in the 4-padded frame (0..8), optional horizontal flip.
ImageSample crop_flip(const ImageSample& sample, std::size_t channels, std::size_t height,
                      std::size_t width, std::size_t dy, std::size_t dx, bool flip);

/// Zero-pads 4 pixels per side, crops back to H x W at a uniform offset and
/// flips horizontally with probability 1/2. Padding happens after
/// normalization, so the fill value is 0.
ImageSample augment(const ImageSample& sample, std::size_t channels, std::size_t height,
                    std::size_t width, Rng& rng);

/// Per class keeps round(fraction * count) samples (half-up), chosen by a
/// seeded shuffle; result sorted by sample id.
std::vector<ImageSample> stratified_subset(const std::vector<ImageSample>& samples,
                                           int num_classes, double fraction, std::uint64_t seed);

/// Epoch-seeded shuffled batches (seed XOR epoch); the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t sample_count, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch);

} // namespace lsskd
