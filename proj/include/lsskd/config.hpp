#pragma once

#include <string>
#include <vector>

#include "lsskd/data.hpp"
#include "lsskd/network.hpp"
#include "lsskd/trainer.hpp"

namespace lsskd {

/// Parsed `key = value` configuration. Unknown keys and malformed values are
/// rejected at parse time; serialize() emits every key in canonical order so
/// parse(serialize(c)) == c.
struct AppConfig {
    std::string dataset_name = "cifar10";
    std::string dataset_dir = "data";
    std::vector<double> dataset_mean; // empty: per-dataset default
    std::vector<double> dataset_std;
    double fewshot_fraction = 1.0;

    int model_stages = 3;
    std::vector<int> model_channels = {16, 32, 64};
    std::vector<int> model_blocks = {2, 2, 2};

    std::uint32_t train_epochs = 240;
    std::size_t train_batch = 64;
    double train_lr0 = 0.05;
    double train_momentum = 0.9;
    double train_wd = 5e-5;
    std::vector<std::uint32_t> train_milestones = {150, 210};
    double train_decay = 0.1;
    std::string train_mode = "lsskd"; // lsskd | baseline

    double distill_alpha = 0.8;
    double distill_beta = 0.1;
    double distill_gamma = 0.1;
    double distill_tau_kd = 3.0;
    bool distill_alpha_warmup = false;

    std::uint64_t seed = 1;
    std::string out_dir = "out";

    bool operator==(const AppConfig&) const = default;
};

AppConfig parse_config_text(const std::string& text);
AppConfig load_config_file(const std::string& path);
std::string serialize_config(const AppConfig& cfg);

TrainConfig make_train_config(const AppConfig& cfg);
BackboneConfig make_backbone_config(const AppConfig& cfg, const DatasetMeta& meta);

} // namespace lsskd
