#include <cstdio>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "lsskd/checkpoint.hpp"
#include "lsskd/config.hpp"
#include "lsskd/gradcheck.hpp"
#include "lsskd/toydata.hpp"
#include "lsskd/trainer.hpp"

namespace {

using namespace lsskd;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitGradcheck = 5;

LoadedData load_for(const AppConfig& cfg) {
    return load_dataset(cfg.dataset_name, cfg.dataset_dir, cfg.dataset_mean, cfg.dataset_std);
}

int cmd_train(const std::string& config_path, const std::string& resume,
              double subset_fraction, bool have_subset, std::uint64_t seed, bool have_seed) {
    AppConfig cfg = load_config_file(config_path);
    if (have_seed) cfg.seed = seed;
    if (have_subset) cfg.fewshot_fraction = subset_fraction;
    TrainConfig tc = make_train_config(cfg);

    LoadedData data = load_for(cfg);
    if (cfg.fewshot_fraction < 1.0) {
        data.train.samples = stratified_subset(data.train.samples, data.train.meta.num_classes,
                                               cfg.fewshot_fraction, cfg.seed);
        std::map<int, std::size_t> counts;
        for (const auto& s : data.train.samples) counts[s.class_label]++;
        std::string line = "fewshot fraction=" + std::to_string(cfg.fewshot_fraction) +
                           " per-class counts:";
        for (const auto& [c, n] : counts)
            line += " " + std::to_string(c) + "=" + std::to_string(n);
        std::puts(line.c_str());
    }

    StudentNetwork net(make_backbone_config(cfg, data.train.meta));
    net.init_parameters(cfg.seed);
    TrainResult res = run_training(tc, data.train, data.test, net, resume);
    if (!res.metrics.empty()) {
        const EpochMetrics& last = res.metrics.back();
        std::printf("done: epochs=%u top1=%.2f top5=%.2f best_top1=%.2f\n", last.epoch,
                    last.test_top1, last.test_top5, res.best_top1);
    }
    std::printf("metrics: %s\n", res.metrics_path.c_str());
    std::printf("checkpoint: %s\n", res.last_checkpoint_path.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             std::uint64_t seed, bool have_seed) {
    AppConfig cfg = load_config_file(config_path);
    if (have_seed) cfg.seed = seed;
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    LoadedData data = load_for(cfg);
    StudentNetwork net(make_backbone_config(cfg, data.test.meta), ckpt.stripped);
    apply_checkpoint(ckpt, net, /*load_optimizer=*/false);
    auto [top1, top5] = evaluate(net, data.test, cfg.train_batch);
    std::printf("top1=%.2f top5=%.2f\n", top1, top5);
    return kExitOk;
}

int cmd_export(const std::string& checkpoint_path, const std::string& out_path) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.stripped)
        throw ConfigError("checkpoint is already stripped: " + checkpoint_path);
    Checkpoint stripped = strip_checkpoint(ckpt);
    save_checkpoint(out_path, stripped);
    std::printf("parameters before=%zu after=%zu\n", checkpoint_parameter_count(ckpt),
                checkpoint_parameter_count(stripped));
    return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, bool corrupt) {
    AppConfig cfg = load_config_file(config_path);
    Hyperparams hp;
    hp.alpha = cfg.distill_alpha;
    hp.beta = cfg.distill_beta;
    hp.gamma = cfg.distill_gamma;
    hp.tau_kd = cfg.distill_tau_kd;
    hp.validate();
    GradCheckReport report = run_gradcheck(hp, cfg.seed, 50, 1e-5, corrupt ? 1.01 : 1.0);
    for (const auto& t : report.terms)
        std::printf("%s max_rel_err=%.3e\n", t.name.c_str(), t.max_rel_err);
    if (!report.passed(1e-4)) {
        std::puts("gradcheck FAILED");
        return kExitGradcheck;
    }
    std::puts("gradcheck passed");
    return kExitOk;
}

int cmd_synth(const std::string& dir, const std::string& name, int classes, std::size_t side,
              std::size_t train_per_class, std::size_t test_per_class, double contrast,
              double noise, std::uint64_t seed) {
    ToySpec spec;
    spec.num_classes = classes;
    spec.height = spec.width = side;
    spec.train_per_class = train_per_class;
    spec.test_per_class = test_per_class;
    spec.contrast = contrast;
    spec.noise = noise;
    spec.seed = seed;
    write_toy_idx_dataset(spec, dir, name);
    std::printf("wrote %s/%s (%d classes, %zux%zu, %zu train / %zu test)\n", dir.c_str(),
                name.c_str(), classes, side, side, train_per_class * classes,
                test_per_class * classes);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LSSKD: layered self-supervised knowledge distillation trainer"};
    app.require_subcommand(1);

    std::string config_path, resume, checkpoint_path, out_path;
    double subset_fraction = 1.0;
    std::uint64_t seed = 0;
    bool corrupt = false;

    auto* train = app.add_subcommand("train", "train a student network");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");
    auto* train_subset = train->add_option("--subset-fraction", subset_fraction,
                                           "stratified few-shot fraction (0.25/0.5/0.75/1.0)");
    auto* train_seed = train->add_option("--seed", seed, "override the config seed");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test set");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--config", config_path, "config file")->required();
    auto* eval_seed = eval->add_option("--seed", seed, "override the config seed");

    auto* exp = app.add_subcommand("export", "strip auxiliary branches for inference");
    exp->add_option("--checkpoint", checkpoint_path, "full checkpoint")->required();
    exp->add_option("--out", out_path, "stripped checkpoint path")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of all loss terms");
    grad->add_option("--config", config_path, "config file (hyperparameters and seed)")
        ->required();
    grad->add_flag("--corrupt", corrupt, "fixture: corrupt the analytic gradients");

    std::string synth_dir = "data", synth_name = "toy10";
    int synth_classes = 10;
    std::size_t synth_side = 8, synth_train = 500, synth_test = 100;
    double synth_contrast = 70.0, synth_noise = 64.0;
    std::uint64_t synth_seed = 7;
    auto* synth = app.add_subcommand("synth", "generate a synthetic IDX dataset");
    synth->add_option("--dir", synth_dir, "dataset root directory");
    synth->add_option("--name", synth_name, "dataset name");
    synth->add_option("--classes", synth_classes, "class count");
    synth->add_option("--side", synth_side, "image side length");
    synth->add_option("--train-per-class", synth_train, "training samples per class");
    synth->add_option("--test-per-class", synth_test, "test samples per class");
    synth->add_option("--contrast", synth_contrast, "prototype amplitude (bytes)");
    synth->add_option("--noise", synth_noise, "pixel noise sigma (bytes)");
    synth->add_option("--seed", synth_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (app.got_subcommand(train))
            return cmd_train(config_path, resume, subset_fraction, !train_subset->empty(),
                             seed, !train_seed->empty());
        if (app.got_subcommand(eval))
            return cmd_eval(checkpoint_path, config_path, seed, !eval_seed->empty());
        if (app.got_subcommand(exp)) return cmd_export(checkpoint_path, out_path);
        if (app.got_subcommand(grad)) return cmd_gradcheck(config_path, corrupt);
        if (app.got_subcommand(synth))
            return cmd_synth(synth_dir, synth_name, synth_classes, synth_side, synth_train,
                             synth_test, synth_contrast, synth_noise, synth_seed);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
