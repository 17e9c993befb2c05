#include "lsskd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lsskd/checkpoint.hpp"

namespace fs = std::filesystem;

namespace lsskd {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch must be >= 1");
    if (lr0 <= 0.0) throw ConfigError("train.lr0 must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("train.wd must be non-negative");
    if (decay_factor <= 0.0 || decay_factor > 1.0)
        throw ConfigError("train.decay must lie in (0,1]");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
        if (milestones[i] >= epochs) throw ConfigError("milestones must be below train.epochs");
        if (i > 0 && milestones[i] <= milestones[i - 1])
            throw ConfigError("milestones must be strictly increasing");
    }
    const double f = fewshot_fraction;
    if (f != 0.25 && f != 0.5 && f != 0.75 && f != 1.0)
        throw ConfigError("fewshot.fraction must be one of 0.25, 0.5, 0.75, 1.0");
    hp.validate();
}

std::string metrics_csv_header() {
    return "epoch,lr,train_total,ls_loss,is_loss,test_top1,test_top5,wall_s";
}

namespace {
std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}
} // namespace

std::string metrics_csv_row(const EpochMetrics& m) {
    std::string row = std::to_string(m.epoch);
    for (double v : {m.lr, m.train_total, m.ls_loss, m.is_loss, m.test_top1, m.test_top5, m.wall_s})
        row += "," + fmt_g(v);
    return row;
}

double lr_at(std::uint32_t epoch, const TrainConfig& cfg) {
    if (epoch < 1 || epoch > cfg.epochs) throw std::invalid_argument("lr_at: epoch out of range");
    double lr = cfg.lr0;
    for (std::uint32_t m : cfg.milestones)
        if (m <= epoch - 1) lr *= cfg.decay_factor; // milestones in completed-epoch terms
    return lr;
}

void sgd_step(std::vector<ParamPtr>& params, double lr, double momentum, double weight_decay) {
    for (auto& p : params) {
        if (!p->value.has_grad()) continue;
        std::vector<double> g = p->value.grad_vector();
        std::vector<double> w = p->value.to_vector();
        std::vector<double> v = p->velocity.to_vector();
        const double wd = p->decay ? weight_decay : 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("non-finite gradient in parameter " + p->name);
            v[i] = momentum * v[i] + g[i] + wd * w[i];
            w[i] -= lr * v[i];
        }
        DType dt = p->value.dtype();
        p->value = Tensor::from_vector(p->value.shape(), w, dt);
        p->value.set_requires_grad(true);
        p->velocity = Tensor::from_vector(p->velocity.shape(), v, dt);
    }
}

Tensor targets_to_tensor(const std::vector<SoftTarget>& targets, std::size_t dim, DType dt) {
    std::vector<double> flat;
    flat.reserve(targets.size() * dim);
    for (const auto& t : targets) {
        if (t.probs.size() != dim)
            throw std::invalid_argument("targets_to_tensor: target length mismatch");
        flat.insert(flat.end(), t.probs.begin(), t.probs.end());
    }
    return Tensor::from_vector({targets.size(), dim}, flat, dt);
}

// ---- step assembly ---------------------------------------------------------------

namespace {

Tensor batch_to_tensor(const std::vector<ImageSample>& samples, const DatasetMeta& meta, DType dt) {
    const std::size_t chw = meta.channels * meta.height * meta.width;
    std::vector<double> flat;
    flat.reserve(samples.size() * chw);
    for (const auto& s : samples) {
        if (s.pixels.size() != chw)
            throw std::invalid_argument("sample pixel count does not match dataset shape");
        flat.insert(flat.end(), s.pixels.begin(), s.pixels.end());
    }
    return Tensor::from_vector({samples.size(), meta.channels, meta.height, meta.width}, flat, dt);
}

std::vector<double> widen(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

} // namespace

StepBatch build_step_batch(const std::vector<ImageSample>& batch, const DatasetMeta& meta,
                           const JointLabelSpace& space, const PredictionStore& store,
                           std::uint32_t epoch, double alpha, const Hyperparams& hp, DType dt) {
    StepBatch out;
    const int L = store.num_stages();
    const int M = space.num_transforms;
    const int N = space.num_classes;

    out.main_input = batch_to_tensor(batch, meta, dt);
    ExpandedBatch expanded = expand_batch(batch, meta.channels, meta.height, meta.width, space);
    out.aux_input = batch_to_tensor(expanded.samples, meta, dt);

    std::vector<SoftTarget> final_targets;
    final_targets.reserve(batch.size());
    std::vector<std::vector<std::vector<SoftTarget>>> sad(L); // [L][M][B]
    for (auto& per_stage : sad) per_stage.resize(M);

    for (const auto& s : batch) {
        out.sample_ids.push_back(s.sample_id);
        const PredictionRecord* prev =
            epoch >= 2 ? store.fetch(epoch - 1, s.sample_id) : nullptr;
        std::vector<double> one_hot(N, 0.0);
        one_hot[static_cast<std::size_t>(s.class_label)] = 1.0;
        if (prev) {
            std::vector<double> logits = widen(prev->final_logits);
            SoftTarget t = soften_final(one_hot, &logits, alpha, hp.tau_ce);
            out.softened_final += t.softened ? 1 : 0;
            final_targets.push_back(std::move(t));
        } else {
            final_targets.push_back(soften_final(one_hot, nullptr, alpha, hp.tau_ce));
        }
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < M; ++j) {
                std::vector<double> joint = space.joint_one_hot(s.class_label, j);
                if (prev) {
                    std::vector<double> logits = widen(prev->sad_logits[l * M + j]);
                    sad[l][j].push_back(soften_sad(joint, &logits, alpha, hp.tau_kd));
                } else {
                    sad[l][j].push_back(soften_sad(joint, nullptr, alpha, hp.tau_kd));
                }
            }
    }

    out.final_targets = targets_to_tensor(final_targets, N, dt);
    out.sad_targets.resize(L);
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < M; ++j)
            out.sad_targets[l].push_back(
                targets_to_tensor(sad[l][j], static_cast<std::size_t>(space.joint_count()), dt));
    return out;
}

LossParts compute_losses(StudentNetwork& net, const StepBatch& batch, const Hyperparams& hp,
                         bool training, const DeepConstants* frozen_deep) {
    const int L = net.config().stages;
    const int M = net.config().num_transforms;
    const std::size_t B = batch.main_input.dim(0);

    LossParts out;
    ForwardMain fm = net.forward_main(batch.main_input, training);
    ForwardAux fa = net.forward_aux(batch.aux_input, training);
    out.final_logits = fm.logits;
    out.sad_logits = fa.sad_logits;
    out.final_pooled = fa.final_pooled;

    out.ce_resp = loss_ce_resp(fm.logits, batch.final_targets, hp.tau_ce);

    // per-(stage, transform) slices of the transform-major expanded batch
    std::vector<std::vector<Tensor>> slices(L);
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < M; ++j)
            slices[l].push_back(slice_rows(fa.sad_logits[l], j * B, B));

    out.ce_hier = loss_ce_hier_sad(slices, batch.sad_targets, hp.tau_kd);

    std::vector<std::vector<Tensor>> shallow(slices.begin(), slices.end() - 1);
    std::vector<Tensor> deep;
    if (frozen_deep) {
        deep = frozen_deep->deep_sad;
    } else {
        for (int j = 0; j < M; ++j) deep.push_back(slices[L - 1][j].detach());
    }
    out.div_sad = loss_div_sad(shallow, deep, hp.tau_kd);

    std::vector<Tensor> shallow_pooled(fa.pooled.begin(), fa.pooled.end() - 1);
    Tensor f_o = frozen_deep ? frozen_deep->final_pooled : fa.final_pooled.detach();
    out.feat = loss_feat(shallow_pooled, f_o);

    out.total = total_loss(out.ce_resp, out.ce_hier, out.div_sad, out.feat, hp.beta, hp.gamma);
    return out;
}

// ---- evaluation -------------------------------------------------------------------

bool label_in_top_k(const std::vector<double>& logits, int label, int k) {
    const double z = logits[static_cast<std::size_t>(label)];
    int ahead = 0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (logits[j] > z || (logits[j] == z && static_cast<int>(j) < label)) ++ahead;
    }
    return ahead < k;
}

std::pair<double, double> evaluate(StudentNetwork& net, const Dataset& test,
                                   std::size_t batch_size) {
    if (test.samples.empty()) throw DataError("evaluate: empty test set");
    const int N = net.config().num_classes;
    const int k5 = std::min(5, N);
    std::size_t hit1 = 0, hit5 = 0;
    for (std::size_t pos = 0; pos < test.samples.size(); pos += batch_size) {
        std::size_t end = std::min(pos + batch_size, test.samples.size());
        std::vector<ImageSample> chunk(test.samples.begin() + pos, test.samples.begin() + end);
        Tensor x = batch_to_tensor(chunk, test.meta, default_dtype());
        ForwardMain fm = net.forward_main(x, /*training=*/false);
        std::vector<double> logits = fm.logits.to_vector();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            std::vector<double> row(logits.begin() + i * N, logits.begin() + (i + 1) * N);
            if (label_in_top_k(row, chunk[i].class_label, 1)) ++hit1;
            if (label_in_top_k(row, chunk[i].class_label, k5)) ++hit5;
        }
    }
    const double n = static_cast<double>(test.samples.size());
    return {100.0 * static_cast<double>(hit1) / n, 100.0 * static_cast<double>(hit5) / n};
}

// ---- training loop -----------------------------------------------------------------

namespace {

std::string store_file(const std::string& dir, std::uint32_t epoch) {
    return (fs::path(dir) / ("store_e" + std::to_string(epoch) + ".lsps")).string();
}

} // namespace

TrainResult run_training(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                         StudentNetwork& net, const std::string& resume_checkpoint) {
    cfg.validate();
    if (train.samples.empty()) throw DataError("run_training: empty training set");
    const int L = net.config().stages;
    const int M = net.config().num_transforms;
    const int N = net.config().num_classes;
    const std::size_t B_cfg = cfg.batch_size;
    const JointLabelSpace space{N, M};
    const DType dt = default_dtype();

    fs::create_directories(cfg.out_dir);
    TrainResult result;
    result.metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    result.last_checkpoint_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
    result.best_checkpoint_path = (fs::path(cfg.out_dir) / "best.ckpt").string();

    PredictionStore store(N, M, L);
    std::uint32_t start_epoch = 1;
    double best_top1 = 0.0;

    if (!resume_checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(resume_checkpoint);
        if (ckpt.stripped) throw ConfigError("cannot resume from a stripped checkpoint");
        apply_checkpoint(ckpt, net, /*load_optimizer=*/true);
        start_epoch = ckpt.epoch + 1;
        best_top1 = ckpt.best_top1;
        if (!cfg.baseline_mode && ckpt.epoch >= 1) {
            std::string spath = store_file(fs::path(resume_checkpoint).parent_path().string(),
                                           ckpt.epoch);
            store = PredictionStore::load(spath);
            if (store.write_epoch() != ckpt.epoch)
                throw DataError("prediction store epoch does not match checkpoint epoch");
        }
    }

    std::ofstream csv;
    if (!resume_checkpoint.empty() && fs::exists(result.metrics_path)) {
        csv.open(result.metrics_path, std::ios::app);
    } else {
        csv.open(result.metrics_path, std::ios::trunc);
        csv << metrics_csv_header() << "\n";
    }
    if (!csv) throw DataError("cannot write " + result.metrics_path);

    for (std::uint32_t epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(epoch, cfg);
        const double alpha_e = cfg.hp.alpha_at(epoch, cfg.epochs);
        if (!cfg.baseline_mode) store.begin_epoch(epoch);

        double total_sum = 0.0, ls_sum = 0.0, is_sum = 0.0;
        std::size_t steps = 0, softened = 0;
        auto batches = batch_iter(train.samples.size(), B_cfg, cfg.seed, epoch);

        for (const auto& idxs : batches) {
            std::vector<ImageSample> batch;
            batch.reserve(idxs.size());
            for (std::size_t i : idxs) {
                const ImageSample& s = train.samples[i];
                Rng arng(Rng::mix(Rng::mix(cfg.seed, epoch),
                                  static_cast<std::uint64_t>(s.sample_id)));
                batch.push_back(
                    augment(s, train.meta.channels, train.meta.height, train.meta.width, arng));
            }

            if (cfg.baseline_mode) {
                Tensor x = batch_to_tensor(batch, train.meta, dt);
                std::vector<SoftTarget> hard;
                for (const auto& s : batch) {
                    std::vector<double> one_hot(N, 0.0);
                    one_hot[static_cast<std::size_t>(s.class_label)] = 1.0;
                    hard.push_back(SoftTarget{std::move(one_hot), false});
                }
                Tensor targets = targets_to_tensor(hard, N, dt);
                ForwardMain fm = net.forward_main(x, true);
                Tensor loss = cross_entropy_soft(fm.logits, targets, cfg.hp.tau_ce);
                double lv = loss.item();
                if (!std::isfinite(lv)) throw NumericError("non-finite training loss");
                backward(loss);
                sgd_step(net.params(), lr, cfg.momentum, cfg.weight_decay);
                total_sum += lv;
                ls_sum += lv;
                ++steps;
                continue;
            }

            StepBatch sb = build_step_batch(batch, train.meta, space, store, epoch, alpha_e,
                                            cfg.hp, dt);
            softened += sb.softened_final;
            LossParts parts = compute_losses(net, sb, cfg.hp, /*training=*/true);
            const double total_v = parts.total.item();
            if (!std::isfinite(total_v)) throw NumericError("non-finite training loss");
            backward(parts.total);
            sgd_step(net.params(), lr, cfg.momentum, cfg.weight_decay);

            total_sum += total_v;
            ls_sum += parts.ce_resp.item() + parts.ce_hier.item();
            is_sum += parts.div_sad.item() + parts.feat.item();
            ++steps;

            // record this epoch's raw logits for the next epoch's softening
            const std::size_t B = idxs.size();
            std::vector<double> fl = parts.final_logits.to_vector();
            std::vector<std::vector<double>> sl;
            sl.reserve(L);
            for (int l = 0; l < L; ++l) sl.push_back(parts.sad_logits[l].to_vector());
            const int K = space.joint_count();
            for (std::size_t i = 0; i < B; ++i) {
                std::vector<float> final_logits(fl.begin() + i * N, fl.begin() + (i + 1) * N);
                std::vector<std::vector<float>> sad(static_cast<std::size_t>(L) * M);
                for (int l = 0; l < L; ++l)
                    for (int j = 0; j < M; ++j) {
                        const std::size_t off = (static_cast<std::size_t>(j) * B + i) * K;
                        sad[l * M + j].assign(sl[l].begin() + off, sl[l].begin() + off + K);
                    }
                store.update(sb.sample_ids[i], std::move(final_logits), std::move(sad));
            }
        }

        auto [top1, top5] = evaluate(net, test, B_cfg);
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.train_total = total_sum / static_cast<double>(steps);
        m.ls_loss = ls_sum / static_cast<double>(steps);
        m.is_loss = is_sum / static_cast<double>(steps);
        m.test_top1 = top1;
        m.test_top5 = top5;
        m.wall_s = wall;
        result.metrics.push_back(m);
        result.softened_final_per_epoch.push_back(softened);
        csv << metrics_csv_row(m) << "\n";
        csv.flush();

        if (top1 > best_top1) {
            best_top1 = top1;
            save_checkpoint(result.best_checkpoint_path,
                            checkpoint_from_network(net, true, epoch, best_top1));
        }
        save_checkpoint(result.last_checkpoint_path,
                        checkpoint_from_network(net, true, epoch, best_top1));
        if (!cfg.baseline_mode) {
            result.store_path = store_file(cfg.out_dir, epoch);
            store.save(result.store_path);
            if (epoch >= 2) {
                std::string old = store_file(cfg.out_dir, epoch - 1);
                if (fs::exists(old)) fs::remove(old);
            }
        }
    }
    result.best_top1 = best_top1;
    return result;
}

} // namespace lsskd
