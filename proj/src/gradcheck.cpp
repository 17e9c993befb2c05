#include "lsskd/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

#include "lsskd/trainer.hpp"

namespace lsskd {

namespace {

struct DtypeGuard {
    DType saved;
    DtypeGuard(DType want) : saved(default_dtype()) { set_default_dtype(want); }
    ~DtypeGuard() { set_default_dtype(saved); }
};

std::vector<Tensor> snapshot_buffers(StudentNetwork& net) {
    std::vector<Tensor> out;
    for (auto& b : net.buffers()) out.push_back(b->value);
    return out;
}

void restore_buffers(StudentNetwork& net, const std::vector<Tensor>& snap) {
    for (std::size_t i = 0; i < snap.size(); ++i) net.buffers()[i]->value = snap[i];
}

double rel_err(double a, double n) {
    return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-3});
}

} // namespace

GradCheckReport run_gradcheck(const Hyperparams& hp, std::uint64_t seed, int coordinates,
                              double step, double corrupt_factor) {
    DtypeGuard guard(DType::f64);

    BackboneConfig bc;
    bc.stages = 2;
    bc.channels = {4, 8};
    bc.blocks_per_stage = {1, 1};
    bc.in_channels = 3;
    bc.height = 8;
    bc.width = 8;
    bc.num_classes = 3;
    bc.num_transforms = 4;
    const int L = bc.stages, M = bc.num_transforms, N = bc.num_classes;
    const int K = bc.joint_count();
    const std::size_t B = 2;

    StudentNetwork net(bc);
    net.init_parameters(seed);

    DatasetMeta meta;
    meta.name = "gradcheck-toy";
    meta.num_classes = N;
    meta.channels = bc.in_channels;
    meta.height = bc.height;
    meta.width = bc.width;

    Rng rng(Rng::mix(seed, 0x67726164ull));
    std::vector<ImageSample> batch(B);
    for (std::size_t i = 0; i < B; ++i) {
        batch[i].sample_id = static_cast<std::int64_t>(i);
        batch[i].class_label = static_cast<int>(rng.next_below(N));
        batch[i].pixels.resize(meta.channels * meta.height * meta.width);
        for (auto& p : batch[i].pixels) p = static_cast<float>(rng.next_normal() * 0.5);
    }

    // synthetic previous-epoch records so the softened-target paths are active
    PredictionStore store(N, M, L);
    store.begin_epoch(1);
    for (const auto& s : batch) {
        std::vector<float> fl(N);
        for (auto& v : fl) v = static_cast<float>(rng.next_normal());
        std::vector<std::vector<float>> sad(static_cast<std::size_t>(L) * M);
        for (auto& slot : sad) {
            slot.resize(K);
            for (auto& v : slot) v = static_cast<float>(rng.next_normal());
        }
        store.update(s.sample_id, std::move(fl), std::move(sad));
    }
    store.begin_epoch(2);

    JointLabelSpace space{N, M};
    StepBatch sb = build_step_batch(batch, meta, space, store, 2, hp.alpha, hp, DType::f64);

    // reference pass caches the frozen deep-side constants
    auto snap = snapshot_buffers(net);
    LossParts ref = compute_losses(net, sb, hp, /*training=*/true);
    restore_buffers(net, snap);
    DeepConstants frozen;
    for (int j = 0; j < M; ++j)
        frozen.deep_sad.push_back(slice_rows(ref.sad_logits[L - 1], j * B, B).detach());
    frozen.final_pooled = ref.final_pooled.detach();

    // sampled parameter coordinates, fixed per seed
    auto& params = net.params();
    std::size_t total = 0;
    for (const auto& p : params) total += p->value.numel();
    Rng crng(Rng::mix(seed, 0x636f6f7264ull));
    std::vector<std::pair<std::size_t, std::size_t>> coords; // (param idx, flat idx)
    for (int i = 0; i < coordinates; ++i) {
        std::size_t flat = static_cast<std::size_t>(crng.next_below(total));
        std::size_t pi = 0;
        while (flat >= params[pi]->value.numel()) {
            flat -= params[pi]->value.numel();
            ++pi;
        }
        coords.emplace_back(pi, flat);
    }

    auto eval_all_terms = [&]() {
        auto s = snapshot_buffers(net);
        LossParts parts = compute_losses(net, sb, hp, /*training=*/true, &frozen);
        restore_buffers(net, s);
        return std::array<double, 5>{parts.ce_resp.item(), parts.ce_hier.item(),
                                     parts.div_sad.item(), parts.feat.item(),
                                     parts.total.item()};
    };

    // analytic gradients at the sampled coordinates, one backward per term
    const char* names[5] = {"ce_resp", "ce_hier", "div_sad", "feat", "total"};
    std::vector<std::vector<double>> analytic(5, std::vector<double>(coords.size(), 0.0));
    for (int t = 0; t < 5; ++t) {
        net.clear_grads();
        auto s = snapshot_buffers(net);
        LossParts parts = compute_losses(net, sb, hp, /*training=*/true, &frozen);
        restore_buffers(net, s);
        const Tensor* root[5] = {&parts.ce_resp, &parts.ce_hier, &parts.div_sad, &parts.feat,
                                 &parts.total};
        backward(*root[t]);
        for (std::size_t c = 0; c < coords.size(); ++c) {
            auto [pi, flat] = coords[c];
            std::vector<double> g = params[pi]->value.grad_vector();
            analytic[t][c] = g[flat] * corrupt_factor;
        }
    }

    // central differences; each +/- evaluation serves all five terms
    std::vector<std::vector<double>> numeric(5, std::vector<double>(coords.size(), 0.0));
    for (std::size_t c = 0; c < coords.size(); ++c) {
        auto [pi, flat] = coords[c];
        Tensor orig = params[pi]->value;
        std::vector<double> v = orig.to_vector();
        const double x0 = v[flat];

        v[flat] = x0 + step;
        params[pi]->value = Tensor::from_vector(orig.shape(), v, DType::f64);
        params[pi]->value.set_requires_grad(true);
        auto plus = eval_all_terms();

        v[flat] = x0 - step;
        params[pi]->value = Tensor::from_vector(orig.shape(), v, DType::f64);
        params[pi]->value.set_requires_grad(true);
        auto minus = eval_all_terms();

        params[pi]->value = orig;
        for (int t = 0; t < 5; ++t) numeric[t][c] = (plus[t] - minus[t]) / (2.0 * step);
    }

    GradCheckReport report;
    for (int t = 0; t < 5; ++t) {
        GradCheckReport::Term term;
        term.name = names[t];
        for (std::size_t c = 0; c < coords.size(); ++c)
            term.max_rel_err = std::max(term.max_rel_err, rel_err(analytic[t][c], numeric[t][c]));
        report.terms.push_back(term);
    }
    return report;
}

} // namespace lsskd
