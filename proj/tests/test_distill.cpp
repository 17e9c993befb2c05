#include <doctest.h>

#include <cmath>

#include "lsskd/distill.hpp"
#include "lsskd/gradcheck.hpp"
#include "lsskd/trainer.hpp"
#include "support/testutil.hpp"

using namespace lsskd;
using testutil::TempDir;
using testutil::random_tensor;

namespace {

struct F64Mode {
    DType saved = default_dtype();
    F64Mode() { set_default_dtype(DType::f64); }
    ~F64Mode() { set_default_dtype(saved); }
};

std::vector<double> log_probs(std::initializer_list<double> probs) {
    std::vector<double> out;
    for (double p : probs) out.push_back(std::log(p));
    return out;
}

BackboneConfig distill_toy_config() {
    BackboneConfig bc;
    bc.stages = 2;
    bc.channels = {4, 8};
    bc.blocks_per_stage = {1, 1};
    bc.in_channels = 3;
    bc.height = 8;
    bc.width = 8;
    bc.num_classes = 3;
    bc.num_transforms = 4;
    return bc;
}

struct ToyStep {
    DatasetMeta meta;
    JointLabelSpace space;
    PredictionStore store;
    std::vector<ImageSample> batch;
    StepBatch sb;
};

ToyStep make_toy_step(const BackboneConfig& bc, const Hyperparams& hp, std::uint64_t seed,
                      bool with_prev_records) {
    ToyStep t{.meta = {},
              .space = {bc.num_classes, bc.num_transforms},
              .store = PredictionStore(bc.num_classes, bc.num_transforms, bc.stages),
              .batch = {},
              .sb = {}};
    t.meta.num_classes = bc.num_classes;
    t.meta.channels = bc.in_channels;
    t.meta.height = bc.height;
    t.meta.width = bc.width;
    Rng rng(seed);
    t.batch.resize(2);
    for (int i = 0; i < 2; ++i) {
        t.batch[i].sample_id = i;
        t.batch[i].class_label = static_cast<int>(rng.next_below(bc.num_classes));
        t.batch[i].pixels.resize(bc.in_channels * bc.height * bc.width);
        for (auto& p : t.batch[i].pixels) p = static_cast<float>(rng.next_normal() * 0.5);
    }
    std::uint32_t epoch = 1;
    t.store.begin_epoch(1);
    if (with_prev_records) {
        const int K = bc.joint_count();
        for (const auto& s : t.batch) {
            std::vector<float> fl(bc.num_classes);
            for (auto& v : fl) v = static_cast<float>(rng.next_normal());
            std::vector<std::vector<float>> sad(
                static_cast<std::size_t>(bc.stages) * bc.num_transforms);
            for (auto& slot : sad) {
                slot.resize(K);
                for (auto& v : slot) v = static_cast<float>(rng.next_normal());
            }
            t.store.update(s.sample_id, std::move(fl), std::move(sad));
        }
        t.store.begin_epoch(2);
        epoch = 2;
    }
    t.sb = build_step_batch(t.batch, t.meta, t.space, t.store, epoch, hp.alpha, hp,
                            default_dtype());
    return t;
}

} // namespace

TEST_CASE("soften_final: degenerate weights and the hand-evaluated mix") {
    std::vector<double> one_hot = {1, 0, 0};
    auto prev = log_probs({0.5, 0.3, 0.2});

    SoftTarget a0 = soften_final(one_hot, &prev, 0.0, 1.0);
    CHECK(a0.probs == one_hot); // exactly

    SoftTarget a1 = soften_final(one_hot, &prev, 1.0, 1.0);
    CHECK(a1.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(a1.probs[1] == doctest::Approx(0.3).epsilon(1e-12));

    SoftTarget mix = soften_final(one_hot, &prev, 0.8, 1.0);
    CHECK(mix.probs[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(mix.probs[1] == doctest::Approx(0.24).epsilon(1e-12));
    CHECK(mix.probs[2] == doctest::Approx(0.16).epsilon(1e-12));
    CHECK(mix.softened);

    SoftTarget fallback = soften_final(one_hot, nullptr, 0.8, 1.0);
    CHECK(fallback.probs == one_hot);
    CHECK(!fallback.softened);

    CHECK_THROWS_AS(soften_final(one_hot, &prev, 1.5, 1.0), std::invalid_argument);
}

TEST_CASE("soften_sad: K=2 hand example and normalization property") {
    std::vector<double> joint = {1, 0};
    auto prev = log_probs({0.25, 0.75});
    SoftTarget t = soften_sad(joint, &prev, 0.8, 1.0);
    CHECK(t.probs[0] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(t.probs[1] == doctest::Approx(0.6).epsilon(1e-12));

    CHECK(soften_sad(joint, &prev, 0.0, 3.0).probs == joint);

    Rng rng(4);
    for (int i = 0; i < 2000; ++i) {
        int k = 2 + static_cast<int>(rng.next_below(20));
        std::vector<double> oh(k, 0.0);
        oh[rng.next_below(k)] = 1.0;
        std::vector<double> logits(k);
        for (auto& v : logits) v = rng.next_normal() * 5.0;
        double alpha = rng.next_double();
        SoftTarget s = soften_sad(oh, &logits, alpha, 0.5 + rng.next_double() * 4.0);
        double sum = 0;
        for (double v : s.probs) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("loss_ce_resp examples") {
    F64Mode f64;
    Tensor logits = Tensor::from_vector({1, 2}, {0, 0});
    Tensor target = Tensor::from_vector({1, 2}, {0.5, 0.5});
    CHECK(loss_ce_resp(logits, target, 1.0).item() == doctest::Approx(std::log(2.0)));

    Rng rng(6);
    Tensor z = random_tensor({2, 5}, rng);
    Tensor p = softmax_t(z, 1.0).detach();
    double entropy = 0.0;
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t k = 0; k < 5; ++k) {
            double v = p.at(r * 5 + k);
            entropy -= v * std::log(v);
        }
    CHECK(loss_ce_resp(z, p, 1.0).item() == doctest::Approx(entropy / 2.0).epsilon(1e-10));
}

TEST_CASE("loss_ce_hier_sad: degenerate arity and the 2x2 hand sum") {
    F64Mode f64;
    Tensor logits = Tensor::from_vector({1, 2}, {0, 0});
    Tensor target = Tensor::from_vector({1, 2}, {0.5, 0.5});

    // L=1, M=1 reduces to a single soft cross-entropy
    CHECK(loss_ce_hier_sad({{logits}}, {{target}}, 1.0).item() ==
          doctest::Approx(std::log(2.0)));

    // L=2, M=2 with every term ln 2: (1/2) * 4 * ln2 = 2 ln2
    std::vector<std::vector<Tensor>> ls = {{logits, logits}, {logits, logits}};
    std::vector<std::vector<Tensor>> ts = {{target, target}, {target, target}};
    CHECK(loss_ce_hier_sad(ls, ts, 1.0).item() == doctest::Approx(2.0 * std::log(2.0)));

    // saturated one-hot targets at the argmax logit
    Tensor sat = Tensor::from_vector({1, 2}, {50, 0});
    Tensor hot = Tensor::from_vector({1, 2}, {1, 0});
    std::vector<std::vector<Tensor>> ls2 = {{sat}, {sat}};
    std::vector<std::vector<Tensor>> ts2 = {{hot}, {hot}};
    CHECK(loss_ce_hier_sad(ls2, ts2, 1.0).item() < 1e-9 * 2);

    CHECK_THROWS_AS(loss_ce_hier_sad({{logits}, {logits, logits}}, ts, 1.0),
                    std::invalid_argument);
}

TEST_CASE("loss_div_sad: identity, hand value, tau-squared scaling") {
    F64Mode f64;
    Tensor shallow = Tensor::from_vector({1, 2}, {std::log(0.5), std::log(0.5)});
    Tensor deep_eq = shallow.detach();
    CHECK(loss_div_sad({{shallow}}, {deep_eq}, 1.0).item() == doctest::Approx(0.0));

    // shallow softmax (0.5,0.5) vs deep softmax (0.25,0.75) at tau = 1
    Tensor deep = Tensor::from_vector({1, 2}, {std::log(0.25), std::log(0.75)});
    CHECK(loss_div_sad({{shallow}}, {deep.detach()}, 1.0).item() ==
          doctest::Approx(0.143841).epsilon(1e-5));

    // doubling tau with doubled logits keeps the softmax inputs, scales by 4
    Tensor s1 = Tensor::from_vector({1, 3}, {0.2, -0.4, 1.0});
    Tensor d1 = Tensor::from_vector({1, 3}, {0.9, 0.1, -0.3});
    double base = loss_div_sad({{s1}}, {d1.detach()}, 1.0).item();
    Tensor s2 = scale(s1, 2.0);
    Tensor d2 = scale(d1, 2.0);
    double scaled = loss_div_sad({{s2.detach()}}, {d2.detach()}, 2.0).item();
    CHECK(scaled == doctest::Approx(4.0 * base).epsilon(1e-9));

    // the deep side must be detached
    Tensor live = Tensor::from_vector({1, 2}, {0.0, 0.0});
    live.set_requires_grad(true);
    CHECK_THROWS_AS(loss_div_sad({{shallow}}, {live}, 1.0), std::invalid_argument);
}

TEST_CASE("loss_feat: zero case, single pair, detachment") {
    F64Mode f64;
    Tensor f = Tensor::from_vector({1, 2}, {1, 2});
    CHECK(loss_feat({f}, f.detach()).item() == doctest::Approx(0.0));

    Tensor fo = Tensor::from_vector({1, 2}, {1, 0});
    f.set_requires_grad(true);
    Tensor loss = loss_feat({f}, fo);
    CHECK(loss.item() == doctest::Approx(4.0));
    backward(loss);
    CHECK(f.grad_vector() == std::vector<double>{0, 4});
    CHECK(!fo.has_grad());

    Tensor live = Tensor::from_vector({1, 2}, {0, 0});
    live.set_requires_grad(true);
    CHECK_THROWS_AS(loss_feat({f}, live), std::invalid_argument);
}

TEST_CASE("total_loss weighting") {
    F64Mode f64;
    Tensor one = Tensor::scalar(1.0);
    CHECK(total_loss(one, one, one, one, 0.1, 0.1).item() == doctest::Approx(2.1));
    CHECK(total_loss(one, one, one, one, 0.0, 0.0).item() == doctest::Approx(2.0));
}

TEST_CASE("loss decomposition identity on random toy forwards") {
    F64Mode f64;
    BackboneConfig bc = distill_toy_config();
    StudentNetwork net(bc);
    net.init_parameters(42);
    Hyperparams hp;
    for (int i = 0; i < 10; ++i) {
        ToyStep t = make_toy_step(bc, hp, 100 + i, true);
        LossParts parts = compute_losses(net, t.sb, hp, true);
        double recombined = (1.0 - hp.beta) * parts.ce_resp.item() + parts.ce_hier.item() +
                            hp.beta * parts.div_sad.item() + hp.gamma * parts.feat.item();
        CHECK(std::fabs(parts.total.item() - recombined) < 1e-9);
    }
}

TEST_CASE("teacher-side detachment: branch-L classifier gets exact zeros") {
    F64Mode f64;
    BackboneConfig bc = distill_toy_config();
    StudentNetwork net(bc);
    net.init_parameters(7);
    Hyperparams hp;
    ToyStep t = make_toy_step(bc, hp, 55, true);

    LossParts parts = compute_losses(net, t.sb, hp, true);
    Tensor is_only = add(scale(parts.div_sad, hp.beta), scale(parts.feat, hp.gamma));
    backward(is_only);

    ParamPtr deep_fc = net.find_param("branch2.fc.weight");
    ParamPtr deep_fc_b = net.find_param("branch2.fc.bias");
    REQUIRE(deep_fc != nullptr);
    for (double g : deep_fc->value.grad_vector()) CHECK(g == 0.0);
    for (double g : deep_fc_b->value.grad_vector()) CHECK(g == 0.0);

    // shallow branch classifier does receive gradient from the KL term
    ParamPtr shallow_fc = net.find_param("branch1.fc.weight");
    double norm = 0;
    for (double g : shallow_fc->value.grad_vector()) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("alpha = beta = gamma = 0 matches hand-assembled hard-label training") {
    F64Mode f64;
    BackboneConfig bc = distill_toy_config();
    Hyperparams hp0;
    hp0.alpha = 0.0;
    hp0.beta = 0.0;
    hp0.gamma = 0.0;

    StudentNetwork net_a(bc), net_b(bc);
    net_a.init_parameters(99);
    net_b.init_parameters(99);

    ToyStep t = make_toy_step(bc, hp0, 21, true);

    // framework path
    LossParts parts = compute_losses(net_a, t.sb, hp0, true);
    backward(parts.total);
    sgd_step(net_a.params(), 0.1, 0.9, 0.0);

    // reference path: hard-label cross-entropy plus hierarchical hard-label SAD,
    // assembled directly from one-hot targets
    const int M = bc.num_transforms, L = bc.stages, N = bc.num_classes;
    const std::size_t B = t.batch.size();
    ForwardMain fm = net_b.forward_main(t.sb.main_input, true);
    ForwardAux fa = net_b.forward_aux(t.sb.aux_input, true);
    std::vector<double> hard;
    for (const auto& s : t.batch) {
        std::vector<double> oh(N, 0.0);
        oh[s.class_label] = 1.0;
        hard.insert(hard.end(), oh.begin(), oh.end());
    }
    Tensor loss_ref = cross_entropy_soft(fm.logits, Tensor::from_vector({B, (std::size_t)N}, hard), hp0.tau_ce);
    Tensor hier_acc;
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < M; ++j) {
            std::vector<double> joint;
            for (const auto& s : t.batch) {
                auto oh = t.space.joint_one_hot(s.class_label, j);
                joint.insert(joint.end(), oh.begin(), oh.end());
            }
            Tensor target = Tensor::from_vector({B, (std::size_t)bc.joint_count()}, joint);
            Tensor term = cross_entropy_soft(slice_rows(fa.sad_logits[l], j * B, B), target,
                                             hp0.tau_kd);
            hier_acc = hier_acc.defined() ? add(hier_acc, term) : term;
        }
    loss_ref = add(loss_ref, scale(hier_acc, 1.0 / M));
    backward(loss_ref);
    sgd_step(net_b.params(), 0.1, 0.9, 0.0);

    for (std::size_t i = 0; i < net_a.params().size(); ++i) {
        auto va = net_a.params()[i]->value.to_vector();
        auto vb = net_b.params()[i]->value.to_vector();
        REQUIRE(va.size() == vb.size());
        for (std::size_t k = 0; k < va.size(); ++k)
            CHECK(std::fabs(va[k] - vb[k]) < 1e-10);
    }
}

TEST_CASE("L_T stays finite on extreme logits thanks to probability flooring") {
    F64Mode f64;
    Tensor shallow = Tensor::from_vector({1, 4}, {500, -500, 0, 0});
    Tensor deep = Tensor::from_vector({1, 4}, {-500, 500, 0, 0});
    double v = loss_div_sad({{shallow}}, {deep.detach()}, 1.0).item();
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
}

TEST_CASE("gradient of every loss term matches finite differences (toy config)") {
    Hyperparams hp;
    GradCheckReport report = run_gradcheck(hp, 2024, 20, 1e-5);
    REQUIRE(report.terms.size() == 5);
    for (const auto& t : report.terms) {
        INFO(t.name, " max_rel_err=", t.max_rel_err);
        CHECK(t.max_rel_err < 1e-4);
    }
    // corrupted analytic gradients must fail the check
    GradCheckReport bad = run_gradcheck(hp, 2024, 20, 1e-5, 1.01);
    CHECK(!bad.passed(1e-4));
}

TEST_CASE("prediction store: round trip, duplicates, epoch windows") {
    PredictionStore store(3, 4, 2);
    CHECK(store.fetch(0, 1) == nullptr); // before any update

    store.begin_epoch(1);
    std::vector<float> fl = {0.5f, -1.0f, 2.0f};
    std::vector<std::vector<float>> sad(8, std::vector<float>(12, 0.25f));
    sad[3][7] = -4.5f;
    store.update(10, fl, sad);
    CHECK_THROWS_AS(store.update(10, fl, sad), std::invalid_argument);
    CHECK(store.fetch(0, 10) == nullptr); // epoch 1 reads epoch 0: none exists

    store.begin_epoch(2);
    const PredictionRecord* rec = store.fetch(1, 10);
    REQUIRE(rec != nullptr);
    CHECK(rec->final_logits == fl);
    CHECK(rec->sad_logits[3][7] == -4.5f);
    CHECK(store.fetch(1, 11) == nullptr);

    store.update(11, fl, sad);
    TempDir tmp("store");
    store.save(tmp.file("store_e2.lsps"));
    auto bytes = read_file_bytes(tmp.file("store_e2.lsps"));
    CHECK(bytes[0] == 'L');
    CHECK(bytes[1] == 'S');
    CHECK(bytes[2] == 'P');
    CHECK(bytes[3] == 'S');

    PredictionStore loaded = PredictionStore::load(tmp.file("store_e2.lsps"));
    CHECK(loaded.write_epoch() == 2);
    loaded.begin_epoch(3);
    const PredictionRecord* rec2 = loaded.fetch(2, 11);
    REQUIRE(rec2 != nullptr);
    CHECK(rec2->final_logits == fl);
    CHECK(rec2->sad_logits == sad);
}

TEST_CASE("hyperparameter validation and alpha warm-up") {
    Hyperparams hp;
    hp.alpha_warmup = true;
    hp.alpha = 0.8;
    CHECK(hp.alpha_at(1, 10) == doctest::Approx(0.08));
    CHECK(hp.alpha_at(10, 10) == doctest::Approx(0.8));
    hp.alpha_warmup = false;
    CHECK(hp.alpha_at(1, 10) == doctest::Approx(0.8));

    Hyperparams bad;
    bad.beta = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
