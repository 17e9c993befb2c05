#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lsskd/tensor.hpp"
#include "support/testutil.hpp"

using namespace lsskd;
using testutil::fd_max_rel_err;
using testutil::random_tensor;

namespace {

struct F64Mode {
    DType saved = default_dtype();
    F64Mode() { set_default_dtype(DType::f64); }
    ~F64Mode() { set_default_dtype(saved); }
};

Tensor proj_like(const Tensor& t, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(t.numel());
    for (auto& x : v) x = rng.next_normal();
    return Tensor::from_vector(t.shape(), v, t.dtype());
}

} // namespace

TEST_CASE("conv2d hand-evaluated examples") {
    F64Mode f64;
    Tensor x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from_vector({1, 1, 1, 1}, {2});
    Tensor y = conv2d(x, w, 1, 0);
    CHECK(y.to_vector() == std::vector<double>{2, 4, 6, 8});

    Tensor id = Tensor::from_vector({1, 1, 1, 1}, {1});
    CHECK(conv2d(x, id, 1, 0).to_vector() == x.to_vector());

    Tensor zero = Tensor::from_vector({1, 1, 1, 1}, {0});
    x.set_requires_grad(true);
    Tensor out = conv2d(x, zero, 1, 0);
    for (double v : out.to_vector()) CHECK(v == 0.0);
    backward(sum(out));
    for (double g : x.grad_vector()) CHECK(g == 0.0);
}

TEST_CASE("conv2d output geometry and errors") {
    F64Mode f64;
    Rng rng(3);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.2);
    Tensor y = conv2d(x, w, 2, 1);
    CHECK(y.shape() == std::vector<std::size_t>{2, 4, 3, 3}); // (5+2-3)/2+1

    Tensor bad_w = random_tensor({4, 2, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, bad_w, 1, 1), std::invalid_argument);
    Tensor small = random_tensor({1, 3, 2, 2}, rng);
    CHECK_THROWS_AS(conv2d(small, w, 1, 0), std::invalid_argument); // kernel does not fit
}

TEST_CASE("batchnorm2d examples") {
    F64Mode f64;
    // batch already normalized: mean 0, biased variance 1
    Tensor x = Tensor::from_vector({2, 1, 1, 1}, {-1, 1});
    Tensor scale_p = Tensor::from_vector({1}, {1});
    Tensor shift_p = Tensor::from_vector({1}, {0});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Tensor y = batchnorm2d(x, scale_p, shift_p, rm, rv, true, 0.1, 1e-12);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));
    // EMA: mean 0.9*0 + 0.1*0 = 0; var 0.9*1 + 0.1*unbiased(2)
    CHECK(rm.at(0) == doctest::Approx(0.0));
    CHECK(rv.at(0) == doctest::Approx(0.9 + 0.1 * 2.0));

    Tensor zero_scale = Tensor::from_vector({1}, {0});
    Tensor shift7 = Tensor::from_vector({1}, {7});
    Tensor rm2 = Tensor::zeros({1}), rv2 = Tensor::full({1}, 1.0);
    Tensor y2 = batchnorm2d(x, zero_scale, shift7, rm2, rv2, true, 0.1, 1e-5);
    for (double v : y2.to_vector()) CHECK(v == doctest::Approx(7.0));

    Tensor single = Tensor::from_vector({1, 1, 1, 1}, {3});
    Tensor rm3 = Tensor::zeros({1}), rv3 = Tensor::full({1}, 1.0);
    CHECK_THROWS_AS(batchnorm2d(single, scale_p, shift_p, rm3, rv3, true, 0.1, 1e-5),
                    std::invalid_argument);
}

TEST_CASE("batchnorm2d eval mode reads running stats") {
    F64Mode f64;
    Tensor x = Tensor::from_vector({1, 1, 1, 2}, {2, 4});
    Tensor scale_p = Tensor::from_vector({1}, {1});
    Tensor shift_p = Tensor::from_vector({1}, {0});
    Tensor rm = Tensor::from_vector({1}, {2.0});
    Tensor rv = Tensor::from_vector({1}, {4.0});
    Tensor y = batchnorm2d(x, scale_p, shift_p, rm, rv, false, 0.1, 0.0);
    CHECK(y.at(0) == doctest::Approx(0.0));
    CHECK(y.at(1) == doctest::Approx(1.0));
    CHECK(rm.at(0) == 2.0); // untouched in eval mode
}

TEST_CASE("relu, global_avg_pool, linear basics") {
    F64Mode f64;
    Tensor x = Tensor::from_vector({2}, {-1, 2});
    x.set_requires_grad(true);
    Tensor y = relu(x);
    CHECK(y.to_vector() == std::vector<double>{0, 2});
    backward(sum(y));
    CHECK(x.grad_vector() == std::vector<double>{0, 1});

    Tensor img = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(img).at(0) == doctest::Approx(2.5));

    Tensor xi = Tensor::from_vector({1, 3}, {1, 2, 3});
    Tensor wi = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor bi = Tensor::zeros({3});
    CHECK(linear(xi, wi, bi).to_vector() == std::vector<double>{1, 2, 3});
}

TEST_CASE("softmax_t examples and row normalization") {
    F64Mode f64;
    Tensor z = Tensor::from_vector({2}, {0, 0});
    CHECK(softmax_t(z, 1.0).to_vector() == std::vector<double>{0.5, 0.5});

    Tensor z2 = Tensor::from_vector({2}, {std::log(4.0), 0});
    Tensor p2 = softmax_t(z2, 1.0);
    CHECK(p2.at(0) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(p2.at(1) == doctest::Approx(0.2).epsilon(1e-12));

    Tensor z3 = Tensor::from_vector({2}, {2 * std::log(4.0), 0});
    Tensor p3 = softmax_t(z3, 2.0);
    CHECK(p3.at(0) == doctest::Approx(0.8).epsilon(1e-12));

    CHECK_THROWS_AS(softmax_t(z, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(softmax_t(z, -1.0), std::invalid_argument);

    // row sums: 1e-12 in 64-bit, 1e-5 in 32-bit; large logits stay stable
    Rng rng(11);
    for (DType dt : {DType::f64, DType::f32}) {
        set_default_dtype(dt);
        std::vector<double> big(64);
        for (auto& v : big) v = rng.next_normal() * 150.0;
        Tensor zz = Tensor::from_vector({4, 16}, big, dt);
        Tensor pp = softmax_t(zz, 3.0);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t k = 0; k < 16; ++k) s += pp.at(r * 16 + k);
            CHECK(std::fabs(s - 1.0) < (dt == DType::f64 ? 1e-12 : 1e-5));
        }
    }
    set_default_dtype(DType::f64);
}

TEST_CASE("cross_entropy_soft examples") {
    F64Mode f64;
    Tensor logits = Tensor::from_vector({1, 2}, {0, 0});
    Tensor target = Tensor::from_vector({1, 2}, {0.5, 0.5});
    CHECK(cross_entropy_soft(logits, target, 1.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor sat = Tensor::from_vector({1, 2}, {50, 0});
    Tensor hot = Tensor::from_vector({1, 2}, {1, 0});
    CHECK(cross_entropy_soft(sat, hot, 1.0).item() < 1e-9);

    // target = softmax(logits) -> loss equals the entropy of that distribution
    Rng rng(5);
    Tensor z = random_tensor({1, 6}, rng);
    Tensor p = softmax_t(z, 1.0).detach();
    double entropy = 0.0;
    for (std::size_t k = 0; k < 6; ++k) entropy -= p.at(k) * std::log(p.at(k));
    CHECK(cross_entropy_soft(z, p, 1.0).item() == doctest::Approx(entropy).epsilon(1e-10));

    Tensor bad = Tensor::from_vector({1, 2}, {0.6, 0.6});
    CHECK_THROWS_AS(cross_entropy_soft(logits, bad, 1.0), std::invalid_argument);

    // gradient reaches the logits only
    Tensor z2 = Tensor::from_vector({1, 2}, {1, 2});
    z2.set_requires_grad(true);
    Tensor t2 = Tensor::from_vector({1, 2}, {0.5, 0.5});
    t2.set_requires_grad(true);
    backward(cross_entropy_soft(z2, t2, 1.0));
    CHECK(z2.has_grad());
    CHECK(!t2.has_grad());
}

TEST_CASE("kl_div examples and properties") {
    F64Mode f64;
    Tensor p = Tensor::from_vector({2}, {0.5, 0.5});
    CHECK(kl_div(p, p).item() < 1e-12);

    Tensor q = Tensor::from_vector({2}, {0.25, 0.75});
    CHECK(kl_div(p, q).item() ==
          doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-9));
    CHECK(kl_div(p, q).item() == doctest::Approx(0.143841).epsilon(1e-5));

    Tensor onehot = Tensor::from_vector({4}, {1, 0, 0, 0});
    Tensor uni = Tensor::full({4}, 0.25);
    CHECK(kl_div(onehot, uni).item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));

    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        Tensor a = softmax_t(random_tensor({8}, rng, 2.0), 1.0).detach();
        Tensor b = softmax_t(random_tensor({8}, rng, 2.0), 1.0).detach();
        CHECK(kl_div(a, b).item() >= 0.0);
        CHECK(kl_div(a, a).item() < 1e-12);
    }

    Tensor unnorm = Tensor::from_vector({2}, {0.9, 0.9});
    CHECK_THROWS_AS(kl_div(unnorm, q), std::invalid_argument);
}

TEST_CASE("sum_squared_diff examples") {
    F64Mode f64;
    Tensor a = Tensor::from_vector({2}, {1, 2});
    Tensor b = Tensor::from_vector({2}, {1, 0});
    CHECK(sum_squared_diff(a, a).item() == 0.0);
    CHECK(sum_squared_diff(a, b).item() == doctest::Approx(4.0));

    a.set_requires_grad(true);
    backward(sum_squared_diff(a, b));
    CHECK(a.grad_vector() == std::vector<double>{0, 4}); // 2(a-b)
}

TEST_CASE("backward basics") {
    F64Mode f64;
    Tensor x = Tensor::from_vector({2}, {-1, 2});
    x.set_requires_grad(true);
    backward(sum(relu(x)));
    CHECK(x.grad_vector() == std::vector<double>{0, 1});

    // constant loss: nothing reachable, parameters keep zero gradients
    Tensor w = Tensor::from_vector({2}, {1, 1});
    w.set_requires_grad(true);
    backward(Tensor::scalar(5.0));
    CHECK(w.grad_vector() == std::vector<double>{0, 0});

    CHECK_THROWS_AS(backward(Tensor::from_vector({2}, {1, 2})), std::invalid_argument);
    CHECK_THROWS_AS(backward(Tensor()), std::invalid_argument);
}

TEST_CASE("detach blocks gradient flow") {
    F64Mode f64;
    Tensor x = Tensor::from_vector({3}, {1, -2, 3});
    x.set_requires_grad(true);
    Tensor d = x.detach();
    CHECK(d.to_vector() == x.to_vector());
    CHECK(!d.requires_grad());
    backward(sum(relu(d)));
    CHECK(!x.has_grad());

    // teacher parameters receive zero gradient through the detached side
    Tensor w_student = Tensor::from_vector({4}, {0.3, -0.1, 0.2, 0.0});
    Tensor w_teacher = Tensor::from_vector({4}, {1.0, 0.5, -0.5, 0.2});
    w_student.set_requires_grad(true);
    w_teacher.set_requires_grad(true);
    Tensor ps = softmax_t(w_student, 1.0);
    Tensor pt = softmax_t(w_teacher, 1.0);
    backward(kl_div(ps, pt.detach()));
    CHECK(w_student.has_grad());
    CHECK(!w_teacher.has_grad());
}

TEST_CASE("finite-difference agreement for every differentiable op") {
    F64Mode f64;
    Rng rng(17);
    const int coords = 20;

    SUBCASE("conv2d") {
        Tensor x = random_tensor({2, 3, 6, 6}, rng, 0.5);
        Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.3);
        Tensor b = random_tensor({4}, rng, 0.1);
        Tensor proj = proj_like(conv2d(x, w, b, 2, 1), 100);
        auto fn = [&](const std::vector<Tensor>& in) {
            return sum(mul(conv2d(in[0], in[1], in[2], 2, 1), proj));
        };
        CHECK(fd_max_rel_err(fn, {x, w, b}, coords, 1) < 1e-5);
    }
    SUBCASE("batchnorm2d train mode") {
        Tensor x = random_tensor({3, 2, 4, 4}, rng, 1.2, 0.3);
        Tensor sc = random_tensor({2}, rng, 0.5, 1.0);
        Tensor sh = random_tensor({2}, rng, 0.2);
        Tensor proj = proj_like(x, 101);
        auto fn = [&](const std::vector<Tensor>& in) {
            Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
            return sum(mul(batchnorm2d(in[0], in[1], in[2], rm, rv, true, 0.1, 1e-5), proj));
        };
        CHECK(fd_max_rel_err(fn, {x, sc, sh}, coords, 2) < 1e-5);
    }
    SUBCASE("batchnorm2d eval mode") {
        Tensor x = random_tensor({2, 2, 3, 3}, rng);
        Tensor sc = random_tensor({2}, rng, 0.5, 1.0);
        Tensor sh = random_tensor({2}, rng, 0.2);
        Tensor proj = proj_like(x, 102);
        auto fn = [&](const std::vector<Tensor>& in) {
            Tensor rm = Tensor::from_vector({2}, {0.1, -0.2});
            Tensor rv = Tensor::from_vector({2}, {0.8, 1.3});
            return sum(mul(batchnorm2d(in[0], in[1], in[2], rm, rv, false, 0.1, 1e-5), proj));
        };
        CHECK(fd_max_rel_err(fn, {x, sc, sh}, coords, 3) < 1e-5);
    }
    SUBCASE("relu away from the kink") {
        Tensor x = random_tensor({40}, rng, 1.0, 0.0);
        std::vector<double> v = x.to_vector();
        for (auto& xv : v)
            if (std::fabs(xv) < 1e-3) xv = 0.1; // keep clear of the non-differentiable point
        x = Tensor::from_vector({40}, v);
        Tensor proj = proj_like(x, 103);
        auto fn = [&](const std::vector<Tensor>& in) { return sum(mul(relu(in[0]), proj)); };
        CHECK(fd_max_rel_err(fn, {x}, coords, 4) < 1e-5);
    }
    SUBCASE("linear") {
        Tensor x = random_tensor({3, 5}, rng);
        Tensor w = random_tensor({5, 4}, rng, 0.4);
        Tensor b = random_tensor({4}, rng, 0.1);
        Tensor proj = proj_like(linear(x, w, b), 104);
        auto fn = [&](const std::vector<Tensor>& in) {
            return sum(mul(linear(in[0], in[1], in[2]), proj));
        };
        CHECK(fd_max_rel_err(fn, {x, w, b}, coords, 5) < 1e-5);
    }
    SUBCASE("global_avg_pool") {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        Tensor proj = proj_like(global_avg_pool(x), 105);
        auto fn = [&](const std::vector<Tensor>& in) {
            return sum(mul(global_avg_pool(in[0]), proj));
        };
        CHECK(fd_max_rel_err(fn, {x}, coords, 6) < 1e-5);
    }
    SUBCASE("softmax_t") {
        Tensor z = random_tensor({3, 7}, rng, 2.0);
        Tensor proj = proj_like(z, 106);
        auto fn = [&](const std::vector<Tensor>& in) {
            return sum(mul(softmax_t(in[0], 2.5), proj));
        };
        CHECK(fd_max_rel_err(fn, {z}, coords, 7) < 1e-5);
    }
    SUBCASE("cross_entropy_soft") {
        Tensor z = random_tensor({4, 5}, rng, 1.5);
        Tensor t = softmax_t(random_tensor({4, 5}, rng), 1.0).detach();
        auto fn = [&](const std::vector<Tensor>& in) {
            return cross_entropy_soft(in[0], t, 2.0);
        };
        CHECK(fd_max_rel_err(fn, {z}, coords, 8) < 1e-5);
    }
    SUBCASE("kl_div through softmax on both sides") {
        Tensor zp = random_tensor({2, 6}, rng);
        Tensor zq = random_tensor({2, 6}, rng);
        auto fn = [&](const std::vector<Tensor>& in) {
            return kl_div(softmax_t(in[0], 1.0), softmax_t(in[1], 1.0));
        };
        CHECK(fd_max_rel_err(fn, {zp, zq}, coords, 9) < 1e-5);
    }
    SUBCASE("sum_squared_diff") {
        Tensor a = random_tensor({10}, rng);
        Tensor b = random_tensor({10}, rng);
        auto fn = [&](const std::vector<Tensor>& in) {
            return sum_squared_diff(in[0], in[1]);
        };
        CHECK(fd_max_rel_err(fn, {a, b}, coords, 10) < 1e-5);
    }
    SUBCASE("add, mul, scale, slice_rows") {
        Tensor a = random_tensor({4, 3}, rng);
        Tensor b = random_tensor({4, 3}, rng);
        Tensor proj = proj_like(Tensor::zeros({2, 3}), 107);
        auto fn = [&](const std::vector<Tensor>& in) {
            Tensor s = scale(add(in[0], mul(in[0], in[1])), 0.7);
            return sum(mul(slice_rows(s, 1, 2), proj));
        };
        CHECK(fd_max_rel_err(fn, {a, b}, coords, 11) < 1e-5);
    }
}

TEST_CASE("deterministic forward and backward") {
    F64Mode f64;
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({2, 2, 5, 5}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.3);
        w.set_requires_grad(true);
        Tensor sc = random_tensor({3}, rng, 0.1, 1.0);
        Tensor sh = Tensor::zeros({3});
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
        Tensor h = relu(batchnorm2d(conv2d(x, w, 1, 1), sc, sh, rm, rv, true, 0.1, 1e-5));
        Tensor loss = sum_squared_diff(global_avg_pool(h), Tensor::zeros({2, 3}));
        backward(loss);
        return std::make_pair(loss.item(), w.grad_vector());
    };
    auto [l1, g1] = run(77);
    auto [l2, g2] = run(77);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("mixed precision is rejected") {
    Tensor a = Tensor::from_vector({2}, {1, 2}, DType::f32);
    Tensor b = Tensor::from_vector({2}, {1, 2}, DType::f64);
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
}
