#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "bfa/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace bfa;
using bfa::testing::all_finite;
using bfa::testing::gradcheck;

TEST_CASE("matmul identity and hand cases") {
    Tensor eye = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(nullptr, eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);

    // [[1,2]] x [[3],[4]] = [[11]]
    Tensor r = matmul(nullptr, Tensor::from({1, 1, 1, 2}, {1, 2}), Tensor::from({1, 1, 2, 1}, {3, 4}));
    CHECK(r.item() == doctest::Approx(11.0f));

    Tensor z = matmul(nullptr, Tensor::zeros({1, 1, 2, 3}), Tensor::full({1, 1, 3, 2}, 5.0f));
    for (float v : z.data()) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::zeros({1, 1, 2, 3});
    Tensor b = Tensor::zeros({1, 1, 4, 2});
    try {
        matmul(nullptr, a, b);
        FAIL("expected a dimension error");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(1,1,2,3)") != std::string::npos);
        CHECK(msg.find("(1,1,4,2)") != std::string::npos);
    }
}

TEST_CASE("softmax rows") {
    Tensor x = Tensor::from({1, 1, 1, 2}, {0, 0});
    Tensor y = softmax_lastdim(nullptr, x);
    CHECK(y.data()[0] == doctest::Approx(0.5f));
    CHECK(y.data()[1] == doctest::Approx(0.5f));

    // shift invariance / no overflow
    Tensor big = Tensor::from({1, 1, 1, 2}, {1000, 1000});
    Tensor yb = softmax_lastdim(nullptr, big);
    CHECK(all_finite(yb));
    CHECK(yb.data()[0] == doctest::Approx(0.5f));

    Tensor t = Tensor::from({1, 1, 1, 2}, {0.0f, std::log(3.0f)});
    Tensor yt = softmax_lastdim(nullptr, t);
    CHECK(yt.data()[0] == doctest::Approx(0.25f).epsilon(1e-6));
    CHECK(yt.data()[1] == doctest::Approx(0.75f).epsilon(1e-6));

    // every row sums to 1
    std::mt19937 rng(7);
    Tensor r = rand_uniform({2, 3, 4, 5}, rng, -4.0f, 4.0f);
    Tensor yr = softmax_lastdim(nullptr, r);
    for (int row = 0; row < 2 * 3 * 4; ++row) {
        float s = 0.0f;
        for (int j = 0; j < 5; ++j) s += yr.data()[static_cast<std::size_t>(row * 5 + j)];
        CHECK(std::fabs(s - 1.0f) < 1e-6f);
    }
}

TEST_CASE("silu values") {
    Tensor x = Tensor::from({1, 1, 1, 3}, {0.0f, 1.0f, 40.0f});
    Tensor y = silu(nullptr, x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == doctest::Approx(0.7310586f).epsilon(1e-6));
    CHECK(y.data()[2] == doctest::Approx(40.0f).epsilon(1e-6));
}

TEST_CASE("concat and slice round trip") {
    std::mt19937 rng(3);
    Tensor a = randn({2, 2, 3, 3}, rng);
    Tensor b = randn({2, 3, 3, 3}, rng);

    Tensor only = concat_channels(nullptr, {a});
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(only.data()[i] == a.data()[i]);

    Tensor cat = concat_channels(nullptr, {a, b});
    CHECK(cat.shape() == Shape4{2, 5, 3, 3});

    Tensor back = slice_channels(nullptr, cat, 0, 2);
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(back.data()[i] == a.data()[i]);

    CHECK_THROWS_AS(concat_channels(nullptr, {a, Tensor::zeros({2, 1, 4, 3})}), std::invalid_argument);
}

TEST_CASE("backward fills leaf grads") {
    Tensor x = Tensor::from({1, 1, 1, 2}, {1, 2});
    x.set_requires_grad(true);

    SUBCASE("sum -> ones") {
        Tape tape;
        Tensor loss = sum(&tape, x);
        tape.backward(loss);
        CHECK(x.grad()[0] == 1.0f);
        CHECK(x.grad()[1] == 1.0f);
    }
    SUBCASE("sum of squares -> 2x") {
        Tape tape;
        Tensor loss = sum(&tape, mul(&tape, x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(2.0f));
        CHECK(x.grad()[1] == doctest::Approx(4.0f));
    }
    SUBCASE("non-scalar loss rejected") {
        Tape tape;
        Tensor y = mul(&tape, x, x);
        CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
    }
}

TEST_CASE("repeated backward accumulates; reset clears") {
    Tensor x = Tensor::from({1, 1, 1, 2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(&tape, mul(&tape, x, x));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0f));  // two passes accumulate
    CHECK(x.grad()[1] == doctest::Approx(8.0f));

    x.zero_grad();
    tape.clear();
    CHECK(x.grad()[0] == 0.0f);
    CHECK(x.grad()[1] == 0.0f);
    CHECK(tape.size() == 0);
}

TEST_CASE("determinism: same seed same bits") {
    std::mt19937 rng1(123), rng2(123);
    Tensor a1 = randn({2, 3, 4, 5}, rng1);
    Tensor a2 = randn({2, 3, 4, 5}, rng2);
    for (std::size_t i = 0; i < a1.data().size(); ++i) CHECK(a1.data()[i] == a2.data()[i]);

    Tensor y1 = softmax_lastdim(nullptr, a1);
    Tensor y2 = softmax_lastdim(nullptr, a2);
    for (std::size_t i = 0; i < y1.data().size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("finite-difference check across the op set") {
    std::mt19937 rng(11);

    auto fd_binary = [&](auto op) {
        Tensor a = rand_uniform({2, 2, 3, 3}, rng, -1.0f, 1.0f);
        Tensor b = rand_uniform({2, 2, 3, 3}, rng, 0.5f, 1.5f);  // keep div well conditioned
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto r = gradcheck({a, b}, [&](Tape& t) { return sum(&t, op(&t, a, b)); });
        CHECK(r.max_rel_error <= 1e-3);
    };
    fd_binary([](Tape* t, const Tensor& a, const Tensor& b) { return add(t, a, b); });
    fd_binary([](Tape* t, const Tensor& a, const Tensor& b) { return sub(t, a, b); });
    fd_binary([](Tape* t, const Tensor& a, const Tensor& b) { return mul(t, a, b); });
    fd_binary([](Tape* t, const Tensor& a, const Tensor& b) { return div(t, a, b); });

    auto fd_unary = [&](auto op, float lo, float hi) {
        Tensor x = rand_uniform({2, 2, 3, 3}, rng, lo, hi);
        x.set_requires_grad(true);
        auto r = gradcheck({x}, [&](Tape& t) { return sum(&t, op(&t, x)); });
        CHECK(r.max_rel_error <= 1e-3);
    };
    fd_unary([](Tape* t, const Tensor& x) { return silu(t, x); }, -1.0f, 1.0f);
    fd_unary([](Tape* t, const Tensor& x) { return sigmoid(t, x); }, -1.0f, 1.0f);
    fd_unary([](Tape* t, const Tensor& x) { return softplus(t, x); }, -1.0f, 1.0f);
    fd_unary([](Tape* t, const Tensor& x) { return atan_op(t, x); }, -1.0f, 1.0f);
    fd_unary([](Tape* t, const Tensor& x) { return mul_scalar(t, x, 2.5f); }, -1.0f, 1.0f);

    SUBCASE("matmul") {
        Tensor a = rand_uniform({1, 1, 3, 4}, rng, -1.0f, 1.0f);
        Tensor b = rand_uniform({1, 1, 4, 2}, rng, -1.0f, 1.0f);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto r = gradcheck({a, b}, [&](Tape& t) { return sum(&t, matmul(&t, a, b)); });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("bmm") {
        Tensor a = rand_uniform({2, 2, 3, 4}, rng, -1.0f, 1.0f);
        Tensor b = rand_uniform({2, 2, 4, 3}, rng, -1.0f, 1.0f);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto r = gradcheck({a, b}, [&](Tape& t) { return sum(&t, mul(&t, bmm(&t, a, b), bmm(&t, a, b))); });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("softmax") {
        Tensor x = rand_uniform({1, 2, 3, 4}, rng, -1.0f, 1.0f);
        x.set_requires_grad(true);
        auto r = gradcheck({x}, [&](Tape& t) {
            Tensor y = softmax_lastdim(&t, x);
            return sum(&t, mul(&t, y, y));  // non-uniform downstream gradient
        });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("shape ops") {
        Tensor x = rand_uniform({2, 4, 3, 3}, rng, -1.0f, 1.0f);
        x.set_requires_grad(true);
        auto r = gradcheck({x}, [&](Tape& t) {
            Tensor a = slice_channels(&t, x, 0, 2);
            Tensor b = slice_channels(&t, x, 2, 4);
            Tensor cat = concat_channels(&t, {b, a});
            Tensor tr = transpose_hw(&t, cat);
            Tensor rs = reshape(&t, tr, {1, 1, 8, 9});
            return sum(&t, mul(&t, rs, rs));
        });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("heads round trip") {
        Tensor x = rand_uniform({2, 4, 2, 3}, rng, -1.0f, 1.0f);
        x.set_requires_grad(true);
        auto r = gradcheck({x}, [&](Tape& t) {
            Tensor h = nchw_to_heads(&t, x, 2);
            Tensor back = heads_to_nchw(&t, h, 2, 3);
            return sum(&t, mul(&t, back, back));
        });
        CHECK(r.max_rel_error <= 1e-3);
        // exact round trip
        Tensor h = nchw_to_heads(nullptr, x, 2);
        Tensor back = heads_to_nchw(nullptr, h, 2, 3);
        for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(back.data()[i] == x.data()[i]);
    }
    SUBCASE("broadcast ops") {
        Tensor x = rand_uniform({2, 3, 2, 2}, rng, -1.0f, 1.0f);
        Tensor w = rand_uniform({2, 3, 1, 1}, rng, -1.0f, 1.0f);
        Tensor m = rand_uniform({1, 1, 2, 2}, rng, -1.0f, 1.0f);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        m.set_requires_grad(true);
        auto r = gradcheck({x, w, m}, [&](Tape& t) {
            Tensor sc = scale_channels(&t, x, w);
            Tensor mk = mul_bcast_hw(&t, sc, m);
            return sum(&t, mul(&t, mk, mk));
        });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("gather") {
        Tensor x = rand_uniform({2, 3, 4, 4}, rng, -1.0f, 1.0f);
        x.set_requires_grad(true);
        std::vector<CellIndex> cells = {{0, 1, 2}, {1, 3, 0}, {0, 0, 0}};
        auto r = gradcheck({x}, [&](Tape& t) {
            Tensor g = gather_hw(&t, x, cells);
            return sum(&t, mul(&t, g, g));
        });
        CHECK(r.max_rel_error <= 1e-3);
    }
    SUBCASE("min max") {
        Tensor a = rand_uniform({1, 1, 3, 3}, rng, -1.0f, 1.0f);
        Tensor b = rand_uniform({1, 1, 3, 3}, rng, -1.0f, 1.0f);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto r = gradcheck({a, b}, [&](Tape& t) {
            Tensor mn = minimum(&t, a, b);
            Tensor mx = maximum(&t, a, b);
            return sum(&t, mul(&t, mn, mx));
        });
        CHECK(r.max_rel_error <= 1e-3);
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from({1, 1, 2, 2}, {1.0f}), std::invalid_argument);
    Tensor t = Tensor::zeros({2, 3, 4, 5});
    CHECK(t.numel() == 120);
    CHECK(static_cast<std::int64_t>(t.data().size()) == t.numel());
    t.grad();
    CHECK(t.impl()->grad.size() == t.data().size());
}
