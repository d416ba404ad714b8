#include <catch2/catch_amalgamated.hpp>

#include "fable/nn.hpp"
#include "fable/rng.hpp"
#include "fable/tensor.hpp"
#include "helpers.hpp"

using namespace fable;
using testutil::fd_check;
using testutil::loss_eval;

static Array arr2(int m, int n, std::initializer_list<double> v) {
    return Array(Shape{m, n}, std::vector<double>(v));
}

TEST_CASE("matmul matches hand computation") {
    Tensor a = Tensor::constant(arr2(2, 3, {1, 2, 3, 4, 5, 6}));
    Tensor b = Tensor::constant(arr2(3, 2, {7, 8, 9, 10, 11, 12}));
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 2});
    CHECK(c.value()(0, 0) == Catch::Approx(58));
    CHECK(c.value()(0, 1) == Catch::Approx(64));
    CHECK(c.value()(1, 0) == Catch::Approx(139));
    CHECK(c.value()(1, 1) == Catch::Approx(154));
}

TEST_CASE("transpose is an involution") {
    Rng rng(7);
    Array a = randn(Shape{4, 3}, rng);
    Tensor t = Tensor::constant(a);
    Tensor tt = transpose(transpose(t));
    REQUIRE(tt.value().shape == a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(tt.value().data[i] == a.data[i]);
}

TEST_CASE("softmax rows sum to one and log_softmax agrees") {
    Rng rng(11);
    Array a = randn(Shape{5, 9}, rng, 3.0);
    Tensor x = Tensor::constant(a);
    Array sm = softmax_rows(x).value();
    Array lsm = log_softmax_rows(x).value();
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += sm(i, j);
        CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
        for (int j = 0; j < 9; ++j)
            CHECK(lsm(i, j) == Catch::Approx(std::log(sm(i, j))).epsilon(1e-9));
    }
}

TEST_CASE("reused tensor accumulates gradient through both paths") {
    // y = x*x + x  =>  dy/dx = 2x + 1
    ParamStore ps;
    Param& x = ps.add("x", Array(Shape{3}, {0.5, -1.25, 2.0}));
    Leaves lv(true);
    Tensor xt = lv(x);
    Tensor y = sum(add(mul(xt, xt), xt));
    backward(y);
    lv.harvest();
    for (int i = 0; i < 3; ++i)
        CHECK(x.grad.data[static_cast<size_t>(i)] ==
              Catch::Approx(2.0 * x.value.data[static_cast<size_t>(i)] + 1.0));
}

TEST_CASE("gradients match central finite differences across the op set") {
    Rng rng(101);
    ParamStore ps;
    Param& w1 = ps.add("w1", randn(Shape{6, 8}, rng, 0.5));
    Param& b1 = ps.add("b1", randn(Shape{8}, rng, 0.2));
    Param& w2 = ps.add("w2", randn(Shape{8, 4}, rng, 0.5));
    Param& tab = ps.add("tab", randn(Shape{10, 6}, rng, 0.7));
    std::vector<int> ids = {3, 0, 9, 3, 7};
    std::vector<int> picks = {1, 3, 0, 2, 1};
    std::vector<int> mask = {1, 0, 1, 1, 0};

    auto build = [&](Leaves& lv) {
        Tensor e = embedding(lv(tab), ids);           // [5 x 6]
        Tensor h = gelu(add_bias(matmul(e, lv(w1)), lv(b1)));  // [5 x 8]
        Tensor u = silu(matmul(h, lv(w2)));           // [5 x 4]
        Tensor p = log_softmax_rows(u);
        Tensor nll = scale(masked_mean(pick(p, picks), mask), -1.0);
        Tensor sm = softmax_rows(slice0(u, 1, 4));    // [3 x 4]
        Tensor extra = mean(mul(sm, sm));
        Tensor tr = mean(tanh_op(transpose(u)));
        return add(add(nll, extra), tr);
    };
    auto res = fd_check(ps, loss_eval(ps, build));
    INFO("worst: " << res.worst_param << " over " << res.probes << " probes");
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("gradients match finite differences for image ops") {
    Rng rng(202);
    ParamStore ps;
    Param& img = ps.add("img", randn(Shape{2, 8, 8}, rng, 0.8));
    Param& k1 = ps.add("k1", randn(Shape{3, 2, 3, 3}, rng, 0.4));
    Param& kb1 = ps.add("kb1", randn(Shape{3}, rng, 0.1));
    Param& k2 = ps.add("k2", randn(Shape{2, 5, 3, 3}, rng, 0.3));
    Param& kb2 = ps.add("kb2", randn(Shape{2}, rng, 0.1));
    Param& wq = ps.add("wq", randn(Shape{3, 3}, rng, 0.5));

    auto build = [&](Leaves& lv) {
        Tensor x = silu(conv3x3(lv(img), lv(k1), lv(kb1)));  // [3,8,8]
        Tensor d = avgpool2(x);                              // [3,4,4]
        Tensor toks = tokens_from_chw(d);                    // [16,3]
        Tensor att = softmax_rows(matmul(toks, lv(wq)));
        Tensor d2 = chw_from_tokens(att, 4, 4);              // [3,4,4]
        Tensor u = upsample2(d2);                            // [3,8,8]
        Tensor cat = concat0({u, x});                        // [6,8,8] — 5ch used below
        Tensor y = conv3x3(slice0(cat, 0, 5), lv(k2), lv(kb2));
        return mean(mul(y, y));
    };
    auto res = fd_check(ps, loss_eval(ps, build));
    INFO("worst: " << res.worst_param << " over " << res.probes << " probes");
    CHECK(res.max_rel < 1e-6);
}

TEST_CASE("pool and upsample are adjoint maps") {
    // <A x, y> == <x, A^T y> where A^T is what backward applies.
    Rng rng(303);
    Array xa = randn(Shape{1, 4, 4}, rng);
    Array ya = randn(Shape{1, 2, 2}, rng);
    ParamStore ps;
    Param& x = ps.add("x", xa);
    Leaves lv(true);
    Tensor ax = avgpool2(lv(x));
    Tensor lhsT = sum(mul(ax, Tensor::constant(ya)));
    backward(lhsT);
    lv.harvest();
    double lhs = lhsT.item();
    // reconstruct <x, A^T y> from the harvested gradient: grad = A^T y
    double rhs = 0.0;
    for (size_t i = 0; i < xa.data.size(); ++i) rhs += xa.data[i] * x.grad.data[i];
    CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv3x3 with identity kernel reproduces its input") {
    Rng rng(404);
    Array img = randn(Shape{1, 5, 5}, rng);
    Array k(Shape{1, 1, 3, 3});
    k.data[4] = 1.0;  // center tap
    Tensor y = conv3x3(Tensor::constant(img), Tensor::constant(k),
                       Tensor::constant(Array(Shape{1})));
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(y.value().data[i] == Catch::Approx(img.data[i]));
}

TEST_CASE("shape errors are reported as exceptions") {
    Tensor a = Tensor::constant(Array(Shape{2, 3}));
    Tensor b = Tensor::constant(Array(Shape{3, 3}));
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(pick(a, {0, 5}), IndexError);
    CHECK_THROWS_AS(backward(a), ShapeError);
    CHECK_THROWS_AS(masked_mean(Tensor::param(Array(Shape{3})), {0, 0, 0}), ValueError);
}

TEST_CASE("harvest accumulates across separate graphs") {
    ParamStore ps;
    Param& w = ps.add("w", Array(Shape{1}, {2.0}));
    ps.zero_grad();
    for (int rep = 0; rep < 3; ++rep) {
        Leaves lv(true);
        Tensor loss = mul(lv(w), lv(w));  // d/dw = 2w = 4
        backward(loss);
        lv.harvest();
    }
    CHECK(w.grad.data[0] == Catch::Approx(12.0));
}

TEST_CASE("adam drives a quadratic toward its minimum") {
    ParamStore ps;
    Param& w = ps.add("w", Array(Shape{2}, {4.0, -3.0}));
    Adam opt({.lr = 0.1});
    for (int it = 0; it < 400; ++it) {
        ps.zero_grad();
        Leaves lv(true);
        Tensor x = lv(w);
        Tensor loss = mean(mul(x, x));
        backward(loss);
        lv.harvest();
        opt.step(ps);
    }
    CHECK(std::abs(w.value.data[0]) < 1e-3);
    CHECK(std::abs(w.value.data[1]) < 1e-3);
}

TEST_CASE("clip_grad_norm caps the global norm") {
    ParamStore ps;
    Param& a = ps.add("a", Array(Shape{2}));
    a.grad.data = {3.0, 4.0};
    double pre = clip_grad_norm(ps, 1.0);
    CHECK(pre == Catch::Approx(5.0));
    CHECK(a.grad.data[0] == Catch::Approx(0.6));
    CHECK(a.grad.data[1] == Catch::Approx(0.8));
    // below the cap: untouched
    a.grad.data = {0.3, 0.4};
    clip_grad_norm(ps, 1.0);
    CHECK(a.grad.data[0] == Catch::Approx(0.3));
}

TEST_CASE("frozen leaves build no gradient graph") {
    ParamStore ps;
    Param& w = ps.add("w", Array(Shape{1}, {1.5}));
    Leaves lv(false);
    Tensor y = mul(lv(w), lv(w));
    CHECK_FALSE(y.requires_grad());
}
