#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdtp/tensor.hpp"

using namespace sdtp;
using namespace sdtp::ad;

namespace {

template <typename Real>
std::vector<Real> randvec(size_t n, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<Real> v(n);
    for (auto& x : v) x = Real(rng.uniform(lo, hi));
    return v;
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
    Tape<double> t;
    std::vector<double> eye{1, 0, 0, 1};
    std::vector<double> m{1, 2, 3, 4};
    auto a = t.constant({2, 2}, eye);
    auto b = t.constant({2, 2}, m);
    auto c = t.matmul(a, b);
    for (int i = 0; i < 4; i++) CHECK(c.values()[i] == doctest::Approx(m[i]));

    std::vector<double> r{3, 4};
    auto x = t.constant({1, 2}, std::vector<double>{1, 2});
    auto y = t.constant({2, 1}, r);
    auto z = t.matmul(x, y);
    CHECK(z.values()[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions with a report") {
    Tape<double> t;
    auto a = t.zeros({2, 3});
    auto b = t.zeros({4, 2});
    CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("inner dimensions"),
                         std::invalid_argument);
}

TEST_CASE("matmul backward matches finite differences on random 5x7 * 7x3") {
    Rng rng(42);
    auto a0 = randvec<double>(5 * 7, rng);
    auto b0 = randvec<double>(7 * 3, rng);
    auto w = randvec<double>(5 * 3, rng);

    // check grads w.r.t. a with b fixed, then vice versa
    auto fa = [&](Tape<double>& t, Tensor<double> x) {
        auto b = t.constant({7, 3}, b0);
        auto c = t.matmul(x, b);
        auto wt = t.constant({5, 3}, w);
        return t.sum_all(t.mul(c, wt));
    };
    auto rep_a = finite_diff_check<double>(fa, {5, 7}, a0, 35, rng);
    CHECK(rep_a.max_rel_err < 1e-6);

    auto fb = [&](Tape<double>& t, Tensor<double> x) {
        auto a = t.constant({5, 7}, a0);
        auto c = t.matmul(a, x);
        auto wt = t.constant({5, 3}, w);
        return t.sum_all(t.mul(c, wt));
    };
    auto rep_b = finite_diff_check<double>(fb, {7, 3}, b0, 21, rng);
    CHECK(rep_b.max_rel_err < 1e-6);
}

TEST_CASE("gelu fixed point and backward") {
    Tape<double> t;
    auto x = t.constant({1, 1}, std::vector<double>{0.0});
    CHECK(t.gelu(x).values()[0] == 0.0);

    Rng rng(7);
    std::vector<double> pt{1.0};
    auto g = [](Tape<double>& tp, Tensor<double> v) { return tp.sum_all(tp.gelu(v)); };
    auto rep = finite_diff_check<double>(g, {1, 1}, pt, 1, rng);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("softmax of equal logits is uniform, rows sum to one") {
    Tape<double> t;
    auto x = t.constant({1, 3}, std::vector<double>{0, 0, 0});
    auto p = t.softmax_rows(x);
    for (int j = 0; j < 3; j++) CHECK(p.values()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Rng rng(3);
    for (int rep = 0; rep < 20; rep++) {
        Tape<double> tp;
        auto v = randvec<double>(4 * 6, rng, -5, 5);
        auto pr = tp.softmax_rows(tp.constant({4, 6}, v));
        for (int i = 0; i < 4; i++) {
            double s = 0;
            for (int j = 0; j < 6; j++) {
                double pv = pr.values()[i * 6 + j];
                CHECK(pv >= 0.0);
                s += pv;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("backward: linear closed form and sum of squares") {
    {
        Tape<double> t;
        auto w = t.constant({1, 3}, std::vector<double>{1, 2, 3});
        auto x = t.leaf({1, 3}, std::vector<double>{4, 5, 6}, true);
        auto s = t.sum_all(t.mul(w, x));
        t.backward(s);
        auto g = x.grad();
        CHECK(g[0] == doctest::Approx(1));
        CHECK(g[1] == doctest::Approx(2));
        CHECK(g[2] == doctest::Approx(3));
    }
    {
        Tape<double> t;
        auto x = t.leaf({1, 2}, std::vector<double>{1, -2}, true);
        auto s = t.sum_all(t.mul(x, x));
        t.backward(s);
        CHECK(x.grad()[0] == doctest::Approx(2));
        CHECK(x.grad()[1] == doctest::Approx(-4));
    }
}

TEST_CASE("backward rejects non-scalar argument") {
    Tape<double> t;
    auto x = t.leaf({2, 2}, std::vector<double>{1, 2, 3, 4}, true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("unreachable nodes keep zero grad") {
    Tape<double> t;
    auto x = t.leaf({1, 2}, std::vector<double>{1, 2}, true);
    auto y = t.leaf({1, 2}, std::vector<double>{3, 4}, true);
    auto s = t.sum_all(x);  // y not reachable
    t.backward(s);
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
}

TEST_CASE("tape linearity: backward of sum equals sum of backward passes") {
    Rng rng(11);
    auto v = randvec<double>(6, rng);

    Tape<double> t1;
    auto x1 = t1.leaf({2, 3}, v, true);
    auto a1 = t1.sum_all(t1.gelu(x1));
    auto b1 = t1.sum_all(t1.mul(x1, x1));
    auto s1 = t1.weighted_sum(std::vector<Tensor<double>>{a1, b1}, std::vector<double>{1.0, 1.0});
    t1.backward(s1);

    Tape<double> t2;
    auto x2 = t2.leaf({2, 3}, v, true);
    auto a2 = t2.sum_all(t2.gelu(x2));
    auto b2 = t2.sum_all(t2.mul(x2, x2));
    t2.backward(a2);
    t2.backward(b2);

    for (int i = 0; i < 6; i++) CHECK(x1.grad()[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-12));
}

TEST_CASE("re-running backward accumulates exactly twice the grad") {
    Rng rng(13);
    auto v = randvec<double>(4, rng);
    Tape<double> t;
    auto x = t.leaf({2, 2}, v, true);
    auto s = t.sum_all(t.gelu(x));
    t.backward(s);
    std::vector<double> once(x.grad().begin(), x.grad().end());
    t.backward(s);
    for (int i = 0; i < 4; i++) CHECK(x.grad()[i] == doctest::Approx(2 * once[i]).epsilon(1e-12));

    t.zero_grad();
    for (int i = 0; i < 4; i++) CHECK(x.grad()[i] == 0.0);
}

TEST_CASE("finite_diff_check reference behaviors") {
    Rng rng(5);
    auto pt = randvec<double>(8, rng);
    auto fsum = [](Tape<double>& t, Tensor<double> x) { return t.sum_all(x); };
    auto rep = finite_diff_check<double>(fsum, {2, 4}, pt, 8, rng);
    CHECK(rep.max_rel_err < 1e-9);

    auto fsm = [](Tape<double>& t, Tensor<double> x) { return t.sum_all(t.softmax_rows(x)); };
    auto rep2 = finite_diff_check<double>(fsm, {2, 4}, pt, 8, rng);
    CHECK(rep2.max_rel_err < 1e-6);
}

TEST_CASE("every primitive passes a finite-difference sweep at 64-bit") {
    Rng rng(101);
    int checked = 0;
    for (int round = 0; round < 100; round++) {
        auto x0 = randvec<double>(3 * 4, rng);
        auto w = randvec<double>(3 * 4, rng);
        auto w20 = randvec<double>(20, rng);
        auto v0 = randvec<double>(4, rng);
        int pick = round % 8;
        auto f = [&](Tape<double>& t, Tensor<double> x) -> Tensor<double> {
            auto wt = t.constant({3, 4}, w);
            switch (pick) {
                case 0: return t.sum_all(t.mul(t.gelu(x), wt));
                case 1: return t.sum_all(t.mul(t.softmax_rows(x), wt));
                case 2: return t.sum_all(t.mul(t.layer_norm(x), wt));
                case 3: {
                    auto v = t.constant({4}, v0);
                    return t.sum_all(t.mul(t.add_rowvec(x, v), wt));
                }
                case 4: {
                    auto v = t.constant({4}, v0);
                    return t.sum_all(t.mul(t.mul_rowvec(x, v), wt));
                }
                case 5: {
                    auto b = t.constant({4, 2}, std::vector<double>(w.begin(), w.begin() + 8));
                    auto c = t.matmul(x, b);
                    auto u = t.constant({3, 2}, std::vector<double>(w.begin(), w.begin() + 6));
                    return t.sum_all(t.mul(c, u));
                }
                case 6: return t.sum_all(t.slice_cols(x, 1, 2));
                default: {
                    auto other = t.constant({2, 4}, std::vector<double>(w.begin(), w.begin() + 8));
                    auto cat = t.concat_rows(x, other);
                    auto u = t.constant({5, 4}, w20);
                    return t.sum_all(t.mul(cat, u));
                }
            }
        };
        auto rep = finite_diff_check<double>(f, {3, 4}, x0, 6, rng);
        CHECK(rep.max_rel_err < 1e-6);
        checked++;
    }
    CHECK(checked == 100);
}

TEST_CASE("embedding gather forward and scatter backward") {
    Tape<double> t;
    Rng rng(9);
    auto table0 = randvec<double>(5 * 3, rng);
    auto table = t.leaf({5, 3}, table0, true);
    std::vector<int> ids{1, 1, 4};
    auto rows = t.embedding_gather(table, ids);
    CHECK(rows.shape() == Shape{3, 3});
    for (int j = 0; j < 3; j++) {
        CHECK(rows.values()[0 * 3 + j] == table0[1 * 3 + j]);
        CHECK(rows.values()[2 * 3 + j] == table0[4 * 3 + j]);
    }
    auto s = t.sum_all(rows);
    t.backward(s);
    CHECK(table.grad()[1 * 3 + 0] == doctest::Approx(2.0));  // id 1 gathered twice
    CHECK(table.grad()[4 * 3 + 0] == doctest::Approx(1.0));
    CHECK(table.grad()[0 * 3 + 0] == 0.0);
}

TEST_CASE("causal softmax rows are prefix distributions") {
    Rng rng(17);
    auto v = randvec<double>(4 * 4, rng);
    Tape<double> t;
    auto p = t.softmax_rows(t.constant({4, 4}, v), /*causal=*/true);
    for (int i = 0; i < 4; i++) {
        double s = 0;
        for (int j = 0; j < 4; j++) {
            double pv = p.values()[i * 4 + j];
            if (j > i) CHECK(pv == 0.0);
            s += pv;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("weighted causal softmax: forward equals subset softmax, grads pass FD") {
    Rng rng(19);
    int n = 5;
    auto s0 = randvec<double>(n * n, rng);
    std::vector<double> w0{1, 0, 1, 1, 0};

    Tape<double> t;
    auto s = t.constant({n, n}, s0);
    auto w = t.constant({n}, w0);
    auto p = t.softmax_rows_weighted_causal(s, w);
    // row 3 attends to {0, 2, 3}
    double z = std::exp(s0[3 * n + 0]) + std::exp(s0[3 * n + 2]) + std::exp(s0[3 * n + 3]);
    CHECK(p.values()[3 * n + 0] == doctest::Approx(std::exp(s0[3 * n + 0]) / z).epsilon(1e-9));
    CHECK(p.values()[3 * n + 1] == 0.0);

    auto u0 = randvec<double>(n * n, rng);
    auto fscores = [&](Tape<double>& tp, Tensor<double> x) {
        auto wv = tp.constant({n}, w0);
        auto pr = tp.softmax_rows_weighted_causal(x, wv);
        auto u = tp.constant({n, n}, u0);
        return tp.sum_all(tp.mul(pr, u));
    };
    auto rep = finite_diff_check<double>(fscores, {n, n}, s0, 15, rng);
    CHECK(rep.max_rel_err < 1e-6);

    // gradient w.r.t. weights, including zero-weight entries
    std::vector<double> wsoft{0.9, 0.1, 0.8, 0.7, 0.2};
    auto fw = [&](Tape<double>& tp, Tensor<double> x) {
        auto sc = tp.constant({n, n}, s0);
        auto pr = tp.softmax_rows_weighted_causal(sc, x);
        auto u = tp.constant({n, n}, u0);
        return tp.sum_all(tp.mul(pr, u));
    };
    auto repw = finite_diff_check<double>(fw, {n}, wsoft, 5, rng);
    CHECK(repw.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm handles a zero-variance row without dividing by zero") {
    Tape<double> t;
    auto x = t.constant({1, 4}, std::vector<double>{3, 3, 3, 3});
    auto y = t.layer_norm(x);
    for (int j = 0; j < 4; j++) CHECK(std::isfinite(y.values()[j]));
    CHECK(y.values()[0] == doctest::Approx(0.0));
}

TEST_CASE("cross entropy closed forms") {
    // uniform logits over vocab 256 -> ln 256
    Tape<double> t;
    std::vector<double> logits(2 * 256, 0.0);
    std::vector<int> labels{17, 203};
    auto lg = t.constant({2, 256}, logits);
    auto ce = t.cross_entropy_rows(lg, labels, {});
    CHECK(ce.scalar() == doctest::Approx(std::log(256.0)).epsilon(1e-12));

    // saturated correct logits -> loss < 1e-8
    Tape<double> t2;
    std::vector<double> big(2 * 8, 0.0);
    big[0 * 8 + 3] = 20.0;
    big[1 * 8 + 5] = 20.0;
    std::vector<int> lab{3, 5};
    auto ce2 = t2.cross_entropy_rows(t2.constant({2, 8}, big), lab, {});
    CHECK(ce2.scalar() < 1e-8);
}

TEST_CASE("cross entropy gradient passes finite differences") {
    Rng rng(23);
    auto pt = randvec<double>(3 * 7, rng);
    std::vector<int> labels{2, 0, 6};
    std::vector<uint8_t> inc{1, 0, 1};
    auto f = [&](Tape<double>& t, Tensor<double> x) {
        return t.cross_entropy_rows(x, labels, inc);
    };
    auto rep = finite_diff_check<double>(f, {3, 7}, pt, 21, rng);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gumbel straight-through mask: hard forward, soft backward") {
    Rng rng(31);
    int n = 4;
    auto pi0 = randvec<double>(n * 2, rng);
    std::vector<double> noise(n * 2, 0.0);
    for (auto& x : noise) x = rng.gumbel();
    std::vector<uint8_t> prot{1, 0, 0, 0};

    Tape<double> t;
    auto pi = t.leaf({n, 2}, pi0, true);
    auto m = t.gumbel_keep_st(pi, noise, 1.0, prot);
    for (int i = 0; i < n; i++) {
        double v = m.values()[i];
        CHECK((v == 0.0 || v == 1.0));
    }
    CHECK(m.values()[0] == 1.0);  // protected forced keep

    auto wv = randvec<double>(n, rng);
    auto s = t.sum_all(t.mul(m, t.constant({n}, wv)));
    t.backward(s);
    // protected row gradient is detached
    CHECK(pi.grad()[0] == 0.0);
    CHECK(pi.grad()[1] == 0.0);
    // soft jacobian for the others
    for (int i = 1; i < n; i++) {
        double a = pi0[i * 2] + noise[i * 2], b = pi0[i * 2 + 1] + noise[i * 2 + 1];
        double y = 1.0 / (1.0 + std::exp(-(a - b)));
        CHECK(pi.grad()[i * 2] == doctest::Approx(wv[i] * y * (1 - y)).epsilon(1e-9));
    }
}
