#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "spkvec/grad_check.hpp"
#include "spkvec/ops.hpp"
#include "spkvec/tape.hpp"
#include "test_util.hpp"

using namespace spkvec;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gauss_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

Tensor eval_unary(Var (*op)(Tape&, Var), const Tensor& in) {
    Tape t;
    Var x = t.leaf(in);
    return t.val(op(t, x));
}

}  // namespace

TEST_CASE("gelu matches x * Phi(x)") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {0.0, 1.0, -2.5}));
    const Tensor& y = t.val(ops::gelu(t, x));
    CHECK(y.data[0] == 0.0);
    CHECK(y.data[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    for (int i = 0; i < 3; ++i) {
        const double xi = t.val(x).data[i];
        CHECK(y.data[i] == doctest::Approx(xi * gauss_cdf(xi)).epsilon(1e-14));
    }
}

TEST_CASE("gelu derivative matches closed form at 0.5") {
    Rng rng(3);
    const Tensor in({1}, {0.5});
    Tape t;
    Var x = t.leaf(in, true);
    Var y = ops::gelu(t, x);
    t.backward(ops::weighted_sum(t, y, Tensor({1}, {1.0})));
    const double analytic = t.grad_if(x)->data[0];
    const double closed = gauss_cdf(0.5) + 0.5 * gauss_pdf(0.5);
    CHECK(analytic == doctest::Approx(closed).epsilon(1e-12));

    const double fd = gradient_check(
        [](Tape& tt, const std::vector<Var>& vs) {
            return ops::weighted_sum(tt, ops::gelu(tt, vs[0]), Tensor({1}, {1.0}));
        },
        {in});
    CHECK(fd < 1e-6);
}

TEST_CASE("linear identity and arithmetic") {
    {
        Tape t;
        Var x = t.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
        Var w = t.leaf(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
        Var b = t.leaf(Tensor({3}, {0, 0, 0}));
        CHECK(max_abs_diff(t.val(ops::linear(t, x, w, b)), t.val(x)) == 0.0);
    }
    {
        Tape t;
        Var x = t.leaf(Tensor({2}, {1, 2}));
        Var w = t.leaf(Tensor({1, 2}, {3, 4}));
        Var b = t.leaf(Tensor({1}, {5}));
        CHECK(t.val(ops::linear(t, x, w, b)).data[0] == 16.0);
    }
    {
        Rng rng(1);
        Tape t;
        Var x = t.leaf(random_tensor({2, 3, 5}, rng));
        Var w = t.leaf(random_tensor({7, 5}, rng));
        Var y = ops::linear(t, x, w, Var{});
        CHECK(t.val(y).shape == std::vector<Index>{2, 3, 7});
    }
    {
        Tape t;
        Var x = t.leaf(Tensor({2}, {1, 2}));
        Var w = t.leaf(Tensor({3, 4}));
        CHECK_THROWS_WITH_AS(ops::linear(t, x, w, Var{}),
                             doctest::Contains("does not match"), std::invalid_argument);
    }
}

TEST_CASE("conv1d identity kernel and length formula") {
    Rng rng(7);
    {
        Tape t;
        Var x = t.leaf(random_tensor({1, 1, 6}, rng));
        Var w = t.leaf(Tensor({1, 1, 1}, {1.0}));
        Var y = ops::conv1d(t, x, w, Var{}, 1, 0, 1);
        CHECK(max_abs_diff(t.val(y), t.val(x)) == 0.0);
    }
    {
        Tape t;
        Var x = t.leaf(random_tensor({1, 1, 10}, rng));
        Var w = t.leaf(random_tensor({1, 1, 3}, rng));
        Var y = ops::conv1d(t, x, w, Var{}, 2, 0, 1);
        CHECK(t.val(y).shape == std::vector<Index>{1, 1, 4});
    }
    {
        Tape t;
        Var x = t.leaf(random_tensor({1, 3, 10}, rng));
        Var w = t.leaf(random_tensor({2, 2, 3}, rng));  // wants c_in/groups == 2, have 3
        CHECK_THROWS_AS(ops::conv1d(t, x, w, Var{}, 1, 0, 1), std::invalid_argument);
    }
}

TEST_CASE("conv1d cross-correlation against direct sum with padding") {
    // Hand-rolled oracle: y[p] = sum_k w[k] * x[p*s + k - pad]
    Rng rng(11);
    const Tensor x = random_tensor({1, 1, 9}, rng);
    const Tensor w = random_tensor({1, 1, 4}, rng);
    const Index stride = 2, pad = 3;
    Tape t;
    Var y = ops::conv1d(t, t.leaf(x), t.leaf(w), Var{}, stride, pad, 1);
    const Index len_out = (9 + 2 * pad - 4) / stride + 1;
    REQUIRE(t.val(y).shape == std::vector<Index>{1, 1, len_out});
    for (Index p = 0; p < len_out; ++p) {
        double ref = 0.0;
        for (Index k = 0; k < 4; ++k) {
            const long j = static_cast<long>(p * stride + k) - static_cast<long>(pad);
            if (j >= 0 && j < 9) ref += w.data[k] * x.data[j];
        }
        CHECK(t.val(y).data[p] == doctest::Approx(ref).epsilon(1e-13));
    }
}

TEST_CASE("grouped conv equals independent split convolutions") {
    Rng rng(13);
    const Tensor x = random_tensor({1, 2, 8}, rng);
    const Tensor w = random_tensor({2, 1, 3}, rng);
    const Tensor b = random_tensor({2}, rng);

    Tape t;
    Var grouped = ops::conv1d(t, t.leaf(x), t.leaf(w), t.leaf(b), 1, 0, 2);

    // Split channels by hand and run two 1-group convolutions.
    Tensor x0({1, 1, 8}), x1({1, 1, 8});
    std::copy_n(x.ptr(), 8, x0.ptr());
    std::copy_n(x.ptr() + 8, 8, x1.ptr());
    Tensor w0({1, 1, 3}), w1({1, 1, 3});
    std::copy_n(w.ptr(), 3, w0.ptr());
    std::copy_n(w.ptr() + 3, 3, w1.ptr());
    Var y0 = ops::conv1d(t, t.leaf(x0), t.leaf(w0), t.leaf(Tensor({1}, {b.data[0]})), 1, 0, 1);
    Var y1 = ops::conv1d(t, t.leaf(x1), t.leaf(w1), t.leaf(Tensor({1}, {b.data[1]})), 1, 0, 1);

    const Tensor& g = t.val(grouped);
    REQUIRE(g.shape == std::vector<Index>{1, 2, 6});
    for (Index i = 0; i < 6; ++i) {
        CHECK(g.data[i] == doctest::Approx(t.val(y0).data[i]).epsilon(1e-13));
        CHECK(g.data[6 + i] == doctest::Approx(t.val(y1).data[i]).epsilon(1e-13));
    }
}

TEST_CASE("conv1d linearity for bias-free kernels") {
    Rng rng(17);
    const Tensor xa = random_tensor({2, 3, 12}, rng);
    const Tensor xb = random_tensor({2, 3, 12}, rng);
    const Tensor w = random_tensor({6, 3, 4}, rng);
    const double a = 1.7, b = -0.4;

    auto run = [&](const Tensor& in) {
        Tape t;
        return t.val(ops::conv1d(t, t.leaf(in), t.leaf(w), Var{}, 2, 1, 1));
    };
    Tensor mix(xa.shape);
    for (Index i = 0; i < mix.numel(); ++i) mix.data[i] = a * xa.data[i] + b * xb.data[i];
    const Tensor ya = run(xa), yb = run(xb), ymix = run(mix);
    for (Index i = 0; i < ymix.numel(); ++i) {
        CHECK(std::abs(ymix.data[i] - (a * ya.data[i] + b * yb.data[i])) < 1e-10);
    }
}

TEST_CASE("layer_norm examples") {
    {
        Tape t;
        Var x = t.leaf(Tensor({2}, {1, -1}));
        Var g = t.leaf(Tensor({2}, {1, 1}));
        Var o = t.leaf(Tensor({2}, {0, 0}));
        const Tensor& y = t.val(ops::layer_norm(t, x, g, o, 1e-9));
        CHECK(y.data[0] == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(y.data[1] == doctest::Approx(-1.0).epsilon(1e-6));
    }
    {
        Tape t;
        Var x = t.leaf(Tensor({3}, {4, 4, 4}));
        Var g = t.leaf(Tensor({3}, {2, 2, 2}));
        Var o = t.leaf(Tensor({3}, {0.5, 0.5, 0.5}));
        const Tensor& y = t.val(ops::layer_norm(t, x, g, o, 1e-5));
        for (int i = 0; i < 3; ++i) CHECK(y.data[i] == doctest::Approx(0.5).epsilon(1e-9));
    }
    {
        Rng rng(23);
        Tape t;
        Var x = t.leaf(random_tensor({4}, rng, 3.0));
        Var g = t.leaf(Tensor({4}, {1, 1, 1, 1}));
        Var o = t.leaf(Tensor({4}, {0, 0, 0, 0}));
        const Tensor& y = t.val(ops::layer_norm(t, x, g, o, 1e-9));
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < 4; ++i) mean += y.data[i] / 4;
        for (int i = 0; i < 4; ++i) var += (y.data[i] - mean) * (y.data[i] - mean) / 4;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("layer_norm and group_norm shift invariance") {
    Rng rng(29);
    const Tensor x = random_tensor({2, 4, 6}, rng);
    Tensor shifted = x;
    for (double& v : shifted.data) v += 7.5;
    const Tensor g1({4}, {1, 1, 1, 1});
    const Tensor o0({4}, {0, 0, 0, 0});

    {
        // Shift every vector of the last dim for LN (norm group = trailing dim).
        Tape t;
        Var ya = ops::layer_norm(t, t.leaf(x.reshaped({8, 6})),
                                 t.leaf(Tensor({6}, {1, 1, 1, 1, 1, 1})),
                                 t.leaf(Tensor({6})), 1e-9);
        Var yb = ops::layer_norm(t, t.leaf(shifted.reshaped({8, 6})),
                                 t.leaf(Tensor({6}, {1, 1, 1, 1, 1, 1})),
                                 t.leaf(Tensor({6})), 1e-9);
        CHECK(max_abs_diff(t.val(ya), t.val(yb)) < 1e-6);
    }
    {
        Tape t;
        Var ya = ops::group_norm(t, t.leaf(x), 2, t.leaf(g1), t.leaf(o0), 1e-9);
        Var yb = ops::group_norm(t, t.leaf(shifted), 2, t.leaf(g1), t.leaf(o0), 1e-9);
        CHECK(max_abs_diff(t.val(ya), t.val(yb)) < 1e-6);
    }
}

TEST_CASE("group_norm per-channel and instance-wide statistics") {
    Rng rng(31);
    const Index C = 4, L = 5;
    const Tensor x = random_tensor({1, C, L}, rng, 2.0);
    Tensor g1({C}), o0({C});
    for (Index c = 0; c < C; ++c) g1.data[c] = 1.0;

    {
        // groups == channels: every channel sequence normalized on its own.
        Tape t;
        const Tensor& y = t.val(ops::group_norm(t, t.leaf(x), C, t.leaf(g1), t.leaf(o0), 1e-9));
        for (Index c = 0; c < C; ++c) {
            double mean = 0.0, var = 0.0;
            for (Index l = 0; l < L; ++l) mean += y.data[c * L + l] / L;
            for (Index l = 0; l < L; ++l) {
                const double d = y.data[c * L + l] - mean;
                var += d * d / L;
            }
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(var - 1.0) < 1e-3);
        }
    }
    {
        // groups == 1: one statistic for the whole item.
        Tape t;
        const Tensor& y = t.val(ops::group_norm(t, t.leaf(x), 1, t.leaf(g1), t.leaf(o0), 1e-9));
        double mean = 0.0;
        for (Index i = 0; i < C * L; ++i) mean += y.data[i] / (C * L);
        CHECK(std::abs(mean) < 1e-6);
    }
}

TEST_CASE("group_norm matches brute-force per-group statistics") {
    Rng rng(37);
    const Tensor x = random_tensor({1, 4, 3}, rng, 1.5);
    const Tensor gain = random_tensor({4}, rng);
    const Tensor offset = random_tensor({4}, rng);
    const double eps = 1e-6;
    Tape t;
    const Tensor& y =
        t.val(ops::group_norm(t, t.leaf(x), 2, t.leaf(gain), t.leaf(offset), eps));

    for (Index gi = 0; gi < 2; ++gi) {
        double mean = 0.0, var = 0.0;
        for (Index c = gi * 2; c < gi * 2 + 2; ++c) {
            for (Index l = 0; l < 3; ++l) mean += x.data[c * 3 + l];
        }
        mean /= 6.0;
        for (Index c = gi * 2; c < gi * 2 + 2; ++c) {
            for (Index l = 0; l < 3; ++l) {
                const double d = x.data[c * 3 + l] - mean;
                var += d * d;
            }
        }
        var /= 6.0;
        for (Index c = gi * 2; c < gi * 2 + 2; ++c) {
            for (Index l = 0; l < 3; ++l) {
                const double ref =
                    (x.data[c * 3 + l] - mean) / std::sqrt(var + eps) * gain.data[c] +
                    offset.data[c];
                CHECK(y.data[c * 3 + l] == doctest::Approx(ref).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("dropout semantics") {
    Rng rng(41);
    const Tensor x = random_tensor({100}, rng);
    {
        Tape t;
        Var v = t.leaf(x);
        CHECK(ops::dropout(t, v, 0.0, true, &rng).id == v.id);
        CHECK(ops::dropout(t, v, 0.5, false, nullptr).id == v.id);
    }
    {
        // Inverted dropout preserves the mean: Monte Carlo at 1e5 elements.
        Rng r2(42);
        Tensor big({100000});
        for (double& v : big.data) v = 1.0 + 0.1 * r2.normal();
        double mean_in = 0.0;
        for (double v : big.data) mean_in += v / big.numel();
        Tape t;
        const Tensor& y = t.val(ops::dropout(t, t.leaf(big), 0.5, true, &r2));
        double mean_out = 0.0;
        for (double v : y.data) mean_out += v / y.numel();
        CHECK(std::abs(mean_out - mean_in) / std::abs(mean_in) < 0.02);
    }
    {
        Tape t;
        CHECK_THROWS_AS(ops::dropout(t, t.leaf(x), 1.0, true, &rng), std::invalid_argument);
    }
}

TEST_CASE("attention with a single token reduces to value-output projection") {
    Rng rng(43);
    const Index D = 6, H = 2;
    const Tensor x = random_tensor({1, 1, D}, rng);
    const Tensor wq = random_tensor({D, D}, rng), wk = random_tensor({D, D}, rng);
    const Tensor wv = random_tensor({D, D}, rng), wo = random_tensor({D, D}, rng);
    const Tensor bq = random_tensor({D}, rng), bk = random_tensor({D}, rng);
    const Tensor bv = random_tensor({D}, rng), bo = random_tensor({D}, rng);

    Tape t;
    Var y = ops::multi_head_self_attention(t, t.leaf(x), H, t.leaf(wq), t.leaf(bq), t.leaf(wk),
                                           t.leaf(bk), t.leaf(wv), t.leaf(bv), t.leaf(wo),
                                           t.leaf(bo), {});
    // softmax over one key is 1, so the context is exactly the value vector
    Var vproj = ops::linear(t, t.leaf(x), t.leaf(wv), t.leaf(bv));
    Var ref = ops::linear(t, vproj, t.leaf(wo), t.leaf(bo));
    CHECK(max_abs_diff(t.val(y), t.val(ref)) < 1e-12);
}

TEST_CASE("attention is constant across positions for identical tokens") {
    Rng rng(47);
    const Index D = 8, H = 4, T = 5;
    Tensor x({1, T, D});
    const Tensor tok = random_tensor({D}, rng);
    for (Index tt = 0; tt < T; ++tt) {
        std::copy_n(tok.ptr(), D, x.ptr() + tt * D);
    }
    Tape t;
    const Tensor wq = random_tensor({D, D}, rng), wk = random_tensor({D, D}, rng);
    const Tensor wv = random_tensor({D, D}, rng), wo = random_tensor({D, D}, rng);
    Var y = ops::multi_head_self_attention(t, t.leaf(x), H, t.leaf(wq), Var{}, t.leaf(wk), Var{},
                                           t.leaf(wv), Var{}, t.leaf(wo), Var{}, {});
    const Tensor& yv = t.val(y);
    for (Index tt = 1; tt < T; ++tt) {
        for (Index d = 0; d < D; ++d) {
            CHECK(yv.data[tt * D + d] == doctest::Approx(yv.data[d]).epsilon(1e-12));
        }
    }
}

TEST_CASE("single-head attention matches brute-force softmax(QK^T/sqrt(d))V") {
    Rng rng(53);
    const Index D = 4, T = 3;
    const Tensor x = random_tensor({1, T, D}, rng);
    const Tensor wq = random_tensor({D, D}, rng), wk = random_tensor({D, D}, rng);
    const Tensor wv = random_tensor({D, D}, rng), wo = random_tensor({D, D}, rng);

    Tape t;
    Var y = ops::multi_head_self_attention(t, t.leaf(x), 1, t.leaf(wq), Var{}, t.leaf(wk), Var{},
                                           t.leaf(wv), Var{}, t.leaf(wo), Var{}, {});

    // Brute force in plain loops.
    auto mat = [&](const Tensor& w, Index tt, Index d) {
        double acc = 0.0;
        for (Index i = 0; i < D; ++i) acc += x.data[tt * D + i] * w.data[d * D + i];
        return acc;
    };
    std::vector<std::vector<double>> q(T, std::vector<double>(D)), k = q, v = q, ctx = q;
    for (Index tt = 0; tt < T; ++tt) {
        for (Index d = 0; d < D; ++d) {
            q[tt][d] = mat(wq, tt, d);
            k[tt][d] = mat(wk, tt, d);
            v[tt][d] = mat(wv, tt, d);
        }
    }
    for (Index tq = 0; tq < T; ++tq) {
        std::vector<double> s(T);
        double mx = -1e300;
        for (Index tk = 0; tk < T; ++tk) {
            s[tk] = 0.0;
            for (Index d = 0; d < D; ++d) s[tk] += q[tq][d] * k[tk][d];
            s[tk] /= std::sqrt(static_cast<double>(D));
            mx = std::max(mx, s[tk]);
        }
        double z = 0.0;
        for (Index tk = 0; tk < T; ++tk) z += std::exp(s[tk] - mx);
        for (Index d = 0; d < D; ++d) {
            ctx[tq][d] = 0.0;
            for (Index tk = 0; tk < T; ++tk) {
                ctx[tq][d] += std::exp(s[tk] - mx) / z * v[tk][d];
            }
        }
    }
    for (Index tq = 0; tq < T; ++tq) {
        for (Index d = 0; d < D; ++d) {
            double ref = 0.0;
            for (Index i = 0; i < D; ++i) ref += ctx[tq][i] * wo.data[d * D + i];
            CHECK(t.val(y).data[tq * D + d] == doctest::Approx(ref).epsilon(1e-11));
        }
    }
}

TEST_CASE("attention masks keys past the valid length") {
    Rng rng(59);
    const Index D = 4, T = 6, VALID = 3;
    Tensor x = random_tensor({1, T, D}, rng);
    const Tensor wq = random_tensor({D, D}, rng), wk = random_tensor({D, D}, rng);
    const Tensor wv = random_tensor({D, D}, rng), wo = random_tensor({D, D}, rng);

    auto run = [&](const Tensor& input, Index time, std::vector<Index> valid) {
        Tape t;
        Var y = ops::multi_head_self_attention(t, t.leaf(input), 2, t.leaf(wq), Var{}, t.leaf(wk),
                                               Var{}, t.leaf(wv), Var{}, t.leaf(wo), Var{}, valid);
        Tensor out({time, D});
        std::copy_n(t.val(y).ptr(), time * D, out.ptr());
        return out;
    };
    // Garbage in the masked tail must not leak into valid query outputs.
    Tensor x_tail = x;
    for (Index i = VALID * D; i < T * D; ++i) x_tail.data[i] = 99.0;
    const Tensor a = run(x, T, {VALID});
    const Tensor b = run(x_tail, T, {VALID});
    for (Index i = 0; i < VALID * D; ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-12));
}

TEST_CASE("gradient checks across primitives, 10 seeds") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);

        // linear
        {
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::linear(t, v[0], v[1], v[2]);
                    return ops::weighted_sum(t, y, Tensor({3, 4}, std::vector<double>(12, 0.3)));
                },
                {random_tensor({3, 4}, rng), random_tensor({4, 4}, rng), random_tensor({4}, rng)});
            CHECK(err < 1e-5);
        }
        // conv1d with stride, padding, groups, bias
        {
            Rng wr = rng.fork("conv");
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::conv1d(t, v[0], v[1], v[2], 2, 2, 2);
                    Tensor wsum(t.val(y).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.1 * (i % 5) - 0.2;
                    return ops::weighted_sum(t, y, std::move(wsum));
                },
                {random_tensor({2, 4, 9}, wr), random_tensor({4, 2, 3}, wr),
                 random_tensor({4}, wr)});
            CHECK(err < 1e-4);
        }
        // layer_norm
        {
            Rng wr = rng.fork("ln");
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::layer_norm(t, v[0], v[1], v[2], 1e-5);
                    Tensor wsum(t.val(y).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.05 * (i % 7) - 0.1;
                    return ops::weighted_sum(t, y, std::move(wsum));
                },
                {random_tensor({3, 5}, wr), random_tensor({5}, wr), random_tensor({5}, wr)});
            CHECK(err < 1e-4);
        }
        // group_norm
        {
            Rng wr = rng.fork("gn");
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::group_norm(t, v[0], 2, v[1], v[2], 1e-5);
                    Tensor wsum(t.val(y).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.04 * (i % 3) - 0.05;
                    return ops::weighted_sum(t, y, std::move(wsum));
                },
                {random_tensor({2, 4, 3}, wr), random_tensor({4}, wr), random_tensor({4}, wr)});
            CHECK(err < 1e-4);
        }
        // gelu
        {
            Rng wr = rng.fork("gelu");
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    return ops::weighted_sum(t, ops::gelu(t, v[0]),
                                             Tensor({6}, {0.3, -0.2, 1.0, 0.5, -0.7, 0.1}));
                },
                {random_tensor({6}, wr)});
            CHECK(err < 1e-4);
        }
        // attention (all projections)
        {
            Rng wr = rng.fork("attn");
            const Index D = 4, T = 3;
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::multi_head_self_attention(t, v[0], 2, v[1], Var{}, v[2], Var{},
                                                           v[3], Var{}, v[4], Var{}, {});
                    Tensor wsum(t.val(y).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.07 * (i % 4) - 0.1;
                    return ops::weighted_sum(t, y, std::move(wsum));
                },
                {random_tensor({1, T, D}, wr), random_tensor({D, D}, wr),
                 random_tensor({D, D}, wr), random_tensor({D, D}, wr), random_tensor({D, D}, wr)});
            CHECK(err < 1e-4);
        }
        // softmax with masking
        {
            Rng wr = rng.fork("sm");
            const double err = gradient_check(
                [](Tape& t, const std::vector<Var>& v) {
                    Var y = ops::softmax_rows(t, v[0], {3, 4});
                    Tensor wsum(t.val(y).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.2 * (i % 3);
                    return ops::weighted_sum(t, y, std::move(wsum));
                },
                {random_tensor({2, 4}, wr)});
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("bmm transpose flags agree with manual matmuls") {
    Rng rng(61);
    const Index N = 2, M = 3, K = 4, P = 2;
    const Tensor a = random_tensor({N, M, K}, rng);
    const Tensor at = random_tensor({N, K, M}, rng);
    const Tensor b = random_tensor({N, K, P}, rng);
    const Tensor bt = random_tensor({N, P, K}, rng);

    auto ref = [&](const Tensor& ta_, const Tensor& tb_, bool fa, bool fb) {
        Tensor out({N, M, P});
        for (Index n = 0; n < N; ++n) {
            for (Index m = 0; m < M; ++m) {
                for (Index p = 0; p < P; ++p) {
                    double acc = 0.0;
                    for (Index k = 0; k < K; ++k) {
                        const double av = fa ? ta_.data[(n * K + k) * M + m]
                                             : ta_.data[(n * M + m) * K + k];
                        const double bv = fb ? tb_.data[(n * P + p) * K + k]
                                             : tb_.data[(n * K + k) * P + p];
                        acc += av * bv;
                    }
                    out.data[(n * M + m) * P + p] = acc;
                }
            }
        }
        return out;
    };

    for (int fa = 0; fa < 2; ++fa) {
        for (int fb = 0; fb < 2; ++fb) {
            Tape t;
            const Tensor& left = fa ? at : a;
            const Tensor& right = fb ? bt : b;
            Var y = ops::bmm(t, t.leaf(left), t.leaf(right), fa, fb);
            CHECK(max_abs_diff(t.val(y), ref(left, right, fa, fb)) < 1e-12);

            // And the backward against finite differences.
            const double err = gradient_check(
                [fa, fb](Tape& tt, const std::vector<Var>& v) {
                    Var y2 = ops::bmm(tt, v[0], v[1], fa, fb);
                    Tensor wsum(tt.val(y2).shape);
                    for (Index i = 0; i < wsum.numel(); ++i) wsum.data[i] = 0.11 * (i % 5) - 0.2;
                    return ops::weighted_sum(tt, y2, std::move(wsum));
                },
                {left, right});
            CHECK(err < 1e-5);
        }
    }
}

TEST_CASE("reshape-style ops round-trip and backprop") {
    Rng rng(67);
    const Tensor x = random_tensor({2, 3, 8}, rng);
    {
        Tape t;
        Var v = t.leaf(x);
        Var merged = ops::merge_heads(t, ops::split_heads(t, v, 4), 4);
        CHECK(max_abs_diff(t.val(merged), x) == 0.0);
        Var twice = ops::transpose_12(t, ops::transpose_12(t, v));
        CHECK(max_abs_diff(t.val(twice), x) == 0.0);
    }
    {
        const double err = gradient_check(
            [](Tape& t, const std::vector<Var>& v) {
                Var y = ops::concat_time(t, {v[0], v[1]});
                y = ops::slice_time(t, y, 1, 3);
                y = ops::select_frame(t, y, 2);
                return ops::weighted_sum(t, y, Tensor({1, 4}, {0.3, -1.0, 0.2, 0.6}));
            },
            {random_tensor({1, 2, 4}, rng), random_tensor({1, 2, 4}, rng)});
        CHECK(err < 1e-6);
    }
}
