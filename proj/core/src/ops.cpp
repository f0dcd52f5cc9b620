#include "spkvec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "spkvec/dot.hpp"
#include "spkvec/parallel.hpp"

namespace spkvec::ops {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Id the next node will get; lets backprop closures reference their own output.
Var next_var(const Tape& t) { return Var{static_cast<std::uint32_t>(t.size())}; }

// Dispatching to the pool is only worth it above a few tens of kiloflops.
void run_parallel(Index n, Index work, const std::function<void(Index, Index)>& fn) {
    if (work < (1u << 15) || n < 2) {
        fn(0, n);
    } else {
        parallel_for(n, fn);
    }
}

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x / 1.4142135623730951)); }
double gauss_pdf(double x) { return std::exp(-0.5 * x * x) / 2.5066282746310002; }

void check_rank3(const Tensor& x, const char* op) {
    if (x.rank() != 3) {
        throw std::invalid_argument(std::string(op) + ": expected rank-3 input, got " +
                                    shape_str(x.shape));
    }
}

// c (N x M x P) += op_a(a_n) * op_b(b_n) for n in [n0, n1), where op_a/op_b
// optionally transpose the trailing two dims.
void bmm_accum(double* c, const double* a, const double* b, Index n0, Index n1, Index M, Index K,
               Index P, bool ta, bool tb) {
    for (Index n = n0; n < n1; ++n) {
        const double* an = a + n * M * K;
        const double* bn = b + n * K * P;
        double* cn = c + n * M * P;
        if (!ta && !tb) {
            for (Index m = 0; m < M; ++m) {
                const double* arow = an + m * K;
                double* crow = cn + m * P;
                for (Index k = 0; k < K; ++k) {
                    axpy(crow, arow[k], bn + k * P, P);
                }
            }
        } else if (!ta && tb) {
            for (Index m = 0; m < M; ++m) {
                const double* arow = an + m * K;
                double* crow = cn + m * P;
                for (Index p = 0; p < P; ++p) {
                    crow[p] += dot(arow, bn + p * K, K);
                }
            }
        } else if (ta && !tb) {
            for (Index k = 0; k < K; ++k) {
                const double* arow = an + k * M;
                const double* brow = bn + k * P;
                for (Index m = 0; m < M; ++m) {
                    axpy(cn + m * P, arow[m], brow, P);
                }
            }
        } else {
            for (Index m = 0; m < M; ++m) {
                double* crow = cn + m * P;
                for (Index p = 0; p < P; ++p) {
                    double acc = 0.0;
                    for (Index k = 0; k < K; ++k) acc += an[k * M + m] * bn[p * K + k];
                    crow[p] += acc;
                }
            }
        }
    }
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    check_same_shape(av, t.val(b), "add");
    Tensor out = av;
    const Tensor& bv = t.val(b);
    for (Index i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    const Var o = next_var(t);
    return t.node(std::move(out), ng, [&t, a, b, o] {
        const Tensor& g = *t.grad_if(o);
        for (Var in : {a, b}) {
            if (!t.needs_grad(in)) continue;
            Tensor& d = t.grad(in);
            for (Index i = 0; i < g.numel(); ++i) d.data[i] += g.data[i];
        }
    });
}

Var scale(Tape& t, Var x, double c) {
    Tensor out = t.val(x);
    for (double& v : out.data) v *= c;
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, c, o] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        Tensor& d = t.grad(x);
        for (Index i = 0; i < g.numel(); ++i) d.data[i] += c * g.data[i];
    });
}

Var mul_mask(Tape& t, Var x, Tensor mask) {
    const Tensor& xv = t.val(x);
    check_same_shape(xv, mask, "mul_mask");
    Tensor out(xv.shape);
    for (Index i = 0; i < out.numel(); ++i) out.data[i] = xv.data[i] * mask.data[i];
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, o, m = std::move(mask)] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        Tensor& d = t.grad(x);
        for (Index i = 0; i < g.numel(); ++i) d.data[i] += g.data[i] * m.data[i];
    });
}

Var gelu(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape);
    const Index n = out.numel();
    run_parallel(n, n * 8, [&](Index i0, Index i1) {
        for (Index i = i0; i < i1; ++i) out.data[i] = xv.data[i] * gauss_cdf(xv.data[i]);
    });
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, o] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(x);
        Tensor& d = t.grad(x);
        const Index n2 = g.numel();
        run_parallel(n2, n2 * 8, [&](Index i0, Index i1) {
            for (Index i = i0; i < i1; ++i) {
                const double xi = xv2.data[i];
                d.data[i] += g.data[i] * (gauss_cdf(xi) + xi * gauss_pdf(xi));
            }
        });
    });
}

Var linear(Tape& t, Var x, Var weight, Var bias) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(weight);
    if (xv.rank() < 1 || wv.rank() != 2) {
        throw std::invalid_argument("linear: need input with trailing feature dim and 2-d weight, got " +
                                    shape_str(xv.shape) + " and " + shape_str(wv.shape));
    }
    const Index in_dim = xv.shape.back();
    const Index out_dim = wv.dim(0);
    if (wv.dim(1) != in_dim) {
        throw std::invalid_argument("linear: weight " + shape_str(wv.shape) +
                                    " does not match input " + shape_str(xv.shape));
    }
    if (bias.valid() && t.val(bias).numel() != out_dim) {
        throw std::invalid_argument("linear: bias " + shape_str(t.val(bias).shape) +
                                    " does not match weight " + shape_str(wv.shape));
    }
    const Index rows = xv.numel() / in_dim;
    std::vector<Index> out_shape = xv.shape;
    out_shape.back() = out_dim;
    Tensor out(out_shape);
    const double* bp = bias.valid() ? t.val(bias).ptr() : nullptr;
    run_parallel(rows, rows * out_dim * in_dim, [&](Index r0, Index r1) {
        for (Index r = r0; r < r1; ++r) {
            const double* xrow = xv.ptr() + r * in_dim;
            double* yrow = out.ptr() + r * out_dim;
            for (Index oc = 0; oc < out_dim; ++oc) {
                const double base = bp ? bp[oc] : 0.0;
                yrow[oc] = base + dot(xrow, wv.ptr() + oc * in_dim, in_dim);
            }
        }
    });
    const bool ng = t.needs_grad(x) || t.needs_grad(weight) || (bias.valid() && t.needs_grad(bias));
    const Var o = next_var(t);
    return t.node(std::move(out), ng, [&t, x, weight, bias, o, rows, in_dim, out_dim] {
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(x);
        const Tensor& wv2 = t.val(weight);
        if (t.needs_grad(x)) {
            Tensor& dx = t.grad(x);
            run_parallel(rows, rows * out_dim * in_dim, [&](Index r0, Index r1) {
                for (Index r = r0; r < r1; ++r) {
                    const double* grow = g.ptr() + r * out_dim;
                    double* dxrow = dx.ptr() + r * in_dim;
                    for (Index oc = 0; oc < out_dim; ++oc) {
                        const double gv = grow[oc];
                        if (gv == 0.0) continue;
                        axpy(dxrow, gv, wv2.ptr() + oc * in_dim, in_dim);
                    }
                }
            });
        }
        if (t.needs_grad(weight)) {
            Tensor& dw = t.grad(weight);
            run_parallel(out_dim, rows * out_dim * in_dim, [&](Index o0, Index o1) {
                for (Index oc = o0; oc < o1; ++oc) {
                    double* dwrow = dw.ptr() + oc * in_dim;
                    for (Index r = 0; r < rows; ++r) {
                        const double gv = g.data[r * out_dim + oc];
                        if (gv == 0.0) continue;
                        axpy(dwrow, gv, xv2.ptr() + r * in_dim, in_dim);
                    }
                }
            });
        }
        if (bias.valid() && t.needs_grad(bias)) {
            Tensor& db = t.grad(bias);
            for (Index r = 0; r < rows; ++r) {
                const double* grow = g.ptr() + r * out_dim;
                for (Index oc = 0; oc < out_dim; ++oc) db.data[oc] += grow[oc];
            }
        }
    });
}

Var conv1d(Tape& t, Var x, Var weight, Var bias, Index stride, Index padding, Index groups) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(weight);
    check_rank3(xv, "conv1d");
    if (wv.rank() != 3) {
        throw std::invalid_argument("conv1d: expected rank-3 weight, got " + shape_str(wv.shape));
    }
    const Index batch = xv.dim(0), c_in = xv.dim(1), length = xv.dim(2);
    const Index c_out = wv.dim(0), k = wv.dim(2);
    if (stride == 0) throw std::invalid_argument("conv1d: stride must be >= 1");
    if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
        throw std::invalid_argument("conv1d: channels in " + shape_str(xv.shape) + " / out " +
                                    shape_str(wv.shape) + " not divisible by groups=" +
                                    std::to_string(groups));
    }
    if (wv.dim(1) != c_in / groups) {
        throw std::invalid_argument("conv1d: weight " + shape_str(wv.shape) +
                                    " does not match input " + shape_str(xv.shape) + " with groups=" +
                                    std::to_string(groups));
    }
    if (length + 2 * padding < k) {
        throw std::invalid_argument("conv1d: input length " + std::to_string(length) + " with padding " +
                                    std::to_string(padding) + " is shorter than kernel " +
                                    std::to_string(k));
    }
    if (bias.valid() && t.val(bias).numel() != c_out) {
        throw std::invalid_argument("conv1d: bias " + shape_str(t.val(bias).shape) +
                                    " does not match out channels " + std::to_string(c_out));
    }
    const Index len_out = (length + 2 * padding - k) / stride + 1;
    const Index cg = c_in / groups;          // in channels per group
    const Index og = c_out / groups;         // out channels per group
    Tensor out({batch, c_out, len_out});
    const double* bp = bias.valid() ? t.val(bias).ptr() : nullptr;

    const Index work = batch * c_out * len_out * cg * k;
    run_parallel(batch * c_out, work, [&](Index j0, Index j1) {
        for (Index j = j0; j < j1; ++j) {
            const Index b = j / c_out, oc = j % c_out;
            const Index gi = oc / og;
            double* yrow = out.ptr() + (b * c_out + oc) * len_out;
            if (bp) {
                for (Index p = 0; p < len_out; ++p) yrow[p] = bp[oc];
            }
            for (Index ic = 0; ic < cg; ++ic) {
                const double* xrow = xv.ptr() + (b * c_in + gi * cg + ic) * length;
                const double* wrow = wv.ptr() + (oc * cg + ic) * k;
                for (Index kk = 0; kk < k; ++kk) {
                    const double wvv = wrow[kk];
                    if (wvv == 0.0) continue;
                    // valid output range for tap kk: 0 <= p*stride + kk - padding < length
                    const Index p_lo = (padding > kk) ? (padding - kk + stride - 1) / stride : 0;
                    const Index last_in = length - 1 + padding;
                    if (kk > last_in) continue;
                    const Index p_hi = std::min(len_out, (last_in - kk) / stride + 1);
                    const double* xs = xrow + p_lo * stride + kk - padding;
                    if (p_hi <= p_lo) continue;
                    if (stride == 1) {
                        axpy(yrow + p_lo, wvv, xs, p_hi - p_lo);
                    } else {
                        for (Index p = p_lo; p < p_hi; ++p, xs += stride) yrow[p] += wvv * *xs;
                    }
                }
            }
        }
    });

    const bool ng = t.needs_grad(x) || t.needs_grad(weight) || (bias.valid() && t.needs_grad(bias));
    const Var o = next_var(t);
    return t.node(std::move(out), ng,
                  [&t, x, weight, bias, o, stride, padding, groups, batch, c_in, c_out, length, k,
                   len_out, cg, og] {
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(x);
        const Tensor& wv2 = t.val(weight);
        const Index work = batch * c_out * len_out * cg * k;
        if (t.needs_grad(x)) {
            Tensor& dx = t.grad(x);
            run_parallel(batch * c_in, work, [&](Index j0, Index j1) {
                for (Index j = j0; j < j1; ++j) {
                    const Index b = j / c_in, ic = j % c_in;
                    const Index gi = ic / cg, icg = ic % cg;
                    double* dxrow = dx.ptr() + (b * c_in + ic) * length;
                    for (Index oc = gi * og; oc < (gi + 1) * og; ++oc) {
                        const double* grow = g.ptr() + (b * c_out + oc) * len_out;
                        const double* wrow = wv2.ptr() + (oc * cg + icg) * k;
                        for (Index kk = 0; kk < k; ++kk) {
                            const double wvv = wrow[kk];
                            if (wvv == 0.0) continue;
                            const Index p_lo = (padding > kk) ? (padding - kk + stride - 1) / stride : 0;
                            const Index last_in = length - 1 + padding;
                            if (kk > last_in) continue;
                            const Index p_hi = std::min(len_out, (last_in - kk) / stride + 1);
                            double* xs = dxrow + p_lo * stride + kk - padding;
                            if (p_hi <= p_lo) continue;
                            if (stride == 1) {
                                axpy(xs, wvv, grow + p_lo, p_hi - p_lo);
                            } else {
                                for (Index p = p_lo; p < p_hi; ++p, xs += stride) *xs += wvv * grow[p];
                            }
                        }
                    }
                }
            });
        }
        if (t.needs_grad(weight)) {
            Tensor& dw = t.grad(weight);
            run_parallel(c_out, work, [&](Index o0, Index o1) {
                for (Index oc = o0; oc < o1; ++oc) {
                    const Index gi = oc / og;
                    for (Index b = 0; b < batch; ++b) {
                        const double* grow = g.ptr() + (b * c_out + oc) * len_out;
                        for (Index ic = 0; ic < cg; ++ic) {
                            const double* xrow = xv2.ptr() + (b * c_in + gi * cg + ic) * length;
                            double* dwrow = dw.ptr() + (oc * cg + ic) * k;
                            for (Index kk = 0; kk < k; ++kk) {
                                const Index p_lo =
                                    (padding > kk) ? (padding - kk + stride - 1) / stride : 0;
                                const Index last_in = length - 1 + padding;
                                if (kk > last_in) continue;
                                const Index p_hi = std::min(len_out, (last_in - kk) / stride + 1);
                                const double* xs = xrow + p_lo * stride + kk - padding;
                                if (p_hi <= p_lo) continue;
                                if (stride == 1) {
                                    dwrow[kk] += dot(grow + p_lo, xs, p_hi - p_lo);
                                } else {
                                    double acc = 0.0;
                                    for (Index p = p_lo; p < p_hi; ++p, xs += stride)
                                        acc += grow[p] * *xs;
                                    dwrow[kk] += acc;
                                }
                            }
                        }
                    }
                }
            });
        }
        if (bias.valid() && t.needs_grad(bias)) {
            Tensor& db = t.grad(bias);
            for (Index b = 0; b < batch; ++b) {
                for (Index oc = 0; oc < c_out; ++oc) {
                    const double* grow = g.ptr() + (b * c_out + oc) * len_out;
                    double acc = 0.0;
                    for (Index p = 0; p < len_out; ++p) acc += grow[p];
                    db.data[oc] += acc;
                }
            }
        }
    });
}

Var layer_norm(Tape& t, Var x, Var gain, Var offset, double eps) {
    const Tensor& xv = t.val(x);
    if (xv.rank() < 1) throw std::invalid_argument("layer_norm: empty shape");
    const Index dim = xv.shape.back();
    if (t.val(gain).numel() != dim || t.val(offset).numel() != dim) {
        throw std::invalid_argument("layer_norm: gain/offset do not match feature dim " +
                                    std::to_string(dim));
    }
    const Index rows = xv.numel() / dim;
    Tensor out(xv.shape);
    std::vector<double> mean(rows), invstd(rows);
    const Tensor& gv = t.val(gain);
    const Tensor& ov = t.val(offset);
    run_parallel(rows, rows * dim * 4, [&](Index r0, Index r1) {
        for (Index r = r0; r < r1; ++r) {
            const double* xrow = xv.ptr() + r * dim;
            double m = 0.0;
            for (Index i = 0; i < dim; ++i) m += xrow[i];
            m /= static_cast<double>(dim);
            double var = 0.0;
            for (Index i = 0; i < dim; ++i) {
                const double d = xrow[i] - m;
                var += d * d;
            }
            var /= static_cast<double>(dim);
            const double is = 1.0 / std::sqrt(var + eps);
            mean[r] = m;
            invstd[r] = is;
            double* yrow = out.ptr() + r * dim;
            for (Index i = 0; i < dim; ++i)
                yrow[i] = (xrow[i] - m) * is * gv.data[i] + ov.data[i];
        }
    });
    const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(offset);
    const Var o = next_var(t);
    return t.node(std::move(out), ng,
                  [&t, x, gain, offset, o, rows, dim, mean = std::move(mean),
                   invstd = std::move(invstd)] {
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(x);
        const Tensor& gv2 = t.val(gain);
        if (t.needs_grad(x)) {
            Tensor& dx = t.grad(x);
            run_parallel(rows, rows * dim * 6, [&](Index r0, Index r1) {
                for (Index r = r0; r < r1; ++r) {
                    const double* xrow = xv2.ptr() + r * dim;
                    const double* grow = g.ptr() + r * dim;
                    double* dxrow = dx.ptr() + r * dim;
                    const double m = mean[r], is = invstd[r];
                    double sum_dyh = 0.0, sum_dyh_xh = 0.0;
                    for (Index i = 0; i < dim; ++i) {
                        const double xh = (xrow[i] - m) * is;
                        const double dyh = grow[i] * gv2.data[i];
                        sum_dyh += dyh;
                        sum_dyh_xh += dyh * xh;
                    }
                    const double inv_n = 1.0 / static_cast<double>(dim);
                    for (Index i = 0; i < dim; ++i) {
                        const double xh = (xrow[i] - m) * is;
                        const double dyh = grow[i] * gv2.data[i];
                        dxrow[i] += is * (dyh - inv_n * sum_dyh - xh * inv_n * sum_dyh_xh);
                    }
                }
            });
        }
        if (t.needs_grad(gain)) {
            Tensor& dg = t.grad(gain);
            for (Index r = 0; r < rows; ++r) {
                const double* xrow = xv2.ptr() + r * dim;
                const double* grow = g.ptr() + r * dim;
                const double m = mean[r], is = invstd[r];
                for (Index i = 0; i < dim; ++i) dg.data[i] += grow[i] * (xrow[i] - m) * is;
            }
        }
        if (t.needs_grad(offset)) {
            Tensor& doff = t.grad(offset);
            for (Index r = 0; r < rows; ++r) {
                const double* grow = g.ptr() + r * dim;
                for (Index i = 0; i < dim; ++i) doff.data[i] += grow[i];
            }
        }
    });
}

Var group_norm(Tape& t, Var x, Index groups, Var gain, Var offset, double eps) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "group_norm");
    const Index batch = xv.dim(0), channels = xv.dim(1), length = xv.dim(2);
    if (groups == 0 || channels % groups != 0) {
        throw std::invalid_argument("group_norm: channels " + std::to_string(channels) +
                                    " not divisible by groups " + std::to_string(groups));
    }
    if (t.val(gain).numel() != channels || t.val(offset).numel() != channels) {
        throw std::invalid_argument("group_norm: gain/offset do not match channels " +
                                    std::to_string(channels));
    }
    const Index cg = channels / groups;
    const Index block = cg * length;
    const Index nblocks = batch * groups;
    Tensor out(xv.shape);
    std::vector<double> mean(nblocks), invstd(nblocks);
    const Tensor& gv = t.val(gain);
    const Tensor& ov = t.val(offset);
    run_parallel(nblocks, nblocks * block * 4, [&](Index n0, Index n1) {
        for (Index n = n0; n < n1; ++n) {
            const Index b = n / groups, gi = n % groups;
            const double* xb = xv.ptr() + (b * channels + gi * cg) * length;
            double m = 0.0;
            for (Index i = 0; i < block; ++i) m += xb[i];
            m /= static_cast<double>(block);
            double var = 0.0;
            for (Index i = 0; i < block; ++i) {
                const double d = xb[i] - m;
                var += d * d;
            }
            var /= static_cast<double>(block);
            const double is = 1.0 / std::sqrt(var + eps);
            mean[n] = m;
            invstd[n] = is;
            double* yb = out.ptr() + (b * channels + gi * cg) * length;
            for (Index c = 0; c < cg; ++c) {
                const double gc = gv.data[gi * cg + c], oc = ov.data[gi * cg + c];
                for (Index l = 0; l < length; ++l)
                    yb[c * length + l] = (xb[c * length + l] - m) * is * gc + oc;
            }
        }
    });
    const bool ng = t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(offset);
    const Var o = next_var(t);
    return t.node(std::move(out), ng,
                  [&t, x, gain, offset, o, batch, channels, length, groups, cg, block,
                   mean = std::move(mean), invstd = std::move(invstd)] {
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(x);
        const Tensor& gv2 = t.val(gain);
        const Index nblocks = batch * groups;
        if (t.needs_grad(x)) {
            Tensor& dx = t.grad(x);
            run_parallel(nblocks, nblocks * block * 6, [&](Index n0, Index n1) {
                for (Index n = n0; n < n1; ++n) {
                    const Index b = n / groups, gi = n % groups;
                    const double* xb = xv2.ptr() + (b * channels + gi * cg) * length;
                    const double* gb = g.ptr() + (b * channels + gi * cg) * length;
                    double* dxb = dx.ptr() + (b * channels + gi * cg) * length;
                    const double m = mean[n], is = invstd[n];
                    double sum_dyh = 0.0, sum_dyh_xh = 0.0;
                    for (Index c = 0; c < cg; ++c) {
                        const double gc = gv2.data[gi * cg + c];
                        for (Index l = 0; l < length; ++l) {
                            const Index i = c * length + l;
                            const double xh = (xb[i] - m) * is;
                            const double dyh = gb[i] * gc;
                            sum_dyh += dyh;
                            sum_dyh_xh += dyh * xh;
                        }
                    }
                    const double inv_n = 1.0 / static_cast<double>(block);
                    for (Index c = 0; c < cg; ++c) {
                        const double gc = gv2.data[gi * cg + c];
                        for (Index l = 0; l < length; ++l) {
                            const Index i = c * length + l;
                            const double xh = (xb[i] - m) * is;
                            const double dyh = gb[i] * gc;
                            dxb[i] += is * (dyh - inv_n * sum_dyh - xh * inv_n * sum_dyh_xh);
                        }
                    }
                }
            });
        }
        if (t.needs_grad(gain) || t.needs_grad(offset)) {
            Tensor* dg = t.needs_grad(gain) ? &t.grad(gain) : nullptr;
            Tensor* doff = t.needs_grad(offset) ? &t.grad(offset) : nullptr;
            for (Index b = 0; b < batch; ++b) {
                for (Index c = 0; c < channels; ++c) {
                    const Index n = b * groups + c / cg;
                    const double m = mean[n], is = invstd[n];
                    const double* xrow = xv2.ptr() + (b * channels + c) * length;
                    const double* grow = g.ptr() + (b * channels + c) * length;
                    double acc_g = 0.0, acc_o = 0.0;
                    for (Index l = 0; l < length; ++l) {
                        acc_g += grow[l] * (xrow[l] - m) * is;
                        acc_o += grow[l];
                    }
                    if (dg) dg->data[c] += acc_g;
                    if (doff) doff->data[c] += acc_o;
                }
            }
        }
    });
}

Var dropout(Tape& t, Var x, double p, bool training, Rng* rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("dropout: probability must satisfy 0 <= p < 1, got " +
                                    std::to_string(p));
    }
    if (!training || p == 0.0) return x;
    if (rng == nullptr) throw std::invalid_argument("dropout: train mode requires a generator");
    const Tensor& xv = t.val(x);
    Tensor mask(xv.shape);
    const double keep_scale = 1.0 / (1.0 - p);
    for (Index i = 0; i < mask.numel(); ++i) mask.data[i] = rng->bernoulli(p) ? 0.0 : keep_scale;
    return mul_mask(t, x, std::move(mask));
}

Var softmax_rows(Tape& t, Var x, const std::vector<Index>& row_valid) {
    const Tensor& xv = t.val(x);
    if (xv.rank() < 1) throw std::invalid_argument("softmax: empty shape");
    const Index cols = xv.shape.back();
    const Index rows = xv.numel() / cols;
    if (!row_valid.empty() && row_valid.size() != rows) {
        throw std::invalid_argument("softmax: row_valid size " + std::to_string(row_valid.size()) +
                                    " does not match rows " + std::to_string(rows));
    }
    for (Index r = 0; r < row_valid.size(); ++r) {
        if (row_valid[r] == 0 || row_valid[r] > cols) {
            throw std::invalid_argument("softmax: row " + std::to_string(r) +
                                        " has invalid valid-count " + std::to_string(row_valid[r]));
        }
    }
    Tensor out(xv.shape);
    run_parallel(rows, rows * cols * 4, [&](Index r0, Index r1) {
        for (Index r = r0; r < r1; ++r) {
            const Index v = row_valid.empty() ? cols : row_valid[r];
            const double* xrow = xv.ptr() + r * cols;
            double* yrow = out.ptr() + r * cols;
            double mx = xrow[0];
            for (Index c = 1; c < v; ++c) mx = std::max(mx, xrow[c]);
            double z = 0.0;
            for (Index c = 0; c < v; ++c) {
                yrow[c] = std::exp(xrow[c] - mx);
                z += yrow[c];
            }
            const double inv_z = 1.0 / z;
            for (Index c = 0; c < v; ++c) yrow[c] *= inv_z;
            for (Index c = v; c < cols; ++c) yrow[c] = 0.0;
        }
    });
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, o, rows, cols, rv = row_valid] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        const Tensor& p = t.val(o);
        Tensor& dx = t.grad(x);
        run_parallel(rows, rows * cols * 4, [&](Index r0, Index r1) {
            for (Index r = r0; r < r1; ++r) {
                const Index v = rv.empty() ? cols : rv[r];
                const double* prow = p.ptr() + r * cols;
                const double* grow = g.ptr() + r * cols;
                double* dxrow = dx.ptr() + r * cols;
                double dot = 0.0;
                for (Index c = 0; c < v; ++c) dot += grow[c] * prow[c];
                for (Index c = 0; c < v; ++c) dxrow[c] += prow[c] * (grow[c] - dot);
            }
        });
    });
}

Var bmm(Tape& t, Var a, Var b, bool trans_a, bool trans_b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check_rank3(av, "bmm");
    check_rank3(bv, "bmm");
    const Index n = av.dim(0);
    if (bv.dim(0) != n) {
        throw std::invalid_argument("bmm: batch mismatch " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    }
    const Index m = trans_a ? av.dim(2) : av.dim(1);
    const Index ka = trans_a ? av.dim(1) : av.dim(2);
    const Index kb = trans_b ? bv.dim(2) : bv.dim(1);
    const Index p = trans_b ? bv.dim(1) : bv.dim(2);
    if (ka != kb) {
        throw std::invalid_argument("bmm: inner dim mismatch " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    }
    Tensor out({n, m, p});
    const Index work = n * m * ka * p;
    run_parallel(n, work, [&](Index n0, Index n1) {
        bmm_accum(out.ptr(), av.ptr(), bv.ptr(), n0, n1, m, ka, p, trans_a, trans_b);
    });
    const bool ng = t.needs_grad(a) || t.needs_grad(b);
    const Var o = next_var(t);
    return t.node(std::move(out), ng, [&t, a, b, o, trans_a, trans_b, n, m, ka, p] {
        const Tensor& g = *t.grad_if(o);
        const Index work = n * m * ka * p;
        if (t.needs_grad(a)) {
            Tensor& da = t.grad(a);
            const Tensor& bv2 = t.val(b);
            run_parallel(n, work, [&](Index n0, Index n1) {
                if (!trans_a) {
                    // dA = dC * B^T
                    bmm_accum(da.ptr(), g.ptr(), bv2.ptr(), n0, n1, m, p, ka, false, !trans_b);
                } else {
                    // a stores A^T; dA^T = B * dC^T
                    bmm_accum(da.ptr(), bv2.ptr(), g.ptr(), n0, n1, ka, p, m, trans_b, true);
                }
            });
        }
        if (t.needs_grad(b)) {
            Tensor& db = t.grad(b);
            const Tensor& av2 = t.val(a);
            run_parallel(n, work, [&](Index n0, Index n1) {
                if (!trans_b) {
                    // dB = A^T * dC
                    bmm_accum(db.ptr(), av2.ptr(), g.ptr(), n0, n1, ka, m, p, !trans_a, false);
                } else {
                    // b stores B^T; dB^T = dC^T * A
                    bmm_accum(db.ptr(), g.ptr(), av2.ptr(), n0, n1, p, m, ka, true, trans_a);
                }
            });
        }
    });
}

namespace {

// Shared machinery for pure index permutations: forward copies, backward
// scatters the cosets back.
Var permute_op(Tape& t, Var x, Tensor out, std::function<Index(Index)> src_of_dst) {
    const Tensor& xv = t.val(x);
    for (Index i = 0; i < out.numel(); ++i) out.data[i] = xv.data[src_of_dst(i)];
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, o, f = std::move(src_of_dst)] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        Tensor& dx = t.grad(x);
        for (Index i = 0; i < g.numel(); ++i) dx.data[f(i)] += g.data[i];
    });
}

}  // namespace

Var split_heads(Tape& t, Var x, Index heads) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "split_heads");
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("split_heads: dim " + std::to_string(dim) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    const Index dh = dim / heads;
    Tensor out({batch * heads, time, dh});
    return permute_op(t, x, std::move(out), [=](Index i) {
        const Index j = i % dh;
        const Index tt = (i / dh) % time;
        const Index bh = i / (dh * time);
        const Index b = bh / heads, h = bh % heads;
        return (b * time + tt) * dim + h * dh + j;
    });
}

Var merge_heads(Tape& t, Var x, Index heads) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "merge_heads");
    const Index bh = xv.dim(0), time = xv.dim(1), dh = xv.dim(2);
    if (heads == 0 || bh % heads != 0) {
        throw std::invalid_argument("merge_heads: batch*heads " + std::to_string(bh) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    const Index batch = bh / heads;
    const Index dim = dh * heads;
    Tensor out({batch, time, dim});
    return permute_op(t, x, std::move(out), [=](Index i) {
        const Index d = i % dim;
        const Index tt = (i / dim) % time;
        const Index b = i / (dim * time);
        const Index h = d / dh, j = d % dh;
        return ((b * heads + h) * time + tt) * dh + j;
    });
}

Var transpose_12(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "transpose_12");
    const Index batch = xv.dim(0), d1 = xv.dim(1), d2 = xv.dim(2);
    Tensor out({batch, d2, d1});
    return permute_op(t, x, std::move(out), [=](Index i) {
        const Index a = i % d1;
        const Index b2 = (i / d1) % d2;
        const Index b = i / (d1 * d2);
        return (b * d1 + a) * d2 + b2;
    });
}

Var concat_time(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_time: no parts");
    const Tensor& first = t.val(parts[0]);
    check_rank3(first, "concat_time");
    const Index batch = first.dim(0), dim = first.dim(2);
    Index total = 0;
    bool ng = false;
    for (Var v : parts) {
        const Tensor& pv = t.val(v);
        check_rank3(pv, "concat_time");
        if (pv.dim(0) != batch || pv.dim(2) != dim) {
            throw std::invalid_argument("concat_time: part " + shape_str(pv.shape) +
                                        " incompatible with " + shape_str(first.shape));
        }
        total += pv.dim(1);
        ng = ng || t.needs_grad(v);
    }
    Tensor out({batch, total, dim});
    Index off = 0;
    for (Var v : parts) {
        const Tensor& pv = t.val(v);
        const Index ti = pv.dim(1);
        for (Index b = 0; b < batch; ++b) {
            std::copy_n(pv.ptr() + b * ti * dim, ti * dim, out.ptr() + (b * total + off) * dim);
        }
        off += ti;
    }
    const Var o = next_var(t);
    return t.node(std::move(out), ng, [&t, ps = parts, o, batch, total, dim] {
        const Tensor& g = *t.grad_if(o);
        Index off2 = 0;
        for (Var v : ps) {
            const Index ti = t.val(v).dim(1);
            if (t.needs_grad(v)) {
                Tensor& dv = t.grad(v);
                for (Index b = 0; b < batch; ++b) {
                    const double* src = g.ptr() + (b * total + off2) * dim;
                    double* dst = dv.ptr() + b * ti * dim;
                    for (Index i = 0; i < ti * dim; ++i) dst[i] += src[i];
                }
            }
            off2 += ti;
        }
    });
}

Var slice_time(Tape& t, Var x, Index start, Index length) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "slice_time");
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);
    if (start + length > time) {
        throw std::invalid_argument("slice_time: [" + std::to_string(start) + ", " +
                                    std::to_string(start + length) + ") exceeds time " +
                                    std::to_string(time));
    }
    Tensor out({batch, length, dim});
    return permute_op(t, x, std::move(out), [=](Index i) {
        const Index d = i % dim;
        const Index tt = (i / dim) % length;
        const Index b = i / (dim * length);
        return (b * time + start + tt) * dim + d;
    });
}

Var select_frame(Tape& t, Var x, Index frame) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "select_frame");
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);
    if (frame >= time) {
        throw std::invalid_argument("select_frame: frame " + std::to_string(frame) +
                                    " out of range for time " + std::to_string(time));
    }
    Tensor out({batch, dim});
    return permute_op(t, x, std::move(out), [=](Index i) {
        const Index d = i % dim;
        const Index b = i / dim;
        return (b * time + frame) * dim + d;
    });
}

Var weighted_sum(Tape& t, Var x, Tensor weights) {
    const Tensor& xv = t.val(x);
    check_same_shape(xv, weights, "weighted_sum");
    double acc = 0.0;
    for (Index i = 0; i < xv.numel(); ++i) acc += xv.data[i] * weights.data[i];
    const Var o = next_var(t);
    return t.node(Tensor::scalar(acc), t.needs_grad(x), [&t, x, o, w = std::move(weights)] {
        if (!t.needs_grad(x)) return;
        const double gs = t.grad_if(o)->data[0];
        Tensor& dx = t.grad(x);
        for (Index i = 0; i < dx.numel(); ++i) dx.data[i] += gs * w.data[i];
    });
}

Var multi_head_self_attention(Tape& t, Var x, Index heads, Var wq, Var bq, Var wk, Var bk, Var wv,
                              Var bv, Var wo, Var bo, const std::vector<Index>& valid_lengths) {
    const Tensor& xv = t.val(x);
    check_rank3(xv, "attention");
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("attention: dim " + std::to_string(dim) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    if (!valid_lengths.empty() && valid_lengths.size() != batch) {
        throw std::invalid_argument("attention: valid_lengths size mismatch");
    }
    const Index dh = dim / heads;
    Var q = split_heads(t, linear(t, x, wq, bq), heads);
    Var k = split_heads(t, linear(t, x, wk, bk), heads);
    Var v = split_heads(t, linear(t, x, wv, bv), heads);
    Var scores = scale(t, bmm(t, q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Index> row_valid;
    if (!valid_lengths.empty()) {
        row_valid.reserve(batch * heads * time);
        for (Index b = 0; b < batch; ++b) {
            for (Index h = 0; h < heads; ++h) {
                for (Index tq = 0; tq < time; ++tq) row_valid.push_back(valid_lengths[b]);
            }
        }
    }
    Var probs = softmax_rows(t, scores, row_valid);
    Var ctx = merge_heads(t, bmm(t, probs, v, false, false), heads);
    return linear(t, ctx, wo, bo);
}

Var cross_entropy(Tape& t, Var logits, const std::vector<Index>& targets) {
    const Tensor& zv = t.val(logits);
    if (zv.rank() != 2) {
        throw std::invalid_argument("cross_entropy: expected B x C logits, got " +
                                    shape_str(zv.shape));
    }
    const Index batch = zv.dim(0), classes = zv.dim(1);
    if (targets.size() != batch) {
        throw std::invalid_argument("cross_entropy: targets size " + std::to_string(targets.size()) +
                                    " does not match batch " + std::to_string(batch));
    }
    for (Index b = 0; b < batch; ++b) {
        if (targets[b] >= classes) {
            throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[b]) +
                                        " out of range for " + std::to_string(classes) + " classes");
        }
    }
    double loss = 0.0;
    for (Index b = 0; b < batch; ++b) {
        const double* row = zv.ptr() + b * classes;
        double mx = row[0];
        for (Index c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (Index c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        loss += mx + std::log(z) - row[targets[b]];
    }
    loss /= static_cast<double>(batch);
    const Var o = next_var(t);
    return t.node(Tensor::scalar(loss), t.needs_grad(logits),
                  [&t, logits, o, batch, classes, tg = targets] {
        if (!t.needs_grad(logits)) return;
        const double gs = t.grad_if(o)->data[0];
        const Tensor& zv2 = t.val(logits);
        Tensor& dz = t.grad(logits);
        const double inv_b = gs / static_cast<double>(batch);
        for (Index b = 0; b < batch; ++b) {
            const double* row = zv2.ptr() + b * classes;
            double* drow = dz.ptr() + b * classes;
            double mx = row[0];
            for (Index c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
            double z = 0.0;
            for (Index c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
            for (Index c = 0; c < classes; ++c) {
                const double p = std::exp(row[c] - mx) / z;
                drow[c] += inv_b * (p - (c == tg[b] ? 1.0 : 0.0));
            }
        }
    });
}

Var l2_normalize_rows(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    if (xv.rank() < 1) throw std::invalid_argument("l2_normalize: empty shape");
    const Index dim = xv.shape.back();
    const Index rows = xv.numel() / dim;
    Tensor out(xv.shape);
    std::vector<double> norms(rows);
    for (Index r = 0; r < rows; ++r) {
        const double* xrow = xv.ptr() + r * dim;
        double s = 0.0;
        for (Index i = 0; i < dim; ++i) s += xrow[i] * xrow[i];
        const double nrm = std::sqrt(s);
        if (nrm == 0.0) {
            throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(r) +
                                    " cannot be normalized");
        }
        norms[r] = nrm;
        double* yrow = out.ptr() + r * dim;
        for (Index i = 0; i < dim; ++i) yrow[i] = xrow[i] / nrm;
    }
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(x), [&t, x, o, rows, dim, ns = std::move(norms)] {
        if (!t.needs_grad(x)) return;
        const Tensor& g = *t.grad_if(o);
        const Tensor& y = t.val(o);
        Tensor& dx = t.grad(x);
        for (Index r = 0; r < rows; ++r) {
            const double* yrow = y.ptr() + r * dim;
            const double* grow = g.ptr() + r * dim;
            double* dxrow = dx.ptr() + r * dim;
            double dot = 0.0;
            for (Index i = 0; i < dim; ++i) dot += yrow[i] * grow[i];
            const double inv_n = 1.0 / ns[r];
            for (Index i = 0; i < dim; ++i) dxrow[i] += inv_n * (grow[i] - yrow[i] * dot);
        }
    });
}

Var aam_margin(Tape& t, Var cosines, const std::vector<Index>& targets, double s, double m) {
    const Tensor& cv = t.val(cosines);
    if (cv.rank() != 2) {
        throw std::invalid_argument("aam_margin: expected B x C cosines, got " + shape_str(cv.shape));
    }
    const Index batch = cv.dim(0), classes = cv.dim(1);
    if (targets.size() != batch) throw std::invalid_argument("aam_margin: targets size mismatch");
    if (s <= 0.0) throw std::invalid_argument("aam_margin: scale must be positive");
    if (m < 0.0 || m >= kPi / 2) {
        throw std::invalid_argument("aam_margin: margin must lie in [0, pi/2)");
    }
    const double cos_m = std::cos(m), sin_m = std::sin(m);
    const double fallback_shift = m * sin_m;
    Tensor out(cv.shape);
    for (Index b = 0; b < batch; ++b) {
        const double* crow = cv.ptr() + b * classes;
        double* yrow = out.ptr() + b * classes;
        for (Index c = 0; c < classes; ++c) yrow[c] = s * crow[c];
        const double ct = crow[targets[b]];
        if (ct > -cos_m) {
            const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
            yrow[targets[b]] = s * (ct * cos_m - st * sin_m);
        } else {
            yrow[targets[b]] = s * (ct - fallback_shift);
        }
    }
    const Var o = next_var(t);
    return t.node(std::move(out), t.needs_grad(cosines),
                  [&t, cosines, o, batch, classes, s, cos_m, sin_m, tg = targets] {
        if (!t.needs_grad(cosines)) return;
        const Tensor& g = *t.grad_if(o);
        const Tensor& cv2 = t.val(cosines);
        Tensor& dc = t.grad(cosines);
        for (Index b = 0; b < batch; ++b) {
            const double* crow = cv2.ptr() + b * classes;
            const double* grow = g.ptr() + b * classes;
            double* drow = dc.ptr() + b * classes;
            for (Index c = 0; c < classes; ++c) {
                double slope = s;
                if (c == tg[b]) {
                    const double ct = crow[c];
                    if (ct > -cos_m) {
                        const double st = std::max(std::sqrt(std::max(0.0, 1.0 - ct * ct)), 1e-12);
                        slope = s * (cos_m + sin_m * ct / st);
                    }
                }
                drow[c] += slope * grow[c];
            }
        }
    });
}

Var bce_with_logits(Tape& t, Var logits, const std::vector<double>& labels) {
    const Tensor& zv = t.val(logits);
    const Index n = zv.numel();
    if (labels.size() != n) {
        throw std::invalid_argument("bce: labels size " + std::to_string(labels.size()) +
                                    " does not match logits " + std::to_string(n));
    }
    if (n == 0) throw std::invalid_argument("bce: empty logits");
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double z = zv.data[i], y = labels[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(n);
    const Var o = next_var(t);
    return t.node(Tensor::scalar(loss), t.needs_grad(logits), [&t, logits, o, n, ys = labels] {
        if (!t.needs_grad(logits)) return;
        const double gs = t.grad_if(o)->data[0];
        const Tensor& zv2 = t.val(logits);
        Tensor& dz = t.grad(logits);
        const double inv_n = gs / static_cast<double>(n);
        for (Index i = 0; i < n; ++i) {
            const double z = zv2.data[i];
            const double sig = 1.0 / (1.0 + std::exp(-z));
            dz.data[i] += inv_n * (sig - ys[i]);
        }
    });
}

}  // namespace spkvec::ops
