#include "spkvec/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace spkvec {
namespace {

// Variance floor in mean+std pooling; avoids a NaN gradient on constant
// sequences.
constexpr double kVarFloor = 1e-5;
constexpr double kQuantiles[5] = {0.0, 0.25, 0.5, 0.75, 1.0};

Var next_var(const Tape& t) { return Var{static_cast<std::uint32_t>(t.size())}; }

std::vector<Index> sorted_valid_indices(const double* col, Index valid, Index stride) {
    std::vector<Index> idx(valid);
    std::iota(idx.begin(), idx.end(), Index{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Index a, Index b) { return col[a * stride] < col[b * stride]; });
    return idx;
}

}  // namespace

PoolingMethod pooling_from_name(const std::string& name) {
    if (name == "mean") return PoolingMethod::mean;
    if (name == "max") return PoolingMethod::max;
    if (name == "mean+std") return PoolingMethod::mean_std;
    if (name == "quantile") return PoolingMethod::quantile;
    if (name == "first") return PoolingMethod::first;
    if (name == "first+cls") return PoolingMethod::first_cls;
    if (name == "middle") return PoolingMethod::middle;
    if (name == "last") return PoolingMethod::last;
    if (name == "random") return PoolingMethod::random;
    throw std::invalid_argument(
        "unknown pooling method '" + name +
        "' (expected one of: mean, max, mean+std, quantile, first, first+cls, middle, last, "
        "random)");
}

std::string pooling_name(PoolingMethod method) {
    switch (method) {
        case PoolingMethod::mean: return "mean";
        case PoolingMethod::max: return "max";
        case PoolingMethod::mean_std: return "mean+std";
        case PoolingMethod::quantile: return "quantile";
        case PoolingMethod::first: return "first";
        case PoolingMethod::first_cls: return "first+cls";
        case PoolingMethod::middle: return "middle";
        case PoolingMethod::last: return "last";
        case PoolingMethod::random: return "random";
    }
    throw std::logic_error("unreachable pooling kind");
}

Index pooled_dim(PoolingMethod method, Index model_dim) {
    switch (method) {
        case PoolingMethod::mean_std: return 2 * model_dim;
        case PoolingMethod::quantile: return 5 * model_dim;
        default: return model_dim;
    }
}

FrameSeqVar insert_cls_token(Tape& t, FrameSeqVar seq) {
    if (seq.has_cls) throw std::invalid_argument("cls token already inserted");
    const Tensor& xv = t.val(seq.data);
    const Index batch = xv.dim(0), dim = xv.dim(2);
    Tensor token({batch, 1, dim});
    std::fill(token.data.begin(), token.data.end(), 1.0);
    seq.data = ops::concat_time(t, {t.leaf(std::move(token)), seq.data});
    for (Index& v : seq.valid_lengths) ++v;
    seq.has_cls = true;
    return seq;
}

Var pool(Tape& t, const FrameSeqVar& seq, PoolingMethod method, Rng* rng) {
    const Tensor& xv = t.val(seq.data);
    if (xv.rank() != 3) {
        throw std::invalid_argument("pool: expected batch x time x dim, got " +
                                    shape_str(xv.shape));
    }
    const Index batch = xv.dim(0), time = xv.dim(1), dim = xv.dim(2);
    if (seq.valid_lengths.size() != batch) {
        throw std::invalid_argument("pool: valid_lengths size mismatch");
    }
    for (Index v : seq.valid_lengths) {
        if (v == 0) throw std::invalid_argument("pool: empty valid sequence");
        if (v > time) throw std::invalid_argument("pool: valid length exceeds time axis");
    }
    if (method == PoolingMethod::first_cls && !seq.has_cls) {
        throw std::invalid_argument("pool: first+cls requires a sequence with a cls token");
    }
    if (method == PoolingMethod::random && rng == nullptr) {
        throw std::invalid_argument("pool: random pooling requires a caller-supplied generator");
    }

    const Index out_dim = pooled_dim(method, dim);
    Tensor out({batch, out_dim});
    const std::vector<Index> valid = seq.valid_lengths;

    // Selected frame per item for the positional methods; max keeps one
    // argmax per (item, dim).
    std::vector<Index> sel(batch, 0);
    std::vector<Index> argmax;

    for (Index b = 0; b < batch; ++b) {
        const Index v = valid[b];
        const double* xb = xv.ptr() + b * time * dim;
        double* ob = out.ptr() + b * out_dim;
        switch (method) {
            case PoolingMethod::mean: {
                for (Index d = 0; d < dim; ++d) {
                    double acc = 0.0;
                    for (Index tt = 0; tt < v; ++tt) acc += xb[tt * dim + d];
                    ob[d] = acc / static_cast<double>(v);
                }
                break;
            }
            case PoolingMethod::max: {
                if (argmax.empty()) argmax.resize(batch * dim, 0);
                for (Index d = 0; d < dim; ++d) {
                    Index best = 0;
                    double bv = xb[d];
                    for (Index tt = 1; tt < v; ++tt) {
                        if (xb[tt * dim + d] > bv) {
                            bv = xb[tt * dim + d];
                            best = tt;
                        }
                    }
                    argmax[b * dim + d] = best;
                    ob[d] = bv;
                }
                break;
            }
            case PoolingMethod::mean_std: {
                for (Index d = 0; d < dim; ++d) {
                    double mean = 0.0;
                    for (Index tt = 0; tt < v; ++tt) mean += xb[tt * dim + d];
                    mean /= static_cast<double>(v);
                    double var = 0.0;
                    for (Index tt = 0; tt < v; ++tt) {
                        const double dd = xb[tt * dim + d] - mean;
                        var += dd * dd;
                    }
                    var /= static_cast<double>(v);
                    ob[d] = mean;
                    ob[dim + d] = std::sqrt(std::max(var, kVarFloor));
                }
                break;
            }
            case PoolingMethod::quantile: {
                for (Index d = 0; d < dim; ++d) {
                    const std::vector<Index> idx = sorted_valid_indices(xb + d, v, dim);
                    for (int q = 0; q < 5; ++q) {
                        const double pos = kQuantiles[q] * static_cast<double>(v - 1);
                        const Index lo = static_cast<Index>(pos);
                        const Index hi = std::min<Index>(lo + 1, v - 1);
                        const double w = pos - static_cast<double>(lo);
                        ob[q * dim + d] = (1.0 - w) * xb[idx[lo] * dim + d] +
                                          w * xb[idx[hi] * dim + d];
                    }
                }
                break;
            }
            case PoolingMethod::first:
            case PoolingMethod::first_cls:
                sel[b] = 0;
                break;
            case PoolingMethod::middle:
                sel[b] = (v - 1) / 2;
                break;
            case PoolingMethod::last:
                sel[b] = v - 1;
                break;
            case PoolingMethod::random:
                sel[b] = rng->below(v);
                break;
        }
        if (method == PoolingMethod::first || method == PoolingMethod::first_cls ||
            method == PoolingMethod::middle || method == PoolingMethod::last ||
            method == PoolingMethod::random) {
            for (Index d = 0; d < dim; ++d) ob[d] = xb[sel[b] * dim + d];
        }
    }

    const Var o = next_var(t);
    Var src = seq.data;
    return t.node(std::move(out), t.needs_grad(src),
                  [&t, src, o, method, batch, time, dim, valid, sel, argmax] {
        if (!t.needs_grad(src)) return;
        const Tensor& g = *t.grad_if(o);
        const Tensor& xv2 = t.val(src);
        Tensor& dx = t.grad(src);
        const Index out_dim = pooled_dim(method, dim);
        for (Index b = 0; b < batch; ++b) {
            const Index v = valid[b];
            const double* gb = g.ptr() + b * out_dim;
            const double* xb = xv2.ptr() + b * time * dim;
            double* db = dx.ptr() + b * time * dim;
            switch (method) {
                case PoolingMethod::mean: {
                    const double inv_v = 1.0 / static_cast<double>(v);
                    for (Index d = 0; d < dim; ++d) {
                        const double gd = gb[d] * inv_v;
                        for (Index tt = 0; tt < v; ++tt) db[tt * dim + d] += gd;
                    }
                    break;
                }
                case PoolingMethod::max: {
                    for (Index d = 0; d < dim; ++d) {
                        db[argmax[b * dim + d] * dim + d] += gb[d];
                    }
                    break;
                }
                case PoolingMethod::mean_std: {
                    const double inv_v = 1.0 / static_cast<double>(v);
                    for (Index d = 0; d < dim; ++d) {
                        double mean = 0.0;
                        for (Index tt = 0; tt < v; ++tt) mean += xb[tt * dim + d];
                        mean *= inv_v;
                        double var = 0.0;
                        for (Index tt = 0; tt < v; ++tt) {
                            const double dd = xb[tt * dim + d] - mean;
                            var += dd * dd;
                        }
                        var *= inv_v;
                        const double g_mean = gb[d] * inv_v;
                        // d std/dx_t = (x_t - mean) / (v * std); zero when the
                        // floor clamps.
                        const bool clamped = var < kVarFloor;
                        const double stdv = std::sqrt(std::max(var, kVarFloor));
                        const double g_std = gb[dim + d];
                        for (Index tt = 0; tt < v; ++tt) {
                            double contrib = g_mean;
                            if (!clamped) {
                                contrib += g_std * (xb[tt * dim + d] - mean) * inv_v / stdv;
                            }
                            db[tt * dim + d] += contrib;
                        }
                    }
                    break;
                }
                case PoolingMethod::quantile: {
                    for (Index d = 0; d < dim; ++d) {
                        const std::vector<Index> idx = sorted_valid_indices(xb + d, v, dim);
                        for (int q = 0; q < 5; ++q) {
                            const double pos = kQuantiles[q] * static_cast<double>(v - 1);
                            const Index lo = static_cast<Index>(pos);
                            const Index hi = std::min<Index>(lo + 1, v - 1);
                            const double w = pos - static_cast<double>(lo);
                            db[idx[lo] * dim + d] += (1.0 - w) * gb[q * dim + d];
                            db[idx[hi] * dim + d] += w * gb[q * dim + d];
                        }
                    }
                    break;
                }
                default: {
                    for (Index d = 0; d < dim; ++d) db[sel[b] * dim + d] += gb[d];
                    break;
                }
            }
        }
    });
}

}  // namespace spkvec
