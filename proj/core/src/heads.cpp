#include "spkvec/heads.hpp"

#include <cmath>
#include <stdexcept>

namespace spkvec {
namespace {

Tensor normal_init(std::vector<Index> shape, Index fan_in, Rng rng) {
    Tensor w(std::move(shape));
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data) v = rng.normal(0.0, std_dev);
    return w;
}

}  // namespace

void init_classifier_head(ParameterStore& store, HeadKind kind, Index classes, Index emb_dim,
                          const Rng& rng) {
    if (classes < 2) throw std::invalid_argument("classifier head needs >= 2 classes");
    store.create("head.classifier.weight",
                 normal_init({classes, emb_dim}, emb_dim, rng.fork("head.classifier.weight")));
    if (kind == HeadKind::ce) store.create("head.classifier.bias", Tensor({classes}));
}

void init_pair_head(ParameterStore& store, Index model_dim, const Rng& rng) {
    store.create("head.pair.weight",
                 normal_init({1, model_dim}, model_dim, rng.fork("head.pair.weight")));
    store.create("head.pair.bias", Tensor({1}));
}

HeadOutput ce_forward(ParamBinder& pb, Var embeddings, const std::vector<Index>& targets) {
    Tape& t = pb.tape();
    Var logits = ops::linear(t, embeddings, pb("head.classifier.weight"),
                             pb("head.classifier.bias"));
    return {logits, ops::cross_entropy(t, logits, targets)};
}

HeadOutput aam_forward(ParamBinder& pb, Var embeddings, const std::vector<Index>& targets,
                       double scale, double margin) {
    Tape& t = pb.tape();
    Var e_hat = ops::l2_normalize_rows(t, embeddings);
    Var w_hat = ops::l2_normalize_rows(t, pb("head.classifier.weight"));
    Var cosines = ops::linear(t, e_hat, w_hat, Var{});
    Var logits = ops::aam_margin(t, cosines, targets, scale, margin);
    return {logits, ops::cross_entropy(t, logits, targets)};
}

Var pair_forward(ParamBinder& pb, const EncoderConfig& cfg, const FrameSeqVar& a,
                 const FrameSeqVar& b, Mode mode, Rng* rng) {
    Tape& t = pb.tape();
    const Tensor& av = t.val(a.data);
    const Tensor& bv = t.val(b.data);
    if (av.rank() != 3 || bv.rank() != 3) {
        throw std::invalid_argument("pair_forward: expected batch x time x dim sequences");
    }
    // copy dims now: creating token leaves below may reallocate tape storage
    const Index batch = av.dim(0), dim = av.dim(2);
    const Index len_a = av.dim(1), len_b = bv.dim(1);
    if (bv.dim(0) != batch || bv.dim(2) != dim) {
        throw std::invalid_argument("pair_forward: sequences disagree, " + shape_str(av.shape) +
                                    " vs " + shape_str(bv.shape));
    }
    if (len_a == 0 || len_b == 0) {
        throw std::invalid_argument("pair_forward: empty sequence");
    }
    for (const FrameSeqVar* s : {&a, &b}) {
        for (Index v : s->valid_lengths) {
            if (v != t.val(s->data).dim(1)) {
                throw std::invalid_argument(
                    "pair_forward: sequences must be fully valid (no padding)");
            }
        }
    }

    auto token = [&](double fill) {
        Tensor tok({batch, 1, dim});
        std::fill(tok.data.begin(), tok.data.end(), fill);
        return t.leaf(std::move(tok));
    };
    FrameSeqVar joint;
    joint.data = ops::concat_time(t, {token(1.0), a.data, token(-1.0), b.data, token(-1.0)});
    joint.valid_lengths.assign(batch, len_a + len_b + 3);
    joint = transformer_stack(pb, cfg, joint, mode, rng);

    Var first = ops::select_frame(t, joint.data, 0);
    Var logit = ops::linear(t, first, pb("head.pair.weight"), pb("head.pair.bias"));
    return logit;  // batch x 1
}

Var bce_loss(Tape& t, Var logits, const std::vector<TrialLabel>& labels) {
    std::vector<double> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        y[i] = labels[i] == TrialLabel::same ? 1.0 : 0.0;
    }
    return ops::bce_with_logits(t, logits, y);
}

}  // namespace spkvec
