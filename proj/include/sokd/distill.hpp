#pragma once

#include <utility>
#include <vector>

#include "sokd/nn.hpp"
#include "sokd/tensor.hpp"

namespace sokd {

// Balancing weights shared by all distillation objectives. The defaults are
// the all-ones setting with tau = 3.
struct LossWeights {
    float lambda1 = 1.0f;
    float lambda2 = 1.0f;
    float alpha1 = 1.0f;
    float alpha2 = 1.0f;
    float alpha3 = 1.0f;
    float tau = 3.0f;

    void validate() const {
        if (tau <= 0.0f) throw InvalidArg("LossWeights: tau must be positive");
        if (lambda1 < 0 || lambda2 < 0 || alpha1 < 0 || alpha2 < 0 || alpha3 < 0)
            throw InvalidArg("LossWeights: weights must be non-negative");
    }
};

// Which argument of the KL divergence carries the learner's distribution.
// `learner_first` matches KL(p_learner, p_target) = sum p_l log(p_l/p_t);
// `target_first` is the classic soft-label convention KL(p_t || p_l).
enum class KlDirection { learner_first, target_first };

struct DistillOptions {
    KlDirection kl_direction = KlDirection::learner_first;
    bool scale_kl_by_tau_sq = false;
};

// Loss-term switches for the bridge module objective; disabling a term
// removes it (and its gradient) entirely.
struct AblationMask {
    bool ce_kbm = true;
    bool kl_kbm_teacher = true;
    bool kl_kbm_student = true;
};

// Temperature-softened class distribution. `detached` marks distributions
// used purely as supervision signals: no gradient flows into their producer.
struct SoftTarget {
    Tensor probs;
    float tau = 1.0f;
    bool detached = false;
};

inline SoftTarget soften(const Tensor& logits, float tau, bool detached = false) {
    SoftTarget t;
    t.tau = tau;
    t.detached = detached;
    t.probs = detached ? softmax_with_temperature(logits.detach(), tau)
                       : softmax_with_temperature(logits, tau);
    return t;
}

// Batch-mean KL divergence sum_j p_j log(p_j / q_j), with q floored at 1e-8
// inside the log and 0*log0 treated as 0. Gradient flows into whichever
// side is not detached.
inline Tensor kl_divergence(const SoftTarget& p, const SoftTarget& q) {
    detail::check_same_shape(p.probs, q.probs, "kl_divergence");
    const std::int64_t n = p.probs.rank() == 2 ? p.probs.dim(0) : 1;
    Tensor term = mul(p.probs, sub(log_floored(p.probs), log_floored(q.probs)));
    return scale(sum(term), 1.0f / static_cast<float>(n));
}

namespace detail {

// lambda * term with the no-op cases short-circuited: weight 0 drops the
// term (and its graph) entirely, weight 1 keeps the term's graph unchanged.
inline Tensor weighted_terms(const std::vector<std::pair<Tensor, float>>& terms) {
    Tensor total;
    for (const auto& [t, w] : terms) {
        if (w == 0.0f) continue;
        Tensor scaled = (w == 1.0f) ? t : scale(t, w);
        total = total.defined() ? add(total, scaled) : scaled;
    }
    return total.defined() ? total : Tensor::scalar(0.0f);
}

// KL term between a learner's logits and a detached target's logits at the
// shared temperature, honoring direction and optional tau^2 rescaling.
inline Tensor kl_term(const Tensor& learner_logits, const Tensor& target_logits,
                      const LossWeights& w, const DistillOptions& opt) {
    SoftTarget learner = soften(learner_logits, w.tau, false);
    SoftTarget target = soften(target_logits, w.tau, true);
    Tensor kl = opt.kl_direction == KlDirection::learner_first ? kl_divergence(learner, target)
                                                               : kl_divergence(target, learner);
    if (opt.scale_kl_by_tau_sq) kl = scale(kl, w.tau * w.tau);
    return kl;
}

}  // namespace detail

// Offline distillation objective: lambda1 * CE + lambda2 * KL against the
// frozen teacher's softened logits. Cross entropy is computed at
// temperature 1 on hard labels.
inline Tensor kd_student_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                              const std::vector<int>& labels, const LossWeights& w,
                              const DistillOptions& opt = {}) {
    w.validate();
    std::vector<std::pair<Tensor, float>> terms;
    terms.emplace_back(cross_entropy(student_logits, labels), w.lambda1);
    if (w.lambda2 != 0.0f)
        terms.emplace_back(detail::kl_term(student_logits, teacher_logits.detach(), w, opt),
                           w.lambda2);
    return detail::weighted_terms(terms);
}

// Mutual-learning objectives: each network treats the other's softened
// output as a detached target.
inline std::pair<Tensor, Tensor> dml_losses(const Tensor& logits_a, const Tensor& logits_b,
                                            const std::vector<int>& labels, const LossWeights& w,
                                            const DistillOptions& opt = {}) {
    w.validate();
    detail::check_same_shape(logits_a, logits_b, "dml_losses");
    auto side = [&](const Tensor& own, const Tensor& peer) {
        std::vector<std::pair<Tensor, float>> terms;
        terms.emplace_back(cross_entropy(own, labels), w.lambda1);
        if (w.lambda2 != 0.0f)
            terms.emplace_back(detail::kl_term(own, peer.detach(), w, opt), w.lambda2);
        return detail::weighted_terms(terms);
    };
    return {side(logits_a, logits_b), side(logits_b, logits_a)};
}

// Semi-online objectives. The bridge module is pulled towards the frozen
// teacher and towards the student's live output; the student mimics the
// bridge module. Teacher logits are always detached; each KL term detaches
// the other network's distribution.
inline std::pair<Tensor, Tensor> sokd_losses(const Tensor& kbm_logits, const Tensor& teacher_logits,
                                             const Tensor& student_logits,
                                             const std::vector<int>& labels, const LossWeights& w,
                                             const DistillOptions& opt = {},
                                             const AblationMask& mask = {}) {
    w.validate();
    detail::check_same_shape(kbm_logits, teacher_logits, "sokd_losses");
    detail::check_same_shape(kbm_logits, student_logits, "sokd_losses");
    const float a1 = mask.ce_kbm ? w.alpha1 : 0.0f;
    const float a2 = mask.kl_kbm_teacher ? w.alpha2 : 0.0f;
    const float a3 = mask.kl_kbm_student ? w.alpha3 : 0.0f;

    std::vector<std::pair<Tensor, float>> kbm_terms;
    if (a1 != 0.0f) kbm_terms.emplace_back(cross_entropy(kbm_logits, labels), a1);
    if (a2 != 0.0f)
        kbm_terms.emplace_back(detail::kl_term(kbm_logits, teacher_logits.detach(), w, opt), a2);
    if (a3 != 0.0f)
        kbm_terms.emplace_back(detail::kl_term(kbm_logits, student_logits.detach(), w, opt), a3);

    std::vector<std::pair<Tensor, float>> student_terms;
    student_terms.emplace_back(cross_entropy(student_logits, labels), w.lambda1);
    if (w.lambda2 != 0.0f)
        student_terms.emplace_back(detail::kl_term(student_logits, kbm_logits.detach(), w, opt),
                                   w.lambda2);
    return {detail::weighted_terms(kbm_terms), detail::weighted_terms(student_terms)};
}

enum class KbmInit { teacher_copy, random };

// Builds the knowledge bridge module: an independently trainable copy of
// the teacher's high-level blocks (l+1..L), consuming the frozen teacher's
// block-l output. With teacher_copy init, reconstruct_teacher(low, kbm)
// reproduces the teacher bit-exactly until the first update.
inline SequentialModel build_kbm(const SequentialModel& teacher, std::int64_t l,
                                 std::uint64_t seed = 0, KbmInit init = KbmInit::teacher_copy) {
    auto [low, high] = split_model(teacher, l);
    (void)low;
    SequentialModel kbm;
    if (init == KbmInit::teacher_copy) {
        kbm = high.deep_copy();
    } else {
        std::vector<LayerSpec> specs;
        for (const auto& layer : high.layers) specs.push_back(layer.spec);
        kbm = build_model(std::move(specs), seed);
    }
    kbm.set_requires_grad(true);
    return kbm;
}

// Inference-time composition of the teacher's frozen low-level blocks with
// the (trained) bridge module. Both halves are viewed, not copied.
inline SequentialModel reconstruct_teacher(const SequentialModel& teacher_low,
                                           const SequentialModel& kbm) {
    SequentialModel m;
    m.layers = teacher_low.layers;
    for (const auto& l : kbm.layers) m.layers.push_back(l);
    std::vector<LayerSpec> specs;
    for (const auto& l : m.layers) specs.push_back(l.spec);
    detail::check_spec_composition(specs);  // ShapeMismatch if the halves do not compose
    if (m.block_count() > 1) m.split_index = static_cast<int>(m.block_count()) - 1;
    return m;
}

// ---------------------------------------------------------------------------
// Feature-based variant
// ---------------------------------------------------------------------------

enum class FeatureTransform { attention_map, pairwise_similarity, identity };
enum class FeatureDistance { l2, l1, frobenius };

struct FeatureTransformSpec {
    FeatureTransform kind = FeatureTransform::pairwise_similarity;
    FeatureDistance distance = FeatureDistance::l2;
};

// T(F): maps a feature tensor to the representation that is compared across
// networks.
//  - attention_map: channel-wise sum of squared activations, flattened and
//    L2-normalized per sample (a rank-2 feature is treated as one channel);
//  - pairwise_similarity: row-normalized batch Gram matrix of flattened
//    features, always [n,n] so mismatched widths still compare;
//  - identity: flattened rows.
inline Tensor apply_feature_transform(const Tensor& f, FeatureTransform kind) {
    switch (kind) {
        case FeatureTransform::attention_map: {
            if (f.rank() == 4) return l2_normalize_rows(flatten_rows(sum_channels(mul(f, f))));
            if (f.rank() == 2) return l2_normalize_rows(mul(f, f));
            throw ShapeMismatch("attention_map: expects rank-2 or rank-4 features");
        }
        case FeatureTransform::pairwise_similarity: {
            Tensor x = f.rank() == 2 ? f : flatten_rows(f);
            return l2_normalize_rows(matmul(x, transpose(x)));
        }
        case FeatureTransform::identity:
            return f.rank() == 2 ? f : flatten_rows(f);
    }
    throw InvalidArg("apply_feature_transform: unknown transform");
}

// d(A,B): batch-mean distances between transformed features. `frobenius`
// divides by n^2, the Gram-matrix convention.
inline Tensor feature_distance(const Tensor& a, const Tensor& b, FeatureDistance kind) {
    detail::check_same_shape(a, b, "feature_distance");
    const std::int64_t n = a.dim(0);
    Tensor diff = sub(a, b);
    switch (kind) {
        case FeatureDistance::l2:
            return scale(sum(mul(diff, diff)), 1.0f / static_cast<float>(n));
        case FeatureDistance::l1:
            return scale(sum(abs(diff)), 1.0f / static_cast<float>(n));
        case FeatureDistance::frobenius:
            return scale(sum(mul(diff, diff)), 1.0f / static_cast<float>(n * n));
    }
    throw InvalidArg("feature_distance: unknown distance");
}

// Feature-based counterpart of sokd_losses: KL terms are replaced by
// distances between transformed features; cross entropy still anchors both
// networks to the labels.
inline std::pair<Tensor, Tensor> feature_distill_losses(
    const Tensor& kbm_logits, const Tensor& student_logits, const Tensor& feat_kbm,
    const Tensor& feat_teacher, const Tensor& feat_student, const std::vector<int>& labels,
    const FeatureTransformSpec& spec, const LossWeights& w, const AblationMask& mask = {}) {
    w.validate();
    const float a1 = mask.ce_kbm ? w.alpha1 : 0.0f;
    const float a2 = mask.kl_kbm_teacher ? w.alpha2 : 0.0f;
    const float a3 = mask.kl_kbm_student ? w.alpha3 : 0.0f;

    std::vector<std::pair<Tensor, float>> kbm_terms;
    if (a1 != 0.0f) kbm_terms.emplace_back(cross_entropy(kbm_logits, labels), a1);
    if (a2 != 0.0f) {
        Tensor tk = apply_feature_transform(feat_kbm, spec.kind);
        Tensor tt = apply_feature_transform(feat_teacher.detach(), spec.kind);
        kbm_terms.emplace_back(feature_distance(tk, tt, spec.distance), a2);
    }
    if (a3 != 0.0f) {
        Tensor tk = apply_feature_transform(feat_kbm, spec.kind);
        Tensor ts = apply_feature_transform(feat_student.detach(), spec.kind);
        kbm_terms.emplace_back(feature_distance(tk, ts, spec.distance), a3);
    }

    std::vector<std::pair<Tensor, float>> student_terms;
    student_terms.emplace_back(cross_entropy(student_logits, labels), w.lambda1);
    if (w.lambda2 != 0.0f) {
        Tensor ts = apply_feature_transform(feat_student, spec.kind);
        Tensor tk = apply_feature_transform(feat_kbm.detach(), spec.kind);
        student_terms.emplace_back(feature_distance(ts, tk, spec.distance), w.lambda2);
    }
    return {detail::weighted_terms(kbm_terms), detail::weighted_terms(student_terms)};
}

}  // namespace sokd
