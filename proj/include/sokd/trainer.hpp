#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sokd/checkpoint.hpp"
#include "sokd/data.hpp"
#include "sokd/distill.hpp"
#include "sokd/metrics.hpp"
#include "sokd/nn.hpp"

namespace sokd {

// ---------------------------------------------------------------------------
// SGD with momentum and coupled weight decay
// ---------------------------------------------------------------------------

struct SGDConfig {
    float lr = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    // (epoch, multiplier) pairs; the base lr is multiplied by every entry
    // whose epoch has been reached
    std::vector<std::pair<int, float>> schedule = {{15, 0.1f}, {23, 0.1f}};

    void validate() const {
        if (lr <= 0.0f) throw InvalidArg("SGDConfig: lr must be positive");
        if (momentum < 0.0f || momentum >= 1.0f) throw InvalidArg("SGDConfig: momentum in [0,1)");
        if (weight_decay < 0.0f) throw InvalidArg("SGDConfig: weight_decay must be >= 0");
        for (std::size_t i = 1; i < schedule.size(); ++i)
            if (schedule[i].first <= schedule[i - 1].first)
                throw InvalidArg("SGDConfig: schedule epochs must be strictly increasing");
    }
};

inline float lr_at(int epoch, const SGDConfig& cfg) {
    float lr = cfg.lr;
    for (const auto& [e, m] : cfg.schedule)
        if (e <= epoch) lr *= m;
    return lr;
}

// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v
inline void sgd_step(std::span<float> param, std::span<const float> grad, std::span<float> velocity,
                     float lr, float momentum, float weight_decay) {
    if (param.size() != grad.size() || param.size() != velocity.size())
        throw ShapeMismatch("sgd_step: parameter, gradient and state sizes differ");
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
        param[i] -= lr * velocity[i];
    }
}

class SGD {
  public:
    SGD(std::vector<Tensor> params, SGDConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : params_)
            velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(float lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (p.grad().empty()) {
                // no backward touched this parameter this batch; decay still applies
                static thread_local std::vector<float> zeros;
                zeros.assign(static_cast<std::size_t>(p.numel()), 0.0f);
                sgd_step(p.mutable_data(), zeros, velocity_[i], lr, cfg_.momentum,
                         cfg_.weight_decay);
            } else {
                sgd_step(p.mutable_data(), p.grad(), velocity_[i], lr, cfg_.momentum,
                         cfg_.weight_decay);
            }
        }
        ++steps_;
    }

    const SGDConfig& config() const { return cfg_; }
    std::int64_t steps() const { return steps_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    SGDConfig cfg_;
    std::int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class Mode { vanilla, kd, dml, sokd, sokd_feature };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::vanilla: return "vanilla";
        case Mode::kd: return "kd";
        case Mode::dml: return "dml";
        case Mode::sokd: return "sokd";
        case Mode::sokd_feature: return "sokd_feature";
    }
    return "?";
}

struct DataConfig {
    enum class Kind { blobs, idx, csv } kind = Kind::blobs;
    // blobs
    std::uint64_t seed = 1;
    int classes = 4, dim = 8, per_class = 313;
    float spread = 1.0f;
    // idx
    std::string images, labels, test_images, test_labels;
    // csv
    std::string path, test_path, label_column;
};

struct ExperimentConfig {
    Mode mode = Mode::vanilla;
    DataConfig data;

    std::string student_arch;   // the trained network (also the vanilla net)
    std::string teacher_arch;   // dml peer architecture
    std::string teacher_ckpt;   // frozen teacher for kd / sokd modes

    int split_index = 0;  // 0 = auto: classifier plus one block (l = L-2, floored at 1)
    KbmInit kbm_init = KbmInit::teacher_copy;

    LossWeights weights;
    DistillOptions distill;
    AblationMask mask;

    FeatureTransformSpec feature;
    std::string feature_tap_teacher, feature_tap_kbm, feature_tap_student;

    SGDConfig opt_student;
    SGDConfig opt_teacher;  // also used for the bridge module and the dml peer

    int epochs = 30;
    std::int64_t batch_size = 64;
    bool drop_last = false;
    std::uint64_t train_seed = 1;
    bool sequential_updates = false;

    bool metrics_enable = true;
    std::string metrics_tap_teacher, metrics_tap_student;
    Split metrics_split = Split::train;

    std::string out_dir;  // when set, run.csv / summary.txt / checkpoints land here
    std::string config_checksum;  // echoed into the run log
};

// Resolved external inputs of a run.
struct ExperimentSetup {
    Dataset train;
    Dataset test;
    std::optional<SequentialModel> teacher;  // loaded checkpoint, frozen by the trainer
};

struct RunRow {
    int epoch = 0;
    float lr = 0.0f;
    std::optional<double> loss_teacher_or_kbm;
    double loss_student = 0.0;
    double acc_train_s = 0.0;
    double acc_test_s = 0.0;
    std::optional<double> acc_test_rec;
    std::optional<double> cka, ier, mr;
};

struct RunLog {
    std::string mode;
    std::uint64_t seed = 0;
    std::vector<RunRow> rows;
    double final_acc_test_s = 0.0;
    double best_acc_test_s = 0.0;
    std::optional<double> final_acc_test_rec;
    std::optional<double> frozen_teacher_acc_test;
    std::optional<double> peer_acc_test;  // dml's second network
    std::int64_t student_steps = 0;
    std::int64_t teacher_steps = 0;  // bridge module or dml peer
    double wall_seconds = 0.0;
    std::string config_checksum;
};

struct ExperimentResult {
    RunLog log;
    SequentialModel student;
    std::optional<SequentialModel> reconstructed_teacher;  // sokd modes
    std::optional<SequentialModel> peer;                   // dml
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<int> predictions;
};

// ---------------------------------------------------------------------------
// Evaluation helpers (tape-free)
// ---------------------------------------------------------------------------

inline std::vector<int> argmax_rows(const Tensor& logits) {
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    auto d = logits.data();
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        float bv = d[i * c];
        for (std::int64_t j = 1; j < c; ++j)
            if (d[i * c + j] > bv) {
                bv = d[i * c + j];
                best = static_cast<int>(j);
            }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

inline EvalResult evaluate(const SequentialModel& model, const Dataset& ds,
                           std::int64_t eval_batch = 256) {
    EvalResult r;
    for (std::int64_t start = 0; start < ds.size(); start += eval_batch) {
        const std::int64_t end = std::min(ds.size(), start + eval_batch);
        std::vector<std::int64_t> rows;
        for (std::int64_t i = start; i < end; ++i) rows.push_back(i);
        Tensor logits = forward(model, gather_rows(ds.inputs, rows)).logits;
        for (int p : argmax_rows(logits)) r.predictions.push_back(p);
    }
    r.accuracy = accuracy(r.predictions, ds.labels);
    return r;
}

// Tapped activations over a whole dataset, rows concatenated.
inline ActivationMatrix collect_activations(const SequentialModel& model, const Dataset& ds,
                                            const std::string& tap, std::int64_t eval_batch = 256) {
    ActivationMatrix m;
    for (std::int64_t start = 0; start < ds.size(); start += eval_batch) {
        const std::int64_t end = std::min(ds.size(), start + eval_batch);
        std::vector<std::int64_t> rows;
        for (std::int64_t i = start; i < end; ++i) rows.push_back(i);
        auto out = forward(model, gather_rows(ds.inputs, rows), {tap});
        const Tensor& f = out.features.at(tap);
        const std::int64_t cols = f.numel() / f.dim(0);
        if (m.cols == 0) m.cols = cols;
        m.rows += f.dim(0);
        m.values.insert(m.values.end(), f.data().begin(), f.data().end());
    }
    return m;
}

// Default comparison point: the output of the next-to-last block (the
// input representation of the classifier).
inline std::string default_tap(const SequentialModel& model) {
    const auto starts = model.block_starts();
    if (starts.size() < 2) return {};
    const std::int64_t idx = starts[starts.size() - 1] - 1;
    return model.layers[static_cast<std::size_t>(idx)].spec.name;
}

// ---------------------------------------------------------------------------
// Run log serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v, const char* spec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline std::string opt_fmt(const std::optional<double>& v, const char* spec) {
    return v ? fmt(*v, spec) : std::string();
}

}  // namespace detail

inline std::string run_csv_text(const RunLog& log) {
    std::string s =
        "epoch,lr,loss_teacher_or_kbm,loss_student,acc_train_s,acc_test_s,"
        "acc_test_kbm_reconstructed,cka,ier,mr\n";
    for (const auto& r : log.rows) {
        s += std::to_string(r.epoch);
        s += "," + detail::fmt(r.lr, "%.6g");
        s += "," + detail::opt_fmt(r.loss_teacher_or_kbm, "%.6f");
        s += "," + detail::fmt(r.loss_student, "%.6f");
        s += "," + detail::fmt(r.acc_train_s, "%.4f");
        s += "," + detail::fmt(r.acc_test_s, "%.4f");
        s += "," + detail::opt_fmt(r.acc_test_rec, "%.4f");
        s += "," + detail::opt_fmt(r.cka, "%.6f");
        s += "," + detail::opt_fmt(r.ier, "%.4f");
        s += "," + detail::opt_fmt(r.mr, "%.4f");
        s += "\n";
    }
    return s;
}

inline std::string summary_text(const RunLog& log) {
    std::string s;
    s += "mode = " + log.mode + "\n";
    s += "seed = " + std::to_string(log.seed) + "\n";
    s += "epochs = " + std::to_string(log.rows.size()) + "\n";
    s += "final_acc_test_s = " + detail::fmt(log.final_acc_test_s, "%.4f") + "\n";
    s += "best_acc_test_s = " + detail::fmt(log.best_acc_test_s, "%.4f") + "\n";
    if (log.final_acc_test_rec)
        s += "final_acc_test_reconstructed = " + detail::fmt(*log.final_acc_test_rec, "%.4f") + "\n";
    if (log.frozen_teacher_acc_test)
        s += "frozen_teacher_acc_test = " + detail::fmt(*log.frozen_teacher_acc_test, "%.4f") + "\n";
    if (log.peer_acc_test)
        s += "peer_acc_test = " + detail::fmt(*log.peer_acc_test, "%.4f") + "\n";
    s += "student_steps = " + std::to_string(log.student_steps) + "\n";
    s += "teacher_steps = " + std::to_string(log.teacher_steps) + "\n";
    s += "wall_seconds = " + detail::fmt(log.wall_seconds, "%.3f") + "\n";
    s += "config_checksum = " + log.config_checksum + "\n";
    return s;
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

namespace detail {

inline void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("config field '" + field + "': " + why);
}

struct MetricsRefs {
    const SequentialModel* reference = nullptr;  // network the student is compared to
    std::string tap_ref, tap_student;
    std::vector<int> ref_preds;  // cached when the reference is frozen
};

inline std::int64_t resolve_split_index(const ExperimentConfig& cfg,
                                        const SequentialModel& teacher) {
    const std::int64_t blocks = teacher.block_count();
    detail::require(blocks >= 2, "model.teacher_ckpt", "teacher needs at least 2 blocks to split");
    std::int64_t l = cfg.split_index;
    if (l == 0) l = std::max<std::int64_t>(1, blocks - 2);
    detail::require(l >= 1 && l < blocks, "model.split_index",
                    "must be in [1," + std::to_string(blocks - 1) + "]");
    return l;
}

}  // namespace detail

inline ExperimentSetup resolve_setup(const ExperimentConfig& cfg) {
    ExperimentSetup s;
    switch (cfg.data.kind) {
        case DataConfig::Kind::blobs: {
            auto blobs = synth_blobs(cfg.data.seed, cfg.data.classes, cfg.data.dim,
                                     cfg.data.per_class, cfg.data.spread);
            s.train = std::move(blobs.train);
            s.test = std::move(blobs.test);
            break;
        }
        case DataConfig::Kind::idx: {
            detail::require(!cfg.data.images.empty(), "data.images", "required for idx data");
            detail::require(!cfg.data.labels.empty(), "data.labels", "required for idx data");
            s.train = load_idx(cfg.data.images, cfg.data.labels);
            if (!cfg.data.test_images.empty()) {
                detail::require(!cfg.data.test_labels.empty(), "data.test_labels",
                                "required when data.test_images is set");
                s.test = load_idx(cfg.data.test_images, cfg.data.test_labels);
            } else {
                s.test = s.train;
            }
            s.test.split = Split::test;
            break;
        }
        case DataConfig::Kind::csv: {
            detail::require(!cfg.data.path.empty(), "data.path", "required for csv data");
            detail::require(!cfg.data.label_column.empty(), "data.label_column",
                            "required for csv data");
            s.train = load_csv(cfg.data.path, cfg.data.label_column);
            s.test = cfg.data.test_path.empty() ? s.train
                                                : load_csv(cfg.data.test_path, cfg.data.label_column);
            s.test.split = Split::test;
            break;
        }
    }
    const bool needs_teacher_ckpt =
        cfg.mode == Mode::kd || cfg.mode == Mode::sokd || cfg.mode == Mode::sokd_feature;
    if (needs_teacher_ckpt) {
        detail::require(!cfg.teacher_ckpt.empty(), "model.teacher_ckpt",
                        "required for mode " + std::string(mode_name(cfg.mode)));
        s.teacher = load_checkpoint(cfg.teacher_ckpt).model;
    }
    return s;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentSetup& setup) {
    const auto t_start = std::chrono::steady_clock::now();
    cfg.weights.validate();
    cfg.opt_student.validate();
    cfg.opt_teacher.validate();
    detail::require(cfg.epochs >= 1, "train.epochs", "must be >= 1");
    detail::require(cfg.batch_size >= 1, "train.batch_size", "must be >= 1");
    detail::require(!cfg.student_arch.empty(), "model.student", "architecture is required");

    const bool needs_teacher_ckpt =
        cfg.mode == Mode::kd || cfg.mode == Mode::sokd || cfg.mode == Mode::sokd_feature;
    detail::require(!needs_teacher_ckpt || setup.teacher.has_value(), "model.teacher_ckpt",
                    "required for mode " + std::string(mode_name(cfg.mode)));
    detail::require(cfg.mode != Mode::dml || !cfg.teacher_arch.empty(), "model.teacher",
                    "dml needs a peer architecture");

    ExperimentResult result;
    RunLog& log = result.log;
    log.mode = mode_name(cfg.mode);
    log.seed = cfg.train_seed;
    log.config_checksum = cfg.config_checksum;

    // networks
    SequentialModel student =
        build_model(parse_arch(cfg.student_arch), mix_seed(cfg.train_seed, 0x73747564656e74ull));
    SGD opt_student(student.parameters(), cfg.opt_student);

    std::optional<SequentialModel> teacher;       // frozen (kd / sokd)
    std::optional<SequentialModel> peer;          // trainable (dml)
    std::optional<SequentialModel> teacher_low, teacher_high, kbm, reconstructed;
    std::optional<SGD> opt_peer, opt_kbm;

    if (needs_teacher_ckpt) {
        teacher = *setup.teacher;  // view of the caller's model
        teacher->set_requires_grad(false);
    }
    if (cfg.mode == Mode::dml) {
        peer = build_model(parse_arch(cfg.teacher_arch), mix_seed(cfg.train_seed, 0x70656572ull));
        opt_peer.emplace(peer->parameters(), cfg.opt_teacher);
    }
    std::int64_t split_l = 0;
    if (cfg.mode == Mode::sokd || cfg.mode == Mode::sokd_feature) {
        split_l = detail::resolve_split_index(cfg, *teacher);
        auto halves = split_model(*teacher, split_l);
        teacher_low = std::move(halves.first);
        teacher_high = std::move(halves.second);
        kbm = build_kbm(*teacher, split_l, mix_seed(cfg.train_seed, 0x6b626dull), cfg.kbm_init);
        opt_kbm.emplace(kbm->parameters(), cfg.opt_teacher);
        reconstructed = reconstruct_teacher(*teacher_low, *kbm);
    }

    // feature taps for the feature-based mode
    std::string tap_t, tap_k, tap_s;
    if (cfg.mode == Mode::sokd_feature) {
        tap_k = cfg.feature_tap_kbm.empty() ? default_tap(*kbm) : cfg.feature_tap_kbm;
        tap_t = cfg.feature_tap_teacher.empty() ? default_tap(*teacher_high) : cfg.feature_tap_teacher;
        tap_s = cfg.feature_tap_student.empty() ? default_tap(student) : cfg.feature_tap_student;
        detail::require(!tap_k.empty(), "feature.tap_kbm",
                        "bridge module has a single block; set an explicit tap");
        detail::require(!tap_t.empty(), "feature.tap_teacher",
                        "teacher high half has a single block; set an explicit tap");
        detail::require(!tap_s.empty(), "feature.tap_student",
                        "student has a single block; set an explicit tap");
    }

    // metrics reference
    detail::MetricsRefs mref;
    const Dataset& metric_ds = cfg.metrics_split == Split::train ? setup.train : setup.test;
    if (cfg.metrics_enable) {
        if (teacher) mref.reference = &*teacher;
        else if (peer) mref.reference = &*peer;
        if (mref.reference) {
            mref.tap_ref = cfg.metrics_tap_teacher.empty() ? default_tap(*mref.reference)
                                                           : cfg.metrics_tap_teacher;
            mref.tap_student = cfg.metrics_tap_student.empty() ? default_tap(student)
                                                               : cfg.metrics_tap_student;
            if (teacher) mref.ref_preds = evaluate(*teacher, metric_ds).predictions;
        }
    }
    if (teacher) log.frozen_teacher_acc_test = evaluate(*teacher, setup.test).accuracy;

    BatchPlan plan;
    plan.batch_size = cfg.batch_size;
    plan.seed = cfg.train_seed;
    plan.drop_last = cfg.drop_last;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const float lr_s = lr_at(epoch, cfg.opt_student);
        const float lr_t = lr_at(epoch, cfg.opt_teacher);
        double loss_s_sum = 0.0, loss_t_sum = 0.0;
        std::int64_t seen = 0;
        bool have_t_loss = false;

        for (const Batch& batch : batches(setup.train, plan, epoch)) {
            const auto bs = static_cast<std::int64_t>(batch.labels.size());
            opt_student.zero_grad();
            if (opt_peer) opt_peer->zero_grad();
            if (opt_kbm) opt_kbm->zero_grad();

            switch (cfg.mode) {
                case Mode::vanilla: {
                    Tape tape;
                    Tensor logits = forward(student, batch.inputs).logits;
                    Tensor loss = detail::weighted_terms(
                        {{cross_entropy(logits, batch.labels), cfg.weights.lambda1}});
                    if (loss.requires_grad()) loss.backward();
                    opt_student.step(lr_s);
                    loss_s_sum += static_cast<double>(loss.item()) * bs;
                    break;
                }
                case Mode::kd: {
                    Tape tape;
                    Tensor t_logits = forward(*teacher, batch.inputs).logits;
                    Tensor s_logits = forward(student, batch.inputs).logits;
                    Tensor loss =
                        kd_student_loss(s_logits, t_logits, batch.labels, cfg.weights, cfg.distill);
                    if (loss.requires_grad()) loss.backward();
                    opt_student.step(lr_s);
                    loss_s_sum += static_cast<double>(loss.item()) * bs;
                    break;
                }
                case Mode::dml: {
                    if (!cfg.sequential_updates) {
                        Tape tape;
                        Tensor a = forward(*peer, batch.inputs).logits;
                        Tensor b = forward(student, batch.inputs).logits;
                        auto [loss_a, loss_b] =
                            dml_losses(a, b, batch.labels, cfg.weights, cfg.distill);
                        if (loss_a.requires_grad()) loss_a.backward();
                        if (loss_b.requires_grad()) loss_b.backward();
                        opt_peer->step(lr_t);
                        opt_student.step(lr_s);
                        loss_t_sum += static_cast<double>(loss_a.item()) * bs;
                        loss_s_sum += static_cast<double>(loss_b.item()) * bs;
                    } else {
                        // peer first, student against the already-updated peer
                        double la = 0.0, lb = 0.0;
                        {
                            Tape tape;
                            Tensor a = forward(*peer, batch.inputs).logits;
                            Tensor b = forward(student, batch.inputs).logits;
                            Tensor loss_a =
                                kd_student_loss(a, b, batch.labels, cfg.weights, cfg.distill);
                            if (loss_a.requires_grad()) loss_a.backward();
                            opt_peer->step(lr_t);
                            la = loss_a.item();
                        }
                        {
                            Tape tape;
                            Tensor a = forward(*peer, batch.inputs).logits;
                            Tensor b = forward(student, batch.inputs).logits;
                            Tensor loss_b =
                                kd_student_loss(b, a, batch.labels, cfg.weights, cfg.distill);
                            if (loss_b.requires_grad()) loss_b.backward();
                            opt_student.step(lr_s);
                            lb = loss_b.item();
                        }
                        loss_t_sum += la * bs;
                        loss_s_sum += lb * bs;
                    }
                    have_t_loss = true;
                    break;
                }
                case Mode::sokd:
                case Mode::sokd_feature: {
                    Tape tape;
                    Tensor t_feat = forward(*teacher_low, batch.inputs).logits;
                    Tensor loss_kbm, loss_student;
                    if (cfg.mode == Mode::sokd) {
                        Tensor t_logits = forward(*teacher_high, t_feat).logits;
                        Tensor k_logits = forward(*kbm, t_feat).logits;
                        Tensor s_logits = forward(student, batch.inputs).logits;
                        std::tie(loss_kbm, loss_student) =
                            sokd_losses(k_logits, t_logits, s_logits, batch.labels, cfg.weights,
                                        cfg.distill, cfg.mask);
                    } else {
                        auto t_out = forward(*teacher_high, t_feat, {tap_t});
                        auto k_out = forward(*kbm, t_feat, {tap_k});
                        auto s_out = forward(student, batch.inputs, {tap_s});
                        std::tie(loss_kbm, loss_student) = feature_distill_losses(
                            k_out.logits, s_out.logits, k_out.features.at(tap_k),
                            t_out.features.at(tap_t), s_out.features.at(tap_s), batch.labels,
                            cfg.feature, cfg.weights, cfg.mask);
                    }
                    if (cfg.sequential_updates) {
                        if (loss_kbm.requires_grad()) loss_kbm.backward();
                        opt_kbm->step(lr_t);
                        if (loss_student.requires_grad()) loss_student.backward();
                        opt_student.step(lr_s);
                    } else {
                        if (loss_kbm.requires_grad()) loss_kbm.backward();
                        if (loss_student.requires_grad()) loss_student.backward();
                        opt_kbm->step(lr_t);
                        opt_student.step(lr_s);
                    }
                    loss_t_sum += static_cast<double>(loss_kbm.item()) * bs;
                    loss_s_sum += static_cast<double>(loss_student.item()) * bs;
                    have_t_loss = true;
                    break;
                }
            }
            seen += bs;
        }

        RunRow row;
        row.epoch = epoch;
        row.lr = lr_s;
        row.loss_student = loss_s_sum / static_cast<double>(seen);
        if (have_t_loss) row.loss_teacher_or_kbm = loss_t_sum / static_cast<double>(seen);
        row.acc_train_s = evaluate(student, setup.train).accuracy;
        const EvalResult test_eval = evaluate(student, setup.test);
        row.acc_test_s = test_eval.accuracy;
        if (reconstructed) row.acc_test_rec = evaluate(*reconstructed, setup.test).accuracy;

        if (cfg.metrics_enable && mref.reference) {
            const std::vector<int> ref_preds =
                teacher ? mref.ref_preds : evaluate(*mref.reference, metric_ds).predictions;
            PredictionRecord rec;
            rec.teacher_pred = ref_preds;
            rec.student_pred = evaluate(student, metric_ds).predictions;
            rec.label = metric_ds.labels;
            row.ier = imitation_error_rate(rec);
            const auto mr = misleading_rate(rec);
            if (mr) row.mr = *mr;
            if (!mref.tap_ref.empty() && !mref.tap_student.empty()) {
                const auto fx = collect_activations(*mref.reference, metric_ds, mref.tap_ref);
                const auto fy = collect_activations(student, metric_ds, mref.tap_student);
                row.cka = linear_cka(fx, fy).value;
            }
        }
        log.rows.push_back(std::move(row));
    }

    log.final_acc_test_s = log.rows.back().acc_test_s;
    for (const auto& r : log.rows) log.best_acc_test_s = std::max(log.best_acc_test_s, r.acc_test_s);
    if (reconstructed) log.final_acc_test_rec = log.rows.back().acc_test_rec;
    if (peer) log.peer_acc_test = evaluate(*peer, setup.test).accuracy;
    log.student_steps = opt_student.steps();
    if (opt_peer) log.teacher_steps = opt_peer->steps();
    if (opt_kbm) log.teacher_steps = opt_kbm->steps();
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    result.student = std::move(student);
    if (reconstructed) result.reconstructed_teacher = std::move(reconstructed);
    if (peer) result.peer = std::move(peer);

    if (!cfg.out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(cfg.out_dir);
        const fs::path dir(cfg.out_dir);
        auto write_file = [](const fs::path& p, const std::string& text) {
            std::ofstream out(p, std::ios::binary);
            if (!out) throw IoError("run_experiment: cannot write '" + p.string() + "'");
            out.write(text.data(), static_cast<std::streamsize>(text.size()));
        };
        write_file(dir / "run.csv", run_csv_text(log));
        write_file(dir / "summary.txt", summary_text(log));
        write_file(dir / "dataset_manifest.txt", dataset_manifest(setup.train));
        std::map<std::string, std::string> meta = {
            {"mode", log.mode},
            {"seed", std::to_string(cfg.train_seed)},
            {"epoch", std::to_string(cfg.epochs)}};
        if (cfg.mode == Mode::vanilla) {
            save_checkpoint(result.student, (dir / "teacher.ckpt").string(), meta);
        } else {
            save_checkpoint(result.student, (dir / "student.ckpt").string(), meta);
            if (result.reconstructed_teacher)
                save_checkpoint(*result.reconstructed_teacher,
                                (dir / "teacher_reconstructed.ckpt").string(), meta);
            if (result.peer) save_checkpoint(*result.peer, (dir / "teacher.ckpt").string(), meta);
        }
    }
    return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    return run_experiment(cfg, resolve_setup(cfg));
}

}  // namespace sokd
