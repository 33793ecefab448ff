#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sokd/trainer.hpp"
#include "oracles.hpp"

using sokd::ExperimentConfig;
using sokd::ExperimentSetup;
using sokd::Mode;
using sokd::SGDConfig;
using sokd::Tensor;

namespace {

// tiny blob task shared by the trainer tests
ExperimentSetup tiny_setup() {
    auto blobs = sokd::synth_blobs(11, 3, 4, 25, 0.8f);
    ExperimentSetup s;
    s.train = std::move(blobs.train);
    s.test = std::move(blobs.test);
    return s;
}

ExperimentConfig tiny_config(Mode mode) {
    ExperimentConfig cfg;
    cfg.mode = mode;
    cfg.student_arch = "dense:4:8,relu,dense:8:3";
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.train_seed = 5;
    cfg.opt_student.schedule = {{2, 0.1f}};
    cfg.opt_teacher.schedule = {{2, 0.1f}};
    return cfg;
}

std::vector<float> param_bytes(const sokd::SequentialModel& m) {
    std::vector<float> out;
    for (const auto& p : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
}

sokd::SequentialModel make_teacher(const ExperimentSetup& setup) {
    ExperimentConfig cfg = tiny_config(Mode::vanilla);
    cfg.student_arch = "dense:4:12,relu,dense:12:8,relu,dense:8:3";
    cfg.epochs = 6;
    cfg.train_seed = 99;
    return run_experiment(cfg, setup).student;
}

}  // namespace

TEST_CASE("sgd_step closed forms") {
    // plain gradient descent
    std::vector<float> p = {1.0f, -2.0f}, g = {0.5f, 0.25f}, v = {0.0f, 0.0f};
    sokd::sgd_step(p, g, v, 0.1f, 0.0f, 0.0f);
    CHECK(p[0] == 1.0f - 0.1f * 0.5f);
    CHECK(p[1] == -2.0f - 0.1f * 0.25f);

    // momentum carries even with zero gradient
    p = {1.0f};
    g = {0.0f};
    v = {2.0f};
    sokd::sgd_step(p, g, v, 0.1f, 0.9f, 0.0f);
    CHECK(std::fabs(p[0] - (1.0f - 0.1f * 1.8f)) < 1e-7f);

    // two steps on f(w) = w^2 from w=1, lr=0.1, momentum=0.9:
    //   g=2w; v1=2, w1=0.8; g=1.6, v2=0.9*2+1.6=3.4, w2=0.8-0.34=0.46
    p = {1.0f};
    v = {0.0f};
    g = {2.0f * p[0]};
    sokd::sgd_step(p, g, v, 0.1f, 0.9f, 0.0f);
    CHECK(std::fabs(p[0] - 0.8f) < 1e-6f);
    g = {2.0f * p[0]};
    sokd::sgd_step(p, g, v, 0.1f, 0.9f, 0.0f);
    CHECK(std::fabs(p[0] - 0.46f) < 1e-6f);

    std::vector<float> short_v = {0.0f};
    CHECK_THROWS_AS(sokd::sgd_step(p, g, std::span<float>(short_v.data(), 0), 0.1f, 0.9f, 0.0f),
                    sokd::ShapeMismatch);
}

TEST_CASE("lr schedule multiplies reached entries") {
    SGDConfig cfg;
    cfg.lr = 0.1f;
    cfg.schedule = {{100, 0.1f}, {150, 0.1f}};
    CHECK(sokd::lr_at(0, cfg) == 0.1f);
    CHECK(std::fabs(sokd::lr_at(120, cfg) - 0.01f) < 1e-9f);
    CHECK(std::fabs(sokd::lr_at(180, cfg) - 0.001f) < 1e-9f);

    SGDConfig flat;
    flat.schedule.clear();
    for (int e : {0, 50, 500}) CHECK(sokd::lr_at(e, flat) == flat.lr);

    SGDConfig bad;
    bad.schedule = {{10, 0.1f}, {10, 0.1f}};
    CHECK_THROWS_AS(bad.validate(), sokd::InvalidArg);
}

TEST_CASE("evaluate") {
    auto setup = tiny_setup();

    // constant-logit model predicts one class everywhere
    auto constant = sokd::build_model(sokd::parse_arch("dense:4:3"), 1);
    for (auto& v : constant.layers[0].weight.mutable_data()) v = 0.0f;
    constant.layers[0].bias.mutable_data()[1] = 5.0f;
    auto r = sokd::evaluate(constant, setup.test);
    double freq = 0.0;
    for (int l : setup.test.labels)
        if (l == 1) freq += 1.0;
    freq = 100.0 * freq / static_cast<double>(setup.test.size());
    CHECK(r.accuracy == freq);
    for (int p : r.predictions) CHECK(p == 1);

    // determinism
    auto r2 = sokd::evaluate(constant, setup.test);
    CHECK(r.predictions == r2.predictions);

    // a memorizable task (zero spread) is scored perfectly after training
    auto crisp = sokd::synth_blobs(21, 3, 4, 25, 0.0f);
    ExperimentSetup crisp_setup;
    crisp_setup.train = std::move(crisp.train);
    crisp_setup.test = std::move(crisp.test);
    ExperimentConfig mem = tiny_config(Mode::vanilla);
    mem.epochs = 12;
    auto trained = run_experiment(mem, crisp_setup);
    CHECK(sokd::evaluate(trained.student, crisp_setup.train).accuracy == 100.0);
}

TEST_CASE("vanilla training learns the tiny task and is deterministic") {
    auto setup = tiny_setup();
    ExperimentConfig cfg = tiny_config(Mode::vanilla);
    cfg.epochs = 10;
    auto a = run_experiment(cfg, setup);
    CHECK(a.log.rows.size() == 10);
    CHECK(a.log.final_acc_test_s > 60.0);
    CHECK(a.log.student_steps == 10 * 4);  // 60 samples / batch 16 -> 4 batches

    auto b = run_experiment(cfg, setup);
    CHECK(sokd::run_csv_text(a.log) == sokd::run_csv_text(b.log));
    CHECK(param_bytes(a.student) == param_bytes(b.student));
}

TEST_CASE("kd with lambda2=0 reproduces the vanilla trajectory bit-exactly") {
    auto setup = tiny_setup();
    setup.teacher = make_teacher(setup);

    ExperimentConfig vanilla = tiny_config(Mode::vanilla);
    auto v = run_experiment(vanilla, setup);

    ExperimentConfig kd = tiny_config(Mode::kd);
    kd.teacher_ckpt = "(in-memory)";
    kd.weights.lambda2 = 0.0f;
    auto k = run_experiment(kd, setup);

    CHECK(param_bytes(v.student) == param_bytes(k.student));
    for (std::size_t i = 0; i < v.log.rows.size(); ++i) {
        CHECK(v.log.rows[i].loss_student == k.log.rows[i].loss_student);
        CHECK(v.log.rows[i].acc_test_s == k.log.rows[i].acc_test_s);
    }
}

TEST_CASE("sokd with alpha2=alpha3=lambda2=0 reproduces vanilla for the student") {
    auto setup = tiny_setup();
    setup.teacher = make_teacher(setup);

    ExperimentConfig vanilla = tiny_config(Mode::vanilla);
    auto v = run_experiment(vanilla, setup);

    ExperimentConfig sokd_cfg = tiny_config(Mode::sokd);
    sokd_cfg.teacher_ckpt = "(in-memory)";
    sokd_cfg.weights.alpha2 = sokd_cfg.weights.alpha3 = sokd_cfg.weights.lambda2 = 0.0f;
    auto s = run_experiment(sokd_cfg, setup);

    CHECK(param_bytes(v.student) == param_bytes(s.student));
}

TEST_CASE("sokd freezes the teacher and steps both optimizers once per batch") {
    auto setup = tiny_setup();
    setup.teacher = make_teacher(setup);
    const auto teacher_before = param_bytes(*setup.teacher);

    ExperimentConfig cfg = tiny_config(Mode::sokd);
    cfg.teacher_ckpt = "(in-memory)";
    cfg.epochs = 4;
    auto r = run_experiment(cfg, setup);

    CHECK(param_bytes(*setup.teacher) == teacher_before);
    CHECK(r.log.student_steps == 4 * 4);
    CHECK(r.log.teacher_steps == 4 * 4);
    REQUIRE(r.reconstructed_teacher.has_value());
    REQUIRE(r.log.frozen_teacher_acc_test.has_value());
    REQUIRE(r.log.rows.back().acc_test_rec.has_value());
    // metrics columns populated against the frozen teacher
    CHECK(r.log.rows.back().ier.has_value());
    CHECK(r.log.rows.back().cka.has_value());

    // the reconstructed teacher shares the frozen low-level blocks
    const auto starts = setup.teacher->block_starts();
    CHECK(r.reconstructed_teacher->layers[0].weight.data().data() ==
          setup.teacher->layers[0].weight.data().data());
}

TEST_CASE("dml trains both networks simultaneously") {
    auto setup = tiny_setup();
    ExperimentConfig cfg = tiny_config(Mode::dml);
    cfg.teacher_arch = "dense:4:12,relu,dense:12:3";
    cfg.epochs = 4;
    auto r = run_experiment(cfg, setup);
    CHECK(r.log.student_steps == 4 * 4);
    CHECK(r.log.teacher_steps == 4 * 4);
    REQUIRE(r.peer.has_value());
    REQUIRE(r.log.peer_acc_test.has_value());
    REQUIRE(r.log.rows.back().loss_teacher_or_kbm.has_value());

    // swapping to sequential updates changes the trajectory but still runs
    ExperimentConfig seq = cfg;
    seq.sequential_updates = true;
    auto r2 = run_experiment(seq, setup);
    CHECK(r2.log.student_steps == 4 * 4);
}

TEST_CASE("sokd_feature trains with transformed feature distances") {
    auto setup = tiny_setup();
    setup.teacher = make_teacher(setup);
    ExperimentConfig cfg = tiny_config(Mode::sokd_feature);
    cfg.teacher_ckpt = "(in-memory)";
    cfg.feature.kind = sokd::FeatureTransform::pairwise_similarity;
    cfg.feature.distance = sokd::FeatureDistance::frobenius;
    cfg.epochs = 4;
    auto r = run_experiment(cfg, setup);
    CHECK(r.log.rows.size() == 4);
    CHECK(r.log.final_acc_test_s > 30.0);
    REQUIRE(r.reconstructed_teacher.has_value());
}

TEST_CASE("run csv layout") {
    auto setup = tiny_setup();
    setup.teacher = make_teacher(setup);
    ExperimentConfig cfg = tiny_config(Mode::sokd);
    cfg.teacher_ckpt = "(in-memory)";
    auto r = run_experiment(cfg, setup);
    const std::string csv = sokd::run_csv_text(r.log);
    CHECK(csv.rfind("epoch,lr,loss_teacher_or_kbm,loss_student,acc_train_s,acc_test_s,"
                    "acc_test_kbm_reconstructed,cka,ier,mr\n", 0) == 0);
    // one line per epoch plus header
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == static_cast<std::size_t>(cfg.epochs) + 1);

    // vanilla leaves the teacher columns empty
    ExperimentConfig vcfg = tiny_config(Mode::vanilla);
    auto v = run_experiment(vcfg, setup);
    const std::string vcsv = sokd::run_csv_text(v.log);
    const std::size_t line1 = vcsv.find('\n') + 1;
    const std::string row = vcsv.substr(line1, vcsv.find('\n', line1) - line1);
    // epoch,lr,<empty>,loss,...
    CHECK(row.find(",,") != std::string::npos);
}

TEST_CASE("config errors name the offending field") {
    auto setup = tiny_setup();
    ExperimentConfig cfg = tiny_config(Mode::kd);  // no teacher in setup
    try {
        run_experiment(cfg, setup);
        FAIL("expected ConfigError");
    } catch (const sokd::ConfigError& e) {
        CHECK(std::string(e.what()).find("model.teacher_ckpt") != std::string::npos);
    }

    ExperimentConfig bad = tiny_config(Mode::vanilla);
    bad.epochs = 0;
    CHECK_THROWS_AS(run_experiment(bad, setup), sokd::ConfigError);
    ExperimentConfig bad2 = tiny_config(Mode::dml);
    CHECK_THROWS_AS(run_experiment(bad2, setup), sokd::ConfigError);  // missing peer arch
}
