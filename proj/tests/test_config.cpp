#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "sokd/config.hpp"

TEST_CASE("config parsing, defaults and overrides") {
    auto cfg = sokd::Config::parse_text("mode = kd\nloss.tau = 2.5\n# comment\n\n"
                                        "train.epochs = 7   # trailing comment\n");
    CHECK(cfg.get("mode") == "kd");
    CHECK(cfg.get_float("loss.tau") == 2.5);
    CHECK(cfg.get_int("train.epochs") == 7);
    // untouched keys fall back to schema defaults
    CHECK(cfg.get("loss.kl_direction") == "learner_first");
    CHECK(cfg.get_int("train.batch_size") == 64);

    cfg.apply_override("loss.tau=4");
    CHECK(cfg.get_float("loss.tau") == 4.0);

    CHECK_THROWS_AS(sokd::Config::parse_text("mystery.key = 1\n"), sokd::ConfigError);
    CHECK_THROWS_AS(sokd::Config::parse_text("no equals sign\n"), sokd::ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("bogus"), sokd::ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("unknown.key=1"), sokd::ConfigError);

    cfg.apply_override("train.epochs=notanint");
    CHECK_THROWS_AS(cfg.get_int("train.epochs"), sokd::ConfigError);
}

TEST_CASE("resolved text echoes every schema key and checksums deterministically") {
    auto a = sokd::Config::parse_text("mode = sokd\n");
    const std::string text = a.resolved_text();
    for (const auto& d : sokd::Config::schema())
        CHECK(text.find(std::string(d.key) + " = ") != std::string::npos);

    auto b = sokd::Config::parse_text("mode = sokd\n");
    CHECK(a.checksum() == b.checksum());
    b.apply_override("loss.tau=9");
    CHECK(a.checksum() != b.checksum());
}

TEST_CASE("experiment config conversion validates enums") {
    auto good = sokd::Config::parse_text(
        "mode = sokd\nmodel.student = dense:8:8,relu,dense:8:4\n"
        "loss.kl_direction = target_first\nloss.mask = ce_kbm,kl_kbm_s\n"
        "feature.transform = attention_map\nfeature.distance = l1\n"
        "opt.schedule = 5:0.5,9:0.1\nopt_teacher.lr = 0.05\n");
    auto e = sokd::to_experiment_config(good);
    CHECK(e.mode == sokd::Mode::sokd);
    CHECK(e.distill.kl_direction == sokd::KlDirection::target_first);
    CHECK(e.mask.ce_kbm);
    CHECK_FALSE(e.mask.kl_kbm_teacher);
    CHECK(e.mask.kl_kbm_student);
    CHECK(e.feature.kind == sokd::FeatureTransform::attention_map);
    CHECK(e.feature.distance == sokd::FeatureDistance::l1);
    REQUIRE(e.opt_student.schedule.size() == 2);
    CHECK(e.opt_student.schedule[1] == std::pair<int, float>{9, 0.1f});
    CHECK(e.opt_teacher.lr == 0.05f);
    CHECK(e.opt_teacher.momentum == e.opt_student.momentum);

    CHECK_THROWS_AS(
        sokd::to_experiment_config(sokd::Config::parse_text("mode = nonsense\n")),
        sokd::ConfigError);
    CHECK_THROWS_AS(
        sokd::to_experiment_config(sokd::Config::parse_text("loss.mask = ce_kbm,typo\n")),
        sokd::ConfigError);
    CHECK_THROWS_AS(
        sokd::to_experiment_config(sokd::Config::parse_text("opt.schedule = nope\n")),
        sokd::ConfigError);
}

TEST_CASE("shipped example configs stay valid") {
    namespace fs = std::filesystem;
    const fs::path dir = SOKD_CONFIGS_DIR;
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".cfg") continue;
        ++count;
        auto cfg = sokd::Config::parse_file(entry.path().string());
        CHECK_NOTHROW(sokd::to_experiment_config(cfg));
    }
    CHECK(count >= 6);
}
