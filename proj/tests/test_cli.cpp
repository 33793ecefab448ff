#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "sokd/checkpoint.hpp"
#include "sokd/nn.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CliFixture {
    fs::path dir;

    CliFixture() : dir(fs::temp_directory_path() / "sokd_cli_test") {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~CliFixture() { fs::remove_all(dir); }

    CliResult run(const std::string& args) const {
        const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
        const std::string cmd = std::string(SOKD_CLI_PATH) + " " + args + " > " + out.string() +
                                " 2> " + err.string();
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.exit_code = WEXITSTATUS(status);
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    fs::path write_config(const std::string& name, const std::string& body) const {
        const fs::path p = dir / name;
        std::ofstream out(p);
        out << body;
        return p;
    }

    std::string latest_run(const std::string& out_dir) const {
        std::string s = slurp(dir / out_dir / "latest");
        while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
        return s;
    }

    static std::string tiny_data() {
        return "data.kind = blobs\ndata.seed = 3\ndata.classes = 3\ndata.dim = 4\n"
               "data.per_class = 25\ndata.spread = 0.8\n";
    }
};

}  // namespace

TEST_CASE("pretrain produces checkpoint, log and echoed config") {
    CliFixture fx;
    fx.write_config("t.cfg", "mode = vanilla\n" + CliFixture::tiny_data() +
                                 "model.student = dense:4:8,relu,dense:8:3\n"
                                 "train.epochs = 3\ntrain.seed = 5\nout.dir = " +
                                 (fx.dir / "runs").string() + "\n");
    auto r = fx.run("pretrain -c " + (fx.dir / "t.cfg").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const fs::path run_dir = fx.latest_run("runs");
    CHECK(fs::exists(run_dir / "teacher.ckpt"));
    CHECK(fs::exists(run_dir / "run.csv"));
    CHECK(fs::exists(run_dir / "summary.txt"));
    CHECK(fs::exists(run_dir / "config_resolved.txt"));
    CHECK(fs::exists(run_dir / "dataset_manifest.txt"));

    SECTION("identical rerun gives identical run.csv bytes") {
        auto r2 = fx.run("pretrain -c " + (fx.dir / "t.cfg").string());
        REQUIRE(r2.exit_code == 0);
        const fs::path run2 = fx.latest_run("runs");
        REQUIRE(run2 != run_dir.string());
        CHECK(slurp(run_dir / "run.csv") == slurp(fs::path(run2) / "run.csv"));
        CHECK(slurp(run_dir / "config_resolved.txt") ==
              slurp(fs::path(run2) / "config_resolved.txt"));
    }

    SECTION("--set override lands in the echoed config") {
        auto r3 = fx.run("pretrain -c " + (fx.dir / "t.cfg").string() +
                         " --set loss.tau=3 --set train.epochs=2");
        REQUIRE(r3.exit_code == 0);
        const std::string echoed = slurp(fs::path(fx.latest_run("runs")) / "config_resolved.txt");
        CHECK(echoed.find("loss.tau = 3\n") != std::string::npos);
        CHECK(echoed.find("train.epochs = 2\n") != std::string::npos);
    }
}

TEST_CASE("configuration failures exit with code 2 naming the field") {
    CliFixture fx;
    fx.write_config("bad.cfg", "mode = vanilla\ndata.kind = idx\n"
                               "model.student = dense:4:8,relu,dense:8:3\n"
                               "out.dir = " + (fx.dir / "runs").string() + "\n");
    auto r = fx.run("pretrain -c " + (fx.dir / "bad.cfg").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("data.images") != std::string::npos);

    fx.write_config("unknown.cfg", "mode = vanilla\nnot.a.key = 1\n");
    auto r2 = fx.run("pretrain -c " + (fx.dir / "unknown.cfg").string());
    CHECK(r2.exit_code == 2);
    CHECK(r2.err.find("not.a.key") != std::string::npos);

    auto r3 = fx.run("pretrain -c " + (fx.dir / "missing.cfg").string());
    CHECK(r3.exit_code == 2);

    // distill in kd mode without a teacher checkpoint
    fx.write_config("kd.cfg", "mode = kd\n" + CliFixture::tiny_data() +
                                  "model.student = dense:4:8,relu,dense:8:3\n"
                                  "train.epochs = 2\nout.dir = " + (fx.dir / "runs").string() + "\n");
    auto r4 = fx.run("distill -c " + (fx.dir / "kd.cfg").string());
    CHECK(r4.exit_code == 2);
    CHECK(r4.err.find("model.teacher_ckpt") != std::string::npos);

    // pretrain refuses non-vanilla configs
    auto r5 = fx.run("pretrain -c " + (fx.dir / "kd.cfg").string());
    CHECK(r5.exit_code == 2);
}

TEST_CASE("sokd distill emits student and reconstructed teacher checkpoints") {
    CliFixture fx;
    fx.write_config("t.cfg", "mode = vanilla\n" + CliFixture::tiny_data() +
                                 "model.student = dense:4:12,relu,dense:12:8,relu,dense:8:3\n"
                                 "train.epochs = 4\ntrain.seed = 9\nout.dir = " +
                                 (fx.dir / "truns").string() + "\n");
    REQUIRE(fx.run("pretrain -c " + (fx.dir / "t.cfg").string()).exit_code == 0);
    const std::string teacher = (fs::path(fx.latest_run("truns")) / "teacher.ckpt").string();

    fx.write_config("s.cfg", "mode = sokd\n" + CliFixture::tiny_data() +
                                 "model.student = dense:4:8,relu,dense:8:3\n"
                                 "model.teacher_ckpt = " + teacher + "\n"
                                 "train.epochs = 3\ntrain.seed = 2\nout.dir = " +
                                 (fx.dir / "sruns").string() + "\n");
    auto r = fx.run("distill -c " + (fx.dir / "s.cfg").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const fs::path run_dir = fx.latest_run("sruns");
    CHECK(fs::exists(run_dir / "student.ckpt"));
    CHECK(fs::exists(run_dir / "teacher_reconstructed.ckpt"));
    CHECK(fs::exists(run_dir / "run.csv"));
    // run.csv has the reconstructed-teacher column populated
    const std::string csv = slurp(run_dir / "run.csv");
    const std::size_t line1 = csv.find('\n') + 1;
    std::size_t commas = 0, col = 0;
    for (std::size_t i = line1; i < csv.size() && csv[i] != '\n'; ++i) {
        if (csv[i] == ',') {
            ++commas;
            if (commas == 6) col = i + 1;
        }
    }
    CHECK(col > 0);
    CHECK(csv[col] != ',');  // non-empty acc_test_kbm_reconstructed

    SECTION("eval runs on the produced student checkpoint") {
        fx.write_config("e.cfg", CliFixture::tiny_data() + "model.checkpoint = " +
                                     (run_dir / "student.ckpt").string() + "\n");
        auto re = fx.run("eval -c " + (fx.dir / "e.cfg").string() + " -o " +
                         (fx.dir / "eout").string());
        REQUIRE(re.exit_code == 0);
        CHECK(re.out.find("acc_test = ") != std::string::npos);
        CHECK(fs::exists(fx.dir / "eout" / "eval.csv"));
        CHECK(fs::exists(fx.dir / "eout" / "config_resolved.txt"));
    }
}

TEST_CASE("metrics command") {
    CliFixture fx;
    fx.write_config("t.cfg", "mode = vanilla\n" + CliFixture::tiny_data() +
                                 "model.student = dense:4:8,relu,dense:8:3\n"
                                 "train.epochs = 3\ntrain.seed = 5\nout.dir = " +
                                 (fx.dir / "runs").string() + "\n");
    REQUIRE(fx.run("pretrain -c " + (fx.dir / "t.cfg").string()).exit_code == 0);
    const std::string ckpt = (fs::path(fx.latest_run("runs")) / "teacher.ckpt").string();
    fx.write_config("d.cfg", CliFixture::tiny_data());

    SECTION("same checkpoint for both roles") {
        auto r = fx.run("metrics --teacher " + ckpt + " --student " + ckpt + " -c " +
                        (fx.dir / "d.cfg").string() + " -o " + (fx.dir / "mout").string());
        INFO(r.err);
        REQUIRE(r.exit_code == 0);
        CHECK(r.out.find("run_id,epoch,split,acc_teacher,acc_student,cka,ier,mr") !=
              std::string::npos);
        CHECK(r.out.find(",1.000000,0.0000,") != std::string::npos);  // cka=1, ier=0
        CHECK(fs::exists(fx.dir / "mout" / "metrics.csv"));
        CHECK(fs::exists(fx.dir / "mout" / "config_resolved.txt"));
    }

    SECTION("disjoint constant-output models give ier=100 and blank mr") {
        // two models whose biases force different constant predictions
        auto m0 = sokd::build_model(sokd::parse_arch("dense:4:3"), 1);
        for (auto& v : m0.layers[0].weight.mutable_data()) v = 0.0f;
        m0.layers[0].bias.mutable_data()[0] = 9.0f;
        auto m1 = m0.deep_copy();
        m1.layers[0].bias.mutable_data()[0] = 0.0f;
        m1.layers[0].bias.mutable_data()[1] = 9.0f;
        const std::string p0 = (fx.dir / "const0.ckpt").string();
        const std::string p1 = (fx.dir / "const1.ckpt").string();
        sokd::save_checkpoint(m0, p0);
        sokd::save_checkpoint(m1, p1);
        auto r = fx.run("metrics --teacher " + p0 + " --student " + p1 + " -c " +
                        (fx.dir / "d.cfg").string());
        INFO(r.err);
        REQUIRE(r.exit_code == 0);
        CHECK(r.out.find(",100.0000,\n") != std::string::npos);  // ier=100, mr absent
    }

    SECTION("incompatible checkpoint exits 2") {
        auto wide = sokd::build_model(sokd::parse_arch("dense:9:3"), 1);
        const std::string pw = (fx.dir / "wide.ckpt").string();
        sokd::save_checkpoint(wide, pw);
        auto r = fx.run("metrics --teacher " + pw + " --student " + ckpt + " -c " +
                        (fx.dir / "d.cfg").string());
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("compare command aggregates run logs") {
    CliFixture fx;
    const std::string base = "mode = vanilla\n" + CliFixture::tiny_data() +
                             "model.student = dense:4:8,relu,dense:8:3\n"
                             "train.epochs = 2\nout.dir = " + (fx.dir / "runs").string() + "\n";
    fx.write_config("t.cfg", base);
    std::vector<std::string> csvs;
    std::vector<double> finals;
    for (int seed : {1, 2, 3}) {
        auto r = fx.run("pretrain -c " + (fx.dir / "t.cfg").string() +
                        " --set train.seed=" + std::to_string(seed));
        REQUIRE(r.exit_code == 0);
        const fs::path run_dir = fx.latest_run("runs");
        csvs.push_back((run_dir / "run.csv").string());
        // scripted recomputation of the final test accuracy
        const std::string summary = slurp(run_dir / "summary.txt");
        const auto at = summary.find("final_acc_test_s = ");
        finals.push_back(std::stod(summary.substr(at + 19)));
    }
    auto r = fx.run("compare " + csvs[0] + " " + csvs[1] + " " + csvs[2] + " -o " +
                    (fx.dir / "cmp").string());
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(fx.dir / "cmp" / "comparison.txt"));
    const std::string csv = slurp(fx.dir / "cmp" / "comparison.csv");
    char expect[64];
    std::snprintf(expect, sizeof(expect), "vanilla,3,%.4f", oracle::median(finals));
    CHECK(csv.find(expect) != std::string::npos);

    SECTION("schema mismatch exits 2") {
        const fs::path bad = fx.dir / "bad.csv";
        std::ofstream out(bad);
        out << "epoch,something\n0,1\n";
        out.close();
        auto rb = fx.run("compare " + csvs[0] + " " + bad.string());
        CHECK(rb.exit_code == 2);
    }

    SECTION("fewer than two logs exits 2") {
        auto r1 = fx.run("compare " + csvs[0]);
        CHECK(r1.exit_code == 2);
    }

    SECTION("differing epoch counts are flagged") {
        auto r4 = fx.run("pretrain -c " + (fx.dir / "t.cfg").string() +
                         " --set train.epochs=3 --set train.seed=4");
        REQUIRE(r4.exit_code == 0);
        const std::string longer = (fs::path(fx.latest_run("runs")) / "run.csv").string();
        auto rc = fx.run("compare " + csvs[0] + " " + longer);
        REQUIRE(rc.exit_code == 0);
        CHECK(rc.out.find("epoch counts differ") != std::string::npos);
    }
}

TEST_CASE("ablate command") {
    CliFixture fx;
    fx.write_config("t.cfg", "mode = vanilla\n" + CliFixture::tiny_data() +
                                 "model.student = dense:4:12,relu,dense:12:8,relu,dense:8:3\n"
                                 "train.epochs = 3\ntrain.seed = 9\nout.dir = " +
                                 (fx.dir / "truns").string() + "\n");
    REQUIRE(fx.run("pretrain -c " + (fx.dir / "t.cfg").string()).exit_code == 0);
    const std::string teacher = (fs::path(fx.latest_run("truns")) / "teacher.ckpt").string();

    const std::string base = "mode = sokd\n" + CliFixture::tiny_data() +
                             "model.student = dense:4:8,relu,dense:8:3\n"
                             "model.teacher_ckpt = " + teacher + "\ntrain.epochs = 2\n";

    SECTION("loss-mask axis with duplicate deduplication") {
        fx.write_config("a.cfg", base + "ablate.axis = loss_mask\n"
                                        "ablate.masks = ce_kbm;ce_kbm,kl_kbm_t;ce_kbm\n"
                                        "out.dir = " + (fx.dir / "aruns").string() + "\n");
        auto r = fx.run("ablate -c " + (fx.dir / "a.cfg").string());
        INFO(r.err);
        REQUIRE(r.exit_code == 0);
        CHECK(r.err.find("duplicate ablation variant") != std::string::npos);
        CHECK(fs::exists(fx.dir / "aruns" / "ce_kbm"));
        CHECK(fs::exists(fx.dir / "aruns" / "ce_kbm+kl_kbm_t"));
        CHECK(fs::exists(fx.dir / "aruns" / "comparison.txt"));
    }

    SECTION("split-index axis") {
        fx.write_config("a2.cfg", base + "ablate.axis = split_index\n"
                                         "ablate.splits = 1,2\n"
                                         "out.dir = " + (fx.dir / "a2runs").string() + "\n");
        auto r = fx.run("ablate -c " + (fx.dir / "a2.cfg").string());
        INFO(r.err);
        REQUIRE(r.exit_code == 0);
        CHECK(fs::exists(fx.dir / "a2runs" / "l1"));
        CHECK(fs::exists(fx.dir / "a2runs" / "l2"));
    }

    SECTION("empty variant list exits 2") {
        fx.write_config("a3.cfg", base + "ablate.axis = loss_mask\nout.dir = " +
                                       (fx.dir / "a3runs").string() + "\n");
        auto r = fx.run("ablate -c " + (fx.dir / "a3.cfg").string());
        CHECK(r.exit_code == 2);
    }
}
