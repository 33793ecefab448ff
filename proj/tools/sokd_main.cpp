// sokd: teacher pretraining, knowledge-distillation experiments (kd, dml,
// sokd, sokd_feature), imitation metrics between checkpoints, run-log
// comparison, and ablation sweeps. Exit codes: 0 success, 2 configuration
// error, 1 runtime error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "sokd/config.hpp"
#include "sokd/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("-c,--config", args.config_path, "configuration file");
    if (config_required) opt->required();
    cmd->add_option("--set", args.overrides, "override as key.path=value (repeatable)");
    cmd->add_option("-o,--out", args.out_dir, "output directory (overrides out.dir)");
}

sokd::Config load_config(const CommonArgs& args) {
    sokd::Config cfg = args.config_path.empty() ? sokd::Config()
                                                : sokd::Config::parse_file(args.config_path);
    for (const auto& kv : args.overrides) cfg.apply_override(kv);
    if (!args.out_dir.empty()) cfg.apply_override("out.dir=" + args.out_dir);
    return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw sokd::IoError("cannot write '" + p.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// <out>/<mode>_<seed>_<timestamp>[_k], plus a `latest` pointer file
fs::path make_run_dir(const std::string& base, const std::string& mode, std::uint64_t seed) {
    if (base.empty()) throw sokd::ConfigError("config field 'out.dir': required (or pass --out)");
    fs::create_directories(base);
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::tm tm_buf{};
    localtime_r(&now, &tm_buf);
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm_buf);
    std::string name = mode + "_" + std::to_string(seed) + "_" + stamp;
    fs::path dir = fs::path(base) / name;
    for (int k = 2; fs::exists(dir); ++k) dir = fs::path(base) / (name + "_" + std::to_string(k));
    fs::create_directories(dir);
    write_text(fs::path(base) / "latest", dir.string() + "\n");
    return dir;
}

// resolve config -> run dir -> echo config -> run
sokd::ExperimentResult run_from_config(const sokd::Config& cfg, fs::path* run_dir_out) {
    sokd::ExperimentConfig ecfg = sokd::to_experiment_config(cfg);
    const fs::path run_dir = make_run_dir(cfg.get("out.dir"), sokd::mode_name(ecfg.mode),
                                          ecfg.train_seed);
    write_text(run_dir / "config_resolved.txt", cfg.resolved_text());
    ecfg.out_dir = run_dir.string();
    ecfg.config_checksum = cfg.checksum();
    if (run_dir_out) *run_dir_out = run_dir;
    return sokd::run_experiment(ecfg);
}

int cmd_pretrain(const CommonArgs& args) {
    sokd::Config cfg = load_config(args);
    if (cfg.get("mode") != "vanilla")
        throw sokd::ConfigError("config field 'mode': pretrain expects vanilla, got '" +
                                cfg.get("mode") + "'");
    fs::path run_dir;
    auto result = run_from_config(cfg, &run_dir);
    std::printf("[pretrain] seed=%llu final_acc_test=%.4f -> %s\n",
                static_cast<unsigned long long>(result.log.seed), result.log.final_acc_test_s,
                run_dir.string().c_str());
    return 0;
}

int cmd_distill(const CommonArgs& args) {
    sokd::Config cfg = load_config(args);
    const std::string mode = cfg.get("mode");
    if (mode != "kd" && mode != "dml" && mode != "sokd" && mode != "sokd_feature")
        throw sokd::ConfigError("config field 'mode': distill expects kd, dml, sokd or "
                                "sokd_feature, got '" + mode + "'");
    fs::path run_dir;
    auto result = run_from_config(cfg, &run_dir);
    std::printf("[%s] seed=%llu final_acc_test_s=%.4f", mode.c_str(),
                static_cast<unsigned long long>(result.log.seed), result.log.final_acc_test_s);
    if (result.log.final_acc_test_rec)
        std::printf(" reconstructed_teacher=%.4f", *result.log.final_acc_test_rec);
    std::printf(" -> %s\n", run_dir.string().c_str());
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    sokd::Config cfg = load_config(args);
    const std::string ckpt = cfg.get("model.checkpoint");
    if (ckpt.empty())
        throw sokd::ConfigError("config field 'model.checkpoint': required for eval");
    sokd::ExperimentConfig ecfg = sokd::to_experiment_config(cfg);
    sokd::SequentialModel model = sokd::load_checkpoint(ckpt).model;
    sokd::ExperimentConfig data_only = ecfg;
    data_only.mode = sokd::Mode::vanilla;
    sokd::ExperimentSetup setup = sokd::resolve_setup(data_only);
    const auto train_eval = sokd::evaluate(model, setup.train);
    const auto test_eval = sokd::evaluate(model, setup.test);
    std::printf("acc_train = %.4f\nacc_test = %.4f\n", train_eval.accuracy, test_eval.accuracy);
    if (!cfg.get("out.dir").empty()) {
        fs::create_directories(cfg.get("out.dir"));
        write_text(fs::path(cfg.get("out.dir")) / "config_resolved.txt", cfg.resolved_text());
        write_text(fs::path(cfg.get("out.dir")) / "eval.csv",
                   "split,accuracy,samples\ntrain," + sokd::detail::fmt(train_eval.accuracy, "%.4f") +
                       "," + std::to_string(setup.train.size()) + "\ntest," +
                       sokd::detail::fmt(test_eval.accuracy, "%.4f") + "," +
                       std::to_string(setup.test.size()) + "\n");
    }
    return 0;
}

int cmd_metrics(const CommonArgs& args, const std::string& teacher_ckpt,
                const std::string& student_ckpt, const std::string& tap) {
    sokd::Config cfg = load_config(args);
    sokd::ExperimentConfig ecfg = sokd::to_experiment_config(cfg);
    ecfg.mode = sokd::Mode::vanilla;
    sokd::ExperimentSetup setup = sokd::resolve_setup(ecfg);
    const sokd::Dataset& ds = ecfg.metrics_split == sokd::Split::train ? setup.train : setup.test;

    auto teacher = sokd::load_checkpoint(teacher_ckpt);
    auto student = sokd::load_checkpoint(student_ckpt);

    sokd::EvalResult te, se;
    try {
        te = sokd::evaluate(teacher.model, ds);
        se = sokd::evaluate(student.model, ds);
    } catch (const sokd::ShapeMismatch& e) {
        throw sokd::ConfigError(std::string("checkpoints are incompatible with the dataset: ") +
                                e.what());
    }

    sokd::PredictionRecord rec;
    rec.teacher_pred = te.predictions;
    rec.student_pred = se.predictions;
    rec.label = ds.labels;
    const double ier = sokd::imitation_error_rate(rec);
    const auto mr = sokd::misleading_rate(rec);

    std::string tap_t = !tap.empty() ? tap : cfg.get("metrics.tap_teacher");
    std::string tap_s = !tap.empty() ? tap : cfg.get("metrics.tap_student");
    if (tap_t.empty()) tap_t = sokd::default_tap(teacher.model);
    if (tap_s.empty()) tap_s = sokd::default_tap(student.model);
    std::optional<double> cka;
    if (!tap_t.empty() && !tap_s.empty()) {
        try {
            const auto fx = sokd::collect_activations(teacher.model, ds, tap_t);
            const auto fy = sokd::collect_activations(student.model, ds, tap_s);
            cka = sokd::linear_cka(fx, fy).value;
        } catch (const sokd::UnknownTap& e) {
            throw sokd::ConfigError(std::string("bad activation tap: ") + e.what());
        }
    }

    const std::string epoch = student.meta.count("epoch") ? student.meta.at("epoch") : "";
    const std::string split = ecfg.metrics_split == sokd::Split::train ? "train" : "test";
    std::string csv = "run_id,epoch,split,acc_teacher,acc_student,cka,ier,mr\n";
    csv += "metrics," + epoch + "," + split + "," + sokd::detail::fmt(te.accuracy, "%.4f") + "," +
           sokd::detail::fmt(se.accuracy, "%.4f") + "," +
           (cka ? sokd::detail::fmt(*cka, "%.6f") : std::string()) + "," +
           sokd::detail::fmt(ier, "%.4f") + "," +
           (mr ? sokd::detail::fmt(*mr, "%.4f") : std::string()) + "\n";
    std::fputs(csv.c_str(), stdout);
    if (!cfg.get("out.dir").empty()) {
        fs::create_directories(cfg.get("out.dir"));
        write_text(fs::path(cfg.get("out.dir")) / "config_resolved.txt", cfg.resolved_text());
        write_text(fs::path(cfg.get("out.dir")) / "metrics.csv", csv);
    }
    return 0;
}

struct LogEntry {
    std::string path;
    std::string mode = "unknown";
    std::string seed = "?";
    std::size_t epochs = 0;
    double final_acc = 0.0;
    std::optional<double> reconstructed_acc;
};

LogEntry read_run_log(const std::string& path, const std::string& expected_header) {
    std::ifstream in(path);
    if (!in) throw sokd::ConfigError("cannot open run log '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw sokd::ConfigError("run log '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected_header)
        throw sokd::ConfigError("run log '" + path + "' has a different schema");
    LogEntry e;
    e.path = path;
    std::string last;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        last = line;
        ++e.epochs;
    }
    if (last.empty()) throw sokd::ConfigError("run log '" + path + "' has no rows");
    // columns: epoch,lr,loss_t,loss_s,acc_train_s,acc_test_s,acc_rec,...
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (true) {
        const std::size_t q = last.find(',', pos);
        cells.push_back(last.substr(pos, q == std::string::npos ? std::string::npos : q - pos));
        if (q == std::string::npos) break;
        pos = q + 1;
    }
    if (cells.size() < 7) throw sokd::ConfigError("run log '" + path + "' has too few columns");
    e.final_acc = std::stod(cells[5]);
    if (!cells[6].empty()) e.reconstructed_acc = std::stod(cells[6]);

    // mode/seed from the sibling summary when present
    const fs::path summary = fs::path(path).parent_path() / "summary.txt";
    if (std::ifstream sin(summary); sin) {
        std::string sline;
        while (std::getline(sin, sline)) {
            if (sline.rfind("mode = ", 0) == 0) e.mode = sline.substr(7);
            if (sline.rfind("seed = ", 0) == 0) e.seed = sline.substr(7);
        }
    }
    return e;
}

std::string comparison_table(const std::vector<LogEntry>& entries) {
    std::set<std::size_t> epoch_counts;
    for (const auto& e : entries) epoch_counts.insert(e.epochs);

    std::map<std::string, std::vector<double>> by_mode;
    std::map<std::string, std::vector<double>> rec_by_mode;
    for (const auto& e : entries) {
        by_mode[e.mode].push_back(e.final_acc);
        if (e.reconstructed_acc) rec_by_mode[e.mode].push_back(*e.reconstructed_acc);
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };

    std::string txt = "mode        runs  median    min       max\n";
    std::string csv = "mode,runs,median_acc_test_s,min_acc_test_s,max_acc_test_s,"
                      "median_acc_reconstructed\n";
    for (const auto& [mode, accs] : by_mode) {
        std::vector<double> sorted = accs;
        std::sort(sorted.begin(), sorted.end());
        char line[160];
        std::snprintf(line, sizeof(line), "%-11s %-5zu %-9.4f %-9.4f %-9.4f\n", mode.c_str(),
                      accs.size(), median(accs), sorted.front(), sorted.back());
        txt += line;
        csv += mode + "," + std::to_string(accs.size()) + "," +
               sokd::detail::fmt(median(accs), "%.4f") + "," +
               sokd::detail::fmt(sorted.front(), "%.4f") + "," +
               sokd::detail::fmt(sorted.back(), "%.4f") + ",";
        if (rec_by_mode.count(mode)) csv += sokd::detail::fmt(median(rec_by_mode[mode]), "%.4f");
        csv += "\n";
    }
    if (epoch_counts.size() > 1)
        txt += "note: epoch counts differ across logs; compared on final rows only\n";
    return txt + "\x01" + csv;  // split marker, separated by caller
}

int cmd_compare(const std::vector<std::string>& logs, const std::string& out_dir) {
    if (logs.size() < 2) throw sokd::ConfigError("compare needs at least 2 run.csv paths");
    const std::string header =
        "epoch,lr,loss_teacher_or_kbm,loss_student,acc_train_s,acc_test_s,"
        "acc_test_kbm_reconstructed,cka,ier,mr";
    std::vector<LogEntry> entries;
    for (const auto& p : logs) entries.push_back(read_run_log(p, header));
    const std::string both = comparison_table(entries);
    const std::size_t cut = both.find('\x01');
    const std::string txt = both.substr(0, cut);
    const std::string csv = both.substr(cut + 1);
    std::fputs(txt.c_str(), stdout);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "comparison.txt", txt);
        write_text(fs::path(out_dir) / "comparison.csv", csv);
    }
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    sokd::Config cfg = load_config(args);
    const std::string mode = cfg.get("mode");
    if (mode != "sokd" && mode != "sokd_feature")
        throw sokd::ConfigError("config field 'mode': ablate expects sokd or sokd_feature");
    const std::string axis = cfg.get("ablate.axis");

    struct Variant {
        std::string name;
        std::string override_key;
        std::string override_value;
    };
    std::vector<Variant> variants;
    if (axis == "loss_mask") {
        std::vector<std::string> masks;
        for (const auto& m : sokd::detail::split_list(cfg.get("ablate.masks"), ';'))
            masks.push_back(m);
        for (const auto& m : masks) {
            std::string name = m;
            for (auto& ch : name)
                if (ch == ',') ch = '+';
            variants.push_back({name.empty() ? "none" : name, "loss.mask", m});
        }
    } else if (axis == "split_index") {
        for (const auto& l : sokd::detail::split_list(cfg.get("ablate.splits"), ','))
            variants.push_back({"l" + l, "model.split_index", l});
    } else {
        throw sokd::ConfigError("config field 'ablate.axis': expected loss_mask or split_index");
    }
    // dedup, keeping first occurrences
    std::set<std::string> seen;
    std::vector<Variant> unique;
    for (const auto& v : variants) {
        if (!seen.insert(v.override_value).second) {
            std::fprintf(stderr, "warning: duplicate ablation variant '%s' skipped\n",
                         v.name.c_str());
            continue;
        }
        unique.push_back(v);
    }
    if (unique.empty()) throw sokd::ConfigError("config field 'ablate.axis': no variants to run");

    const std::string base_out = cfg.get("out.dir");
    if (base_out.empty()) throw sokd::ConfigError("config field 'out.dir': required for ablate");
    std::vector<std::string> run_csvs;
    for (const auto& v : unique) {
        sokd::Config vcfg = cfg;
        vcfg.apply_override(v.override_key + "=" + v.override_value);
        vcfg.apply_override("out.dir=" + (fs::path(base_out) / v.name).string());
        fs::path run_dir;
        auto result = run_from_config(vcfg, &run_dir);
        std::printf("[ablate %s] final_acc_test_s=%.4f", v.name.c_str(),
                    result.log.final_acc_test_s);
        if (result.log.final_acc_test_rec)
            std::printf(" reconstructed_teacher=%.4f", *result.log.final_acc_test_rec);
        std::printf("\n");
        run_csvs.push_back((run_dir / "run.csv").string());
    }
    return cmd_compare(run_csvs, base_out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale knowledge distillation lab"};
    app.require_subcommand(1);

    CommonArgs pretrain_args, distill_args, eval_args, metrics_args, ablate_args;
    std::string metrics_teacher, metrics_student, metrics_tap;
    std::vector<std::string> compare_logs;
    std::string compare_out;

    auto* pretrain = app.add_subcommand("pretrain", "train a network from scratch (vanilla mode)");
    add_common(pretrain, pretrain_args);
    auto* distill = app.add_subcommand("distill", "run a distillation experiment");
    add_common(distill, distill_args);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval, eval_args);
    auto* metrics = app.add_subcommand("metrics", "imitation metrics between two checkpoints");
    add_common(metrics, metrics_args);
    metrics->add_option("--teacher", metrics_teacher, "teacher checkpoint")->required();
    metrics->add_option("--student", metrics_student, "student checkpoint")->required();
    metrics->add_option("--tap", metrics_tap, "activation tap layer for CKA (both networks)");
    auto* compare = app.add_subcommand("compare", "aligned comparison of run logs");
    compare->add_option("logs", compare_logs, "run.csv paths")->required()->expected(-2);
    compare->add_option("-o,--out", compare_out, "output directory");
    auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
    add_common(ablate, ablate_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (pretrain->parsed()) return cmd_pretrain(pretrain_args);
        if (distill->parsed()) return cmd_distill(distill_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (metrics->parsed())
            return cmd_metrics(metrics_args, metrics_teacher, metrics_student, metrics_tap);
        if (compare->parsed()) return cmd_compare(compare_logs, compare_out);
        if (ablate->parsed()) return cmd_ablate(ablate_args);
    } catch (const sokd::ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
