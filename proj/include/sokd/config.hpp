#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sokd/trainer.hpp"

namespace sokd {

// Experiment configuration file: one `key.path = value` per line, `#`
// comments. Unknown keys are rejected outright; silent typos are the top
// reproducibility hazard. Overrides arrive as extra `key=value` pairs and
// win over the file.
class Config {
  public:
    struct KeyDesc {
        const char* key;
        const char* def;  // default value as text
    };

    // the full schema; resolved_text() echoes every key in this order
    static const std::vector<KeyDesc>& schema() {
        static const std::vector<KeyDesc> keys = {
            {"mode", "vanilla"},
            {"data.kind", "blobs"},
            {"data.seed", "1"},
            {"data.classes", "4"},
            {"data.dim", "8"},
            {"data.per_class", "313"},
            {"data.spread", "1.0"},
            {"data.images", ""},
            {"data.labels", ""},
            {"data.test_images", ""},
            {"data.test_labels", ""},
            {"data.path", ""},
            {"data.test_path", ""},
            {"data.label_column", ""},
            {"model.student", ""},
            {"model.teacher", ""},
            {"model.teacher_ckpt", ""},
            {"model.checkpoint", ""},
            {"model.split_index", "0"},
            {"model.kbm_init", "teacher_copy"},
            {"loss.lambda1", "1.0"},
            {"loss.lambda2", "1.0"},
            {"loss.alpha1", "1.0"},
            {"loss.alpha2", "1.0"},
            {"loss.alpha3", "1.0"},
            {"loss.tau", "3.0"},
            {"loss.kl_direction", "learner_first"},
            {"loss.scale_kl_by_tau_sq", "false"},
            {"loss.mask", "ce_kbm,kl_kbm_t,kl_kbm_s"},
            {"feature.transform", "pairwise_similarity"},
            {"feature.distance", "l2"},
            {"feature.tap_teacher", ""},
            {"feature.tap_kbm", ""},
            {"feature.tap_student", ""},
            {"opt.lr", "0.1"},
            {"opt.momentum", "0.9"},
            {"opt.weight_decay", "0.0005"},
            {"opt.schedule", "15:0.1,23:0.1"},
            {"opt_teacher.lr", ""},
            {"opt_teacher.momentum", ""},
            {"opt_teacher.weight_decay", ""},
            {"opt_teacher.schedule", ""},
            {"train.epochs", "30"},
            {"train.batch_size", "64"},
            {"train.drop_last", "false"},
            {"train.seed", "1"},
            {"train.sequential_updates", "false"},
            {"metrics.enable", "true"},
            {"metrics.tap_teacher", ""},
            {"metrics.tap_student", ""},
            {"metrics.split", "train"},
            {"ablate.axis", ""},
            {"ablate.masks", ""},
            {"ablate.splits", ""},
            {"out.dir", ""},
        };
        return keys;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse_text(text, path);
    }

    static Config parse_text(const std::string& text, const std::string& origin = "<text>") {
        Config cfg;
        std::size_t pos = 0, lineno = 0;
        while (pos <= text.size()) {
            const std::size_t q = text.find('\n', pos);
            std::string line = text.substr(pos, q == std::string::npos ? std::string::npos : q - pos);
            pos = q == std::string::npos ? text.size() + 1 : q + 1;
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    // --set key=value
    void apply_override(const std::string& kv) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + kv + "' is not of the form key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    bool is_set(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it != values_.end()) return it->second;
        for (const auto& d : schema())
            if (key == d.key) return d.def;
        throw ConfigError("unknown config key '" + key + "'");
    }

    std::int64_t get_int(const std::string& key) const {
        const std::string v = get(key);
        std::int64_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw ConfigError("config field '" + key + "': '" + v + "' is not an integer");
        return out;
    }

    std::uint64_t get_u64(const std::string& key) const {
        const std::string v = get(key);
        std::uint64_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw ConfigError("config field '" + key + "': '" + v + "' is not an unsigned integer");
        return out;
    }

    double get_float(const std::string& key) const {
        const std::string v = get(key);
        try {
            std::size_t used = 0;
            const double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError("config field '" + key + "': '" + v + "' is not a number");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config field '" + key + "': '" + v + "' is not a boolean");
    }

    // the fully resolved config (defaults + file + overrides)
    std::string resolved_text() const {
        std::string s;
        for (const auto& d : schema()) s += std::string(d.key) + " = " + get(d.key) + "\n";
        return s;
    }

    std::string checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        for (char c : resolved_text()) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

  private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
        while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t')) --b;
        return s.substr(a, b - a);
    }

    void set(const std::string& key, const std::string& value) {
        bool known = false;
        for (const auto& d : schema())
            if (key == d.key) known = true;
        if (!known) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t q = s.find(sep, pos);
        std::string item = s.substr(pos, q == std::string::npos ? std::string::npos : q - pos);
        if (!item.empty()) out.push_back(item);
        if (q == std::string::npos) break;
        pos = q + 1;
    }
    return out;
}

inline std::vector<std::pair<int, float>> parse_schedule(const std::string& text,
                                                         const std::string& field) {
    std::vector<std::pair<int, float>> out;
    for (const std::string& item : split_list(text, ',')) {
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw ConfigError("config field '" + field + "': entry '" + item +
                              "' is not epoch:multiplier");
        try {
            out.emplace_back(std::stoi(item.substr(0, colon)), std::stof(item.substr(colon + 1)));
        } catch (const std::exception&) {
            throw ConfigError("config field '" + field + "': bad entry '" + item + "'");
        }
    }
    return out;
}

inline AblationMask parse_mask(const std::string& text, const std::string& field) {
    AblationMask mask;
    mask.ce_kbm = mask.kl_kbm_teacher = mask.kl_kbm_student = false;
    for (const std::string& term : split_list(text, ',')) {
        if (term == "ce_kbm") mask.ce_kbm = true;
        else if (term == "kl_kbm_t") mask.kl_kbm_teacher = true;
        else if (term == "kl_kbm_s") mask.kl_kbm_student = true;
        else
            throw ConfigError("config field '" + field + "': unknown loss term '" + term +
                              "' (expected ce_kbm, kl_kbm_t, kl_kbm_s)");
    }
    return mask;
}

}  // namespace detail

inline ExperimentConfig to_experiment_config(const Config& c) {
    ExperimentConfig e;

    const std::string mode = c.get("mode");
    if (mode == "vanilla") e.mode = Mode::vanilla;
    else if (mode == "kd") e.mode = Mode::kd;
    else if (mode == "dml") e.mode = Mode::dml;
    else if (mode == "sokd") e.mode = Mode::sokd;
    else if (mode == "sokd_feature") e.mode = Mode::sokd_feature;
    else throw ConfigError("config field 'mode': unknown mode '" + mode + "'");

    const std::string kind = c.get("data.kind");
    if (kind == "blobs") e.data.kind = DataConfig::Kind::blobs;
    else if (kind == "idx") e.data.kind = DataConfig::Kind::idx;
    else if (kind == "csv") e.data.kind = DataConfig::Kind::csv;
    else throw ConfigError("config field 'data.kind': unknown kind '" + kind + "'");
    e.data.seed = c.get_u64("data.seed");
    e.data.classes = static_cast<int>(c.get_int("data.classes"));
    e.data.dim = static_cast<int>(c.get_int("data.dim"));
    e.data.per_class = static_cast<int>(c.get_int("data.per_class"));
    e.data.spread = static_cast<float>(c.get_float("data.spread"));
    e.data.images = c.get("data.images");
    e.data.labels = c.get("data.labels");
    e.data.test_images = c.get("data.test_images");
    e.data.test_labels = c.get("data.test_labels");
    e.data.path = c.get("data.path");
    e.data.test_path = c.get("data.test_path");
    e.data.label_column = c.get("data.label_column");

    e.student_arch = c.get("model.student");
    e.teacher_arch = c.get("model.teacher");
    e.teacher_ckpt = c.get("model.teacher_ckpt");
    e.split_index = static_cast<int>(c.get_int("model.split_index"));
    const std::string init = c.get("model.kbm_init");
    if (init == "teacher_copy") e.kbm_init = KbmInit::teacher_copy;
    else if (init == "random") e.kbm_init = KbmInit::random;
    else throw ConfigError("config field 'model.kbm_init': unknown init '" + init + "'");

    e.weights.lambda1 = static_cast<float>(c.get_float("loss.lambda1"));
    e.weights.lambda2 = static_cast<float>(c.get_float("loss.lambda2"));
    e.weights.alpha1 = static_cast<float>(c.get_float("loss.alpha1"));
    e.weights.alpha2 = static_cast<float>(c.get_float("loss.alpha2"));
    e.weights.alpha3 = static_cast<float>(c.get_float("loss.alpha3"));
    e.weights.tau = static_cast<float>(c.get_float("loss.tau"));
    const std::string dir = c.get("loss.kl_direction");
    if (dir == "learner_first") e.distill.kl_direction = KlDirection::learner_first;
    else if (dir == "target_first") e.distill.kl_direction = KlDirection::target_first;
    else throw ConfigError("config field 'loss.kl_direction': expected learner_first or target_first");
    e.distill.scale_kl_by_tau_sq = c.get_bool("loss.scale_kl_by_tau_sq");
    e.mask = detail::parse_mask(c.get("loss.mask"), "loss.mask");

    const std::string transform = c.get("feature.transform");
    if (transform == "attention_map") e.feature.kind = FeatureTransform::attention_map;
    else if (transform == "pairwise_similarity") e.feature.kind = FeatureTransform::pairwise_similarity;
    else if (transform == "identity") e.feature.kind = FeatureTransform::identity;
    else throw ConfigError("config field 'feature.transform': unknown transform '" + transform + "'");
    const std::string distance = c.get("feature.distance");
    if (distance == "l2") e.feature.distance = FeatureDistance::l2;
    else if (distance == "l1") e.feature.distance = FeatureDistance::l1;
    else if (distance == "frobenius") e.feature.distance = FeatureDistance::frobenius;
    else throw ConfigError("config field 'feature.distance': unknown distance '" + distance + "'");
    e.feature_tap_teacher = c.get("feature.tap_teacher");
    e.feature_tap_kbm = c.get("feature.tap_kbm");
    e.feature_tap_student = c.get("feature.tap_student");

    e.opt_student.lr = static_cast<float>(c.get_float("opt.lr"));
    e.opt_student.momentum = static_cast<float>(c.get_float("opt.momentum"));
    e.opt_student.weight_decay = static_cast<float>(c.get_float("opt.weight_decay"));
    e.opt_student.schedule = detail::parse_schedule(c.get("opt.schedule"), "opt.schedule");
    // the second network's optimizer defaults to the student's settings
    e.opt_teacher = e.opt_student;
    if (!c.get("opt_teacher.lr").empty())
        e.opt_teacher.lr = static_cast<float>(c.get_float("opt_teacher.lr"));
    if (!c.get("opt_teacher.momentum").empty())
        e.opt_teacher.momentum = static_cast<float>(c.get_float("opt_teacher.momentum"));
    if (!c.get("opt_teacher.weight_decay").empty())
        e.opt_teacher.weight_decay = static_cast<float>(c.get_float("opt_teacher.weight_decay"));
    if (!c.get("opt_teacher.schedule").empty())
        e.opt_teacher.schedule =
            detail::parse_schedule(c.get("opt_teacher.schedule"), "opt_teacher.schedule");

    e.epochs = static_cast<int>(c.get_int("train.epochs"));
    e.batch_size = c.get_int("train.batch_size");
    e.drop_last = c.get_bool("train.drop_last");
    e.train_seed = c.get_u64("train.seed");
    e.sequential_updates = c.get_bool("train.sequential_updates");

    e.metrics_enable = c.get_bool("metrics.enable");
    e.metrics_tap_teacher = c.get("metrics.tap_teacher");
    e.metrics_tap_student = c.get("metrics.tap_student");
    const std::string msplit = c.get("metrics.split");
    if (msplit == "train") e.metrics_split = Split::train;
    else if (msplit == "test") e.metrics_split = Split::test;
    else throw ConfigError("config field 'metrics.split': expected train or test");

    e.out_dir = c.get("out.dir");
    return e;
}

}  // namespace sokd
