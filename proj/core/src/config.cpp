#include "spkvec/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace spkvec {
namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_index_list(const std::vector<Index>& v) {
    std::string out;
    for (Index i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

struct KeyBinding {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("key '" + key + "': cannot parse '" + value +
                                    "' as a number");
    }
}

Index parse_index(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size() || v < 0) throw std::invalid_argument("bad count");
        return static_cast<Index>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("key '" + key + "': cannot parse '" + value +
                                    "' as a non-negative integer");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("key '" + key + "': cannot parse '" + value +
                                    "' as an unsigned integer");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<Index> parse_index_list(const std::string& key, const std::string& value) {
    std::vector<Index> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) {
            throw std::invalid_argument("key '" + key + "': empty list entry in '" + value + "'");
        }
        out.push_back(parse_index(key, item));
    }
    if (out.empty()) throw std::invalid_argument("key '" + key + "': empty list");
    return out;
}

std::vector<KeyBinding> bindings() {
    std::vector<KeyBinding> b;
    auto add = [&](std::string key, std::function<std::string(const RunConfig&)> get,
                   std::function<void(RunConfig&, const std::string&)> set) {
        b.push_back({std::move(key), std::move(get), std::move(set)});
    };
    auto str = [&](std::string key, std::string RunConfig::* field) {
        add(key, [field](const RunConfig& c) { return c.*field; },
            [field](RunConfig& c, const std::string& v) { c.*field = v; });
    };
    auto dbl = [&](std::string key, std::function<double&(RunConfig&)> ref) {
        add(key, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
            [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); });
    };
    auto idx = [&](std::string key, std::function<Index&(RunConfig&)> ref) {
        add(key,
            [ref](const RunConfig& c) {
                return std::to_string(ref(const_cast<RunConfig&>(c)));
            },
            [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_index(key, v); });
    };
    auto flag = [&](std::string key, std::function<bool&(RunConfig&)> ref) {
        add(key,
            [ref](const RunConfig& c) {
                return ref(const_cast<RunConfig&>(c)) ? "true" : "false";
            },
            [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); });
    };

    // run-level
    add("variant", [](const RunConfig& c) { return variant_name(c.train.model.variant); },
        [](RunConfig& c, const std::string& v) { c.train.model.variant = variant_from_name(v); });
    add("pooling", [](const RunConfig& c) { return pooling_name(c.train.model.pooling); },
        [](RunConfig& c, const std::string& v) { c.train.model.pooling = pooling_from_name(v); });
    str("corpus", &RunConfig::corpus_dir);
    str("trials", &RunConfig::trials_path);
    str("test_trials", &RunConfig::test_trials_path);
    str("out", &RunConfig::out_dir);
    add("seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
        [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); });
    add("init_weights", [](const RunConfig& c) { return c.train.init_weights; },
        [](RunConfig& c, const std::string& v) { c.train.init_weights = v; });

    // encoder.*
    idx("encoder.conv_channels", [](RunConfig& c) -> Index& { return c.train.model.encoder.conv_channels; });
    add("encoder.conv_kernels",
        [](const RunConfig& c) { return fmt_index_list(c.train.model.encoder.conv_kernels); },
        [](RunConfig& c, const std::string& v) {
            c.train.model.encoder.conv_kernels = parse_index_list("encoder.conv_kernels", v);
        });
    add("encoder.conv_strides",
        [](const RunConfig& c) { return fmt_index_list(c.train.model.encoder.conv_strides); },
        [](RunConfig& c, const std::string& v) {
            c.train.model.encoder.conv_strides = parse_index_list("encoder.conv_strides", v);
        });
    idx("encoder.model_dim", [](RunConfig& c) -> Index& { return c.train.model.encoder.model_dim; });
    idx("encoder.ffn_dim", [](RunConfig& c) -> Index& { return c.train.model.encoder.ffn_dim; });
    idx("encoder.layers", [](RunConfig& c) -> Index& { return c.train.model.encoder.layers; });
    idx("encoder.heads", [](RunConfig& c) -> Index& { return c.train.model.encoder.heads; });
    idx("encoder.pos_conv_kernel",
        [](RunConfig& c) -> Index& { return c.train.model.encoder.pos_conv_kernel; });
    idx("encoder.pos_conv_groups",
        [](RunConfig& c) -> Index& { return c.train.model.encoder.pos_conv_groups; });
    dbl("encoder.dropout_p", [](RunConfig& c) -> double& { return c.train.model.encoder.dropout_p; });
    dbl("encoder.layerdrop_p",
        [](RunConfig& c) -> double& { return c.train.model.encoder.layerdrop_p; });
    dbl("encoder.time_mask_p",
        [](RunConfig& c) -> double& { return c.train.model.encoder.time_mask.probability; });
    idx("encoder.time_mask_span",
        [](RunConfig& c) -> Index& { return c.train.model.encoder.time_mask.span; });
    dbl("encoder.channel_mask_p",
        [](RunConfig& c) -> double& { return c.train.model.encoder.channel_mask.probability; });
    idx("encoder.channel_mask_span",
        [](RunConfig& c) -> Index& { return c.train.model.encoder.channel_mask.span; });
    flag("encoder.freeze_feature_extractor",
         [](RunConfig& c) -> bool& { return c.train.model.encoder.freeze_feature_extractor; });
    flag("encoder.cls_token", [](RunConfig& c) -> bool& { return c.train.model.encoder.cls_token; });

    // head.*
    dbl("head.scale", [](RunConfig& c) -> double& { return c.train.model.aam_scale; });
    dbl("head.margin", [](RunConfig& c) -> double& { return c.train.model.aam_margin; });

    // schedule.*
    add("schedule.kind", [](const RunConfig& c) { return schedule_name(c.train.schedule.kind); },
        [](RunConfig& c, const std::string& v) { c.train.schedule.kind = schedule_from_name(v); });
    dbl("schedule.lr", [](RunConfig& c) -> double& { return c.train.schedule.lr; });
    dbl("schedule.lr_start", [](RunConfig& c) -> double& { return c.train.schedule.lr_start; });
    dbl("schedule.lr_end", [](RunConfig& c) -> double& { return c.train.schedule.lr_end; });
    dbl("schedule.max_lr", [](RunConfig& c) -> double& { return c.train.schedule.max_lr; });
    dbl("schedule.warmup_fraction",
        [](RunConfig& c) -> double& { return c.train.schedule.warmup_fraction; });
    dbl("schedule.start_div", [](RunConfig& c) -> double& { return c.train.schedule.start_div; });
    dbl("schedule.final_div", [](RunConfig& c) -> double& { return c.train.schedule.final_div; });
    dbl("schedule.lr_floor_init",
        [](RunConfig& c) -> double& { return c.train.schedule.lr_floor_init; });
    dbl("schedule.lr_peak", [](RunConfig& c) -> double& { return c.train.schedule.lr_peak; });
    dbl("schedule.lr_floor_final",
        [](RunConfig& c) -> double& { return c.train.schedule.lr_floor_final; });
    idx("schedule.warmup_steps",
        [](RunConfig& c) -> Index& { return c.train.schedule.warmup_steps; });
    idx("schedule.hold_steps", [](RunConfig& c) -> Index& { return c.train.schedule.hold_steps; });

    // adam.*
    dbl("adam.beta1", [](RunConfig& c) -> double& { return c.train.adam.beta1; });
    dbl("adam.beta2", [](RunConfig& c) -> double& { return c.train.adam.beta2; });
    dbl("adam.eps", [](RunConfig& c) -> double& { return c.train.adam.eps; });
    dbl("adam.weight_decay", [](RunConfig& c) -> double& { return c.train.adam.weight_decay; });

    // train.*
    idx("train.iterations", [](RunConfig& c) -> Index& { return c.train.iterations; });
    idx("train.files_per_batch", [](RunConfig& c) -> Index& { return c.train.files_per_batch; });
    dbl("train.crop_seconds", [](RunConfig& c) -> double& { return c.train.crop_seconds; });
    idx("train.accum_files", [](RunConfig& c) -> Index& { return c.train.accum_files; });
    idx("train.validation_interval",
        [](RunConfig& c) -> Index& { return c.train.validation_interval; });
    idx("train.eval_crop_samples",
        [](RunConfig& c) -> Index& { return c.train.eval_crop_samples; });
    idx("train.pair_speakers", [](RunConfig& c) -> Index& { return c.train.pair.speakers; });
    idx("train.pair_utts_per_speaker",
        [](RunConfig& c) -> Index& { return c.train.pair.utts_per_speaker; });
    idx("train.pair_same", [](RunConfig& c) -> Index& { return c.train.pair.same_pairs; });
    idx("train.pair_diff", [](RunConfig& c) -> Index& { return c.train.pair.diff_pairs; });
    return b;
}

const std::vector<KeyBinding>& binding_table() {
    static const std::vector<KeyBinding> table = bindings();
    return table;
}

}  // namespace

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const KeyBinding& kb : binding_table()) {
        out += kb.key;
        out += " = ";
        out += kb.get(cfg);
        out += "\n";
    }
    return out;
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::map<std::string, const KeyBinding*> by_key;
    for (const KeyBinding& kb : binding_table()) by_key.emplace(kb.key, &kb);

    std::vector<std::string> problems;
    std::map<std::string, std::size_t> seen;
    std::istringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back(origin + ":" + std::to_string(line_no) +
                               ": expected 'key = value'");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = by_key.find(key);
        if (it == by_key.end()) {
            problems.push_back(origin + ":" + std::to_string(line_no) + ": unknown key '" + key +
                               "'");
            continue;
        }
        if (!seen.emplace(key, line_no).second) {
            problems.push_back(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                               key + "' (first set on line " + std::to_string(seen[key]) + ")");
            continue;
        }
        try {
            it->second->set(cfg, value);
        } catch (const std::exception& e) {
            problems.push_back(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!problems.empty()) {
        std::string msg = "config rejected:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw std::invalid_argument(msg);
    }
    return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

std::vector<std::string> config_problems(const RunConfig& cfg) {
    std::vector<std::string> bad = validate_config(cfg.train.model.encoder);
    ScheduleSpec sched = cfg.train.schedule;
    sched.total_steps = std::max<Index>(cfg.train.iterations, 1);
    for (const std::string& p : validate_schedule(sched)) bad.push_back(p);
    if (cfg.train.model.pooling == PoolingMethod::first_cls &&
        !cfg.train.model.encoder.cls_token) {
        bad.push_back("pooling first+cls requires encoder.cls_token = true");
    }
    if (cfg.train.files_per_batch == 0) bad.push_back("train.files_per_batch must be >= 1");
    if (!(cfg.train.crop_seconds > 0.0)) bad.push_back("train.crop_seconds must be positive");
    if (cfg.train.accum_files == 0) bad.push_back("train.accum_files must be >= 1");
    if (!(cfg.train.adam.beta1 >= 0.0 && cfg.train.adam.beta1 < 1.0) ||
        !(cfg.train.adam.beta2 >= 0.0 && cfg.train.adam.beta2 < 1.0)) {
        bad.push_back("adam betas must lie in [0, 1)");
    }
    if (!(cfg.train.adam.eps > 0.0)) bad.push_back("adam.eps must be positive");
    if (cfg.train.pair.speakers < 2) bad.push_back("train.pair_speakers must be >= 2");
    if (cfg.train.pair.utts_per_speaker < 2) {
        bad.push_back("train.pair_utts_per_speaker must be >= 2");
    }
    return bad;
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
    std::vector<std::string> out;
    for (const KeyBinding& kb : binding_table()) {
        if (kb.get(a) != kb.get(b)) out.push_back(kb.key);
    }
    return out;
}

}  // namespace spkvec
