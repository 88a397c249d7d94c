#include "dms/runconfig.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <variant>

#include "dms/rng.hpp"

extern char** environ;

namespace dms::runconfig {

namespace {

using Member = std::variant<uint64_t RunConfig::*, int RunConfig::*, double RunConfig::*,
                            std::string RunConfig::*, std::vector<double> RunConfig::*>;

struct Field {
    const char* section;
    const char* key;
    Member member;
};

const Field kFields[] = {
    {"run", "seed", &RunConfig::seed},
    {"corpus", "modulus", &RunConfig::modulus},
    {"corpus", "n_fact_keys", &RunConfig::n_fact_keys},
    {"corpus", "contamination_fraction", &RunConfig::contamination_fraction},
    {"corpus", "answer_len", &RunConfig::answer_len},
    {"corpus", "rule_holdout_fraction", &RunConfig::rule_holdout_fraction},
    {"corpus", "vocab_size", &RunConfig::vocab_size},
    {"model", "n_layers", &RunConfig::n_layers},
    {"model", "d_model", &RunConfig::d_model},
    {"model", "n_heads", &RunConfig::n_heads},
    {"model", "context_len", &RunConfig::context_len},
    {"train", "steps", &RunConfig::steps},
    {"train", "batch_size", &RunConfig::batch_size},
    {"train", "learning_rate", &RunConfig::learning_rate},
    {"train", "weight_decay", &RunConfig::weight_decay},
    {"train", "checkpoint_every", &RunConfig::checkpoint_every},
    {"train", "warmup_steps", &RunConfig::warmup_steps},
    {"train", "lr_final_factor", &RunConfig::lr_final_factor},
    {"train", "clip_norm", &RunConfig::clip_norm},
    {"train", "memo_boost", &RunConfig::memo_boost},
    {"train", "eval_train_items", &RunConfig::eval_train_items},
    {"train", "eval_heldout_items", &RunConfig::eval_heldout_items},
    {"label", "n_samples", &RunConfig::n_samples},
    {"label", "top_p", &RunConfig::label_top_p},
    {"label", "temperature", &RunConfig::label_temperature},
    {"label", "tau_low", &RunConfig::tau_low},
    {"label", "tau_high", &RunConfig::tau_high},
    {"label", "n_prompts_per_class", &RunConfig::n_prompts_per_class},
    {"label", "contam_share", &RunConfig::contam_share},
    {"label", "probe_holdout_fraction", &RunConfig::probe_holdout_fraction},
    {"label", "probe_regularization", &RunConfig::probe_regularization},
    {"patch", "max_pairs", &RunConfig::max_pairs},
    {"patch", "delta_metric", &RunConfig::delta_metric},
    {"steer", "alpha", &RunConfig::alpha},
    {"steer", "lambda", &RunConfig::lambda},
    {"steer", "mode", &RunConfig::steer_mode},
    {"eval", "top_p", &RunConfig::eval_top_p},
    {"eval", "temperature", &RunConfig::eval_temperature},
    {"eval", "plausibility", &RunConfig::plausibility},
    {"eval", "max_items", &RunConfig::eval_max_items},
    {"sweep", "alpha_grid", &RunConfig::alpha_grid},
    {"sweep", "max_items", &RunConfig::sweep_max_items},
    {"ib", "components", &RunConfig::ib_components},
    {"ib", "bins", &RunConfig::ib_bins},
    {"ib", "sample_items", &RunConfig::ib_sample_items},
};

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    size_t e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

void set_field(RunConfig& c, const Field& f, const std::string& raw) {
    const std::string value = trim(raw);
    try {
        std::visit(
            [&](auto member) {
                auto& slot = c.*member;
                using T = std::decay_t<decltype(slot)>;
                if constexpr (std::is_same_v<T, uint64_t>) {
                    slot = std::stoull(value);
                } else if constexpr (std::is_same_v<T, int>) {
                    slot = std::stoi(value);
                } else if constexpr (std::is_same_v<T, double>) {
                    slot = std::stod(value);
                } else if constexpr (std::is_same_v<T, std::string>) {
                    slot = value;
                } else {
                    std::vector<double> out;
                    std::istringstream ss(value);
                    std::string part;
                    while (std::getline(ss, part, ',')) {
                        part = trim(part);
                        if (!part.empty()) {
                            out.push_back(std::stod(part));
                        }
                    }
                    if (out.empty()) {
                        throw std::invalid_argument("empty list");
                    }
                    slot = std::move(out);
                }
            },
            f.member);
    } catch (const std::exception&) {
        throw ConfigError(std::string("config: bad value '") + value + "' for " + f.section + "." +
                          f.key);
    }
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // Prefer the short form when it round-trips.
    char shorter[40];
    std::snprintf(shorter, sizeof(shorter), "%g", v);
    if (std::strtod(shorter, nullptr) == v) {
        return shorter;
    }
    return buf;
}

std::string get_field(const RunConfig& c, const Field& f) {
    return std::visit(
        [&](auto member) -> std::string {
            const auto& slot = c.*member;
            using T = std::decay_t<decltype(slot)>;
            if constexpr (std::is_same_v<T, uint64_t> || std::is_same_v<T, int>) {
                return std::to_string(slot);
            } else if constexpr (std::is_same_v<T, double>) {
                return format_double(slot);
            } else if constexpr (std::is_same_v<T, std::string>) {
                return slot;
            } else {
                std::string out;
                for (size_t i = 0; i < slot.size(); ++i) {
                    if (i > 0) {
                        out += ",";
                    }
                    out += format_double(slot[i]);
                }
                return out;
            }
        },
        f.member);
}

const Field* find_field(const std::string& section, const std::string& key) {
    for (const Field& f : kFields) {
        if (section == f.section && key == f.key) {
            return &f;
        }
    }
    return nullptr;
}

std::string upper(std::string s) {
    for (char& ch : s) {
        ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    return s;
}

}  // namespace

corpus::TaskConfig RunConfig::task_config() const {
    corpus::TaskConfig t;
    t.modulus = modulus;
    t.n_fact_keys = n_fact_keys;
    t.contamination_fraction = contamination_fraction;
    t.answer_len = answer_len;
    t.rule_holdout_fraction = rule_holdout_fraction;
    t.vocab_size = vocab_size;
    t.seed = mix_seed(seed, 1);
    return t;
}

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig m;
    m.n_layers = n_layers;
    m.d_model = d_model;
    m.n_heads = n_heads;
    m.vocab_size = vocab_size;
    m.context_len = context_len;
    m.seed = mix_seed(seed, 2);
    return m;
}

training::TrainConfig RunConfig::train_config() const {
    training::TrainConfig t;
    t.steps = steps;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.weight_decay = weight_decay;
    t.checkpoint_every = checkpoint_every;
    t.warmup_steps = warmup_steps;
    t.lr_final_factor = lr_final_factor;
    t.clip_norm = clip_norm;
    t.memo_boost = memo_boost;
    t.eval_train_items = eval_train_items;
    t.eval_heldout_items = eval_heldout_items;
    t.seed = mix_seed(seed, 3);
    return t;
}

modeid::DiversityConfig RunConfig::diversity_config() const {
    modeid::DiversityConfig d;
    d.n_samples = n_samples;
    d.top_p = label_top_p;
    d.temperature = label_temperature;
    d.tau_low = effective_tau_low();
    d.tau_high = effective_tau_high();
    d.rng_seed = mix_seed(seed, 4);
    return d;
}

steering::SteerParams RunConfig::steer_params() const {
    steering::SteerParams p;
    p.alpha = alpha;
    p.lambda = lambda;
    if (steer_mode == "dynamic") {
        p.mode = steering::SteerMode::DYNAMIC;
    } else if (steer_mode == "static") {
        p.mode = steering::SteerMode::STATIC;
    } else if (steer_mode == "off") {
        p.mode = steering::SteerMode::OFF;
    } else {
        throw ConfigError("config: steer.mode must be dynamic, static, or off");
    }
    return p;
}

double RunConfig::effective_tau_low() const {
    return tau_low > 0.0 ? tau_low : 0.05 * answer_len;
}

double RunConfig::effective_tau_high() const {
    return tau_high > 0.0 ? tau_high : 0.5 * answer_len;
}

void RunConfig::validate() const {
    try {
        task_config().validate();
        model_config().validate();
        train_config().validate();
        diversity_config().validate();
        steer_params().validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (vocab_size != model_config().vocab_size) {
        throw ConfigError("config: model vocab must match corpus vocab");
    }
    if (context_len < 5 + answer_len) {
        throw ConfigError("config: context_len too small for prompt + answer");
    }
    if (delta_metric != "first_token" && delta_metric != "answer_sum") {
        throw ConfigError("config: patch.delta_metric must be first_token or answer_sum");
    }
    if (n_prompts_per_class < 2) {
        throw ConfigError("config: label.n_prompts_per_class must be >= 2");
    }
    if (contam_share < 0.0 || contam_share > 1.0) {
        throw ConfigError("config: label.contam_share must be in [0, 1]");
    }
    if (probe_holdout_fraction <= 0.0 || probe_holdout_fraction >= 1.0) {
        throw ConfigError("config: label.probe_holdout_fraction must be in (0, 1)");
    }
    if (max_pairs < 1) {
        throw ConfigError("config: patch.max_pairs must be >= 1");
    }
    if (ib_components < 1 || ib_bins < 2 || ib_sample_items < ib_components * ib_bins) {
        throw ConfigError("config: bad ib section");
    }
    if (eval_max_items < 0 || sweep_max_items < 0) {
        throw ConfigError("config: max_items must be >= 0");
    }
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') {
            continue;
        }
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw ConfigError("config: bad section header at line " + std::to_string(line_no));
            }
            section = trim(t.substr(1, t.size() - 2));
            bool known = false;
            for (const Field& f : kFields) {
                known = known || section == f.section;
            }
            if (!known) {
                throw ConfigError("config: unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: expected key=value at line " + std::to_string(line_no));
        }
        const std::string key = trim(t.substr(0, eq));
        if (section.empty()) {
            throw ConfigError("config: key '" + key + "' before any [section]");
        }
        const Field* f = find_field(section, key);
        if (!f) {
            throw ConfigError("config: unknown key '" + section + "." + key + "'");
        }
        set_field(config, *f, t.substr(eq + 1));
    }
    return config;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("config: cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& config) {
    std::ostringstream out;
    std::string section;
    for (const Field& f : kFields) {
        if (section != f.section) {
            if (!section.empty()) {
                out << "\n";
            }
            section = f.section;
            out << "[" << section << "]\n";
        }
        out << f.key << " = " << get_field(config, f) << "\n";
    }
    return out.str();
}

void apply_env_overrides(RunConfig& config) {
    for (char** env = environ; *env != nullptr; ++env) {
        const char* entry = *env;
        if (std::strncmp(entry, "DMS_", 4) != 0) {
            continue;
        }
        const char* eq = std::strchr(entry, '=');
        if (!eq) {
            continue;
        }
        const std::string name(entry, static_cast<size_t>(eq - entry));
        const std::string value(eq + 1);
        const Field* match = nullptr;
        for (const Field& f : kFields) {
            if (name == "DMS_" + upper(f.section) + "_" + upper(f.key)) {
                match = &f;
                break;
            }
        }
        if (!match) {
            throw ConfigError("config: unknown environment override " + name);
        }
        set_field(config, *match, value);
    }
}

}  // namespace dms::runconfig
