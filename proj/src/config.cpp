#include "plm/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "plm/error.hpp"

namespace plm {

using nlohmann::json;

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", 0, "master seed; every stage derives its streams from it"},

        {"corpus.path", "", "text directory, .jsonl or plain file; empty uses the synthetic generator"},
        {"corpus.window", 128, "window size in tokens"},
        {"corpus.val_fraction", 0.05, "fraction of documents in the validation split"},
        {"corpus.test_fraction", 0.05, "fraction of documents in the test split"},

        {"synthetic.documents", 5000, "synthetic documents"},
        {"synthetic.templates", 16, "sentence templates (8..32)"},
        {"synthetic.styles", 2, "document styles, each with its own transition table"},
        {"synthetic.branching", 3, "successor templates per template and style"},
        {"synthetic.min_sentences", 8, "shortest synthetic document"},
        {"synthetic.max_sentences", 16, "longest synthetic document"},

        {"actions.k", 32, "action count K"},
        {"actions.dim", 64, "sentence embedding / action embedding width"},
        {"actions.hash_dim", 4096, "hashed trigram buckets"},
        {"actions.max_fit_points", 20000, "sentences subsampled for k-means"},
        {"actions.max_iterations", 100, "Lloyd iteration cap"},

        {"planner.d_model", 128, "planner width"},
        {"planner.layers", 2, "planner transformer layers"},
        {"planner.heads", 4, "planner attention heads"},
        {"planner.max_sentences", 64, "sentence positions seen by the planner"},
        {"planner.pretrain", "nap", "planner pretraining: nap, e2e (through the frozen LM) or none"},
        {"planner.steps", 1000, "planner pretraining steps"},
        {"planner.lr", 1e-3, "planner pretraining learning rate"},
        {"planner.batch_documents", 16, "documents per planner pretraining step"},

        {"lm.d_model", 128, "LM width"},
        {"lm.layers", 4, "LM layers"},
        {"lm.heads", 4, "LM attention heads"},
        {"lm.context", 128, "LM positions"},
        {"lm.adapter_layers", json::array({2, 3}), "layers carrying an adapter"},

        {"trainer.steps", 2000, "fine-tuning steps"},
        {"trainer.lr", 1e-4, "learning rate shared by all parameter groups"},
        {"trainer.batch_size", 32, "windows per step"},
        {"trainer.unfreeze", "halfway", "planner unfreezing: immediate, halfway or never"},
        {"trainer.mode", "soft", "conditioning: soft, st, hard, uniform or oracle"},
        {"trainer.predicted_fraction", 1.0, "share of sentences conditioned on planner output"},
        {"trainer.fraction_schedule", "fixed", "fixed, or linear (0 to 1 over training)"},
        {"trainer.nap_during_finetune", false, "add the next-action loss while fine-tuning"},
        {"trainer.nap_weight", 1.0, "weight of the next-action loss when enabled"},
        {"trainer.log_every", 50, "steps per training metrics record"},
        {"trainer.eval_every", 0, "steps per validation record (0: end only)"},
        {"trainer.eval_windows", 128, "validation windows per record"},
        {"trainer.checkpoint_every", 0, "steps per resumable checkpoint (0: end only)"},

        {"eval.split", "test", "split to evaluate"},
        {"eval.max_windows", 0, "cap on perplexity windows (0: all)"},
        {"eval.lengths", json::array({64, 128, 256}), "continuation lengths in tokens"},
        {"eval.length_base", 64, "edit distance is divided by length / base"},
        {"eval.samples", 16, "continuations per length and unconditional samples"},
        {"eval.prefix_sentences", 1, "sentences of prompt for continuations"},
        {"eval.temperature", 1.0, "sampling temperature (<= 0: greedy)"},
        {"eval.top_p", 0.9, "nucleus mass"},
        {"eval.hmm_states", 8, "HMM critic states"},

        {"generate.prefix", "", "prompt text"},
        {"generate.tokens", 256, "tokens to generate"},
        {"generate.temperature", 1.0, "sampling temperature (<= 0: greedy)"},
        {"generate.top_p", 0.9, "nucleus mass"},

        {"probe.locations", json::array({"pre_merge", "post_merge"}), "probe locations"},
        {"probe.distances", json::array({1, 2, 4, 8}), "token distances"},
        {"probe.train_windows", 256, "training windows for probes"},
        {"probe.eval_windows", 128, "evaluation windows for probes"},
        {"probe.split", "val", "evaluation split for probes"},
        {"probe.steps", 2000, "probe optimisation steps"},
        {"probe.lr", 1e-3, "probe learning rate"},

        {"sweep.fractions", json::array({0.0, 0.25, 0.5, 0.75, 1.0}), "predicted fractions to train and evaluate"},
        {"sweep.mode", "hard", "conditioning used by sweep runs"},
        {"sweep.unfreeze", "never", "planner unfreezing used by sweep runs"},

        {"run.stages", json::array({"prepare", "cluster", "pretrain-planner", "finetune", "eval"}),
         "stages executed by `run`"},
    };
    return keys;
}

std::string env_name(const std::string& key) {
    std::string out = "PLM_";
    for (char c : key) {
        out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

namespace {

const ConfigKey& key_info(const std::string& key) {
    for (const ConfigKey& k : config_keys()) {
        if (k.name == key) {
            return k;
        }
    }
    throw ConfigError("unknown configuration key '" + key + "'");
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    const auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

json parse_scalar(const json& like, const std::string& text, const std::string& key) {
    const std::string t = trim(text);
    try {
        if (like.is_boolean()) {
            if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
            if (t == "false" || t == "0" || t == "no" || t == "off") return false;
            throw ConfigError("");
        }
        if (like.is_number_integer()) {
            std::size_t used = 0;
            const long long v = std::stoll(t, &used);
            if (used != t.size()) throw ConfigError("");
            return v;
        }
        if (like.is_number_float()) {
            std::size_t used = 0;
            const double v = std::stod(t, &used);
            if (used != t.size()) throw ConfigError("");
            return v;
        }
        return t;
    } catch (const std::exception&) {
        throw ConfigError("configuration key '" + key + "': cannot read '" + text + "' as " + like.type_name());
    }
}

// Checks a JSON value against the key's default type, converting integers
// given for real-valued keys.
json coerce(const std::string& key, const json& value, const std::string& origin) {
    const json& like = key_info(key).default_value;
    auto fail = [&] {
        return ConfigError("configuration key '" + key + "' from " + origin + ": expected " + like.type_name() +
                           ", got " + value.dump());
    };
    if (value.is_string() && !like.is_string()) {
        if (like.is_array()) {
            json out = json::array();
            const json elem = like.empty() ? json("") : like.front();
            std::stringstream ss(value.get<std::string>());
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (!trim(item).empty()) {
                    out.push_back(parse_scalar(elem, item, key));
                }
            }
            return out;
        }
        return parse_scalar(like, value.get<std::string>(), key);
    }
    if (like.is_array()) {
        if (!value.is_array()) throw fail();
        json out = json::array();
        const json elem = like.empty() ? json("") : like.front();
        for (const json& v : value) {
            if (elem.is_number_float() && v.is_number()) {
                out.push_back(v.get<double>());
            } else if (elem.is_number_integer() && v.is_number_integer()) {
                out.push_back(v);
            } else if (elem.is_string() && v.is_string()) {
                out.push_back(v);
            } else {
                throw fail();
            }
        }
        return out;
    }
    if (like.is_number_float() && value.is_number()) return value.get<double>();
    if (like.is_number_integer() && value.is_number_integer()) return value;
    if (like.is_boolean() && value.is_boolean()) return value;
    if (like.is_string() && value.is_string()) return value;
    throw fail();
}

}  // namespace

Config::Config() : values_(json::object()) {
    std::set<std::string> envs;
    for (const ConfigKey& k : config_keys()) {
        values_[k.name] = k.default_value;
        envs.insert(env_name(k.name));
    }
    if (envs.size() != config_keys().size()) {
        throw ConfigError("configuration keys collide in their environment names");
    }
}

void Config::merge_json(const json& object, const std::string& origin) {
    if (!object.is_object()) {
        throw ConfigError(origin + ": configuration must be a JSON object of flat keys");
    }
    for (auto it = object.begin(); it != object.end(); ++it) {
        if (!has(it.key())) {
            throw ConfigError(origin + ": unknown configuration key '" + it.key() + "'");
        }
        values_[it.key()] = coerce(it.key(), it.value(), origin);
    }
}

void Config::merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read configuration file " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    merge_json(j, path);
}

void Config::merge_env(char** environ_block) {
    if (environ_block == nullptr) {
        return;
    }
    for (char** e = environ_block; *e != nullptr; ++e) {
        const std::string entry(*e);
        if (entry.rfind("PLM_", 0) != 0) {
            continue;
        }
        const auto eq = entry.find('=');
        const std::string name = entry.substr(0, eq);
        const std::string text = eq == std::string::npos ? "" : entry.substr(eq + 1);
        bool found = false;
        for (const ConfigKey& k : config_keys()) {
            if (env_name(k.name) == name) {
                values_[k.name] = coerce(k.name, json(text), "environment " + name);
                found = true;
                break;
            }
        }
        if (!found) {
            throw ConfigError("environment variable " + name + " names no configuration key");
        }
    }
}

void Config::set(const std::string& key, const std::string& text, const std::string& origin) {
    if (!has(key)) {
        throw ConfigError("unknown configuration key '" + key + "'");
    }
    values_[key] = coerce(key, json(text), origin);
}

void Config::set_value(const std::string& key, const json& value, const std::string& origin) {
    if (!has(key)) {
        throw ConfigError("unknown configuration key '" + key + "'");
    }
    values_[key] = coerce(key, value, origin);
}

bool Config::has(const std::string& key) const { return values_.contains(key); }

const json& Config::get(const std::string& key) const {
    if (!has(key)) {
        throw ConfigError("unknown configuration key '" + key + "'");
    }
    return values_.at(key);
}

std::string Config::str(const std::string& key) const { return get(key).get<std::string>(); }

std::int64_t Config::integer(const std::string& key) const { return get(key).get<std::int64_t>(); }

std::size_t Config::size(const std::string& key) const {
    const std::int64_t v = integer(key);
    if (v < 0) {
        throw ConfigError("configuration key '" + key + "' must be non-negative");
    }
    return static_cast<std::size_t>(v);
}

std::uint64_t Config::u64(const std::string& key) const { return static_cast<std::uint64_t>(size(key)); }

double Config::real(const std::string& key) const { return get(key).get<double>(); }

bool Config::flag(const std::string& key) const { return get(key).get<bool>(); }

std::vector<std::size_t> Config::sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const json& v : get(key)) {
        const auto i = v.get<std::int64_t>();
        if (i < 0) {
            throw ConfigError("configuration key '" + key + "' must hold non-negative integers");
        }
        out.push_back(static_cast<std::size_t>(i));
    }
    return out;
}

std::vector<double> Config::reals(const std::string& key) const { return get(key).get<std::vector<double>>(); }

std::vector<std::string> Config::strings(const std::string& key) const {
    return get(key).get<std::vector<std::string>>();
}

}  // namespace plm
