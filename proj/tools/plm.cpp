// plm: command-line driver over a run directory.
//
//   plm <subcommand> --run runs/demo [--config cfg.json] [--set key=value]... [--<key> value]...
//
// Every configuration key is also a flag (--trainer.unfreeze halfway); keys
// whose last component is unambiguous get a short form (--unfreeze halfway).
// --mode and --unfreeze refer to the fine-tuning keys.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "plm/error.hpp"
#include "plm/experiment.hpp"

extern char** environ;

namespace {

using nlohmann::json;

struct Overrides {
    std::map<std::string, std::string> flags;  // key -> text
    std::vector<std::string> sets;
};

std::map<std::string, std::string> short_forms() {
    std::map<std::string, int> count;
    for (const plm::ConfigKey& k : plm::config_keys()) {
        ++count[k.name.substr(k.name.rfind('.') + 1)];
    }
    std::map<std::string, std::string> out;
    for (const plm::ConfigKey& k : plm::config_keys()) {
        const std::string leaf = k.name.substr(k.name.rfind('.') + 1);
        if (leaf != k.name && count[leaf] == 1) {
            out[leaf] = k.name;
        }
    }
    out["mode"] = "trainer.mode";
    out["unfreeze"] = "trainer.unfreeze";
    return out;
}

void add_key_flags(CLI::App& app, Overrides& ov) {
    std::map<std::string, std::vector<std::string>> names;
    for (const plm::ConfigKey& k : plm::config_keys()) {
        names[k.name].push_back("--" + k.name);
    }
    for (const auto& [leaf, key] : short_forms()) {
        names[key].push_back("--" + leaf);
    }
    for (const plm::ConfigKey& k : plm::config_keys()) {
        std::string spec;
        for (const std::string& n : names[k.name]) {
            spec += (spec.empty() ? "" : ",") + n;
        }
        const std::string key = k.name;
        app.add_option_function<std::string>(
               spec, [&ov, key](const std::string& v) { ov.flags[key] = v; },
               k.help + " (default " + k.default_value.dump() + ")")
            ->group("Configuration");
    }
}

plm::Config resolve(const std::string& config_file, const Overrides& ov) {
    plm::Config cfg;
    if (!config_file.empty()) {
        cfg.merge_file(config_file);
    }
    cfg.merge_env(environ);
    for (const std::string& s : ov.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw plm::ConfigError("--set expects key=value, got '" + s + "'");
        }
        cfg.set(s.substr(0, eq), s.substr(eq + 1), "--set");
    }
    for (const auto& [key, text] : ov.flags) {
        cfg.set(key, text, "--" + key);
    }
    return cfg;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Planner-conditioned byte language model experiments"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string run_dir = "runs/default";
    std::string config_file;
    std::string tag;
    bool resume = false;
    Overrides ov;
    app.add_option("--run", run_dir, "run directory")->capture_default_str();
    app.add_option("--config", config_file, "JSON file of flat configuration keys");
    app.add_option("--set", ov.sets, "key=value override (repeatable)")->allow_extra_args(false);
    app.add_option("--tag", tag, "model variant inside the run directory (finetune/eval/generate/probe)");
    add_key_flags(app, ov);

    app.add_subcommand("prepare", "segment, tokenize and cache the corpus");
    app.add_subcommand("cluster", "fit the action vocabulary (k-means over sentence embeddings)");
    app.add_subcommand("pretrain-planner", "pretrain the planner (next-action prediction or end-to-end)");
    CLI::App* ft = app.add_subcommand("finetune", "joint fine-tuning of adapters, LM and planner");
    ft->add_flag("--resume", resume, "continue from the checkpoint's training state");
    app.add_subcommand("eval", "perplexity, generation metrics and latent perplexity");
    app.add_subcommand("generate", "sample text from a prompt");
    app.add_subcommand("probe", "linear probes at pre-/post-merge locations");
    app.add_subcommand("sweep", "fine-tune and evaluate over predicted-action fractions");
    app.add_subcommand("run", "execute run.stages in order");
    app.add_subcommand("config", "print the resolved configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : plm::exit_code(plm::ErrorKind::usage);
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        const plm::Config cfg = resolve(config_file, ov);
        if (cmd == "config") {
            plm::validate_config(cfg);
            std::cout << cfg.dump();
            return 0;
        }
        plm::Experiment exp(cfg, run_dir);
        plm::RunLock lock(run_dir);
        if (cmd == "prepare") {
            print(exp.prepare());
        } else if (cmd == "cluster") {
            print(exp.cluster());
        } else if (cmd == "pretrain-planner") {
            print(exp.pretrain_planner());
        } else if (cmd == "finetune") {
            print(exp.finetune(tag, resume));
        } else if (cmd == "eval") {
            print(exp.eval(tag).to_json());
        } else if (cmd == "generate") {
            const plm::Generation g = exp.generate(tag);
            std::cout << plm::detokenize(g.tokens) << '\n';
        } else if (cmd == "probe") {
            print(exp.probe(tag).to_json());
        } else if (cmd == "sweep") {
            print(exp.sweep());
        } else if (cmd == "run") {
            exp.run();
        }
    } catch (const plm::Error& e) {
        std::cerr << "plm " << cmd << ": " << e.what() << '\n';
        return plm::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "plm " << cmd << ": " << e.what() << '\n';
        return 1;
    }
    return 0;
}
