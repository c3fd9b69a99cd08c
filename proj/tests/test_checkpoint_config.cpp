#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "plm/checkpoint.hpp"
#include "plm/config.hpp"
#include "plm/error.hpp"
#include "plm/experiment.hpp"

using namespace plm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("plm_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

Checkpoint sample() {
    Checkpoint c;
    c.meta = {{"stage", "unit"}, {"note", "ünïcode"}};
    c.add("a", {2, 3}, {1, 2, 3, 4, 5, 6});
    c.add("b", {1}, {-0.5f});
    c.add("empty", {0, 4}, {});
    return c;
}

Config tiny_config() {
    Config c;
    c.set_value("synthetic.documents", 40);
    c.set_value("corpus.window", 32);
    c.set_value("corpus.val_fraction", 0.1);
    c.set_value("corpus.test_fraction", 0.1);
    c.set_value("actions.k", 4);
    c.set_value("actions.dim", 8);
    c.set_value("actions.hash_dim", 256);
    c.set_value("planner.d_model", 8);
    c.set_value("planner.layers", 1);
    c.set_value("planner.heads", 2);
    c.set_value("planner.steps", 3);
    c.set_value("lm.d_model", 8);
    c.set_value("lm.layers", 2);
    c.set_value("lm.heads", 2);
    c.set_value("lm.context", 32);
    c.set_value("lm.adapter_layers", nlohmann::json::array({1}));
    c.set_value("trainer.steps", 4);
    c.set_value("trainer.batch_size", 2);
    c.set_value("trainer.log_every", 2);
    c.set_value("trainer.eval_windows", 4);
    c.set_value("eval.lengths", nlohmann::json::array({16}));
    c.set_value("eval.length_base", 16);
    c.set_value("eval.samples", 2);
    c.set_value("eval.max_windows", 4);
    c.set_value("eval.hmm_states", 2);
    c.set_value("probe.steps", 5);
    c.set_value("probe.train_windows", 4);
    c.set_value("probe.eval_windows", 2);
    c.set_value("probe.distances", nlohmann::json::array({1, 2}));
    c.set_value("sweep.fractions", nlohmann::json::array({0.0, 1.0}));
    return c;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte-identical") {
    const std::string bytes = serialize_checkpoint(sample());
    CHECK(bytes.substr(0, 4) == "PLM1");
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.get("a").shape == Shape{2, 3});
    CHECK(back.get("b").values == std::vector<float>{-0.5f});
    CHECK(back.meta["note"] == "ünïcode");
    CHECK_FALSE(back.meta.contains("tensors"));

    const fs::path dir = scratch("ckpt");
    fs::create_directories(dir);
    save_checkpoint((dir / "x.plm").string(), sample());
    CHECK(slurp(dir / "x.plm") == bytes);
    CHECK(serialize_checkpoint(load_checkpoint((dir / "x.plm").string())) == bytes);
    fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const std::string bytes = serialize_checkpoint(sample());
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bad_magic), DataError);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(parse_checkpoint(bad_version), DataError);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), DataError);
    CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), DataError);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 10)), DataError);
    CHECK_THROWS_AS(parse_checkpoint(""), DataError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.plm"), DataError);
}

TEST_CASE("load_into checks names and shapes") {
    Checkpoint c = sample();
    Tensor<float> a = Tensor<float>::zeros({2, 3});
    const NamedParams<float> ok{{"a", a}};
    c.load_into(ok);
    CHECK(a.at(1, 2) == 6.0f);
    const NamedParams<float> wrong_shape{{"a", Tensor<float>::zeros({3, 2})}};
    CHECK_THROWS(c.load_into(wrong_shape));
    const NamedParams<float> missing{{"zz", Tensor<float>::zeros({1})}};
    CHECK_THROWS(c.load_into(missing));
}

TEST_CASE("config precedence: defaults < file < environment < flags") {
    const fs::path dir = scratch("cfg");
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << R"({"trainer.lr": 0.5, "trainer.steps": 7, "trainer.mode": "hard"})";
    Config c;
    CHECK(c.real("trainer.lr") == 1e-4);
    c.merge_file((dir / "c.json").string());
    CHECK(c.real("trainer.lr") == 0.5);
    std::string e1 = "PLM_TRAINER_STEPS=9", e2 = "PLM_TRAINER_MODE=st", e3 = "HOME=/x";
    char* env[] = {e1.data(), e2.data(), e3.data(), nullptr};
    c.merge_env(env);
    CHECK(c.integer("trainer.steps") == 9);
    CHECK(c.str("trainer.mode") == "st");
    CHECK(c.real("trainer.lr") == 0.5);
    c.set("trainer.mode", "soft");
    CHECK(c.str("trainer.mode") == "soft");
    CHECK(c.integer("trainer.steps") == 9);
    c.set("probe.distances", "1, 3");
    CHECK(c.sizes("probe.distances") == std::vector<std::size_t>{1, 3});
    c.set("trainer.nap_during_finetune", "true");
    CHECK(c.flag("trainer.nap_during_finetune"));
    c.set_value("trainer.lr", 1);  // integers accepted for reals
    CHECK(c.real("trainer.lr") == 1.0);
    fs::remove_all(dir);
}

TEST_CASE("unknown keys and bad values are rejected") {
    Config c;
    CHECK_THROWS_AS(c.set("trainer.unknown", "1"), ConfigError);
    CHECK_THROWS_AS(c.merge_json({{"nope", 1}}, "test"), ConfigError);
    CHECK_THROWS_AS(c.merge_json({{"trainer.steps", "many"}}, "test"), ConfigError);
    CHECK_THROWS_AS(c.merge_json({{"trainer.steps", 1.5}}, "test"), ConfigError);
    CHECK_THROWS_AS(c.set("trainer.steps", "12abc"), ConfigError);
    std::string e = "PLM_TRAINER_STEPZ=3";
    char* env[] = {e.data(), nullptr};
    CHECK_THROWS_AS(c.merge_env(env), ConfigError);
    CHECK_THROWS_AS(c.merge_file("/nonexistent.json"), ConfigError);
    CHECK(env_name("trainer.batch_size") == "PLM_TRAINER_BATCH_SIZE");
}

TEST_CASE("validation catches out-of-range and inconsistent settings") {
    Config c;
    validate_config(c);
    auto bad = [](const char* key, nlohmann::json v) {
        Config x;
        x.set_value(key, v);
        CHECK_THROWS_AS(validate_config(x), ConfigError);
    };
    bad("trainer.predicted_fraction", 1.5);
    bad("trainer.unfreeze", "sometimes");
    bad("trainer.mode", "gumbel");
    bad("lm.adapter_layers", nlohmann::json::array({7}));
    bad("lm.d_model", 130);
    bad("corpus.window", 1);
    bad("planner.pretrain", "maybe");
    bad("probe.distances", nlohmann::json::array({0}));
    bad("synthetic.templates", 64);
    bad("trainer.fraction_schedule", "cosine");
    bad("run.stages", nlohmann::json::array({"prepare", "deploy"}));
}

TEST_CASE("stages run in order and report missing prerequisites") {
    const fs::path dir = scratch("exp");
    Experiment exp(tiny_config(), dir);
    CHECK_THROWS_AS(exp.cluster(), DataError);
    exp.prepare();
    try {
        exp.finetune();
        FAIL("finetune without cluster should throw");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("cluster") != std::string::npos);
    }
    exp.cluster();
    CHECK_THROWS_AS(exp.finetune(), DataError);  // planner checkpoint missing
    exp.pretrain_planner();
    exp.finetune();
    const EvalReport r = exp.eval();
    CHECK(r.ppl > 1.0);
    CHECK(fs::exists(dir / "reports" / "eval.json"));
    CHECK(fs::exists(dir / "config.json"));
    const auto cfg = nlohmann::json::parse(slurp(dir / "config.json"));
    CHECK(cfg["trainer.steps"] == 4);
    exp.generate();
    CHECK(fs::exists(dir / "reports" / "generate.json"));
    exp.probe();
    CHECK(fs::exists(dir / "reports" / "probe.json"));
    const nlohmann::json sweep = exp.sweep();
    CHECK(sweep["points"].size() == 2);
    CHECK(fs::exists(dir / "checkpoints" / "finetune-f0.plm"));
    CHECK(fs::exists(dir / "checkpoints" / "finetune-f1.plm"));
    const auto meta = load_checkpoint((dir / "checkpoints" / "finetune-f1.plm").string()).meta;
    CHECK(meta["schedule"]["mode"] == "hard");
    CHECK(meta["schedule"]["unfreeze"] == "never");
    fs::remove_all(dir);
}

TEST_CASE("no-NAP variant needs no planner checkpoint") {
    const fs::path dir = scratch("nonap");
    Config c = tiny_config();
    c.set("planner.pretrain", "none");
    Experiment exp(c, dir);
    exp.prepare();
    exp.cluster();
    CHECK_NOTHROW(exp.finetune());
    fs::remove_all(dir);
}

TEST_CASE("end-to-end planner pretraining stores planner and LM") {
    const fs::path dir = scratch("e2e");
    Config c = tiny_config();
    c.set("planner.pretrain", "e2e");
    Experiment exp(c, dir);
    exp.prepare();
    exp.cluster();
    exp.pretrain_planner();
    const Checkpoint p = load_checkpoint((dir / "checkpoints" / "planner.plm").string());
    CHECK(p.has("planner.head.weight"));
    CHECK(p.has("lm.token_embed"));
    CHECK_NOTHROW(exp.finetune());
    fs::remove_all(dir);
}

TEST_CASE("identical configurations give byte-identical checkpoints and logs") {
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    for (const fs::path& d : {a, b}) {
        Experiment exp(tiny_config(), d);
        exp.prepare();
        exp.cluster();
        exp.pretrain_planner();
        exp.finetune();
    }
    for (const char* f : {"checkpoints/vocab.plm", "checkpoints/planner.plm", "checkpoints/finetune.plm",
                          "metrics.jsonl", "corpus.jsonl", "config.json"}) {
        CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("resume continues a run to the same end state") {
    const fs::path a = scratch("res_a"), b = scratch("res_b");
    {
        Experiment exp(tiny_config(), a);
        exp.prepare();
        exp.cluster();
        exp.pretrain_planner();
        exp.finetune();
    }
    {
        Config half = tiny_config();
        half.set_value("trainer.checkpoint_every", 2);
        Experiment exp(half, b);
        exp.prepare();
        exp.cluster();
        exp.pretrain_planner();
        exp.finetune();
        // rerun from the final checkpoint: nothing left to do, state unchanged
        const std::string before = slurp(b / "checkpoints" / "finetune.plm");
        exp.finetune("", true);
        const Checkpoint x = load_checkpoint((b / "checkpoints" / "finetune.plm").string());
        CHECK(x.meta["train_state"]["step"] == 4);
        CHECK(serialize_checkpoint(x).size() == before.size());
    }
    const Checkpoint ca = load_checkpoint((a / "checkpoints" / "finetune.plm").string());
    const Checkpoint cb = load_checkpoint((b / "checkpoints" / "finetune.plm").string());
    for (const TensorBlob& t : ca.tensors) {
        CHECK_MESSAGE(cb.get(t.name).values == t.values, t.name);
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("run lock excludes a second writer") {
    const fs::path dir = scratch("lock");
    {
        RunLock first(dir);
        CHECK_THROWS_AS(RunLock{dir}, DataError);
    }
    CHECK_NOTHROW(RunLock{dir});
    fs::remove_all(dir);
}
