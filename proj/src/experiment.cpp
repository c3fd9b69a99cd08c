#include "plm/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "plm/error.hpp"

namespace plm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config -> options ----------------------------------------------------

namespace {

// Stream tags so each stage draws from its own seed.
enum SeedTag : std::uint64_t {
    kSplitSeed = 1,
    kSyntheticSeed,
    kEncoderSeed,
    kClusterSeed,
    kPlannerInitSeed,
    kPlannerTrainSeed,
    kLmInitSeed,
    kTrainerSeed,
    kEvalSeed,
    kProbeSeed,
};

std::uint64_t stage_seed(const Config& c, SeedTag tag) { return derive_seed(c.u64("seed"), tag); }

}  // namespace

CorpusOptions corpus_options(const Config& c) {
    CorpusOptions o;
    o.window_size = c.size("corpus.window");
    o.val_fraction = c.real("corpus.val_fraction");
    o.test_fraction = c.real("corpus.test_fraction");
    o.seed = stage_seed(c, kSplitSeed);
    return o;
}

SyntheticConfig synthetic_config(const Config& c) {
    SyntheticConfig s;
    s.documents = c.size("synthetic.documents");
    s.templates = c.size("synthetic.templates");
    s.styles = c.size("synthetic.styles");
    s.branching = c.size("synthetic.branching");
    s.min_sentences = c.size("synthetic.min_sentences");
    s.max_sentences = c.size("synthetic.max_sentences");
    s.seed = stage_seed(c, kSyntheticSeed);
    return s;
}

EncoderConfig encoder_config(const Config& c) {
    EncoderConfig e;
    e.hash_dim = c.size("actions.hash_dim");
    e.dim = c.size("actions.dim");
    e.seed = stage_seed(c, kEncoderSeed);
    return e;
}

VocabularyOptions vocabulary_options(const Config& c) {
    VocabularyOptions v;
    v.k = c.size("actions.k");
    v.seed = stage_seed(c, kClusterSeed);
    v.max_fit_points = c.size("actions.max_fit_points");
    v.max_iterations = c.size("actions.max_iterations");
    return v;
}

PlannerConfig planner_config(const Config& c) {
    PlannerConfig p;
    p.d_model = c.size("planner.d_model");
    p.layers = c.size("planner.layers");
    p.heads = c.size("planner.heads");
    p.max_sentences = c.size("planner.max_sentences");
    p.actions = c.size("actions.k");
    p.seed = stage_seed(c, kPlannerInitSeed);
    return p;
}

LMConfig lm_config(const Config& c) {
    LMConfig l;
    l.d_model = c.size("lm.d_model");
    l.layers = c.size("lm.layers");
    l.heads = c.size("lm.heads");
    l.context = c.size("lm.context");
    l.actions = c.size("actions.k");
    l.action_dim = c.size("actions.dim");
    l.adapter_layers = c.sizes("lm.adapter_layers");
    l.seed = stage_seed(c, kLmInitSeed);
    return l;
}

NapOptions nap_options(const Config& c) {
    NapOptions n;
    n.steps = c.size("planner.steps");
    n.lr = c.real("planner.lr");
    n.batch_documents = c.size("planner.batch_documents");
    n.seed = stage_seed(c, kPlannerTrainSeed);
    return n;
}

TrainingSchedule training_schedule(const Config& c) {
    TrainingSchedule s;
    s.total_steps = c.size("trainer.steps");
    s.lr = c.real("trainer.lr");
    s.batch_size = c.size("trainer.batch_size");
    s.unfreeze = parse_unfreeze(c.str("trainer.unfreeze"));
    s.mode = parse_mode(c.str("trainer.mode"));
    s.predicted_fraction = c.real("trainer.predicted_fraction");
    const std::string sched = c.str("trainer.fraction_schedule");
    if (sched != "fixed" && sched != "linear") {
        throw ConfigError("trainer.fraction_schedule must be fixed or linear, got '" + sched + "'");
    }
    s.linear_fraction = sched == "linear";
    s.nap_weight = c.flag("trainer.nap_during_finetune") ? c.real("trainer.nap_weight") : 0.0;
    s.seed = stage_seed(c, kTrainerSeed);
    s.log_every = c.size("trainer.log_every");
    s.eval_every = c.size("trainer.eval_every");
    s.eval_windows = c.size("trainer.eval_windows");
    return s;
}

EvalOptions eval_options(const Config& c) {
    EvalOptions e;
    e.split = parse_split(c.str("eval.split"));
    e.max_windows = c.size("eval.max_windows");
    e.lengths = c.sizes("eval.lengths");
    e.length_base = c.size("eval.length_base");
    e.samples = c.size("eval.samples");
    e.prefix_sentences = c.size("eval.prefix_sentences");
    e.temperature = c.real("eval.temperature");
    e.top_p = c.real("eval.top_p");
    e.hmm_states = c.size("eval.hmm_states");
    e.seed = stage_seed(c, kEvalSeed);
    return e;
}

ProbeOptions probe_options(const Config& c) {
    ProbeOptions p;
    p.locations.clear();
    for (const std::string& l : c.strings("probe.locations")) {
        p.locations.push_back(parse_location(l));
    }
    p.distances = c.sizes("probe.distances");
    p.train_windows = c.size("probe.train_windows");
    p.eval_windows = c.size("probe.eval_windows");
    p.eval_split = parse_split(c.str("probe.split"));
    p.train_steps = c.size("probe.steps");
    p.lr = c.real("probe.lr");
    p.seed = stage_seed(c, kProbeSeed);
    return p;
}

void validate_config(const Config& c) {
    auto positive = [&](const char* key) {
        if (c.integer(key) <= 0) {
            throw ConfigError(std::string(key) + " must be positive");
        }
    };
    auto nonneg = [&](const char* key) {
        if (c.integer(key) < 0) {
            throw ConfigError(std::string(key) + " must be non-negative");
        }
    };
    auto unit = [&](const char* key, bool open_low) {
        const double v = c.real(key);
        if (!(open_low ? v > 0.0 : v >= 0.0) || !(v <= 1.0)) {
            throw ConfigError(std::string(key) + " must lie in " + (open_low ? "(0, 1]" : "[0, 1]"));
        }
    };
    nonneg("seed");
    positive("corpus.window");
    if (c.size("corpus.window") < 2) {
        throw ConfigError("corpus.window must be at least 2");
    }
    unit("corpus.val_fraction", false);
    unit("corpus.test_fraction", false);
    if (c.real("corpus.val_fraction") + c.real("corpus.test_fraction") >= 1.0) {
        throw ConfigError("corpus.val_fraction + corpus.test_fraction must stay below 1");
    }
    for (const char* k : {"synthetic.documents", "synthetic.styles", "synthetic.branching", "synthetic.min_sentences",
                          "actions.dim", "actions.hash_dim", "actions.max_fit_points", "planner.d_model",
                          "planner.layers", "planner.heads", "planner.max_sentences", "planner.batch_documents",
                          "lm.d_model", "lm.layers", "lm.heads", "lm.context", "trainer.batch_size",
                          "trainer.log_every", "trainer.eval_windows", "eval.length_base", "eval.samples",
                          "eval.prefix_sentences", "eval.hmm_states", "generate.tokens", "probe.train_windows",
                          "probe.eval_windows"}) {
        positive(k);
    }
    for (const char* k : {"planner.steps", "trainer.steps", "trainer.eval_every", "trainer.checkpoint_every",
                          "eval.max_windows", "probe.steps", "actions.max_iterations"}) {
        nonneg(k);
    }
    if (c.integer("synthetic.templates") < 8 || c.integer("synthetic.templates") > 32) {
        throw ConfigError("synthetic.templates must lie in [8, 32]");
    }
    if (c.integer("synthetic.max_sentences") < c.integer("synthetic.min_sentences")) {
        throw ConfigError("synthetic.max_sentences must be at least synthetic.min_sentences");
    }
    if (c.integer("actions.k") < 2) {
        throw ConfigError("actions.k must be at least 2");
    }
    if (c.size("planner.d_model") % c.size("planner.heads") != 0) {
        throw ConfigError("planner.d_model must be divisible by planner.heads");
    }
    if (c.size("lm.d_model") % c.size("lm.heads") != 0) {
        throw ConfigError("lm.d_model must be divisible by lm.heads");
    }
    if (c.size("lm.context") + 1 < c.size("corpus.window")) {
        throw ConfigError("lm.context must cover corpus.window - 1 input positions");
    }
    for (std::size_t l : c.sizes("lm.adapter_layers")) {
        if (l >= c.size("lm.layers")) {
            throw ConfigError("lm.adapter_layers entry " + std::to_string(l) + " exceeds lm.layers");
        }
    }
    const std::string pre = c.str("planner.pretrain");
    if (pre != "nap" && pre != "e2e" && pre != "none") {
        throw ConfigError("planner.pretrain must be nap, e2e or none, got '" + pre + "'");
    }
    if (!(c.real("planner.lr") > 0)) {
        throw ConfigError("planner.lr must be positive");
    }
    if (!(c.real("trainer.lr") > 0)) {
        throw ConfigError("trainer.lr must be positive");
    }
    parse_unfreeze(c.str("trainer.unfreeze"));
    parse_mode(c.str("trainer.mode"));
    unit("trainer.predicted_fraction", false);
    if (!(c.real("trainer.nap_weight") >= 0)) {
        throw ConfigError("trainer.nap_weight must be non-negative");
    }
    training_schedule(c);  // fraction_schedule check
    parse_split(c.str("eval.split"));
    parse_split(c.str("probe.split"));
    for (std::size_t n : c.sizes("eval.lengths")) {
        if (n == 0) {
            throw ConfigError("eval.lengths entries must be positive");
        }
    }
    unit("eval.top_p", true);
    unit("generate.top_p", true);
    for (std::size_t d : c.sizes("probe.distances")) {
        if (d == 0) {
            throw ConfigError("probe.distances entries must be at least 1");
        }
    }
    for (const std::string& l : c.strings("probe.locations")) {
        parse_location(l);
    }
    if (!(c.real("probe.lr") > 0)) {
        throw ConfigError("probe.lr must be positive");
    }
    for (double f : c.reals("sweep.fractions")) {
        if (!(f >= 0.0 && f <= 1.0)) {
            throw ConfigError("sweep.fractions entries must lie in [0, 1]");
        }
    }
    parse_mode(c.str("sweep.mode"));
    parse_unfreeze(c.str("sweep.unfreeze"));
    for (const std::string& s : c.strings("run.stages")) {
        if (s != "prepare" && s != "cluster" && s != "pretrain-planner" && s != "finetune" && s != "eval" &&
            s != "probe" && s != "sweep" && s != "generate") {
            throw ConfigError("run.stages: unknown stage '" + s + "'");
        }
    }
}

// ---- lock -----------------------------------------------------------------

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    fs::create_directories(run_dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) {
            throw DataError("run directory " + run_dir.string() + " is locked by another process (" + path_.string() +
                            "); remove the file if that process is gone");
        }
        throw DataError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---- experiment -----------------------------------------------------------

namespace {

std::string tagged(const std::string& base, const std::string& tag) { return tag.empty() ? base : base + "-" + tag; }

json schedule_json(const TrainingSchedule& s) {
    return {{"total_steps", s.total_steps},
            {"lr", s.lr},
            {"batch_size", s.batch_size},
            {"unfreeze", unfreeze_name(s.unfreeze)},
            {"predicted_fraction", s.predicted_fraction},
            {"linear_fraction", s.linear_fraction},
            {"nap_weight", s.nap_weight},
            {"mode", mode_name(s.mode)}};
}

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("cannot write " + tmp.string());
        }
        out << text;
    }
    fs::rename(tmp, path);
}

Checkpoint require_checkpoint(const fs::path& path, const std::string& stage) {
    if (!fs::exists(path)) {
        throw DataError("missing " + path.string() + "; run the `" + stage + "` stage first");
    }
    return load_checkpoint(path.string());
}

}  // namespace

Experiment::Experiment(Config config, fs::path run_dir) : config_(std::move(config)), dir_(std::move(run_dir)) {
    validate_config(config_);
}

fs::path Experiment::checkpoint_path(const std::string& name) const { return dir_ / "checkpoints" / (name + ".plm"); }

fs::path Experiment::report_path(const std::string& name) const { return dir_ / "reports" / (name + ".json"); }

void Experiment::write_config() const {
    fs::create_directories(dir_);
    write_text(dir_ / "config.json", config_.dump());
}

void Experiment::append_metrics(const json& record) const {
    fs::create_directories(dir_);
    std::ofstream out(metrics_path(), std::ios::app | std::ios::binary);
    if (!out) {
        throw DataError("cannot append to " + metrics_path().string());
    }
    out << record.dump() << '\n';
}

void Experiment::write_report(const std::string& name, const json& report) const {
    fs::create_directories(dir_ / "reports");
    write_text(report_path(name), report.dump(2) + "\n");
}

json Experiment::stage_meta(const std::string& stage) const {
    return {{"stage", stage}, {"config", config_.values()}};
}

std::vector<std::vector<ActionId>> Experiment::oracle_for(const SegmentedCorpus& corpus,
                                                          const ActionVocabulary& vocab) const {
    return oracle_actions(vocab, SentenceEncoder(vocab.encoder), corpus);
}

json Experiment::prepare() {
    write_config();
    std::vector<std::string> texts;
    const std::string path = config_.str("corpus.path");
    if (path.empty()) {
        texts = generate_synthetic(synthetic_config(config_)).texts;
    } else {
        texts = load_texts(path);
    }
    const SegmentedCorpus corpus = build_corpus(texts, corpus_options(config_));
    if (corpus.documents.empty()) {
        throw DataError("prepare: no non-empty documents");
    }
    std::string out;
    out += json{{"window_size", corpus.window_size}, {"documents", corpus.documents.size()}}.dump() + "\n";
    try {
        for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
            out += json{{"text", corpus.documents[d].text()}, {"split", split_name(corpus.splits[d])}}.dump() + "\n";
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("prepare: corpus text is not valid UTF-8: ") + e.what());
    }
    write_text(dir_ / "corpus.jsonl", out);
    const WindowSet train = make_windows(corpus, Split::train);
    return {{"documents", corpus.documents.size()},
            {"train", corpus.indices(Split::train).size()},
            {"val", corpus.indices(Split::val).size()},
            {"test", corpus.indices(Split::test).size()},
            {"train_windows", train.windows.size()},
            {"skipped", train.skipped}};
}

SegmentedCorpus Experiment::load_corpus() const {
    const fs::path path = dir_ / "corpus.jsonl";
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("missing " + path.string() + "; run the `prepare` stage first");
    }
    SegmentedCorpus corpus;
    std::string line;
    try {
        std::getline(in, line);
        const json header = json::parse(line);
        corpus.window_size = header.at("window_size").get<std::size_t>();
        const auto n = header.at("documents").get<std::size_t>();
        while (std::getline(in, line)) {
            const json doc = json::parse(line);
            corpus.documents.push_back(segment(doc.at("text").get<std::string>()));
            corpus.splits.push_back(parse_split(doc.at("split").get<std::string>()));
        }
        if (corpus.documents.size() != n) {
            throw DataError(path.string() + ": expected " + std::to_string(n) + " documents, found " +
                            std::to_string(corpus.documents.size()));
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (corpus.window_size != config_.size("corpus.window")) {
        throw DataError("prepared corpus uses window " + std::to_string(corpus.window_size) +
                        " but corpus.window is " + std::to_string(config_.size("corpus.window")) +
                        "; rerun `prepare`");
    }
    return corpus;
}

json Experiment::cluster() {
    write_config();
    const SegmentedCorpus corpus = load_corpus();
    const SentenceEncoder encoder(encoder_config(config_));
    const ActionVocabulary vocab = fit_vocabulary(corpus, encoder, vocabulary_options(config_));
    Checkpoint ckpt;
    ckpt.meta = stage_meta("cluster");
    ckpt.meta["vocabulary"] = {{"k", vocab.k},
                               {"dim", vocab.dim},
                               {"encoder", {{"hash_dim", vocab.encoder.hash_dim},
                                            {"dim", vocab.encoder.dim},
                                            {"seed", vocab.encoder.seed}}},
                               {"encoder_fingerprint", vocab.encoder_fingerprint}};
    ckpt.add("actions.centroids", {vocab.k, vocab.dim}, vocab.centroids);
    fs::create_directories(dir_ / "checkpoints");
    save_checkpoint(checkpoint_path("vocab").string(), ckpt);

    std::vector<std::size_t> hist(vocab.k, 0);
    for (const auto& seq : oracle_for(corpus, vocab)) {
        for (ActionId a : seq) {
            ++hist[std::size_t(a)];
        }
    }
    return {{"k", vocab.k}, {"dim", vocab.dim}, {"fingerprint", vocab.encoder_fingerprint}, {"action_counts", hist}};
}

ActionVocabulary Experiment::load_vocabulary() const {
    const Checkpoint ckpt = require_checkpoint(checkpoint_path("vocab"), "cluster");
    const json& v = ckpt.meta.at("vocabulary");
    ActionVocabulary vocab;
    vocab.k = v.at("k").get<std::size_t>();
    vocab.dim = v.at("dim").get<std::size_t>();
    vocab.encoder.hash_dim = v.at("encoder").at("hash_dim").get<std::size_t>();
    vocab.encoder.dim = v.at("encoder").at("dim").get<std::size_t>();
    vocab.encoder.seed = v.at("encoder").at("seed").get<std::uint64_t>();
    vocab.encoder_fingerprint = v.at("encoder_fingerprint").get<std::string>();
    const TensorBlob& c = ckpt.get("actions.centroids");
    if (c.shape != Shape{vocab.k, vocab.dim}) {
        throw DataError("vocabulary centroids have shape " + shape_str(c.shape));
    }
    vocab.centroids = c.values;
    if (SentenceEncoder(vocab.encoder).fingerprint() != vocab.encoder_fingerprint) {
        throw DataError("vocabulary encoder fingerprint does not match its recorded configuration");
    }
    if (vocab.k != config_.size("actions.k") || vocab.dim != config_.size("actions.dim")) {
        throw DataError("vocabulary holds K=" + std::to_string(vocab.k) + ", d_e=" + std::to_string(vocab.dim) +
                        " but the configuration asks for K=" + std::to_string(config_.size("actions.k")) +
                        ", d_e=" + std::to_string(config_.size("actions.dim")) + "; rerun `cluster`");
    }
    return vocab;
}

json Experiment::pretrain_planner() {
    write_config();
    const SegmentedCorpus corpus = load_corpus();
    const ActionVocabulary vocab = load_vocabulary();
    const auto oracle = oracle_for(corpus, vocab);
    PlannerModel<float> planner(planner_config(config_));
    const std::string kind = config_.str("planner.pretrain");
    Checkpoint ckpt;
    ckpt.meta = stage_meta("pretrain-planner");
    ckpt.meta["pretrain"] = kind;
    json summary{{"pretrain", kind}};
    const std::size_t log_every = config_.size("trainer.log_every");

    if (kind == "nap") {
        const NapOptions opt = nap_options(config_);
        const std::vector<double> losses = plm::pretrain_planner(planner, corpus, oracle, opt);
        double sum = 0;
        std::size_t count = 0;
        for (std::size_t t = 0; t < losses.size(); ++t) {
            sum += losses[t];
            ++count;
            if ((t + 1) % log_every == 0 || t + 1 == losses.size()) {
                append_metrics({{"stage", "pretrain-planner"},
                                {"step", t + 1},
                                {"ntp", nullptr},
                                {"nap", sum / double(count)},
                                {"f", nullptr},
                                {"lr", opt.lr},
                                {"split", "train"}});
                sum = 0;
                count = 0;
            }
        }
        if (!corpus.indices(Split::val).empty()) {
            const NapStats val = evaluate_nap(planner, corpus, oracle, Split::val);
            append_metrics({{"stage", "pretrain-planner"},
                            {"step", losses.size()},
                            {"ntp", nullptr},
                            {"nap", val.loss},
                            {"f", nullptr},
                            {"lr", opt.lr},
                            {"split", "val"},
                            {"accuracy", val.accuracy}});
            summary["val_nap"] = val.loss;
            summary["val_accuracy"] = val.accuracy;
        }
    } else if (kind == "e2e") {
        ConditionedLM<float> lm(lm_config(config_));
        lm.init_actions(vocab);
        TrainingSchedule s = training_schedule(config_);
        s.total_steps = config_.size("planner.steps");
        s.lr = config_.real("planner.lr");
        s.seed = stage_seed(config_, kPlannerTrainSeed);
        JointTrainer trainer(planner, lm, corpus, oracle, s, TrainStage::planner_e2e);
        trainer.run([&](const json& rec) {
            json r = rec;
            r["stage"] = "pretrain-planner";
            append_metrics(r);
        });
        ckpt.add_all(lm.parameters());
    }
    ckpt.add_all(planner.parameters());
    fs::create_directories(dir_ / "checkpoints");
    save_checkpoint(checkpoint_path("planner").string(), ckpt);
    return summary;
}

json Experiment::finetune(const std::string& tag, bool resume) {
    return finetune_with(training_schedule(config_), tag, resume);
}

json Experiment::finetune_with(const TrainingSchedule& schedule, const std::string& tag, bool resume) {
    write_config();
    const SegmentedCorpus corpus = load_corpus();
    const ActionVocabulary vocab = load_vocabulary();
    const auto oracle = oracle_for(corpus, vocab);
    PlannerModel<float> planner(planner_config(config_));
    ConditionedLM<float> lm(lm_config(config_));
    lm.init_actions(vocab);
    if (config_.str("planner.pretrain") != "none") {
        const Checkpoint p = require_checkpoint(checkpoint_path("planner"), "pretrain-planner");
        p.load_into(planner.parameters());
        if (p.has("lm.token_embed")) {
            p.load_into(lm.parameters());
        }
    }
    JointTrainer trainer(planner, lm, corpus, oracle, schedule, TrainStage::joint);
    const std::string name = tagged("finetune", tag);
    const fs::path path = checkpoint_path(name);
    if (resume && fs::exists(path)) {
        const Checkpoint c = load_checkpoint(path.string());
        c.load_into(planner.parameters());
        c.load_into(lm.parameters());
        trainer.load_state(c);
    }
    fs::create_directories(dir_ / "checkpoints");
    auto save = [&] {
        Checkpoint c;
        c.meta = stage_meta("finetune");
        c.meta["tag"] = tag;
        c.meta["schedule"] = schedule_json(schedule);
        c.add_all(planner.parameters());
        c.add_all(lm.parameters());
        trainer.save_state(c);
        save_checkpoint(path.string(), c);
    };
    const std::size_t every = config_.size("trainer.checkpoint_every");
    json last_val;
    auto log = [&](const json& rec) {
        json r = rec;
        r["stage"] = "finetune";
        if (!tag.empty()) {
            r["tag"] = tag;
        }
        append_metrics(r);
        if (r["split"] == "val") {
            last_val = r;
        }
        if (every != 0 && r["split"] == "train" && trainer.state().step % every == 0 &&
            trainer.state().step < schedule.total_steps) {
            save();
        }
    };
    trainer.run(log);
    save();
    return {{"checkpoint", path.string()}, {"steps", trainer.state().step}, {"val", last_val}};
}

ModelPair Experiment::load_models(const std::string& tag) const {
    const Checkpoint c = require_checkpoint(checkpoint_path(tagged("finetune", tag)), "finetune");
    ModelPair m{PlannerModel<float>(planner_config(config_)), ConditionedLM<float>(lm_config(config_)),
                ConditioningMode::soft};
    c.load_into(m.planner.parameters());
    c.load_into(m.lm.parameters());
    m.mode = parse_mode(c.meta.at("schedule").at("mode").get<std::string>());
    return m;
}

EvalReport Experiment::eval(const std::string& tag) {
    write_config();
    const SegmentedCorpus corpus = load_corpus();
    const ActionVocabulary vocab = load_vocabulary();
    const auto oracle = oracle_for(corpus, vocab);
    const ModelPair m = load_models(tag);
    EvalOptions opt = eval_options(config_);
    opt.mode = m.mode;
    const EvalReport report = evaluate(m.planner, m.lm, corpus, vocab, oracle, opt);
    json j = report.to_json();
    j["tag"] = tag;
    write_report(tagged("eval", tag), j);
    write_text(dir_ / "reports" / (tagged("eval", tag) + ".csv"),
               report.csv_header() + "\n" + report.csv_row(tag.empty() ? "default" : tag) + "\n");
    return report;
}

Generation Experiment::generate(const std::string& tag) {
    write_config();
    const ModelPair m = load_models(tag);
    GenerationOptions g;
    g.n_tokens = config_.size("generate.tokens");
    g.temperature = config_.real("generate.temperature");
    g.top_p = config_.real("generate.top_p");
    g.seed = stage_seed(config_, kEvalSeed);
    g.mode = m.mode;
    const Generation out = plm::generate(m.planner, m.lm, config_.str("generate.prefix"), g);
    json sentences = json::array();
    for (const GeneratedSentence& s : out.sentences) {
        sentences.push_back({{"text", s.text}, {"planned", s.planned}, {"complete", s.complete}});
    }
    json report{{"prefix", config_.str("generate.prefix")},
                {"tokens", out.tokens.size()},
                {"action_trace", out.action_trace},
                {"sentences", sentences}};
    try {
        report["text"] = detokenize(out.tokens);
        write_report(tagged("generate", tag), report);
    } catch (const json::exception&) {
        // sampled bytes need not form valid UTF-8; keep the token ids instead
        report.erase("text");
        report["token_ids"] = out.tokens;
        for (json& s : report["sentences"]) {
            s.erase("text");
        }
        write_report(tagged("generate", tag), report);
    }
    return out;
}

ProbeReport Experiment::probe(const std::string& tag) {
    write_config();
    const SegmentedCorpus corpus = load_corpus();
    const ModelPair m = load_models(tag);
    const ProbeReport report = run_probes(m.planner, m.lm, corpus, m.mode, probe_options(config_));
    json j = report.to_json();
    j["tag"] = tag;
    write_report(tagged("probe", tag), j);
    return report;
}

json Experiment::sweep() {
    json points = json::array();
    std::string csv;
    for (double f : config_.reals("sweep.fractions")) {
        TrainingSchedule s = training_schedule(config_);
        s.mode = parse_mode(config_.str("sweep.mode"));
        s.unfreeze = parse_unfreeze(config_.str("sweep.unfreeze"));
        s.predicted_fraction = f;
        s.linear_fraction = false;
        std::ostringstream os;
        os << 'f' << f;
        const std::string tag = os.str();
        finetune_with(s, tag);
        const EvalReport r = eval(tag);
        points.push_back({{"f", f}, {"tag", tag}, {"report", r.to_json()}});
        if (csv.empty()) {
            csv = r.csv_header() + "\n";
        }
        csv += r.csv_row(tag) + "\n";
    }
    const json out{{"mode", config_.str("sweep.mode")}, {"unfreeze", config_.str("sweep.unfreeze")}, {"points", points}};
    write_report("sweep", out);
    write_text(dir_ / "reports" / "sweep.csv", csv);
    return out;
}

void Experiment::run() {
    for (const std::string& stage : config_.strings("run.stages")) {
        if (stage == "prepare") prepare();
        else if (stage == "cluster") cluster();
        else if (stage == "pretrain-planner") pretrain_planner();
        else if (stage == "finetune") finetune();
        else if (stage == "eval") eval();
        else if (stage == "generate") generate();
        else if (stage == "probe") probe();
        else if (stage == "sweep") sweep();
    }
}

}  // namespace plm
