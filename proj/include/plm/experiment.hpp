#pragma once

// Stage orchestration over a run directory:
//   <run>/config.json       resolved configuration of the latest invocation
//   <run>/metrics.jsonl     one record per logging interval, all stages
//   <run>/corpus.jsonl      prepared corpus (texts and split labels)
//   <run>/checkpoints/*.plm vocabulary, planner, fine-tuned models
//   <run>/reports/*.json    evaluation, probing and sweep reports
//   <run>/.lock             held while a subcommand writes

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "plm/actions.hpp"
#include "plm/checkpoint.hpp"
#include "plm/condlm.hpp"
#include "plm/config.hpp"
#include "plm/corpus.hpp"
#include "plm/eval.hpp"
#include "plm/planner.hpp"
#include "plm/probe.hpp"
#include "plm/synthetic.hpp"
#include "plm/trainer.hpp"

namespace plm {

CorpusOptions corpus_options(const Config& c);
SyntheticConfig synthetic_config(const Config& c);
EncoderConfig encoder_config(const Config& c);
VocabularyOptions vocabulary_options(const Config& c);
PlannerConfig planner_config(const Config& c);
LMConfig lm_config(const Config& c);
NapOptions nap_options(const Config& c);
TrainingSchedule training_schedule(const Config& c);
EvalOptions eval_options(const Config& c);
ProbeOptions probe_options(const Config& c);

// Checks every key's range and the cross-key constraints; throws ConfigError
// naming the offending key.
void validate_config(const Config& c);

// Exclusive writer lock on a run directory (O_EXCL lock file).
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

// Models of one fine-tuned variant.
struct ModelPair {
    PlannerModel<float> planner;
    ConditionedLM<float> lm;
    ConditioningMode mode = ConditioningMode::soft;  // conditioning the LM was trained with
};

class Experiment {
public:
    Experiment(Config config, std::filesystem::path run_dir);

    const Config& config() const { return config_; }
    const std::filesystem::path& run_dir() const { return dir_; }

    // Each stage returns a short summary for the command line.
    nlohmann::json prepare();
    nlohmann::json cluster();
    nlohmann::json pretrain_planner();
    // Fine-tunes with the configured schedule into checkpoints/finetune[-tag].plm.
    // With resume, continues from that checkpoint's training state.
    nlohmann::json finetune(const std::string& tag = "", bool resume = false);
    nlohmann::json finetune_with(const TrainingSchedule& schedule, const std::string& tag, bool resume = false);
    EvalReport eval(const std::string& tag = "");
    Generation generate(const std::string& tag = "");
    ProbeReport probe(const std::string& tag = "");
    // One fine-tune + evaluation per configured fraction; writes
    // reports/sweep.json and reports/sweep.csv.
    nlohmann::json sweep();
    // Executes run.stages in order.
    void run();

    SegmentedCorpus load_corpus() const;
    ActionVocabulary load_vocabulary() const;
    ModelPair load_models(const std::string& tag = "") const;

    std::filesystem::path checkpoint_path(const std::string& name) const;
    std::filesystem::path report_path(const std::string& name) const;
    std::filesystem::path metrics_path() const { return dir_ / "metrics.jsonl"; }

private:
    void write_config() const;
    void append_metrics(const nlohmann::json& record) const;
    void write_report(const std::string& name, const nlohmann::json& report) const;
    nlohmann::json stage_meta(const std::string& stage) const;
    std::vector<std::vector<ActionId>> oracle_for(const SegmentedCorpus& corpus, const ActionVocabulary& vocab) const;

    Config config_;
    std::filesystem::path dir_;
};

}  // namespace plm
