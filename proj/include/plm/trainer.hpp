#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "plm/checkpoint.hpp"
#include "plm/condlm.hpp"
#include "plm/optim.hpp"
#include "plm/planner.hpp"
#include "plm/rng.hpp"

namespace plm {

enum class UnfreezePolicy { immediate, halfway, never };

const char* unfreeze_name(UnfreezePolicy policy);
UnfreezePolicy parse_unfreeze(std::string_view name);

struct TrainingSchedule {
    std::size_t total_steps = 2000;
    double lr = 1e-4;
    std::size_t batch_size = 32;
    UnfreezePolicy unfreeze = UnfreezePolicy::halfway;
    double predicted_fraction = 1.0;  // f; ignored when linear_fraction
    bool linear_fraction = false;     // f(t) = t / total_steps
    double nap_weight = 0.0;          // lambda
    ConditioningMode mode = ConditioningMode::soft;
    std::uint64_t seed = 0;
    std::size_t log_every = 50;
    std::size_t eval_every = 0;     // 0: validation only after the last step
    std::size_t eval_windows = 128; // validation windows per evaluation

    // Step t is 0-based. Halfway unfreezes from t = ceil(total_steps / 2).
    bool planner_unfrozen(std::size_t t) const;
    double fraction(std::size_t t) const;
    void validate() const;
};

// One Bernoulli(f) draw per slot, in slot order: 1 = planner-derived
// conditioning, 0 = oracle one-hot.
std::vector<std::uint8_t> draw_prediction_mask(std::size_t slots, double f, Rng& rng);

// Conditioning distributions for a batch of slots: each slot uses the
// planner logits (interpreted per mode) with probability f, else the oracle.
Tensor<float> mix_actions(Tape<float>& tape, ConditioningMode mode, const Tensor<float>& logits,
                          std::span<const ActionId> oracle, double f, Rng& rng, std::size_t actions);

struct StepLosses {
    double ntp = 0;
    double nap = 0;
    bool has_nap = false;
    double total = 0;
    double f = 0;
    bool planner_updated = false;
};

enum class TrainStage {
    joint,       // LM + adapters always, planner per unfreeze policy
    planner_e2e, // planner + adapter projections through the LM loss, everything else frozen
};

// Step counter, sampling streams and optimizer moments; everything needed to
// resume a run on an identical trajectory.
struct TrainState {
    std::uint64_t step = 0;
    Rng data_rng;
    Rng mix_rng;
};

class JointTrainer {
public:
    JointTrainer(PlannerModel<float>& planner, ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                 const std::vector<std::vector<ActionId>>& oracle, TrainingSchedule schedule,
                 TrainStage stage = TrainStage::joint);

    // One step on a batch sampled from the training windows.
    StepLosses step();
    // One step on an explicit batch.
    StepLosses step_on(std::span<const Window> batch);

    // Runs the remaining steps. `log` receives one metrics record per logging
    // interval ({step, ntp, nap, f, lr, split}) and one validation record per
    // evaluation.
    void run(const std::function<void(const nlohmann::json&)>& log);

    const TrainState& state() const { return state_; }
    const TrainingSchedule& schedule() const { return schedule_; }
    const Adam& optimizer() const { return adam_; }
    TrainStage stage() const { return stage_; }

    // Optimizer moments become "optim.<group>.{m,v}.<param>" tensors; the
    // counters and RNG streams go under meta["train_state"].
    void save_state(Checkpoint& ckpt) const;
    void load_state(const Checkpoint& ckpt);

    nlohmann::json validation_record();

private:
    PlannerModel<float>& planner_;
    ConditionedLM<float>& lm_;
    const SegmentedCorpus& corpus_;
    const std::vector<std::vector<ActionId>>& oracle_;
    TrainingSchedule schedule_;
    TrainStage stage_;
    std::vector<Window> train_windows_;
    std::vector<Window> val_windows_;
    TrainState state_;
    Adam adam_;
    std::vector<std::vector<std::string>> group_names_;
    std::size_t planner_group_ = 0;
    std::vector<Tensor<float>> all_params_;
};

// The no-NAP-pretraining stage: Soft conditioning, f = 1, trains the planner
// and the adapter projections through the NTP loss with the LM body and E_A
// frozen. `schedule.unfreeze` is ignored.
std::vector<StepLosses> pretrain_planner_e2e_lm_frozen(PlannerModel<float>& planner, ConditionedLM<float>& lm,
                                                       const SegmentedCorpus& corpus,
                                                       const std::vector<std::vector<ActionId>>& oracle,
                                                       TrainingSchedule schedule);

}  // namespace plm
