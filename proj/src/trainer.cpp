#include "plm/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "plm/error.hpp"
#include "plm/eval.hpp"

namespace plm {

const char* unfreeze_name(UnfreezePolicy policy) {
    switch (policy) {
        case UnfreezePolicy::immediate: return "immediate";
        case UnfreezePolicy::halfway: return "halfway";
        case UnfreezePolicy::never: return "never";
    }
    return "halfway";
}

UnfreezePolicy parse_unfreeze(std::string_view name) {
    if (name == "immediate") return UnfreezePolicy::immediate;
    if (name == "halfway") return UnfreezePolicy::halfway;
    if (name == "never") return UnfreezePolicy::never;
    throw ConfigError("unknown unfreeze policy '" + std::string(name) + "' (expected immediate, halfway or never)");
}

bool TrainingSchedule::planner_unfrozen(std::size_t t) const {
    switch (unfreeze) {
        case UnfreezePolicy::immediate: return true;
        case UnfreezePolicy::never: return false;
        case UnfreezePolicy::halfway: return t >= (total_steps + 1) / 2;
    }
    return false;
}

double TrainingSchedule::fraction(std::size_t t) const {
    if (!linear_fraction) {
        return predicted_fraction;
    }
    return total_steps == 0 ? 1.0 : std::min(1.0, double(t) / double(total_steps));
}

void TrainingSchedule::validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) {
        throw ConfigError("trainer.lr must be positive");
    }
    if (batch_size == 0) {
        throw ConfigError("trainer.batch_size must be positive");
    }
    if (!(predicted_fraction >= 0.0 && predicted_fraction <= 1.0)) {
        throw ConfigError("trainer.predicted_fraction must lie in [0, 1]");
    }
    if (!(nap_weight >= 0.0) || !std::isfinite(nap_weight)) {
        throw ConfigError("trainer.nap_weight must be non-negative");
    }
    if (log_every == 0) {
        throw ConfigError("trainer.log_every must be positive");
    }
}

std::vector<std::uint8_t> draw_prediction_mask(std::size_t slots, double f, Rng& rng) {
    if (!(f >= 0.0 && f <= 1.0)) {
        throw UsageError("predicted fraction outside [0, 1]");
    }
    std::vector<std::uint8_t> mask(slots);
    for (std::size_t i = 0; i < slots; ++i) {
        mask[i] = rng.uniform() < f ? 1 : 0;
    }
    return mask;
}

Tensor<float> mix_actions(Tape<float>& tape, ConditioningMode mode, const Tensor<float>& logits,
                          std::span<const ActionId> oracle, double f, Rng& rng, std::size_t actions) {
    const std::size_t slots = logits.defined() ? logits.rows() : oracle.size();
    const std::vector<std::uint8_t> mask = draw_prediction_mask(slots, f, rng);
    return conditioning_weights(tape, mode, logits, oracle, actions, mask);
}

namespace {

bool selects_with_planner(ConditioningMode mode) {
    return mode == ConditioningMode::soft || mode == ConditioningMode::straight_through ||
           mode == ConditioningMode::hard;
}

}  // namespace

JointTrainer::JointTrainer(PlannerModel<float>& planner, ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                           const std::vector<std::vector<ActionId>>& oracle, TrainingSchedule schedule,
                           TrainStage stage)
    : planner_(planner),
      lm_(lm),
      corpus_(corpus),
      oracle_(oracle),
      schedule_(schedule),
      stage_(stage),
      adam_(AdamConfig{schedule.lr}) {
    schedule_.validate();
    if (oracle.size() != corpus.documents.size()) {
        throw UsageError("trainer: oracle actions cover " + std::to_string(oracle.size()) + " of " +
                         std::to_string(corpus.documents.size()) + " documents");
    }
    if (planner.config().actions != lm.config().actions) {
        throw ShapeError("trainer: planner predicts " + std::to_string(planner.config().actions) +
                         " actions but the adapters hold " + std::to_string(lm.config().actions));
    }
    if (stage == TrainStage::planner_e2e) {
        schedule_.mode = ConditioningMode::soft;
        schedule_.predicted_fraction = 1.0;
        schedule_.linear_fraction = false;
        schedule_.nap_weight = 0.0;
        schedule_.unfreeze = UnfreezePolicy::immediate;
    }
    train_windows_ = make_windows(corpus, Split::train).windows;
    if (train_windows_.empty()) {
        throw DataError("trainer: no training windows");
    }
    val_windows_ = make_windows(corpus, Split::val).windows;
    if (val_windows_.size() > schedule_.eval_windows) {
        val_windows_.resize(schedule_.eval_windows);
    }
    state_.data_rng = Rng(derive_seed(schedule_.seed, 0xDA7A));
    state_.mix_rng = Rng(derive_seed(schedule_.seed, 0x313));

    auto add_group = [&](const std::string& name, const NamedParams<float>& params) {
        std::vector<std::string> names;
        for (const auto& [n, t] : params) {
            names.push_back(n);
        }
        group_names_.push_back(std::move(names));
        return adam_.add_group(name, tensors_of(params));
    };
    if (stage == TrainStage::joint) {
        add_group("lm", lm.body_parameters());
        add_group("adapters", lm.adapter_parameters());
    } else {
        NamedParams<float> projections;
        for (const auto& [n, t] : lm.adapter_parameters()) {
            if (n.ends_with(".projection")) {
                projections.emplace_back(n, t);
            }
        }
        add_group("adapters", projections);
    }
    planner_group_ = add_group("planner", planner.parameters());

    all_params_ = tensors_of(lm.parameters());
    for (const Tensor<float>& t : tensors_of(planner.parameters())) {
        all_params_.push_back(t);
    }
}

StepLosses JointTrainer::step() {
    std::vector<Window> batch;
    batch.reserve(schedule_.batch_size);
    for (std::size_t b = 0; b < schedule_.batch_size; ++b) {
        batch.push_back(train_windows_[state_.data_rng.below(train_windows_.size())]);
    }
    return step_on(batch);
}

StepLosses JointTrainer::step_on(std::span<const Window> windows) {
    const std::size_t t = state_.step;
    const bool planner_on = schedule_.planner_unfrozen(t);
    const ConditioningMode mode = schedule_.mode;
    const bool need_nap = schedule_.nap_weight > 0.0;
    StepLosses out;
    out.f = schedule_.fraction(t);

    const WindowBatch wb = make_window_batch(corpus_, windows, &oracle_, planner_.config().max_sentences);
    const std::size_t K = lm_.config().actions;
    const std::vector<std::uint8_t> mask = draw_prediction_mask(wb.lm.slot_count, out.f, state_.mix_rng);
    const bool any_predicted = std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });

    Tape<float> tape;
    Tape<float> frozen(false);
    Tape<float>& ptape = planner_on ? tape : frozen;
    Tensor<float> logits;
    if ((selects_with_planner(mode) && any_predicted) || need_nap) {
        logits = planner_.logits(ptape, wb.plans);
    }
    // With every slot on the oracle the planner plays no part in the weights.
    const ConditioningMode effective = any_predicted ? mode : ConditioningMode::oracle;
    const Tensor<float> w =
        effective == ConditioningMode::oracle || effective == ConditioningMode::uniform
            ? conditioning_weights(tape, effective, Tensor<float>{}, wb.oracle, K, mask)
            : conditioning_weights(tape, effective, logits, wb.oracle, K, mask);
    Tensor<float> ntp = ntp_loss(tape, lm_.forward(tape, wb.lm, &w), wb.lm);
    Tensor<float> total = ntp;
    out.ntp = ntp.item();
    if (need_nap) {
        Tensor<float> nap = nap_loss(tape, logits, wb.oracle);
        out.nap = nap.item();
        out.has_nap = true;
        total = add(tape, ntp, scale(tape, nap, static_cast<float>(schedule_.nap_weight)));
    }
    out.total = total.item();
    check_finite(out.total, stage_ == TrainStage::joint ? "joint fine-tuning" : "end-to-end planner training", t);

    for (Tensor<float>& p : all_params_) {
        p.zero_grad();
    }
    tape.backward(total);
    for (std::size_t g = 0; g < adam_.group_count(); ++g) {
        if (g == planner_group_ && !planner_on) {
            continue;
        }
        adam_.step(g, schedule_.lr);
    }
    out.planner_updated = planner_on;
    ++state_.step;
    return out;
}

nlohmann::json JointTrainer::validation_record() {
    nlohmann::json rec;
    rec["step"] = state_.step;
    rec["split"] = "val";
    rec["f"] = schedule_.fraction(state_.step);
    rec["lr"] = schedule_.lr;
    if (val_windows_.empty()) {
        rec["ntp"] = nullptr;
        rec["nap"] = nullptr;
        return rec;
    }
    const NllStats stats = conditioned_nll(planner_, lm_, corpus_, val_windows_, schedule_.mode, &oracle_);
    rec["ntp"] = stats.mean_nll();
    rec["nap"] = stats.mean_nap();
    return rec;
}

void JointTrainer::run(const std::function<void(const nlohmann::json&)>& log) {
    double ntp_sum = 0, nap_sum = 0;
    std::size_t count = 0;
    bool has_nap = false;
    double last_f = 0;
    while (state_.step < schedule_.total_steps) {
        const StepLosses l = step();
        ntp_sum += l.ntp;
        nap_sum += l.nap;
        has_nap = has_nap || l.has_nap;
        last_f = l.f;
        ++count;
        const bool last = state_.step == schedule_.total_steps;
        if (state_.step % schedule_.log_every == 0 || last) {
            nlohmann::json rec;
            rec["step"] = state_.step;
            rec["split"] = "train";
            rec["ntp"] = ntp_sum / double(count);
            rec["nap"] = has_nap ? nlohmann::json(nap_sum / double(count)) : nlohmann::json(nullptr);
            rec["f"] = last_f;
            rec["lr"] = schedule_.lr;
            if (log) {
                log(rec);
            }
            ntp_sum = nap_sum = 0;
            count = 0;
            has_nap = false;
        }
        if (((schedule_.eval_every != 0 && state_.step % schedule_.eval_every == 0) || last) && log) {
            log(validation_record());
        }
    }
}

void JointTrainer::save_state(Checkpoint& ckpt) const {
    nlohmann::json groups = nlohmann::json::object();
    for (std::size_t g = 0; g < adam_.group_count(); ++g) {
        const Adam::Group& group = adam_.group(g);
        groups[group.name] = {{"step", group.step}};
        for (std::size_t p = 0; p < group.params.size(); ++p) {
            const std::string& name = group_names_[g][p];
            ckpt.add("optim." + group.name + ".m." + name, group.params[p].shape(), group.m[p]);
            ckpt.add("optim." + group.name + ".v." + name, group.params[p].shape(), group.v[p]);
        }
    }
    ckpt.meta["train_state"] = {
        {"step", state_.step},
        {"stage", stage_ == TrainStage::joint ? "joint" : "planner_e2e"},
        {"data_rng", state_.data_rng.state()},
        {"mix_rng", state_.mix_rng.state()},
        {"groups", groups},
    };
}

void JointTrainer::load_state(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("train_state")) {
        throw DataError("checkpoint carries no training state to resume from");
    }
    const nlohmann::json& ts = ckpt.meta["train_state"];
    const std::string stage = ts.at("stage").get<std::string>();
    if (stage != (stage_ == TrainStage::joint ? "joint" : "planner_e2e")) {
        throw DataError("checkpoint training state belongs to stage '" + stage + "'");
    }
    state_.step = ts.at("step").get<std::uint64_t>();
    state_.data_rng.set_state(ts.at("data_rng").get<std::string>());
    state_.mix_rng.set_state(ts.at("mix_rng").get<std::string>());
    for (std::size_t g = 0; g < adam_.group_count(); ++g) {
        Adam::Group& group = adam_.group(g);
        group.step = ts.at("groups").at(group.name).at("step").get<std::uint64_t>();
        for (std::size_t p = 0; p < group.params.size(); ++p) {
            const std::string& name = group_names_[g][p];
            const TensorBlob& m = ckpt.get("optim." + group.name + ".m." + name);
            const TensorBlob& v = ckpt.get("optim." + group.name + ".v." + name);
            if (m.values.size() != group.m[p].size() || v.values.size() != group.v[p].size()) {
                throw ShapeError("optimizer state for '" + name + "' does not match the model");
            }
            group.m[p] = m.values;
            group.v[p] = v.values;
        }
    }
}

std::vector<StepLosses> pretrain_planner_e2e_lm_frozen(PlannerModel<float>& planner, ConditionedLM<float>& lm,
                                                       const SegmentedCorpus& corpus,
                                                       const std::vector<std::vector<ActionId>>& oracle,
                                                       TrainingSchedule schedule) {
    JointTrainer trainer(planner, lm, corpus, oracle, schedule, TrainStage::planner_e2e);
    std::vector<StepLosses> out;
    while (trainer.state().step < trainer.schedule().total_steps) {
        out.push_back(trainer.step());
    }
    return out;
}

}  // namespace plm
