#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "plm/condlm.hpp"
#include "plm/corpus.hpp"
#include "plm/planner.hpp"

namespace plm {

enum class ProbeLocation { pre_merge, post_merge };

const char* location_name(ProbeLocation location);
ProbeLocation parse_location(std::string_view name);

struct ProbeSpec {
    ProbeLocation location = ProbeLocation::post_merge;
    std::size_t adapter = 0;  // index into the LM's adapter list
    std::size_t distance = 1; // d: the target is the token d positions after the input token
    std::size_t train_steps = 2000;
    double lr = 1e-3;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
};

struct ProbePairs {
    std::size_t dim = 0;
    std::vector<float> reps;      // size() x dim
    std::vector<TokenId> targets;

    std::size_t size() const { return targets.size(); }
};

// Frozen representations with planner-predicted conditioning. Input position p
// of a window pairs with the window token at p + d; positions where that runs
// past the window are skipped, so a window of length L yields max(0, L - d)
// pairs.
ProbePairs extract_representations(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                                   const SegmentedCorpus& corpus, std::span<const Window> windows,
                                   ConditioningMode mode, const ProbeSpec& spec);

struct ProbeResult {
    double accuracy = 0;  // top-1 on the evaluation pairs
    double chance = 0;    // always predicting the most frequent training target
    std::vector<float> weight;  // dim x vocab
    std::vector<float> bias;    // vocab
};

// Linear map rep -> byte logits trained with cross-entropy (Adam, seeded
// minibatches); weights start at zero, the bias at the log prior of the
// training targets. Throws UsageError on an empty pair set.
ProbeResult train_probe(const ProbePairs& train, const ProbePairs& eval, const ProbeSpec& spec);

struct ProbeEntry {
    ProbeLocation location = ProbeLocation::post_merge;
    std::size_t layer = 0;  // LM layer of the adapter
    std::size_t distance = 1;
    double accuracy = 0;
    double chance = 0;
};

struct ProbeReport {
    std::vector<ProbeEntry> entries;

    const ProbeEntry& at(ProbeLocation location, std::size_t layer, std::size_t distance) const;
    // {"entries": [...], "matrix": {location: {layer: {distance: accuracy}}}, "chance": {distance: ...}}
    nlohmann::json to_json() const;
};

struct ProbeOptions {
    std::vector<ProbeLocation> locations{ProbeLocation::pre_merge, ProbeLocation::post_merge};
    std::vector<std::size_t> distances{1, 2, 4, 8};
    std::size_t train_windows = 256;
    std::size_t eval_windows = 128;
    Split eval_split = Split::val;
    std::size_t train_steps = 2000;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

// Every (location, adapter layer, distance) probe: fit on training windows,
// scored on the evaluation split.
ProbeReport run_probes(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                       const SegmentedCorpus& corpus, ConditioningMode mode, const ProbeOptions& options);

}  // namespace plm
