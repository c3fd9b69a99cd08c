#include "plm/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "plm/error.hpp"
#include "plm/eval.hpp"
#include "plm/optim.hpp"

namespace plm {

const char* location_name(ProbeLocation location) {
    return location == ProbeLocation::pre_merge ? "pre_merge" : "post_merge";
}

ProbeLocation parse_location(std::string_view name) {
    if (name == "pre_merge" || name == "pre-merge" || name == "pre") return ProbeLocation::pre_merge;
    if (name == "post_merge" || name == "post-merge" || name == "post") return ProbeLocation::post_merge;
    throw ConfigError("unknown probe location '" + std::string(name) + "' (expected pre_merge or post_merge)");
}

ProbePairs extract_representations(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                                   const SegmentedCorpus& corpus, std::span<const Window> windows,
                                   ConditioningMode mode, const ProbeSpec& spec) {
    if (spec.distance == 0) {
        throw UsageError("probe distance must be at least 1");
    }
    if (spec.adapter >= lm.adapters().size()) {
        throw UsageError("probe: adapter index " + std::to_string(spec.adapter) + " but the model has " +
                         std::to_string(lm.adapters().size()));
    }
    const ConditioningMode pmode = prediction_mode(mode);
    const std::size_t K = lm.config().actions;
    ProbePairs out;
    out.dim = spec.location == ProbeLocation::pre_merge ? lm.config().action_dim : lm.config().d_model;
    constexpr std::size_t kChunk = 16;
    for (std::size_t i = 0; i < windows.size(); i += kChunk) {
        const auto chunk = windows.subspan(i, std::min(kChunk, windows.size() - i));
        const WindowBatch wb = make_window_batch(corpus, chunk, nullptr, planner.config().max_sentences);
        Tape<float> off(false);
        Tensor<float> w;
        if (pmode == ConditioningMode::uniform) {
            w = Tensor<float>::filled({wb.lm.slot_count, K}, 1.0f / float(K));
        } else {
            w = conditioning_weights(off, pmode, planner.logits(off, wb.plans), {}, K);
        }
        AdapterTrace<float> trace;
        lm.forward(off, wb.lm, &w, &trace);
        const Tensor<float>& rep = spec.location == ProbeLocation::pre_merge ? trace.pre_merge.at(spec.adapter)
                                                                              : trace.post_merge.at(spec.adapter);
        std::size_t row = 0;
        for (const Window& win : chunk) {
            const Document& doc = corpus.documents[win.doc];
            const std::size_t positions = win.length - 1;
            for (std::size_t p = 0; p < positions; ++p) {
                if (p + spec.distance < win.length) {
                    const float* r = rep.data() + (row + p) * out.dim;
                    out.reps.insert(out.reps.end(), r, r + out.dim);
                    out.targets.push_back(doc.tokens[win.begin + p + spec.distance]);
                }
            }
            row += positions;
        }
    }
    return out;
}

ProbeResult train_probe(const ProbePairs& train, const ProbePairs& eval, const ProbeSpec& spec) {
    if (train.size() == 0 || eval.size() == 0) {
        throw UsageError("train_probe: empty pair set");
    }
    if (train.dim != eval.dim) {
        throw ShapeError("train_probe: representation widths differ");
    }
    const std::size_t D = train.dim, V = kVocabSize;
    Tensor<float> weight = Tensor<float>::zeros({D, V}, true);
    // Bias starts at the smoothed log prior of the training targets; from a
    // zero start Adam raises all frequent classes at the same rate and the
    // probe stays below the majority baseline for thousands of steps.
    std::vector<double> counts(V, 0.0);
    for (TokenId t : train.targets) {
        counts[std::size_t(t)] += 1.0;
    }
    Tensor<float> bias = Tensor<float>::zeros({V}, true);
    for (std::size_t v = 0; v < V; ++v) {
        bias.values()[v] = float(std::log((counts[v] + 1.0) / (double(train.size()) + double(V))));
    }
    Adam adam(AdamConfig{spec.lr});
    const std::size_t g = adam.add_group("probe", {weight, bias});
    Rng rng(derive_seed(spec.seed, 0x960BE));
    const std::size_t B = std::min(spec.batch_size, train.size());
    std::vector<float> x(B * D);
    std::vector<TokenId> y(B);
    for (std::size_t step = 0; step < spec.train_steps; ++step) {
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t k = rng.below(train.size());
            std::copy_n(train.reps.begin() + std::ptrdiff_t(k * D), D, x.begin() + std::ptrdiff_t(b * D));
            y[b] = train.targets[k];
        }
        Tape<float> tape;
        const Tensor<float> xb({B, D}, x);
        Tensor<float> loss = cross_entropy(tape, add_row(tape, matmul(tape, xb, weight), bias), y);
        check_finite(loss.item(), "probe training", step);
        adam.zero_grad();
        tape.backward(loss);
        adam.step(g, spec.lr);
    }

    ProbeResult result;
    std::map<TokenId, std::size_t> freq;
    for (TokenId t : train.targets) {
        ++freq[t];
    }
    const TokenId majority =
        std::max_element(freq.begin(), freq.end(), [](const auto& a, const auto& b) { return a.second < b.second; })
            ->first;
    std::size_t hits = 0, base = 0;
    constexpr std::size_t kChunk = 1024;
    for (std::size_t i = 0; i < eval.size(); i += kChunk) {
        const std::size_t n = std::min(kChunk, eval.size() - i);
        Tape<float> off(false);
        const Tensor<float> xb({n, D}, std::vector<float>(eval.reps.begin() + std::ptrdiff_t(i * D),
                                                         eval.reps.begin() + std::ptrdiff_t((i + n) * D)));
        const std::vector<std::int32_t> best = row_argmax(add_row(off, matmul(off, xb, weight), bias));
        for (std::size_t r = 0; r < n; ++r) {
            hits += best[r] == eval.targets[i + r] ? 1 : 0;
            base += eval.targets[i + r] == majority ? 1 : 0;
        }
    }
    result.accuracy = double(hits) / double(eval.size());
    result.chance = double(base) / double(eval.size());
    result.weight.assign(weight.values().begin(), weight.values().end());
    result.bias.assign(bias.values().begin(), bias.values().end());
    return result;
}

const ProbeEntry& ProbeReport::at(ProbeLocation location, std::size_t layer, std::size_t distance) const {
    for (const ProbeEntry& e : entries) {
        if (e.location == location && e.layer == layer && e.distance == distance) {
            return e;
        }
    }
    throw UsageError("probe report has no entry for " + std::string(location_name(location)) + " layer " +
                     std::to_string(layer) + " distance " + std::to_string(distance));
}

nlohmann::json ProbeReport::to_json() const {
    nlohmann::json list = nlohmann::json::array();
    nlohmann::json matrix = nlohmann::json::object();
    nlohmann::json chance = nlohmann::json::object();
    for (const ProbeEntry& e : entries) {
        list.push_back({{"location", location_name(e.location)},
                        {"layer", e.layer},
                        {"distance", e.distance},
                        {"accuracy", e.accuracy},
                        {"chance", e.chance}});
        matrix[location_name(e.location)][std::to_string(e.layer)][std::to_string(e.distance)] = e.accuracy;
        chance[std::to_string(e.distance)] = e.chance;
    }
    return {{"entries", list}, {"matrix", matrix}, {"chance", chance}};
}

ProbeReport run_probes(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                       const SegmentedCorpus& corpus, ConditioningMode mode, const ProbeOptions& options) {
    std::vector<Window> train = make_windows(corpus, Split::train).windows;
    std::vector<Window> eval = make_windows(corpus, options.eval_split).windows;
    if (train.size() > options.train_windows) {
        train.resize(options.train_windows);
    }
    if (eval.size() > options.eval_windows) {
        eval.resize(options.eval_windows);
    }
    ProbeReport report;
    for (ProbeLocation location : options.locations) {
        for (std::size_t a = 0; a < lm.adapters().size(); ++a) {
            for (std::size_t d : options.distances) {
                ProbeSpec spec;
                spec.location = location;
                spec.adapter = a;
                spec.distance = d;
                spec.train_steps = options.train_steps;
                spec.lr = options.lr;
                spec.seed = derive_seed(options.seed, a * 64 + d * 2 + (location == ProbeLocation::post_merge));
                const ProbePairs tp = extract_representations(planner, lm, corpus, train, mode, spec);
                const ProbePairs ep = extract_representations(planner, lm, corpus, eval, mode, spec);
                const ProbeResult r = train_probe(tp, ep, spec);
                report.entries.push_back(ProbeEntry{location, lm.adapters()[a].layer, d, r.accuracy, r.chance});
            }
        }
    }
    return report;
}

}  // namespace plm
