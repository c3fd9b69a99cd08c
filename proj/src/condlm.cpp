#include "plm/condlm.hpp"

#include <algorithm>

#include "plm/error.hpp"

namespace plm {

const char* mode_name(ConditioningMode mode) {
    switch (mode) {
        case ConditioningMode::hard: return "hard";
        case ConditioningMode::straight_through: return "st";
        case ConditioningMode::soft: return "soft";
        case ConditioningMode::uniform: return "uniform";
        case ConditioningMode::oracle: return "oracle";
    }
    return "soft";
}

ConditioningMode parse_mode(std::string_view name) {
    if (name == "hard") return ConditioningMode::hard;
    if (name == "st" || name == "straight_through" || name == "straight-through") {
        return ConditioningMode::straight_through;
    }
    if (name == "soft") return ConditioningMode::soft;
    if (name == "uniform") return ConditioningMode::uniform;
    if (name == "oracle") return ConditioningMode::oracle;
    throw ConfigError("unknown conditioning mode '" + std::string(name) +
                      "' (expected hard, st, soft, uniform or oracle)");
}

template <class T>
ConditionedLM<T>::ConditionedLM(const LMConfig& config) : config_(config) {
    if (config.layers == 0 || config.context < 2) {
        throw ConfigError("lm.layers must be positive and lm.context at least 2");
    }
    for (std::size_t l : config.adapter_layers) {
        if (l >= config.layers) {
            throw ConfigError("adapter layer " + std::to_string(l) + " outside a " + std::to_string(config.layers) +
                              "-layer model");
        }
    }
    Rng rng(derive_seed(config.seed, 0x1A4));
    const std::size_t d = config.d_model;
    token_embed_ = normal_param<T>({kVocabSize, d}, 0.02, rng);
    positions_ = normal_param<T>({config.context, d}, 0.01, rng);
    for (std::size_t l = 0; l < config.layers; ++l) {
        blocks_.emplace_back(d, config.heads, 4 * d, config.layers, rng);
    }
    ln_f_ = LayerNorm<T>(d);
    head_ = Linear<T>(d, kVocabSize, false, 0.02, rng);

    std::vector<std::size_t> layers = config.adapter_layers;
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (std::size_t l : layers) {
        AdapterLayer<T> a;
        a.layer = l;
        a.actions = normal_param<T>({config.actions, config.action_dim}, 1.0 / std::sqrt(double(config.action_dim)),
                                    rng);
        a.projection = Tensor<T>::zeros({config.action_dim, d}, true);
        adapters_.push_back(std::move(a));
    }
}

template <class T>
void ConditionedLM<T>::init_actions(const ActionVocabulary& vocab) {
    if (vocab.k != config_.actions || vocab.dim != config_.action_dim) {
        throw ShapeError("init_actions: vocabulary [" + std::to_string(vocab.k) + "," + std::to_string(vocab.dim) +
                         "] vs adapter [" + std::to_string(config_.actions) + "," +
                         std::to_string(config_.action_dim) + "]");
    }
    for (AdapterLayer<T>& a : adapters_) {
        std::transform(vocab.centroids.begin(), vocab.centroids.end(), a.actions.values().begin(),
                       [](float c) { return static_cast<T>(c); });
    }
}

template <class T>
Tensor<T> ConditionedLM<T>::conditioning_vectors(Tape<T>& tape, const Tensor<T>& weights, std::size_t a) const {
    return matmul(tape, weights, adapters_.at(a).actions);
}

template <class T>
Tensor<T> ConditionedLM<T>::forward(Tape<T>& tape, const LMBatch& batch, const Tensor<T>* weights,
                                    AdapterTrace<T>* trace) const {
    const std::size_t N = batch.size();
    if (N == 0 || batch.targets.size() != N || batch.positions.size() != N) {
        throw ShapeError("lm forward: inconsistent batch of " + std::to_string(N) + " inputs");
    }
    for (std::size_t L : batch.seq_lens) {
        if (L > config_.context) {
            throw ShapeError("lm forward: window of " + std::to_string(L) + " positions exceeds context " +
                             std::to_string(config_.context));
        }
    }
    if (weights != nullptr) {
        if (batch.slots.size() != N) {
            throw UsageError("lm forward: missing conditioning slot for some positions");
        }
        if (weights->rank() != 2 || weights->rows() != batch.slot_count || weights->cols() != config_.actions) {
            throw ShapeError("lm forward: conditioning weights " + shape_str(weights->shape()) + " vs [" +
                             std::to_string(batch.slot_count) + "," + std::to_string(config_.actions) + "]");
        }
        for (std::int32_t s : batch.slots) {
            if (s < 0 || static_cast<std::size_t>(s) >= batch.slot_count) {
                throw UsageError("lm forward: missing conditioning for slot " + std::to_string(s));
            }
        }
    }
    if (trace != nullptr) {
        trace->pre_merge.clear();
        trace->post_merge.clear();
    }

    Tensor<T> x = add(tape, embedding_lookup(tape, token_embed_, batch.inputs),
                      embedding_lookup(tape, positions_, batch.positions));
    std::size_t next_adapter = 0;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const bool adapted =
            weights != nullptr && next_adapter < adapters_.size() && adapters_[next_adapter].layer == l;
        if (!adapted) {
            x = blocks_[l].forward(tape, x, batch.seq_lens);
            continue;
        }
        const AdapterLayer<T>& a = adapters_[next_adapter];
        const Tensor<T> r = conditioning_vectors(tape, *weights, next_adapter);
        const Tensor<T> inject = embedding_lookup(tape, matmul(tape, r, a.projection), batch.slots);
        Tensor<T> merged;
        x = blocks_[l].forward(tape, x, batch.seq_lens, &inject, &merged);
        if (trace != nullptr) {
            Tape<T> off(false);
            trace->pre_merge.push_back(embedding_lookup(off, r, batch.slots));
            trace->post_merge.push_back(merged);
        }
        ++next_adapter;
    }
    return head_(tape, ln_f_(tape, x));
}

template <class T>
NamedParams<T> ConditionedLM<T>::body_parameters() const {
    NamedParams<T> out;
    out.emplace_back("lm.token_embed", token_embed_);
    out.emplace_back("lm.positions", positions_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        blocks_[l].collect("lm.blocks." + std::to_string(l), out);
    }
    ln_f_.collect("lm.ln_f", out);
    head_.collect("lm.head", out);
    return out;
}

template <class T>
NamedParams<T> ConditionedLM<T>::adapter_parameters() const {
    NamedParams<T> out;
    for (const AdapterLayer<T>& a : adapters_) {
        const std::string prefix = "adapter." + std::to_string(a.layer);
        out.emplace_back(prefix + ".actions", a.actions);
        out.emplace_back(prefix + ".projection", a.projection);
    }
    return out;
}

template <class T>
NamedParams<T> ConditionedLM<T>::parameters() const {
    NamedParams<T> out = body_parameters();
    for (auto& p : adapter_parameters()) {
        out.push_back(std::move(p));
    }
    return out;
}

template <class T>
Tensor<T> conditioning_weights(Tape<T>& tape, ConditioningMode mode, const Tensor<T>& logits,
                               std::span<const ActionId> oracle, std::size_t actions,
                               std::span<const std::uint8_t> mask) {
    const bool needs_logits = mode == ConditioningMode::soft || mode == ConditioningMode::straight_through ||
                              mode == ConditioningMode::hard;
    std::size_t S = 0;
    if (needs_logits) {
        if (!logits.defined() || logits.rank() != 2 || logits.cols() != actions) {
            throw ShapeError(std::string("conditioning_weights: ") + mode_name(mode) + " needs planner logits [S," +
                             std::to_string(actions) + "]");
        }
        S = logits.rows();
    } else if (logits.defined()) {
        S = logits.rows();
    } else {
        S = oracle.size();
    }
    const bool any_oracle =
        mode == ConditioningMode::oracle || std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m == 0; });
    if (!mask.empty() && mask.size() != S) {
        throw ShapeError("conditioning_weights: mask of " + std::to_string(mask.size()) + " for " +
                         std::to_string(S) + " slots");
    }
    Tensor<T> onehot;
    if (any_oracle) {
        if (oracle.size() != S) {
            throw UsageError("conditioning_weights: oracle actions required for " + std::to_string(S) + " slots");
        }
        onehot = Tensor<T>::zeros({S, actions});
        for (std::size_t i = 0; i < S; ++i) {
            if (oracle[i] < 0 || static_cast<std::size_t>(oracle[i]) >= actions) {
                throw UsageError("conditioning_weights: invalid action id " + std::to_string(oracle[i]));
            }
            onehot.values()[i * actions + static_cast<std::size_t>(oracle[i])] = T(1);
        }
    }

    Tensor<T> planned;
    switch (mode) {
        case ConditioningMode::soft: planned = softmax(tape, logits); break;
        case ConditioningMode::straight_through: planned = straight_through(tape, logits); break;
        case ConditioningMode::hard: planned = hard_select(logits); break;
        case ConditioningMode::uniform: planned = Tensor<T>::filled({S, actions}, T(1) / T(actions)); break;
        case ConditioningMode::oracle: return onehot;
    }
    if (mask.empty() || !any_oracle) {
        return planned;
    }
    Tensor<T> keep = Tensor<T>::zeros({S, actions});
    Tensor<T> rest = Tensor<T>::zeros({S, actions});
    for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t a = 0; a < actions; ++a) {
            keep.values()[i * actions + a] = mask[i] ? T(1) : T(0);
            rest.values()[i * actions + a] = mask[i] ? T(0) : onehot.values()[i * actions + a];
        }
    }
    return add(tape, mul(tape, planned, keep), rest);
}

template <class T>
Tensor<T> ntp_loss(Tape<T>& tape, const Tensor<T>& logits, const LMBatch& batch) {
    return cross_entropy(tape, logits, batch.targets);
}

WindowBatch make_window_batch(const SegmentedCorpus& corpus, std::span<const Window> windows,
                              const std::vector<std::vector<ActionId>>* oracle, std::size_t max_sentences) {
    WindowBatch out;
    for (const Window& w : windows) {
        const Document& doc = corpus.documents.at(w.doc);
        const std::vector<std::size_t> sent = position_sentences(doc, w);
        const std::size_t first = sent.front(), last = sent.back();
        const std::size_t slot0 = out.lm.slot_count;
        for (std::size_t j = first; j <= last; j += max_sentences) {
            out.plans.push_back(PlanRequest{&doc, j, std::min(last, j + max_sentences - 1)});
        }
        if (oracle != nullptr) {
            for (std::size_t j = first; j <= last; ++j) {
                out.oracle.push_back(oracle->at(w.doc).at(j));
            }
        }
        for (std::size_t p = 0; p < sent.size(); ++p) {
            out.lm.inputs.push_back(doc.tokens[w.begin + p]);
            out.lm.targets.push_back(doc.tokens[w.begin + p + 1]);
            out.lm.positions.push_back(static_cast<std::int32_t>(p));
            out.lm.slots.push_back(static_cast<std::int32_t>(slot0 + sent[p] - first));
        }
        out.lm.seq_lens.push_back(sent.size());
        out.lm.slot_count += last - first + 1;
    }
    return out;
}

template class ConditionedLM<float>;
template class ConditionedLM<double>;
template Tensor<float> conditioning_weights(Tape<float>&, ConditioningMode, const Tensor<float>&,
                                            std::span<const ActionId>, std::size_t, std::span<const std::uint8_t>);
template Tensor<double> conditioning_weights(Tape<double>&, ConditioningMode, const Tensor<double>&,
                                             std::span<const ActionId>, std::size_t, std::span<const std::uint8_t>);
template Tensor<float> ntp_loss(Tape<float>&, const Tensor<float>&, const LMBatch&);
template Tensor<double> ntp_loss(Tape<double>&, const Tensor<double>&, const LMBatch&);

}  // namespace plm
