#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plm/actions.hpp"
#include "plm/corpus.hpp"
#include "plm/nn.hpp"
#include "plm/planner.hpp"

namespace plm {

enum class ConditioningMode { hard, straight_through, soft, uniform, oracle };

const char* mode_name(ConditioningMode mode);
ConditioningMode parse_mode(std::string_view name);

struct LMConfig {
    std::size_t d_model = 128;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t context = 128;
    std::size_t actions = 32;     // K
    std::size_t action_dim = 64;  // d_e
    std::vector<std::size_t> adapter_layers{2, 3};
    std::uint64_t seed = 0;
};

// E_A (initialised from the action centroids) and a zero-initialised
// projection into the model width.
template <class T>
struct AdapterLayer {
    std::size_t layer = 0;
    Tensor<T> actions;     // [K, d_e]
    Tensor<T> projection;  // [d_e, d_model]
};

// Flattened window batch: N input positions over stacked windows.
struct LMBatch {
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;
    std::vector<std::int32_t> positions;  // position inside its window
    std::vector<std::size_t> seq_lens;    // positions per window
    std::vector<std::int32_t> slots;      // conditioning row of each position
    std::size_t slot_count = 0;

    std::size_t size() const { return inputs.size(); }
};

// Per-adapter representations of one forward pass, one entry per adapter.
template <class T>
struct AdapterTrace {
    std::vector<Tensor<T>> pre_merge;   // r_j^l broadcast to positions, [N, d_e]
    std::vector<Tensor<T>> post_merge;  // attention aggregate + injection, [N, d_model]
};

template <class T>
class ConditionedLM {
public:
    ConditionedLM() = default;
    explicit ConditionedLM(const LMConfig& config);

    const LMConfig& config() const { return config_; }

    // Copies the centroids into every adapter's E_A.
    void init_actions(const ActionVocabulary& vocab);

    // Next-token logits [N, vocab]. `weights` holds one conditioning
    // distribution per slot ([slot_count, K]); with nullptr the adapters are
    // bypassed and the base LM runs alone.
    Tensor<T> forward(Tape<T>& tape, const LMBatch& batch, const Tensor<T>* weights,
                      AdapterTrace<T>* trace = nullptr) const;

    // r^l = weights x E_A^l, [slots, d_e], for adapter index a.
    Tensor<T> conditioning_vectors(Tape<T>& tape, const Tensor<T>& weights, std::size_t a) const;

    NamedParams<T> parameters() const;       // everything
    NamedParams<T> body_parameters() const;  // embeddings, blocks, final norm, head
    NamedParams<T> adapter_parameters() const;

    const std::vector<AdapterLayer<T>>& adapters() const { return adapters_; }

private:
    LMConfig config_;
    Tensor<T> token_embed_;  // [vocab, d]
    Tensor<T> positions_;    // [context, d]
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> ln_f_;
    Linear<T> head_;  // d -> vocab
    std::vector<AdapterLayer<T>> adapters_;
};

// Conditioning distributions per slot. `logits` is the planner output (may be
// undefined for uniform/oracle). mask[i] == 1 selects the planner-derived row,
// 0 the oracle one-hot; an empty mask means all planner-derived.
//   soft -> softmax(s), straight_through -> ST(s), hard -> onehot(argmax s),
//   uniform -> 1/K, oracle -> onehot(oracle).
template <class T>
Tensor<T> conditioning_weights(Tape<T>& tape, ConditioningMode mode, const Tensor<T>& logits,
                               std::span<const ActionId> oracle, std::size_t actions,
                               std::span<const std::uint8_t> mask = {});

template <class T>
Tensor<T> ntp_loss(Tape<T>& tape, const Tensor<T>& logits, const LMBatch& batch);

// Builds the LM batch plus planner requests covering the sentences each
// window's positions predict (split so no request exceeds max_sentences
// rows). Slots follow request row order.
struct WindowBatch {
    LMBatch lm;
    std::vector<PlanRequest> plans;
    std::vector<ActionId> oracle;  // per slot; empty when no labels given
};

WindowBatch make_window_batch(const SegmentedCorpus& corpus, std::span<const Window> windows,
                              const std::vector<std::vector<ActionId>>* oracle, std::size_t max_sentences = 64);

}  // namespace plm
