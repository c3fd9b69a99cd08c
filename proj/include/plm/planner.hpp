#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "plm/actions.hpp"
#include "plm/corpus.hpp"
#include "plm/nn.hpp"

namespace plm {

struct PlannerConfig {
    std::size_t d_model = 128;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t max_sentences = 64;  // learned positions over sentence indices
    std::size_t actions = 32;
    std::uint64_t seed = 0;
};

// Logit rows for sentences first..last (inclusive) of one document, at most
// max_sentences rows. Row j is predicted from sentences 0..j-1 only; when the
// history is longer than max_sentences the oldest sentences are dropped.
struct PlanRequest {
    const Document* doc = nullptr;
    std::size_t first = 0;
    std::size_t last = 0;

    std::size_t rows() const { return last - first + 1; }
};

// Sentence vectors are mean-pooled token embeddings. The sequence
// [start, z_0, ..., z_{j-1}] plus learned positions runs through a causal
// transformer; the action head maps each position to K logits. The head is
// zero-initialised so a fresh planner predicts the uniform distribution.
template <class T>
class PlannerModel {
public:
    PlannerModel() = default;
    explicit PlannerModel(const PlannerConfig& config);

    const PlannerConfig& config() const { return config_; }

    // [sum of request rows, K] in request order.
    Tensor<T> logits(Tape<T>& tape, std::span<const PlanRequest> requests) const;

    NamedParams<T> parameters() const;

private:
    PlannerConfig config_;
    Tensor<T> token_embed_;  // [vocab, d]
    Tensor<T> start_;        // [1, d]
    Tensor<T> positions_;    // [max_sentences, d]
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> ln_f_;
    Linear<T> head_;  // d -> K
};

// Mean cross-entropy of the logit rows against the oracle actions.
template <class T>
Tensor<T> nap_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const ActionId> targets);

// Requests covering every sentence of a document, at most max_sentences rows each.
std::vector<PlanRequest> document_requests(const Document& doc, std::size_t max_sentences);

// Oracle targets matching a request list, in row order.
std::vector<ActionId> request_targets(std::span<const PlanRequest> requests, const SegmentedCorpus& corpus,
                                      const std::vector<std::vector<ActionId>>& oracle);

struct NapOptions {
    std::size_t steps = 1000;
    double lr = 1e-3;
    std::size_t batch_documents = 16;
    std::uint64_t seed = 0;
};

struct NapStats {
    double loss = 0;
    double accuracy = 0;
    std::size_t sentences = 0;
};

// Next-action-prediction training on the train split. Returns per-step losses.
std::vector<double> pretrain_planner(PlannerModel<float>& planner, const SegmentedCorpus& corpus,
                                     const std::vector<std::vector<ActionId>>& oracle, const NapOptions& options);

NapStats evaluate_nap(const PlannerModel<float>& planner, const SegmentedCorpus& corpus,
                      const std::vector<std::vector<ActionId>>& oracle, Split split);

}  // namespace plm
