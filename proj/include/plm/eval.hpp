#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "plm/actions.hpp"
#include "plm/condlm.hpp"
#include "plm/corpus.hpp"
#include "plm/planner.hpp"

namespace plm {

// The conditioning used when actions come from the planner at evaluation
// time. Oracle-trained models are evaluated on the planner's argmax.
ConditioningMode prediction_mode(ConditioningMode trained);

// Summed statistics over a window set, with planner-predicted conditioning.
struct NllStats {
    double nll = 0;           // summed token negative log-likelihood
    std::size_t tokens = 0;
    double nap_nll = 0;       // summed planner cross-entropy over the windows' sentence slots
    std::size_t sentences = 0;

    double mean_nll() const { return tokens ? nll / double(tokens) : 0.0; }
    double mean_nap() const { return sentences ? nap_nll / double(sentences) : 0.0; }
};

// `oracle` is only needed for the planner statistics; it may be null.
NllStats conditioned_nll(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                         const SegmentedCorpus& corpus, std::span<const Window> windows, ConditioningMode mode,
                         const std::vector<std::vector<ActionId>>* oracle = nullptr);

// exp(mean NLL) over every target token of the split's windows (or the first
// max_windows of them when nonzero). Throws DataError on an empty split.
double perplexity(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                  Split split, ConditioningMode mode, std::size_t max_windows = 0);

// ---- generation -----------------------------------------------------------

struct GenerationOptions {
    std::size_t n_tokens = 128;
    double temperature = 1.0;  // <= 0: greedy
    double top_p = 1.0;
    std::uint64_t seed = 0;
    ConditioningMode mode = ConditioningMode::soft;
};

struct GeneratedSentence {
    std::string text;
    ActionId planned = 0;  // argmax of the conditioning distribution used
    bool complete = false; // closed by a boundary rather than by the token budget
};

struct Generation {
    std::vector<TokenId> tokens;               // generated tokens only
    std::vector<GeneratedSentence> sentences;  // every sentence that received generated tokens
    std::vector<ActionId> action_trace;        // planned action per entry of `sentences`
};

// Autoregressive sampling after `prefix` (text; may be empty). The planner is
// re-run on the generated history whenever a new sentence starts. BOS and EOS
// are never sampled, so exactly n_tokens byte tokens come back.
Generation generate(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, std::string_view prefix,
                    const GenerationOptions& options);

// ---- text and sequence metrics --------------------------------------------

// F1 over clipped bigram multiset overlap; 0 when either side has < 2 tokens.
double rouge2_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference);

std::size_t levenshtein(std::span<const ActionId> a, std::span<const ActionId> b);

// Levenshtein distance divided by n_tokens / base (base 128 for the original
// lengths, 64 for the desk defaults). n_tokens must be a positive multiple of base.
double edit_distance_norm(std::span<const ActionId> generated, std::span<const ActionId> reference,
                          std::size_t n_tokens, std::size_t base = 128);

// Actions of the sentences of a byte-token stream, segmented with the corpus
// rule. Whitespace-only text yields no actions.
std::vector<ActionId> realized_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                       std::span<const TokenId> tokens);

// Fraction of complete generated sentences whose realized action equals the
// planned one. Throws UsageError when there are none.
double plan_matching_accuracy(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                              std::span<const Generation> generations);

// ---- HMM critic -----------------------------------------------------------

struct HmmCritic {
    std::size_t states = 0;   // S
    std::size_t symbols = 0;  // K
    std::vector<double> initial;     // S
    std::vector<double> transition;  // S x S, row = from
    std::vector<double> emission;    // S x K

    double log_likelihood(std::span<const ActionId> seq) const;
    std::vector<ActionId> sample(std::size_t length, Rng& rng) const;
};

struct HmmFit {
    HmmCritic critic;
    std::vector<double> log_likelihood_history;  // training log-likelihood before each EM update
    std::size_t iterations = 0;
};

inline constexpr double kHmmSmoothing = 1e-6;

// Baum-Welch from a seeded random start, stopping when the per-symbol
// log-likelihood gain falls below 1e-4 or after max_iterations. The additive
// smoothing is applied once to the final row normalisations.
HmmFit fit_hmm(std::span<const std::vector<ActionId>> sequences, std::size_t states, std::size_t symbols,
               std::uint64_t seed, std::size_t max_iterations = 100);

// exp(-mean per-symbol log-likelihood). Throws UsageError on an empty set.
double latent_perplexity(const HmmCritic& critic, std::span<const std::vector<ActionId>> sequences);

// ---- full report ----------------------------------------------------------

struct EvalOptions {
    Split split = Split::test;
    ConditioningMode mode = ConditioningMode::soft;
    std::size_t max_windows = 0;  // 0: every window of the split
    std::vector<std::size_t> lengths{64, 128, 256};
    std::size_t length_base = 64;
    std::size_t samples = 16;         // documents (continuations) and unconditional samples
    std::size_t prefix_sentences = 1; // prefix given to continuations
    double temperature = 1.0;
    double top_p = 0.9;
    std::size_t hmm_states = 8;
    std::uint64_t seed = 0;
};

struct EvalReport {
    double ppl = 0;
    std::map<std::size_t, double> rouge2_f1;
    double rouge2_mean = 0;
    std::map<std::size_t, double> edit_norm;
    double edit_mean = 0;
    double latent_ppl = 0;
    double plan_match_acc = 0;
    std::string mode;
    std::string split;
    std::size_t length_base = 0;

    nlohmann::json to_json() const;
    std::string csv_header() const;
    std::string csv_row(const std::string& label) const;
};

EvalReport evaluate(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                    const ActionVocabulary& vocab, const std::vector<std::vector<ActionId>>& oracle,
                    const EvalOptions& options);

}  // namespace plm
