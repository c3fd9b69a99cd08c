#include "plm/planner.hpp"

#include <algorithm>
#include <cmath>

#include "plm/error.hpp"
#include "plm/optim.hpp"

namespace plm {

template <class T>
PlannerModel<T>::PlannerModel(const PlannerConfig& config) : config_(config) {
    if (config.actions < 2) {
        throw ConfigError("planner needs at least 2 actions");
    }
    if (config.max_sentences == 0 || config.layers == 0) {
        throw ConfigError("planner.max_sentences and planner.layers must be positive");
    }
    Rng rng(derive_seed(config.seed, 0x91A7));
    const std::size_t d = config.d_model;
    token_embed_ = normal_param<T>({kVocabSize, d}, 0.02, rng);
    start_ = normal_param<T>({1, d}, 0.02, rng);
    positions_ = normal_param<T>({config.max_sentences, d}, 0.01, rng);
    for (std::size_t l = 0; l < config.layers; ++l) {
        blocks_.emplace_back(d, config.heads, 4 * d, config.layers, rng);
    }
    ln_f_ = LayerNorm<T>(d);
    head_ = Linear<T>(d, config.actions, true, 0.0, rng);
}

template <class T>
Tensor<T> PlannerModel<T>::logits(Tape<T>& tape, std::span<const PlanRequest> requests) const {
    if (requests.empty()) {
        throw UsageError("plan_logits: no requests");
    }
    // Sentence vectors for every sentence used as input, in one pooled batch.
    std::vector<std::int32_t> tokens;
    std::vector<RowSpan> spans;
    // Per request: sequence start b, then gather indices into [start; Z].
    std::vector<std::int32_t> gather, pos, pick;
    std::vector<std::size_t> lens;
    std::size_t seq_row = 0;
    for (const PlanRequest& r : requests) {
        if (r.doc == nullptr || r.first > r.last || r.last >= r.doc->sentences.size()) {
            throw UsageError("plan_logits: invalid request range");
        }
        if (r.rows() > config_.max_sentences) {
            throw UsageError("plan_logits: request of " + std::to_string(r.rows()) + " rows exceeds " +
                             std::to_string(config_.max_sentences) + " sentence positions");
        }
        const std::size_t b = r.last + 1 > config_.max_sentences ? r.last + 1 - config_.max_sentences : 0;
        for (std::size_t j = b; j <= r.last; ++j) {
            if (j == 0) {
                gather.push_back(0);
            } else {
                const SentenceSpan& s = r.doc->sentences[j - 1];
                const std::size_t begin = tokens.size();
                tokens.insert(tokens.end(), r.doc->tokens.begin() + static_cast<std::ptrdiff_t>(s.begin),
                              r.doc->tokens.begin() + static_cast<std::ptrdiff_t>(s.end));
                spans.emplace_back(begin, tokens.size());
                gather.push_back(static_cast<std::int32_t>(spans.size()));
            }
            pos.push_back(static_cast<std::int32_t>(j - b));
        }
        for (std::size_t j = r.first; j <= r.last; ++j) {
            pick.push_back(static_cast<std::int32_t>(seq_row + (j - b)));
        }
        lens.push_back(r.last + 1 - b);
        seq_row += r.last + 1 - b;
    }

    Tensor<T> table = start_;
    if (!spans.empty()) {
        const Tensor<T> z = segment_mean(tape, embedding_lookup(tape, token_embed_, tokens), spans);
        const std::vector<Tensor<T>> parts{start_, z};
        table = concat_rows(tape, std::span<const Tensor<T>>(parts));
    }
    Tensor<T> x = add(tape, embedding_lookup(tape, table, gather), embedding_lookup(tape, positions_, pos));
    for (const TransformerBlock<T>& block : blocks_) {
        x = block.forward(tape, x, lens);
    }
    const Tensor<T> s = head_(tape, ln_f_(tape, x));
    return embedding_lookup(tape, s, pick);
}

template <class T>
NamedParams<T> PlannerModel<T>::parameters() const {
    NamedParams<T> out;
    out.emplace_back("planner.token_embed", token_embed_);
    out.emplace_back("planner.start", start_);
    out.emplace_back("planner.positions", positions_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        blocks_[l].collect("planner.blocks." + std::to_string(l), out);
    }
    ln_f_.collect("planner.ln_f", out);
    head_.collect("planner.head", out);
    return out;
}

template <class T>
Tensor<T> nap_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const ActionId> targets) {
    return cross_entropy(tape, logits, targets);
}

std::vector<PlanRequest> document_requests(const Document& doc, std::size_t max_sentences) {
    std::vector<PlanRequest> out;
    const std::size_t m = doc.sentences.size();
    for (std::size_t first = 0; first < m; first += max_sentences) {
        out.push_back(PlanRequest{&doc, first, std::min(m, first + max_sentences) - 1});
    }
    return out;
}

std::vector<ActionId> request_targets(std::span<const PlanRequest> requests, const SegmentedCorpus& corpus,
                                      const std::vector<std::vector<ActionId>>& oracle) {
    std::vector<ActionId> out;
    for (const PlanRequest& r : requests) {
        const std::size_t d = static_cast<std::size_t>(r.doc - corpus.documents.data());
        if (d >= oracle.size()) {
            throw UsageError("request_targets: document outside the corpus");
        }
        for (std::size_t j = r.first; j <= r.last; ++j) {
            out.push_back(oracle[d].at(j));
        }
    }
    return out;
}


std::vector<double> pretrain_planner(PlannerModel<float>& planner, const SegmentedCorpus& corpus,
                                     const std::vector<std::vector<ActionId>>& oracle, const NapOptions& options) {
    const std::vector<std::size_t> train = corpus.indices(Split::train);
    if (train.empty()) {
        throw DataError("pretrain_planner: empty training split");
    }
    Adam adam(AdamConfig{options.lr});
    const std::size_t g = adam.add_group("planner", tensors_of(planner.parameters()));
    Rng rng(derive_seed(options.seed, 0x9A9));
    std::vector<double> losses;
    for (std::size_t step = 0; step < options.steps; ++step) {
        std::vector<PlanRequest> requests;
        for (std::size_t b = 0; b < options.batch_documents; ++b) {
            const Document& doc = corpus.documents[train[rng.below(train.size())]];
            for (const PlanRequest& r : document_requests(doc, planner.config().max_sentences)) {
                requests.push_back(r);
            }
        }
        const std::vector<ActionId> targets = request_targets(requests, corpus, oracle);
        adam.zero_grad();
        Tape<float> tape;
        Tensor<float> loss = nap_loss(tape, planner.logits(tape, requests), targets);
        check_finite(loss.item(), "planner pretraining", step);
        tape.backward(loss);
        adam.step(g, options.lr);
        losses.push_back(loss.item());
    }
    return losses;
}

NapStats evaluate_nap(const PlannerModel<float>& planner, const SegmentedCorpus& corpus,
                      const std::vector<std::vector<ActionId>>& oracle, Split split) {
    const std::vector<std::size_t> docs = corpus.indices(split);
    if (docs.empty()) {
        throw DataError(std::string("evaluate_nap: empty ") + split_name(split) + " split");
    }
    NapStats stats;
    double nll = 0;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 32;
    for (std::size_t i = 0; i < docs.size(); i += kChunk) {
        std::vector<PlanRequest> requests;
        for (std::size_t k = i; k < std::min(docs.size(), i + kChunk); ++k) {
            for (const PlanRequest& r : document_requests(corpus.documents[docs[k]], planner.config().max_sentences)) {
                requests.push_back(r);
            }
        }
        const std::vector<ActionId> targets = request_targets(requests, corpus, oracle);
        Tape<float> tape(false);
        const Tensor<float> s = planner.logits(tape, requests);
        for (double v : row_nll(s, targets)) {
            nll += v;
        }
        const std::vector<std::int32_t> best = row_argmax(s);
        for (std::size_t r = 0; r < best.size(); ++r) {
            correct += best[r] == targets[r] ? 1 : 0;
        }
        stats.sentences += targets.size();
    }
    stats.loss = nll / static_cast<double>(stats.sentences);
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(stats.sentences);
    return stats;
}

template class PlannerModel<float>;
template class PlannerModel<double>;
template Tensor<float> nap_loss(Tape<float>&, const Tensor<float>&, std::span<const ActionId>);
template Tensor<double> nap_loss(Tape<double>&, const Tensor<double>&, std::span<const ActionId>);

}  // namespace plm
