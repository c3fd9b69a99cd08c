#pragma once

// Planner -> conditioning -> adapters -> LM -> NTP loss, in double precision,
// shared by the unit tests and the acceptance binary.

#include <vector>

#include "gradcheck.hpp"
#include "plm/condlm.hpp"
#include "plm/planner.hpp"
#include "testutil.hpp"

namespace plm::testing {

struct Composition {
    PlannerModel<double> planner;
    ConditionedLM<double> lm;
    WindowBatch batch;
};

// Small models on two short windows; every parameter (including the
// zero-initialised projections and planner head) gets random values.
inline Composition make_composition(const SegmentedCorpus& corpus, const ActionVocabulary& vocab,
                                    const std::vector<std::vector<ActionId>>& oracle, std::uint64_t draw,
                                    std::size_t window_tokens = 12) {
    PlannerConfig pc = testutil::tiny_planner(vocab.k, draw * 7 + 1);
    pc.d_model = 8;
    LMConfig lc = testutil::tiny_lm(vocab.k, vocab.dim, 64, draw * 7 + 2);
    lc.d_model = 8;
    Composition c{PlannerModel<double>(pc), ConditionedLM<double>(lc), {}};
    c.lm.init_actions(vocab);
    Rng rng(derive_seed(draw, 0xC0));
    testutil::randomize(c.planner.parameters(), rng, 0.3);
    testutil::randomize(c.lm.adapter_parameters(), rng, 0.3);
    testutil::randomize(c.lm.body_parameters(), rng, 0.05);
    // windows that straddle a sentence boundary
    std::vector<Window> ws;
    for (std::size_t d = 0; d < corpus.documents.size() && ws.size() < 2; ++d) {
        const Document& doc = corpus.documents[d];
        if (doc.sentences.size() < 2) {
            continue;
        }
        const std::size_t b = doc.sentences[1].begin >= window_tokens / 2 ? doc.sentences[1].begin - window_tokens / 2 : 0;
        if (b + window_tokens <= doc.tokens.size()) {
            ws.push_back(Window{d, b, window_tokens});
        }
    }
    c.batch = make_window_batch(corpus, ws, &oracle, 32);
    return c;
}

inline DTensor composition_loss(DTape& tape, const Composition& c, ConditioningMode mode) {
    const DTensor s = c.planner.logits(tape, c.batch.plans);
    const DTensor w = conditioning_weights(tape, mode, s, c.batch.oracle, c.lm.config().actions);
    return ntp_loss(tape, c.lm.forward(tape, c.batch.lm, &w), c.batch.lm);
}

// Straight-through reference: forward on onehot(argmax s0), gradient of
// softmax(s) (s0 = logits at the current parameters, held fixed). Its
// derivative at the current point is what the estimator should return.
inline DTensor st_surrogate_loss(DTape& tape, const Composition& c, const DTensor& s0) {
    const DTensor s = c.planner.logits(tape, c.batch.plans);
    const DTensor hard = hard_select(s0);
    DTape off(false);
    const DTensor p0 = softmax(off, s0);
    DTensor fixed = DTensor::zeros(p0.shape());
    for (std::size_t i = 0; i < fixed.numel(); ++i) {
        fixed.values()[i] = hard.values()[i] - p0.values()[i];
    }
    const DTensor w = add(tape, softmax(tape, s), fixed);
    return ntp_loss(tape, c.lm.forward(tape, c.batch.lm, &w), c.batch.lm);
}

}  // namespace plm::testing
