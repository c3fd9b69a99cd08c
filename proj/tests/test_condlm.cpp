#include <algorithm>
#include <cmath>

#include "composition.hpp"
#include "doctest.h"
#include "plm/condlm.hpp"
#include "plm/error.hpp"
#include "testutil.hpp"

using namespace plm;
using testing::DTape;
using testing::DTensor;

namespace {

const testutil::World& world() {
    static const testutil::World w = testutil::make_world();
    return w;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    }
    return m;
}

}  // namespace

TEST_CASE("mode names round-trip") {
    for (ConditioningMode m : {ConditioningMode::hard, ConditioningMode::straight_through, ConditioningMode::soft,
                               ConditioningMode::uniform, ConditioningMode::oracle}) {
        CHECK(parse_mode(mode_name(m)) == m);
    }
    CHECK_THROWS_AS(parse_mode("gumbel"), ConfigError);
}

TEST_CASE("zero-initialised projections leave the base LM unchanged") {
    const auto& w = world();
    ConditionedLM<float> lm(testutil::tiny_lm(w.vocab.k, w.vocab.dim));
    lm.init_actions(w.vocab);
    PlannerModel<float> planner(testutil::tiny_planner(w.vocab.k));
    Rng rng(1);
    testutil::randomize(planner.parameters(), rng);
    const auto windows = make_windows(w.corpus, Split::train).windows;
    const std::span<const Window> some(windows.data(), std::min<std::size_t>(8, windows.size()));
    const WindowBatch wb = make_window_batch(w.corpus, some, &w.oracle, 32);
    Tape<float> off(false);
    const Tensor<float> base = lm.forward(off, wb.lm, nullptr);
    for (ConditioningMode m : {ConditioningMode::soft, ConditioningMode::hard, ConditioningMode::uniform,
                               ConditioningMode::oracle}) {
        const Tensor<float> wts = conditioning_weights(off, m, planner.logits(off, wb.plans), wb.oracle, w.vocab.k);
        const Tensor<float> cond = lm.forward(off, wb.lm, &wts);
        CHECK(max_abs_diff(base.values(), cond.values()) <= 1e-6);
    }
}

TEST_CASE("untrained LM scores about ln 258 per token") {
    const auto& w = world();
    ConditionedLM<float> lm(testutil::tiny_lm(w.vocab.k, w.vocab.dim));
    const auto windows = make_windows(w.corpus, Split::train).windows;
    const std::span<const Window> some(windows.data(), std::min<std::size_t>(8, windows.size()));
    const WindowBatch wb = make_window_batch(w.corpus, some, nullptr, 32);
    Tape<float> off(false);
    const double loss = ntp_loss(off, lm.forward(off, wb.lm, nullptr), wb.lm).item();
    CHECK(std::abs(loss - std::log(258.0)) < 0.05);
}

TEST_CASE("soft conditioning vector equals the explicit expectation over E_A") {
    for (std::size_t k : {2u, 8u, 32u}) {
        const auto w = testutil::make_world(60, 48, k, 16, 7);
        ConditionedLM<double> lm(testutil::tiny_lm(k, 16));
        lm.init_actions(w.vocab);
        Rng rng(k);
        DTensor s = testing::random_tensor({5, k}, rng, 2.0);
        DTape off(false);
        const DTensor p = conditioning_weights(off, ConditioningMode::soft, s, {}, k);
        for (std::size_t a = 0; a < lm.adapters().size(); ++a) {
            const DTensor r = lm.conditioning_vectors(off, p, a);
            const auto& E = lm.adapters()[a].actions;
            double worst = 0;
            for (std::size_t i = 0; i < 5; ++i) {
                double mass = 0;
                for (std::size_t c = 0; c < k; ++c) {
                    mass += p.at(i, c);
                }
                CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
                for (std::size_t e = 0; e < 16; ++e) {
                    double sum = 0;
                    for (std::size_t c = 0; c < k; ++c) {
                        sum += p.at(i, c) * E.at(c, e);
                    }
                    worst = std::max(worst, std::abs(sum - r.at(i, e)));
                }
            }
            CHECK(worst <= 1e-6);
        }
    }
}

TEST_CASE("hard and straight-through forward passes are bitwise identical") {
    const auto& w = world();
    const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, 3);
    DTape off(false);
    const DTensor s = c.planner.logits(off, c.batch.plans);
    const DTensor h = conditioning_weights(off, ConditioningMode::hard, s, {}, w.vocab.k);
    DTape rec(true);
    const DTensor st = conditioning_weights(rec, ConditioningMode::straight_through, s, {}, w.vocab.k);
    CHECK(std::equal(h.values().begin(), h.values().end(), st.values().begin()));
    const DTensor lh = c.lm.forward(off, c.batch.lm, &h);
    const DTensor lst = c.lm.forward(off, c.batch.lm, &st);
    CHECK(std::equal(lh.values().begin(), lh.values().end(), lst.values().begin()));
}

TEST_CASE("planner-logit gradients per mode") {
    const auto& w = world();
    const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, 5);
    auto logit_grad_norm = [&](ConditioningMode mode) {
        DTape tape(true), off(false);
        DTensor s = c.planner.logits(off, c.batch.plans).clone();
        s.set_requires_grad(true);
        s.zero_grad();
        const DTensor wts = conditioning_weights(tape, mode, s, c.batch.oracle, w.vocab.k);
        DTensor loss = ntp_loss(tape, c.lm.forward(tape, c.batch.lm, &wts), c.batch.lm);
        tape.backward(loss);
        double n = 0;
        for (double g : s.grad()) {
            n += g * g;
        }
        return std::sqrt(n);
    };
    CHECK(logit_grad_norm(ConditioningMode::hard) == 0.0);
    CHECK(logit_grad_norm(ConditioningMode::uniform) == 0.0);
    CHECK(logit_grad_norm(ConditioningMode::oracle) == 0.0);
    CHECK(logit_grad_norm(ConditioningMode::soft) > 1e-8);
    CHECK(logit_grad_norm(ConditioningMode::straight_through) > 1e-8);
}

TEST_CASE("full composition gradients match finite differences (soft)") {
    const auto& w = world();
    for (std::uint64_t draw = 0; draw < 2; ++draw) {
        const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, draw);
        std::vector<DTensor> params = tensors_of(c.planner.parameters());
        for (const auto& t : tensors_of(c.lm.adapter_parameters())) {
            params.push_back(t);
        }
        const auto r = testing::check_gradients(
            [&](DTape& tape) { return testing::composition_loss(tape, c, ConditioningMode::soft); }, params);
        CHECK(r.analytic_norm > 0);
        CHECK(r.rel_error <= 1e-4);
    }
}

TEST_CASE("straight-through gradients match the surrogate's finite differences") {
    const auto& w = world();
    const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, 2);
    DTape off(false);
    const DTensor s0 = c.planner.logits(off, c.batch.plans).clone();
    std::vector<DTensor> params = tensors_of(c.planner.parameters());
    for (const auto& t : tensors_of(c.lm.adapter_parameters())) {
        params.push_back(t);
    }
    const auto r = testing::check_gradients(
        [&](DTape& tape) { return testing::composition_loss(tape, c, ConditioningMode::straight_through); }, params,
        1e-5, [&](DTape& tape) { return testing::st_surrogate_loss(tape, c, s0); });
    CHECK(r.analytic_norm > 0);
    CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("conditioning of a sentence reaches only positions from that sentence on") {
    const auto& w = world();
    const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, 4);
    DTape off(false);
    const std::size_t K = w.vocab.k;
    DTensor a = DTensor::filled({c.batch.lm.slot_count, K}, 1.0 / double(K));
    DTensor b = a.clone();
    // change the distribution of the second slot of the first window
    REQUIRE(c.batch.lm.slot_count >= 2);
    for (std::size_t k = 0; k < K; ++k) {
        b.values()[K + k] = k == 0 ? 1.0 : 0.0;
    }
    const DTensor la = c.lm.forward(off, c.batch.lm, &a);
    const DTensor lb = c.lm.forward(off, c.batch.lm, &b);
    const std::size_t first_in_slot =
        std::size_t(std::find(c.batch.lm.slots.begin(), c.batch.lm.slots.end(), 1) - c.batch.lm.slots.begin());
    REQUIRE(first_in_slot > 0);
    const std::size_t V = kVocabSize;
    for (std::size_t p = 0; p < c.batch.lm.seq_lens[0]; ++p) {
        bool same = true;
        for (std::size_t v = 0; v < V; ++v) {
            same = same && la.at(p, v) == lb.at(p, v);
        }
        CHECK(same == (p < first_in_slot));
    }
}

TEST_CASE("LM is causal in its input tokens") {
    const auto& w = world();
    const auto c = testing::make_composition(w.corpus, w.vocab, w.oracle, 6);
    DTape off(false);
    const DTensor wts = DTensor::filled({c.batch.lm.slot_count, w.vocab.k}, 1.0 / double(w.vocab.k));
    LMBatch changed = c.batch.lm;
    const std::size_t p = 5;
    changed.inputs[p] = changed.inputs[p] == 'x' ? 'y' : 'x';
    const DTensor la = c.lm.forward(off, c.batch.lm, &wts);
    const DTensor lb = c.lm.forward(off, changed, &wts);
    for (std::size_t q = 0; q < c.batch.lm.seq_lens[0]; ++q) {
        bool same = true;
        for (std::size_t v = 0; v < kVocabSize; ++v) {
            same = same && la.at(q, v) == lb.at(q, v);
        }
        CHECK(same == (q < p));
    }
}

TEST_CASE("conditioning weights validate their inputs") {
    DTape off(false);
    const DTensor s = DTensor::zeros({3, 4});
    CHECK_THROWS_AS(conditioning_weights(off, ConditioningMode::soft, DTensor(), {}, 4), ShapeError);
    const std::vector<ActionId> short_oracle{1};
    CHECK_THROWS_AS(conditioning_weights(off, ConditioningMode::oracle, s, short_oracle, 4), UsageError);
    const std::vector<ActionId> oracle{0, 9, 1};
    CHECK_THROWS_AS(conditioning_weights(off, ConditioningMode::oracle, s, oracle, 4), UsageError);
    const std::vector<ActionId> ok{0, 3, 1};
    const std::vector<std::uint8_t> mask{1, 0, 1};
    const DTensor mixed = conditioning_weights(off, ConditioningMode::soft, s, ok, 4, mask);
    CHECK(mixed.at(0, 0) == doctest::Approx(0.25));
    CHECK(mixed.at(1, 3) == 1.0);
    CHECK(mixed.at(1, 0) == 0.0);
}
