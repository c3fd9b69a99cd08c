#include "plm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "plm/error.hpp"

namespace plm {

ConditioningMode prediction_mode(ConditioningMode trained) {
    return trained == ConditioningMode::oracle ? ConditioningMode::hard : trained;
}

namespace {

bool uses_planner(ConditioningMode mode) {
    return mode == ConditioningMode::soft || mode == ConditioningMode::straight_through ||
           mode == ConditioningMode::hard;
}

bool blank(std::string_view text) {
    return std::all_of(text.begin(), text.end(),
                       [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; });
}

}  // namespace

NllStats conditioned_nll(const PlannerModel<float>& planner, const ConditionedLM<float>& lm,
                         const SegmentedCorpus& corpus, std::span<const Window> windows, ConditioningMode mode,
                         const std::vector<std::vector<ActionId>>* oracle) {
    const ConditioningMode pmode = prediction_mode(mode);
    NllStats stats;
    constexpr std::size_t kChunk = 16;
    for (std::size_t i = 0; i < windows.size(); i += kChunk) {
        const auto chunk = windows.subspan(i, std::min(kChunk, windows.size() - i));
        const WindowBatch wb = make_window_batch(corpus, chunk, oracle, planner.config().max_sentences);
        Tape<float> off(false);
        Tensor<float> s;
        if (uses_planner(pmode) || oracle != nullptr) {
            s = planner.logits(off, wb.plans);
        }
        const Tensor<float> w = uses_planner(pmode)
                                    ? conditioning_weights(off, pmode, s, {}, lm.config().actions)
                                    : Tensor<float>::filled({wb.lm.slot_count, lm.config().actions},
                                                            1.0f / float(lm.config().actions));
        const Tensor<float> logits = lm.forward(off, wb.lm, &w);
        for (double v : row_nll(logits, wb.lm.targets)) {
            stats.nll += v;
        }
        stats.tokens += wb.lm.size();
        if (oracle != nullptr) {
            for (double v : row_nll(s, wb.oracle)) {
                stats.nap_nll += v;
            }
            stats.sentences += wb.oracle.size();
        }
    }
    return stats;
}

double perplexity(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                  Split split, ConditioningMode mode, std::size_t max_windows) {
    WindowSet ws = make_windows(corpus, split);
    if (max_windows != 0 && ws.windows.size() > max_windows) {
        ws.windows.resize(max_windows);
    }
    if (ws.windows.empty()) {
        throw DataError(std::string("perplexity: no windows in the ") + split_name(split) + " split");
    }
    const NllStats stats = conditioned_nll(planner, lm, corpus, ws.windows, mode);
    return std::exp(stats.mean_nll());
}

// ---- generation -----------------------------------------------------------

namespace {

std::vector<float> conditioning_row(ConditioningMode mode, std::span<const float> logits) {
    const std::size_t K = logits.size();
    std::vector<float> row(K, 0.0f);
    switch (mode) {
        case ConditioningMode::uniform:
            std::fill(row.begin(), row.end(), 1.0f / float(K));
            break;
        case ConditioningMode::soft: {
            Tape<float> off(false);
            const Tensor<float> p =
                softmax(off, Tensor<float>({1, K}, std::vector<float>(logits.begin(), logits.end())));
            std::copy(p.values().begin(), p.values().end(), row.begin());
            break;
        }
        default: {
            const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
            row[static_cast<std::size_t>(best)] = 1.0f;
            break;
        }
    }
    return row;
}

TokenId sample_token(std::span<const float> logits, const GenerationOptions& options, Rng& rng) {
    const std::size_t V = logits.size();
    auto allowed = [](std::size_t t) { return t != std::size_t(kBos) && t != std::size_t(kEos); };
    if (options.temperature <= 0.0) {
        std::size_t best = 0;
        float bv = -std::numeric_limits<float>::infinity();
        for (std::size_t t = 0; t < V; ++t) {
            if (allowed(t) && logits[t] > bv) {
                bv = logits[t];
                best = t;
            }
        }
        return static_cast<TokenId>(best);
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < V; ++t) {
        if (allowed(t)) {
            mx = std::max(mx, double(logits[t]));
        }
    }
    std::vector<double> p(V, 0.0);
    double total = 0;
    for (std::size_t t = 0; t < V; ++t) {
        if (allowed(t)) {
            p[t] = std::exp((double(logits[t]) - mx) / options.temperature);
            total += p[t];
        }
    }
    std::vector<std::size_t> order(V);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = V;
    if (options.top_p < 1.0) {
        double acc = 0;
        for (std::size_t i = 0; i < V; ++i) {
            acc += p[order[i]] / total;
            if (acc >= options.top_p) {
                keep = i + 1;
                break;
            }
        }
    }
    double kept = 0;
    for (std::size_t i = 0; i < keep; ++i) {
        kept += p[order[i]];
    }
    double u = rng.uniform() * kept;
    for (std::size_t i = 0; i < keep; ++i) {
        u -= p[order[i]];
        if (u < 0) {
            return static_cast<TokenId>(order[i]);
        }
    }
    // rounding: fall back to the last kept token with mass
    for (std::size_t i = keep; i-- > 0;) {
        if (p[order[i]] > 0) {
            return static_cast<TokenId>(order[i]);
        }
    }
    return static_cast<TokenId>(order[0]);
}

}  // namespace

Generation generate(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, std::string_view prefix,
                    const GenerationOptions& options) {
    const std::size_t K = lm.config().actions;
    const ConditioningMode mode = prediction_mode(options.mode);
    Rng rng(derive_seed(options.seed, 0x6E4));

    Document doc;
    bool open_new = false;
    if (blank(prefix)) {
        doc.tokens = {kBos};
        for (TokenId t : tokenize(prefix)) {
            doc.tokens.push_back(t);
        }
        doc.sentences = {SentenceSpan{0, doc.tokens.size()}};
    } else {
        doc = segment(prefix);
        doc.tokens.pop_back();  // EOS
        doc.sentences.back().end -= 1;
        open_new = ends_sentence(doc.tokens);
    }
    std::vector<std::size_t> tok_sent(doc.tokens.size());
    for (std::size_t j = 0; j < doc.sentences.size(); ++j) {
        for (std::size_t t = doc.sentences[j].begin; t < doc.sentences[j].end; ++t) {
            tok_sent[t] = j;
        }
    }

    // Conditioning rows and planned actions per sentence.
    std::vector<std::vector<float>> rows;
    std::vector<ActionId> planned;
    auto plan_rows = [&](std::span<const PlanRequest> requests) {
        if (mode == ConditioningMode::uniform) {
            for (const PlanRequest& r : requests) {
                for (std::size_t j = r.first; j <= r.last; ++j) {
                    rows.push_back(conditioning_row(mode, std::vector<float>(K, 0.0f)));
                    planned.push_back(0);
                }
            }
            return;
        }
        Tape<float> off(false);
        const Tensor<float> s = planner.logits(off, requests);
        for (std::size_t r = 0; r < s.rows(); ++r) {
            const std::span<const float> row = s.values().subspan(r * K, K);
            rows.push_back(conditioning_row(mode, row));
            planned.push_back(static_cast<ActionId>(std::max_element(rows.back().begin(), rows.back().end()) -
                                                    rows.back().begin()));
        }
    };
    plan_rows(document_requests(doc, planner.config().max_sentences));

    Generation out;
    const std::size_t first_generated_sentence = open_new ? doc.sentences.size() : doc.sentences.size() - 1;
    const std::size_t span = std::max<std::size_t>(1, lm.config().context - 1);
    std::vector<bool> complete;
    for (std::size_t step = 0; step < options.n_tokens; ++step) {
        if (open_new) {
            const std::size_t j = doc.sentences.size();
            doc.sentences.push_back(SentenceSpan{doc.tokens.size(), doc.tokens.size()});
            const PlanRequest req{&doc, j, j};
            plan_rows(std::span<const PlanRequest>(&req, 1));
            open_new = false;
        }
        const std::size_t current = doc.sentences.size() - 1;
        const std::size_t n = std::min(doc.tokens.size(), span);
        const std::size_t start = doc.tokens.size() - n;
        const std::size_t s0 = tok_sent[start + 1 < doc.tokens.size() ? start + 1 : start];
        const std::size_t first_slot = std::min(s0, current);

        LMBatch batch;
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t t = start + p;
            batch.inputs.push_back(doc.tokens[t]);
            batch.targets.push_back(0);
            batch.positions.push_back(static_cast<std::int32_t>(p));
            const std::size_t sent = t + 1 < doc.tokens.size() ? tok_sent[t + 1] : current;
            batch.slots.push_back(static_cast<std::int32_t>(sent - first_slot));
        }
        batch.seq_lens = {n};
        batch.slot_count = current - first_slot + 1;
        std::vector<float> w;
        for (std::size_t j = first_slot; j <= current; ++j) {
            w.insert(w.end(), rows[j].begin(), rows[j].end());
        }
        const Tensor<float> weights({batch.slot_count, K}, std::move(w));
        Tape<float> off(false);
        const Tensor<float> logits = lm.forward(off, batch, &weights);
        const TokenId x =
            sample_token(logits.values().subspan((n - 1) * kVocabSize, kVocabSize), options, rng);

        doc.tokens.push_back(x);
        doc.sentences.back().end += 1;
        tok_sent.push_back(current);
        out.tokens.push_back(x);
        if (ends_sentence(doc.tokens)) {
            open_new = true;
            complete.resize(doc.sentences.size(), false);
            complete[current] = true;
        }
    }
    complete.resize(doc.sentences.size(), false);
    for (std::size_t j = first_generated_sentence; j < doc.sentences.size(); ++j) {
        if (doc.sentences[j].size() == 0) {
            continue;
        }
        GeneratedSentence g;
        g.text = doc.sentence_text(j);
        g.planned = planned[j];
        g.complete = complete[j];
        out.sentences.push_back(std::move(g));
        out.action_trace.push_back(planned[j]);
    }
    return out;
}

// ---- text and sequence metrics --------------------------------------------

double rouge2_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
    if (candidate.size() < 2 || reference.size() < 2) {
        return 0.0;
    }
    std::map<std::pair<TokenId, TokenId>, std::size_t> ref;
    for (std::size_t i = 0; i + 1 < reference.size(); ++i) {
        ++ref[{reference[i], reference[i + 1]}];
    }
    std::size_t overlap = 0;
    for (std::size_t i = 0; i + 1 < candidate.size(); ++i) {
        auto it = ref.find({candidate[i], candidate[i + 1]});
        if (it != ref.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) {
        return 0.0;
    }
    const double precision = double(overlap) / double(candidate.size() - 1);
    const double recall = double(overlap) / double(reference.size() - 1);
    return 2 * precision * recall / (precision + recall);
}

std::size_t levenshtein(std::span<const ActionId> a, std::span<const ActionId> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double edit_distance_norm(std::span<const ActionId> generated, std::span<const ActionId> reference,
                          std::size_t n_tokens, std::size_t base) {
    if (base == 0 || n_tokens == 0) {
        throw UsageError("edit_distance_norm: token count and base must be positive");
    }
    return double(levenshtein(generated, reference)) / (double(n_tokens) / double(base));
}

std::vector<ActionId> realized_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                       std::span<const TokenId> tokens) {
    std::vector<TokenId> bytes;
    for (TokenId t : tokens) {
        if (t != kBos && t != kEos) {
            bytes.push_back(t);
        }
    }
    const std::string text = detokenize(bytes);
    std::vector<ActionId> out;
    if (blank(text)) {
        return out;
    }
    const Document doc = segment(text);
    for (std::size_t j = 0; j < doc.sentences.size(); ++j) {
        const std::string s = doc.sentence_text(j);
        if (!blank(s)) {
            out.push_back(assign_action(vocab, encoder.encode(s)));
        }
    }
    return out;
}

double plan_matching_accuracy(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                              std::span<const Generation> generations) {
    std::size_t total = 0, hits = 0;
    for (const Generation& g : generations) {
        for (const GeneratedSentence& s : g.sentences) {
            if (!s.complete || blank(s.text)) {
                continue;
            }
            ++total;
            hits += assign_action(vocab, encoder.encode(s.text)) == s.planned ? 1 : 0;
        }
    }
    if (total == 0) {
        throw UsageError("plan_matching_accuracy: no complete generated sentences");
    }
    return double(hits) / double(total);
}

// ---- HMM critic -----------------------------------------------------------

namespace {

void check_symbols(std::span<const ActionId> seq, std::size_t K) {
    for (ActionId a : seq) {
        if (a < 0 || std::size_t(a) >= K) {
            throw UsageError("hmm: symbol " + std::to_string(a) + " outside [0," + std::to_string(K) + ")");
        }
    }
}

std::vector<double> random_rows(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<double> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = 1.0 + rng.uniform();
            sum += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] /= sum;
        }
    }
    return out;
}

// Scaled forward pass: alpha rows normalised, returns the log-likelihood.
double forward_scaled(const HmmCritic& h, std::span<const ActionId> seq, std::vector<double>& alpha,
                      std::vector<double>& scale) {
    const std::size_t S = h.states, K = h.symbols, T = seq.size();
    alpha.assign(T * S, 0.0);
    scale.assign(T, 0.0);
    double ll = 0;
    for (std::size_t t = 0; t < T; ++t) {
        double c = 0;
        for (std::size_t j = 0; j < S; ++j) {
            double a = 0;
            if (t == 0) {
                a = h.initial[j];
            } else {
                for (std::size_t i = 0; i < S; ++i) {
                    a += alpha[(t - 1) * S + i] * h.transition[i * S + j];
                }
            }
            a *= h.emission[j * K + std::size_t(seq[t])];
            alpha[t * S + j] = a;
            c += a;
        }
        if (!(c > 0)) {
            return -std::numeric_limits<double>::infinity();
        }
        for (std::size_t j = 0; j < S; ++j) {
            alpha[t * S + j] /= c;
        }
        scale[t] = c;
        ll += std::log(c);
    }
    return ll;
}

}  // namespace

double HmmCritic::log_likelihood(std::span<const ActionId> seq) const {
    check_symbols(seq, symbols);
    std::vector<double> alpha, scale;
    return forward_scaled(*this, seq, alpha, scale);
}

std::vector<ActionId> HmmCritic::sample(std::size_t length, Rng& rng) const {
    auto draw = [&](std::span<const double> p) {
        double u = rng.uniform();
        for (std::size_t i = 0; i < p.size(); ++i) {
            u -= p[i];
            if (u < 0) {
                return i;
            }
        }
        return p.size() - 1;
    };
    std::vector<ActionId> out;
    std::size_t s = draw(initial);
    for (std::size_t t = 0; t < length; ++t) {
        if (t > 0) {
            s = draw(std::span<const double>(transition).subspan(s * states, states));
        }
        out.push_back(static_cast<ActionId>(draw(std::span<const double>(emission).subspan(s * symbols, symbols))));
    }
    return out;
}

HmmFit fit_hmm(std::span<const std::vector<ActionId>> sequences, std::size_t states, std::size_t symbols,
               std::uint64_t seed, std::size_t max_iterations) {
    if (sequences.empty() || states == 0 || symbols == 0) {
        throw UsageError("fit_hmm: needs at least one sequence, one state and one symbol");
    }
    std::size_t total = 0;
    for (const auto& seq : sequences) {
        if (seq.empty()) {
            throw UsageError("fit_hmm: empty sequence");
        }
        check_symbols(seq, symbols);
        total += seq.size();
    }
    const std::size_t S = states, K = symbols;
    Rng rng(derive_seed(seed, 0x4D4));
    HmmFit fit;
    HmmCritic& h = fit.critic;
    h.states = S;
    h.symbols = K;
    h.initial = random_rows(1, S, rng);
    h.transition = random_rows(S, S, rng);
    h.emission = random_rows(S, K, rng);

    std::vector<double> alpha, scale, beta;
    double prev_ll = 0;
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        std::vector<double> c_init(S, 0.0), c_trans(S * S, 0.0), c_emit(S * K, 0.0);
        double ll = 0;
        for (const auto& seq : sequences) {
            const std::size_t T = seq.size();
            ll += forward_scaled(h, seq, alpha, scale);
            beta.assign(T * S, 0.0);
            for (std::size_t j = 0; j < S; ++j) {
                beta[(T - 1) * S + j] = 1.0;
            }
            for (std::size_t t = T - 1; t-- > 0;) {
                for (std::size_t i = 0; i < S; ++i) {
                    double b = 0;
                    for (std::size_t j = 0; j < S; ++j) {
                        b += h.transition[i * S + j] * h.emission[j * K + std::size_t(seq[t + 1])] *
                             beta[(t + 1) * S + j];
                    }
                    beta[t * S + i] = b / scale[t + 1];
                }
            }
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t i = 0; i < S; ++i) {
                    const double g = alpha[t * S + i] * beta[t * S + i];
                    if (t == 0) {
                        c_init[i] += g;
                    }
                    c_emit[i * K + std::size_t(seq[t])] += g;
                }
                if (t + 1 < T) {
                    for (std::size_t i = 0; i < S; ++i) {
                        for (std::size_t j = 0; j < S; ++j) {
                            c_trans[i * S + j] += alpha[t * S + i] * h.transition[i * S + j] *
                                                  h.emission[j * K + std::size_t(seq[t + 1])] *
                                                  beta[(t + 1) * S + j] / scale[t + 1];
                        }
                    }
                }
            }
        }
        fit.log_likelihood_history.push_back(ll);
        if (iter > 0 && (ll - prev_ll) / double(total) < 1e-4) {
            break;
        }
        prev_ll = ll;

        auto normalise = [](std::span<const double> counts, std::span<double> row) {
            const double sum = std::accumulate(counts.begin(), counts.end(), 0.0);
            if (sum > 0) {
                for (std::size_t c = 0; c < row.size(); ++c) {
                    row[c] = counts[c] / sum;
                }
            }
        };
        normalise(c_init, h.initial);
        for (std::size_t i = 0; i < S; ++i) {
            normalise(std::span<const double>(c_trans).subspan(i * S, S), std::span<double>(h.transition).subspan(i * S, S));
            normalise(std::span<const double>(c_emit).subspan(i * K, K), std::span<double>(h.emission).subspan(i * K, K));
        }
        ++fit.iterations;
    }

    auto smooth = [](std::span<double> row) {
        const double n = double(row.size());
        for (double& v : row) {
            v = (v + kHmmSmoothing) / (1.0 + n * kHmmSmoothing);
        }
    };
    smooth(h.initial);
    for (std::size_t i = 0; i < S; ++i) {
        smooth(std::span<double>(h.transition).subspan(i * S, S));
        smooth(std::span<double>(h.emission).subspan(i * K, K));
    }
    return fit;
}

double latent_perplexity(const HmmCritic& critic, std::span<const std::vector<ActionId>> sequences) {
    double ll = 0;
    std::size_t n = 0;
    for (const auto& seq : sequences) {
        ll += critic.log_likelihood(seq);
        n += seq.size();
    }
    if (n == 0) {
        throw UsageError("latent_perplexity: no symbols to score");
    }
    return std::exp(-ll / double(n));
}

// ---- full report ----------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["ppl"] = ppl;
    nlohmann::json r = nlohmann::json::object(), e = nlohmann::json::object();
    for (const auto& [n, v] : rouge2_f1) {
        r[std::to_string(n)] = v;
    }
    for (const auto& [n, v] : edit_norm) {
        e[std::to_string(n)] = v;
    }
    r["mean"] = rouge2_mean;
    e["mean"] = edit_mean;
    j["rouge2_f1"] = r;
    j["edit_norm"] = e;
    j["latent_ppl"] = latent_ppl;
    j["plan_match_acc"] = plan_match_acc;
    j["mode"] = mode;
    j["split"] = split;
    j["length_base"] = length_base;
    return j;
}

std::string EvalReport::csv_header() const {
    std::ostringstream os;
    os << "label,ppl";
    for (const auto& [n, v] : rouge2_f1) {
        os << ",rouge2_" << n;
    }
    os << ",rouge2_mean";
    for (const auto& [n, v] : edit_norm) {
        os << ",edit_" << n;
    }
    os << ",edit_mean,latent_ppl,plan_match_acc";
    return os.str();
}

std::string EvalReport::csv_row(const std::string& label) const {
    std::ostringstream os;
    os.precision(17);
    os << label << ',' << ppl;
    for (const auto& [n, v] : rouge2_f1) {
        os << ',' << v;
    }
    os << ',' << rouge2_mean;
    for (const auto& [n, v] : edit_norm) {
        os << ',' << v;
    }
    os << ',' << edit_mean << ',' << latent_ppl << ',' << plan_match_acc;
    return os.str();
}

EvalReport evaluate(const PlannerModel<float>& planner, const ConditionedLM<float>& lm, const SegmentedCorpus& corpus,
                    const ActionVocabulary& vocab, const std::vector<std::vector<ActionId>>& oracle,
                    const EvalOptions& options) {
    EvalReport report;
    report.mode = mode_name(options.mode);
    report.split = split_name(options.split);
    report.length_base = options.length_base;
    report.ppl = perplexity(planner, lm, corpus, options.split, options.mode, options.max_windows);

    const SentenceEncoder encoder(vocab.encoder);
    std::vector<std::size_t> docs = corpus.indices(options.split);
    if (docs.size() > options.samples) {
        docs.resize(options.samples);
    }

    GenerationOptions gen;
    gen.temperature = options.temperature;
    gen.top_p = options.top_p;
    gen.mode = options.mode;
    for (std::size_t n : options.lengths) {
        double rouge = 0, edit = 0;
        std::size_t count = 0;
        for (std::size_t k = 0; k < docs.size(); ++k) {
            const Document& doc = corpus.documents[docs[k]];
            if (doc.sentences.size() <= options.prefix_sentences) {
                continue;
            }
            std::string prefix;
            for (std::size_t j = 0; j < options.prefix_sentences; ++j) {
                prefix += doc.sentence_text(j);
            }
            const std::size_t from = doc.sentences[options.prefix_sentences - 1].end;
            const std::size_t to = std::min(doc.tokens.size() - 1, from + n);  // EOS excluded
            if (to <= from) {
                continue;
            }
            const std::span<const TokenId> ref(doc.tokens.data() + from, to - from);
            gen.n_tokens = n;
            gen.seed = derive_seed(options.seed, 0x1000 + docs[k] * 16 + n);
            const Generation g = generate(planner, lm, prefix, gen);
            rouge += rouge2_f1(g.tokens, ref);
            edit += edit_distance_norm(realized_actions(vocab, encoder, g.tokens), realized_actions(vocab, encoder, ref),
                                       n, options.length_base);
            ++count;
        }
        report.rouge2_f1[n] = count ? rouge / double(count) : 0.0;
        report.edit_norm[n] = count ? edit / double(count) : 0.0;
    }
    for (const auto& [n, v] : report.rouge2_f1) {
        report.rouge2_mean += v / double(report.rouge2_f1.size());
    }
    for (const auto& [n, v] : report.edit_norm) {
        report.edit_mean += v / double(report.edit_norm.size());
    }

    // Unconditional samples: plan matching and latent perplexity.
    const std::size_t longest =
        options.lengths.empty() ? 128 : *std::max_element(options.lengths.begin(), options.lengths.end());
    std::vector<Generation> samples;
    std::vector<std::vector<ActionId>> realized;
    for (std::size_t i = 0; i < options.samples; ++i) {
        gen.n_tokens = longest;
        gen.seed = derive_seed(options.seed, 0x2000 + i);
        samples.push_back(generate(planner, lm, "", gen));
        std::vector<ActionId> acts = realized_actions(vocab, encoder, samples.back().tokens);
        if (!acts.empty()) {
            realized.push_back(std::move(acts));
        }
    }
    try {
        report.plan_match_acc = plan_matching_accuracy(vocab, encoder, samples);
    } catch (const UsageError&) {
        report.plan_match_acc = 0.0;
    }

    std::vector<std::vector<ActionId>> real;
    for (std::size_t d : corpus.indices(Split::train)) {
        if (!oracle.at(d).empty()) {
            real.push_back(oracle[d]);
        }
        if (real.size() >= 2000) {
            break;
        }
    }
    const HmmFit critic = fit_hmm(real, options.hmm_states, vocab.k, options.seed);
    report.latent_ppl = realized.empty() ? std::numeric_limits<double>::infinity()
                                         : latent_perplexity(critic.critic, realized);
    return report;
}

}  // namespace plm
