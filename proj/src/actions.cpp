#include "plm/actions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "plm/error.hpp"
#include "plm/rng.hpp"

namespace plm {

namespace {

std::uint64_t fnv1a(const unsigned char* p, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

double squared_distance(const double* a, const double* b, std::size_t dim) {
    double s = 0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Returns nearest centroid and its squared distance; ties to the lowest index.
std::pair<std::size_t, double> nearest(const double* x, const std::vector<double>& centroids, std::size_t k,
                                       std::size_t dim) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(x, centroids.data() + c * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return {best, best_d};
}

}  // namespace

SentenceEncoder::SentenceEncoder(EncoderConfig config) : config_(config) {
    if (config_.hash_dim == 0 || config_.dim == 0) {
        throw ConfigError("encoder dimensions must be positive");
    }
    Rng rng(derive_seed(config_.seed, 0xE1C0DE));
    projection_.resize(config_.hash_dim * config_.dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(config_.dim));
    for (double& w : projection_) {
        w = rng.normal() * s;
    }
}

std::vector<double> SentenceEncoder::encode(std::string_view text) const {
    if (text.empty()) {
        throw UsageError("encode_sentence: empty sentence");
    }
    const auto not_space = [](char c) { return !(c == ' ' || c == '\t' || c == '\n' || c == '\r'); };
    const auto first = std::find_if(text.begin(), text.end(), not_space);
    if (first != text.end()) {
        const auto last = std::find_if(text.rbegin(), text.rend(), not_space).base();
        text = std::string_view(&*first, static_cast<std::size_t>(last - first));
    }

    std::string padded;
    padded.reserve(text.size() + 2);
    padded.push_back(' ');
    padded.append(text);
    padded.push_back(' ');

    std::map<std::size_t, double> counts;
    const auto* bytes = reinterpret_cast<const unsigned char*>(padded.data());
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
        counts[fnv1a(bytes + i, 3) % config_.hash_dim] += 1.0;
    }
    const double total = static_cast<double>(padded.size() - 2);

    std::vector<double> z(config_.dim, 0.0);
    for (const auto& [bucket, count] : counts) {
        const double tf = count / total;
        const double* row = projection_.data() + bucket * config_.dim;
        for (std::size_t i = 0; i < config_.dim; ++i) {
            z[i] += tf * row[i];
        }
    }
    double norm = 0;
    for (double v : z) {
        norm += v * v;
    }
    norm = std::sqrt(norm);
    if (!(norm > 0)) {
        throw NumericError("encode_sentence: degenerate embedding");
    }
    for (double& v : z) {
        v /= norm;
    }
    return z;
}

std::string SentenceEncoder::fingerprint() const {
    const std::string key = "trigram-tf-proj/" + std::to_string(config_.hash_dim) + "/" +
                            std::to_string(config_.dim) + "/" + std::to_string(config_.seed);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(reinterpret_cast<const unsigned char*>(key.data()), key.size())));
    return buf;
}

double kmeans_objective(std::span<const double> points, std::span<const double> centroids, std::size_t dim) {
    const std::size_t n = points.size() / dim, k = centroids.size() / dim;
    const std::vector<double> c(centroids.begin(), centroids.end());
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total += nearest(points.data() + i * dim, c, k, dim).second;
    }
    return total;
}

KMeansResult fit_kmeans(std::span<const double> points, std::size_t dim, std::size_t k, std::uint64_t seed,
                        std::size_t max_iterations) {
    if (dim == 0 || points.size() % dim != 0) {
        throw ShapeError("fit_kmeans: " + std::to_string(points.size()) + " values are not rows of dim " +
                         std::to_string(dim));
    }
    const std::size_t n = points.size() / dim;
    if (k == 0 || n < k) {
        throw UsageError("fit_kmeans: need at least K=" + std::to_string(k) + " points, got " + std::to_string(n));
    }
    const double* X = points.data();
    Rng rng(seed);

    KMeansResult r;
    r.k = k;
    r.dim = dim;
    r.centroids.resize(k * dim);

    // k-means++ seeding.
    std::vector<double> d2(n);
    std::size_t first = rng.below(n);
    std::copy_n(X + first * dim, dim, r.centroids.begin());
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = squared_distance(X + i * dim, X + first * dim, dim);
    }
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (double v : d2) {
            total += v;
        }
        std::size_t pick = 0;
        if (total > 0) {
            const double u = rng.uniform() * total;
            double acc = 0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (u < acc && d2[i] > 0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.below(n);
        }
        std::copy_n(X + pick * dim, dim, r.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(X + i * dim, X + pick * dim, dim));
        }
    }

    auto assign_all = [&](std::vector<std::size_t>& assignment) {
        double obj = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto [c, d] = nearest(X + i * dim, r.centroids, k, dim);
            assignment[i] = c;
            obj += d;
        }
        return obj;
    };

    r.assignment.assign(n, 0);
    r.objective_history.push_back(assign_all(r.assignment));

    std::vector<std::size_t> counts(k);
    std::vector<std::size_t> next(n);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        // Update step.
        std::fill(r.centroids.begin(), r.centroids.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = r.assignment[i];
            ++counts[c];
            double* row = r.centroids.data() + c * dim;
            for (std::size_t e = 0; e < dim; ++e) {
                row[e] += X[i * dim + e];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t e = 0; e < dim; ++e) {
                    r.centroids[c * dim + e] /= static_cast<double>(counts[c]);
                }
            }
        }
        // Re-seed empty clusters at the point farthest from its own centroid.
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                continue;
            }
            std::size_t far = 0;
            double far_d = -1;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t a = r.assignment[i];
                if (counts[a] <= 1) {
                    continue;
                }
                const double d = squared_distance(X + i * dim, r.centroids.data() + a * dim, dim);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far_d < 0) {
                break;
            }
            --counts[r.assignment[far]];
            r.assignment[far] = c;
            counts[c] = 1;
            std::copy_n(X + far * dim, dim, r.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
        }
        // Assignment step.
        const double obj = assign_all(next);
        r.objective_history.push_back(obj);
        r.iterations = it + 1;
        const bool changed = next != r.assignment;
        r.assignment.swap(next);
        if (!changed) {
            r.converged = true;
            break;
        }
    }
    return r;
}

ActionId assign_action(const ActionVocabulary& vocab, std::span<const double> z) {
    if (z.size() != vocab.dim) {
        throw ShapeError("assign_action: embedding of dim " + std::to_string(z.size()) + " vs vocabulary dim " +
                         std::to_string(vocab.dim));
    }
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < vocab.k; ++a) {
        const float* c = vocab.centroids.data() + a * vocab.dim;
        double d = 0;
        for (std::size_t e = 0; e < vocab.dim; ++e) {
            const double diff = z[e] - static_cast<double>(c[e]);
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = a;
        }
    }
    return static_cast<ActionId>(best);
}

ActionVocabulary fit_vocabulary(const SegmentedCorpus& corpus, const SentenceEncoder& encoder,
                                const VocabularyOptions& options) {
    if (options.k < 2) {
        throw ConfigError("actions.k must be at least 2");
    }
    // Reservoir-free subsample: shuffle (doc, sentence) references with the seed.
    std::vector<std::pair<std::size_t, std::size_t>> refs;
    for (std::size_t d : corpus.indices(Split::train)) {
        for (std::size_t j = 0; j < corpus.documents[d].sentences.size(); ++j) {
            refs.emplace_back(d, j);
        }
    }
    Rng rng(derive_seed(options.seed, 0xC1));
    if (refs.size() > options.max_fit_points) {
        for (std::size_t i = 0; i < options.max_fit_points; ++i) {
            std::swap(refs[i], refs[i + rng.below(refs.size() - i)]);
        }
        refs.resize(options.max_fit_points);
    }
    const std::size_t dim = encoder.config().dim;
    std::vector<double> points;
    points.reserve(refs.size() * dim);
    for (const auto& [d, j] : refs) {
        const auto z = encoder.encode(corpus.documents[d].sentence_text(j));
        points.insert(points.end(), z.begin(), z.end());
    }
    const KMeansResult km = fit_kmeans(points, dim, options.k, derive_seed(options.seed, 0xC2), options.max_iterations);

    ActionVocabulary vocab;
    vocab.k = options.k;
    vocab.dim = dim;
    vocab.centroids.assign(km.centroids.begin(), km.centroids.end());
    vocab.encoder = encoder.config();
    vocab.encoder_fingerprint = encoder.fingerprint();
    return vocab;
}

std::vector<ActionId> oracle_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                     const Document& doc) {
    std::vector<ActionId> out;
    out.reserve(doc.sentences.size());
    for (std::size_t j = 0; j < doc.sentences.size(); ++j) {
        out.push_back(assign_action(vocab, encoder.encode(doc.sentence_text(j))));
    }
    return out;
}

std::vector<std::vector<ActionId>> oracle_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                                  const SegmentedCorpus& corpus) {
    std::vector<std::vector<ActionId>> out;
    out.reserve(corpus.documents.size());
    for (const Document& doc : corpus.documents) {
        out.push_back(oracle_actions(vocab, encoder, doc));
    }
    return out;
}

}  // namespace plm
