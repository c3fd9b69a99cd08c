#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plm/corpus.hpp"

namespace plm {

using ActionId = std::int32_t;

struct EncoderConfig {
    std::size_t hash_dim = 4096;
    std::size_t dim = 64;
    std::uint64_t seed = 0;
};

// Hashed character-trigram counts, term-frequency weighted, projected through
// a fixed seeded Gaussian matrix and L2-normalised. Leading and trailing
// whitespace is ignored.
class SentenceEncoder {
public:
    explicit SentenceEncoder(EncoderConfig config = {});

    // Unit-norm embedding. Throws UsageError for empty text.
    std::vector<double> encode(std::string_view text) const;

    const EncoderConfig& config() const { return config_; }
    // Stable hex digest of the configuration.
    std::string fingerprint() const;

private:
    EncoderConfig config_;
    std::vector<double> projection_;  // hash_dim x dim
};

struct KMeansResult {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<double> centroids;          // k x dim
    std::vector<std::size_t> assignment;    // per point
    std::vector<double> objective_history;  // [0] after seeding, then one per Lloyd iteration
    std::size_t iterations = 0;
    bool converged = false;
};

// k-means++ seeding followed by Lloyd iterations until the assignment stops
// changing or max_iterations is reached. An empty cluster is re-seeded at the
// point farthest from its current centroid. points is n x dim, row-major.
KMeansResult fit_kmeans(std::span<const double> points, std::size_t dim, std::size_t k, std::uint64_t seed,
                        std::size_t max_iterations = 100);

// Sum of squared distances from each point to its nearest centroid.
double kmeans_objective(std::span<const double> points, std::span<const double> centroids, std::size_t dim);

struct ActionVocabulary {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<float> centroids;  // k x dim; the initial action embeddings
    EncoderConfig encoder;
    std::string encoder_fingerprint;

    std::span<const float> centroid(std::size_t a) const {
        return std::span<const float>(centroids).subspan(a * dim, dim);
    }
};

// Nearest centroid by squared Euclidean distance, ties to the lowest index.
ActionId assign_action(const ActionVocabulary& vocab, std::span<const double> z);

struct VocabularyOptions {
    std::size_t k = 32;
    std::uint64_t seed = 0;
    std::size_t max_fit_points = 20000;  // sentences subsampled for fitting
    std::size_t max_iterations = 100;
};

// Embeds every training-split sentence and clusters a seeded subsample.
ActionVocabulary fit_vocabulary(const SegmentedCorpus& corpus, const SentenceEncoder& encoder,
                                const VocabularyOptions& options);

// a_j = assign_action(encode(t_j)) for every sentence of the document.
std::vector<ActionId> oracle_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                     const Document& doc);

std::vector<std::vector<ActionId>> oracle_actions(const ActionVocabulary& vocab, const SentenceEncoder& encoder,
                                                  const SegmentedCorpus& corpus);

}  // namespace plm
