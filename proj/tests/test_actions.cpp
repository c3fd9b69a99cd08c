#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "plm/actions.hpp"
#include "plm/error.hpp"
#include "plm/rng.hpp"
#include "plm/synthetic.hpp"
#include "testutil.hpp"

using namespace plm;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

}  // namespace

TEST_CASE("encoder is deterministic and unit norm") {
    const SentenceEncoder enc;
    const auto a = enc.encode("The castle above Lorne dates from 1802.");
    const auto b = enc.encode("The castle above Lorne dates from 1802.");
    CHECK(a == b);
    CHECK(std::abs(std::sqrt(dot(a, a)) - 1.0) <= 1e-6);
    CHECK(dot(a, b) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(enc.encode("  padded  ") == enc.encode("padded"));
    CHECK_THROWS_AS(enc.encode(""), UsageError);
}

TEST_CASE("encoder separates unrelated strings") {
    const SentenceEncoder enc;
    const double c = dot(enc.encode("aaaa"), enc.encode("zzzz"));
    CHECK(c < 0.5);
    // Regression value under the default seed.
    CHECK(c == doctest::Approx(-0.0532).epsilon(0.05));
}

TEST_CASE("k-means recovers separable blobs") {
    for (int seed = 0; seed < 20; ++seed) {
        const auto blobs = testutil::make_blobs(4, 50, 3, 10.0, static_cast<std::uint64_t>(seed));
        const KMeansResult r = fit_kmeans(blobs.points, 3, 4, static_cast<std::uint64_t>(seed));
        CHECK(testutil::adjusted_rand_index(r.assignment, blobs.labels) == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t i = 1; i < r.objective_history.size(); ++i) {
            CHECK(r.objective_history[i] <= r.objective_history[i - 1] + 1e-9);
        }
        CHECK(r.converged);
    }
}

TEST_CASE("k-means with K = N places a centroid on every point") {
    Rng rng(4);
    std::vector<double> pts(12);
    for (double& v : pts) {
        v = rng.normal();
    }
    const KMeansResult r = fit_kmeans(pts, 2, 6, 1);
    CHECK(r.objective_history.back() == doctest::Approx(0.0));
    CHECK(kmeans_objective(pts, r.centroids, 2) == doctest::Approx(0.0));
    CHECK_THROWS_AS(fit_kmeans(pts, 2, 7, 1), UsageError);
}

TEST_CASE("k-means objective is monotone on overlapping data") {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(50 + seed);
        std::vector<double> pts(400 * 4);
        for (double& v : pts) {
            v = rng.normal();
        }
        const KMeansResult r = fit_kmeans(pts, 4, 16, static_cast<std::uint64_t>(seed));
        REQUIRE(r.objective_history.size() >= 2);
        for (std::size_t i = 1; i < r.objective_history.size(); ++i) {
            CHECK(r.objective_history[i] <= r.objective_history[i - 1] + 1e-9);
        }
        CHECK(r.objective_history.back() <= r.objective_history.front());
    }
}

TEST_CASE("assign_action is the nearest centroid with lowest-index ties") {
    ActionVocabulary v;
    v.k = 4;
    v.dim = 2;
    v.centroids = {0, 0, 2, 0, 0, 3, 5, 5};
    CHECK(assign_action(v, std::vector<double>{0, 3}) == 2);
    CHECK(assign_action(v, std::vector<double>{1, 0}) == 0);  // equidistant from 0 and 1
    CHECK_THROWS_AS(assign_action(v, std::vector<double>{1, 0, 0}), ShapeError);

    Rng rng(8);
    v.k = 16;
    v.dim = 5;
    v.centroids.resize(80);
    for (float& c : v.centroids) {
        c = static_cast<float>(rng.normal());
    }
    for (int t = 0; t < 200; ++t) {
        std::vector<double> z(5);
        for (double& x : z) {
            x = rng.normal();
        }
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t a = 0; a < 16; ++a) {
            double d = 0;
            for (std::size_t e = 0; e < 5; ++e) {
                d += (z[e] - v.centroids[a * 5 + e]) * (z[e] - v.centroids[a * 5 + e]);
            }
            if (d < best_d) {
                best_d = d;
                best = a;
            }
        }
        CHECK(assign_action(v, z) == static_cast<ActionId>(best));
    }
}

TEST_CASE("oracle actions compose encoder and assignment") {
    SyntheticConfig cfg;
    cfg.documents = 200;
    cfg.seed = 2;
    const auto syn = generate_synthetic(cfg);
    CorpusOptions opt;
    opt.window_size = 64;
    const auto corpus = build_corpus(syn.texts, opt);
    const SentenceEncoder enc;
    VocabularyOptions vo;
    vo.k = 8;
    vo.seed = 5;
    const auto vocab = fit_vocabulary(corpus, enc, vo);
    CHECK(vocab.k == 8);
    CHECK(vocab.centroids.size() == 8 * enc.config().dim);
    for (float c : vocab.centroids) {
        CHECK(std::isfinite(c));
    }

    const auto again = fit_vocabulary(corpus, enc, vo);
    CHECK(again.centroids == vocab.centroids);

    const Document three = segment("First one. Second one. Third.");
    const auto acts = oracle_actions(vocab, enc, three);
    CHECK(acts.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(acts[j] == assign_action(vocab, enc.encode(three.sentence_text(j))));
    }
    CHECK(oracle_actions(vocab, enc, three) == acts);
}
