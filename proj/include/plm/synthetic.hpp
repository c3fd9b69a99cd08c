#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace plm {

// Generator for a small "planful" corpus: documents are Markov chains over
// sentence templates. Each document draws a style that selects its transition
// matrix, so the best guess for the next template depends on more than the
// previous sentence. Templates come in two paraphrases and have slots filled
// from word lists; the subject name and place are fixed per document.
struct SyntheticConfig {
    std::size_t documents = 5000;
    std::size_t templates = 16;  // 8..32
    std::size_t styles = 2;
    std::size_t branching = 3;  // successors per template within a style
    std::size_t min_sentences = 8;
    std::size_t max_sentences = 16;
    std::uint64_t seed = 0;
};

struct SyntheticCorpus {
    std::vector<std::string> texts;
    std::vector<std::vector<std::size_t>> template_ids;  // per document, per sentence
    std::vector<std::size_t> styles;                     // per document
};

SyntheticCorpus generate_synthetic(const SyntheticConfig& config);

// Number of templates available in the built-in bank.
std::size_t synthetic_template_capacity();

}  // namespace plm
