#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace plm {

using TokenId = std::int32_t;

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr std::size_t kVocabSize = 258;

// Half-open token range [begin, end).
struct SentenceSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool operator==(const SentenceSpan&) const = default;
};

// Byte tokens wrapped in BOS/EOS. Sentence spans partition [0, tokens.size()):
// BOS belongs to the first sentence, EOS to the last.
struct Document {
    std::vector<TokenId> tokens;
    std::vector<SentenceSpan> sentences;

    std::size_t sentence_of(std::size_t token) const;
    // Bytes of sentence j without BOS/EOS.
    std::string sentence_text(std::size_t j) const;
    std::string text() const;
};

std::vector<TokenId> tokenize(std::string_view text);
// Drops BOS/EOS.
std::string detokenize(std::span<const TokenId> tokens);

// True when segment() would place a sentence boundary right after the last
// token: the last byte is whitespace following '.', '!' or '?', or completes a
// blank line ("\n\n"), and the sentence it closes is not whitespace-only.
// Special tokens are ignored.
bool ends_sentence(std::span<const TokenId> tokens);

// Splits text into sentences with the boundary rule above. Spans that hold only
// whitespace are merged into the following sentence (or the preceding one at
// the end of the text). Throws UsageError on empty input.
Document segment(std::string_view text);

enum class Split { train, val, test };

const char* split_name(Split split);
Split parse_split(std::string_view name);

// Pure function of (document index, seed).
Split assign_split(std::size_t doc_index, std::uint64_t seed, double val_fraction, double test_fraction);

struct SegmentedCorpus {
    std::vector<Document> documents;
    std::vector<Split> splits;
    std::size_t window_size = 128;

    std::vector<std::size_t> indices(Split split) const;
};

struct CorpusOptions {
    std::size_t window_size = 128;
    double val_fraction = 0.02;
    double test_fraction = 0.02;
    std::uint64_t seed = 0;
};

SegmentedCorpus build_corpus(std::span<const std::string> texts, const CorpusOptions& options);

// Reads UTF-8 text: a directory (one document per regular file, sorted by
// name), a .jsonl file (field "text" per line), or a single plain-text file.
std::vector<std::string> load_texts(const std::string& path);

// A run of window tokens inside one document. Input position p (0-based,
// p < length - 1) predicts token begin + p + 1.
struct Window {
    std::size_t doc = 0;
    std::size_t begin = 0;
    std::size_t length = 0;
};

struct WindowSet {
    std::vector<Window> windows;
    std::size_t skipped = 0;  // documents shorter than 2 tokens
};

// Non-overlapping windows of window_size tokens with stride window_size; a
// trailing remainder is dropped. A document shorter than window_size yields one
// window covering the whole document.
WindowSet make_windows(const SegmentedCorpus& corpus, Split split);

// Sentence index (within the document) of the token each input position predicts.
std::vector<std::size_t> position_sentences(const Document& doc, const Window& window);

}  // namespace plm
