#include "plm/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "plm/error.hpp"
#include "plm/rng.hpp"

namespace plm {

namespace {

bool is_space(TokenId t) {
    return t == ' ' || t == '\t' || t == '\n' || t == '\r' || t == '\f' || t == '\v';
}

bool is_terminator(TokenId t) {
    return t == '.' || t == '!' || t == '?';
}

bool is_special(TokenId t) {
    return t == kBos || t == kEos;
}

}  // namespace

std::size_t Document::sentence_of(std::size_t token) const {
    if (token >= tokens.size()) {
        throw UsageError("sentence_of: token " + std::to_string(token) + " beyond document of " +
                         std::to_string(tokens.size()));
    }
    auto it = std::upper_bound(sentences.begin(), sentences.end(), token,
                               [](std::size_t t, const SentenceSpan& s) { return t < s.end; });
    return static_cast<std::size_t>(it - sentences.begin());
}

std::string Document::sentence_text(std::size_t j) const {
    const SentenceSpan& s = sentences.at(j);
    return detokenize(std::span<const TokenId>(tokens).subspan(s.begin, s.size()));
}

std::string Document::text() const {
    return detokenize(tokens);
}

std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t >= 0 && t < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
    }
    return out;
}

bool ends_sentence(std::span<const TokenId> tokens) {
    // Replays the segmentation rule over the byte tokens so a boundary is only
    // reported where segment() would keep one (never after a blank-only span).
    TokenId prev = -1;
    bool content = false;
    bool boundary = false;
    for (TokenId t : tokens) {
        if (is_special(t)) {
            continue;
        }
        content = content || !is_space(t);
        boundary = false;
        if (prev >= 0 && ((is_space(t) && is_terminator(prev)) || (t == '\n' && prev == '\n'))) {
            if (content) {
                boundary = true;
                content = false;
            }
        }
        prev = t;
    }
    return boundary;
}

Document segment(std::string_view text) {
    if (text.empty()) {
        throw UsageError("segment: empty text");
    }
    const std::vector<TokenId> bytes = tokenize(text);

    std::vector<SentenceSpan> raw;
    std::size_t start = 0;
    for (std::size_t i = 1; i < bytes.size(); ++i) {
        const bool boundary =
            (is_space(bytes[i]) && is_terminator(bytes[i - 1])) || (bytes[i] == '\n' && bytes[i - 1] == '\n');
        if (boundary) {
            raw.push_back({start, i + 1});
            start = i + 1;
        }
    }
    if (start < bytes.size()) {
        raw.push_back({start, bytes.size()});
    }

    // Merge whitespace-only spans forward (or backward at the end).
    std::vector<SentenceSpan> spans;
    std::size_t pending = SIZE_MAX;
    for (const SentenceSpan& s : raw) {
        const bool blank =
            std::all_of(bytes.begin() + static_cast<std::ptrdiff_t>(s.begin),
                        bytes.begin() + static_cast<std::ptrdiff_t>(s.end), [](TokenId t) { return is_space(t); });
        const std::size_t begin = pending == SIZE_MAX ? s.begin : pending;
        if (blank) {
            pending = begin;
            continue;
        }
        spans.push_back({begin, s.end});
        pending = SIZE_MAX;
    }
    if (pending != SIZE_MAX) {
        if (spans.empty()) {
            spans.push_back({pending, bytes.size()});
        } else {
            spans.back().end = bytes.size();
        }
    }

    Document doc;
    doc.tokens.reserve(bytes.size() + 2);
    doc.tokens.push_back(kBos);
    doc.tokens.insert(doc.tokens.end(), bytes.begin(), bytes.end());
    doc.tokens.push_back(kEos);
    for (std::size_t j = 0; j < spans.size(); ++j) {
        SentenceSpan s{spans[j].begin + 1, spans[j].end + 1};
        if (j == 0) {
            s.begin = 0;
        }
        if (j + 1 == spans.size()) {
            s.end = doc.tokens.size();
        }
        doc.sentences.push_back(s);
    }
    return doc;
}

const char* split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

Split assign_split(std::size_t doc_index, std::uint64_t seed, double val_fraction, double test_fraction) {
    const double u = static_cast<double>(derive_seed(seed, doc_index) >> 11) * 0x1.0p-53;
    if (u < test_fraction) {
        return Split::test;
    }
    if (u < test_fraction + val_fraction) {
        return Split::val;
    }
    return Split::train;
}

std::vector<std::size_t> SegmentedCorpus::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == split) {
            out.push_back(i);
        }
    }
    return out;
}

SegmentedCorpus build_corpus(std::span<const std::string> texts, const CorpusOptions& options) {
    if (options.window_size < 2) {
        throw ConfigError("corpus.window must be at least 2");
    }
    if (options.val_fraction < 0 || options.test_fraction < 0 || options.val_fraction + options.test_fraction >= 1) {
        throw ConfigError("corpus split fractions must be non-negative and sum below 1");
    }
    SegmentedCorpus corpus;
    corpus.window_size = options.window_size;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (texts[i].empty()) {
            continue;
        }
        corpus.documents.push_back(segment(texts[i]));
        corpus.splits.push_back(assign_split(corpus.documents.size() - 1, options.seed, options.val_fraction,
                                             options.test_fraction));
    }
    return corpus;
}

std::vector<std::string> load_texts(const std::string& path) {
    namespace fs = std::filesystem;
    auto read_file = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) {
            throw DataError("cannot read " + p.string());
        }
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    };

    std::vector<std::string> texts;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.is_regular_file()) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            texts.push_back(read_file(f));
        }
    } else if (fs::path(path).extension() == ".jsonl") {
        std::ifstream in(path);
        if (!in) {
            throw DataError("cannot read " + path);
        }
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) {
                continue;
            }
            try {
                const auto j = nlohmann::json::parse(line);
                texts.push_back(j.at("text").get<std::string>());
            } catch (const nlohmann::json::exception& e) {
                throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    } else {
        if (!fs::exists(path)) {
            throw DataError("no such corpus input: " + path);
        }
        texts.push_back(read_file(path));
    }
    return texts;
}

WindowSet make_windows(const SegmentedCorpus& corpus, Split split) {
    WindowSet out;
    const std::size_t W = corpus.window_size;
    for (std::size_t d : corpus.indices(split)) {
        const std::size_t n = corpus.documents[d].tokens.size();
        if (n < 2) {
            ++out.skipped;
            continue;
        }
        if (n < W) {
            out.windows.push_back({d, 0, n});
            continue;
        }
        for (std::size_t begin = 0; begin + W <= n; begin += W) {
            out.windows.push_back({d, begin, W});
        }
    }
    return out;
}

std::vector<std::size_t> position_sentences(const Document& doc, const Window& window) {
    std::vector<std::size_t> out;
    out.reserve(window.length - 1);
    std::size_t j = doc.sentence_of(window.begin + 1);
    for (std::size_t p = 0; p + 1 < window.length; ++p) {
        const std::size_t tok = window.begin + p + 1;
        while (tok >= doc.sentences[j].end) {
            ++j;
        }
        out.push_back(j);
    }
    return out;
}

}  // namespace plm
