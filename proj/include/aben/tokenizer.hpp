#pragma once

// Subword vocabulary, greedy longest-match tokenisation and the embedding table.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aben/errors.hpp"
#include "aben/random.hpp"

namespace aben {

inline constexpr std::string_view kContinuation = "##";

class SubwordVocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr std::array<std::string_view, 4> kSpecials = {"[PAD]", "[UNK]", "[BOS]", "[EOS]"};

    SubwordVocabulary() : SubwordVocabulary(std::vector<std::string>{}) {}

    // `pieces` excludes the four special tokens, which always occupy ids 0..3.
    explicit SubwordVocabulary(const std::vector<std::string>& pieces) {
        for (auto s : kSpecials) push(std::string(s));
        for (const auto& p : pieces) {
            if (p.empty()) throw ValidationError("vocabulary: empty token");
            if (p == kContinuation) throw ValidationError("vocabulary: bare continuation marker");
            if (index_.count(p)) throw ValidationError("vocabulary: duplicate token '" + p + "'");
            push(p);
        }
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int find(std::string_view piece) const {
        auto it = index_.find(std::string(piece));
        return it == index_.end() ? -1 : it->second;
    }
    bool contains(std::string_view piece) const { return find(piece) >= 0; }
    static bool is_special(int id) { return id >= 0 && id < 4; }

    // Stable FNV-1a over the newline-joined token list.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& t : tokens_) {
            for (unsigned char c : t) {
                h ^= c;
                h *= 1099511628211ULL;
            }
            h ^= '\n';
            h *= 1099511628211ULL;
        }
        return h;
    }

  private:
    void push(std::string t) {
        index_.emplace(t, static_cast<int>(tokens_.size()));
        tokens_.push_back(std::move(t));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) words.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return words;
}

// Greedy longest-match per word. Pieces after the first carry the "##"
// marker. When nothing matches at some offset, the rest of the word becomes
// a single [UNK].
inline std::vector<int> tokenize(std::string_view sentence, const SubwordVocabulary& vocab, bool framed = false) {
    std::vector<int> ids;
    if (framed) ids.push_back(SubwordVocabulary::kBos);
    for (const auto& word : split_words(sentence)) {
        std::size_t start = 0;
        while (start < word.size()) {
            int match = -1;
            std::size_t end = word.size();
            for (; end > start; --end) {
                std::string piece = word.substr(start, end - start);
                if (start > 0) piece.insert(0, kContinuation);
                match = vocab.find(piece);
                if (match >= 0 && !SubwordVocabulary::is_special(match)) break;
                match = -1;
            }
            if (match < 0) {
                ids.push_back(SubwordVocabulary::kUnk);
                break;
            }
            ids.push_back(match);
            start = end;
        }
    }
    if (framed) ids.push_back(SubwordVocabulary::kEos);
    return ids;
}

// Pieces as strings; with `strip_marker` the "##" prefix is removed.
inline std::vector<std::string> pieces(const std::vector<int>& ids, const SubwordVocabulary& vocab,
                                       bool strip_marker = true) {
    std::vector<std::string> out;
    for (int id : ids) {
        std::string t = vocab.token(id);
        if (strip_marker && t.starts_with(kContinuation)) t.erase(0, kContinuation.size());
        out.push_back(std::move(t));
    }
    return out;
}

inline std::string detokenize(const std::vector<int>& ids, const SubwordVocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= vocab.size()) throw ContractError("detokenize: id out of range");
        if (id == SubwordVocabulary::kPad || id == SubwordVocabulary::kBos || id == SubwordVocabulary::kEos) continue;
        const std::string& t = vocab.token(id);
        if (t.starts_with(kContinuation)) {
            out += t.substr(kContinuation.size());
        } else {
            if (!out.empty()) out.push_back(' ');
            out += t;
        }
    }
    return out;
}

// Top-K whole words by frequency (ties broken alphabetically) plus initial and
// continuation single-character pieces for every character seen, so any word
// drawn from the corpus alphabet is coverable.
inline SubwordVocabulary build_vocabulary(const std::vector<std::string>& sentences, std::size_t top_k) {
    std::map<std::string, std::size_t> freq;
    std::map<char, bool> chars;
    for (const auto& s : sentences)
        for (const auto& w : split_words(s)) {
            ++freq[w];
            for (char c : w) chars[c] = true;
        }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> pieces_out;
    std::unordered_map<std::string, bool> seen;
    auto add = [&](std::string p) {
        if (!seen[p]) {
            seen[p] = true;
            pieces_out.push_back(std::move(p));
        }
    };
    for (std::size_t i = 0; i < ranked.size() && i < top_k; ++i) add(ranked[i].first);
    for (const auto& [c, _] : chars) add(std::string(1, c));
    for (const auto& [c, _] : chars) add(std::string(kContinuation) + c);
    return SubwordVocabulary(pieces_out);
}

inline SubwordVocabulary load_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (lines.size() < 4) throw ValidationError("vocabulary: missing reserved special tokens");
    for (std::size_t i = 0; i < 4; ++i)
        if (lines[i] != SubwordVocabulary::kSpecials[i])
            throw ValidationError("vocabulary: line " + std::to_string(i + 1) + " must be " +
                                  std::string(SubwordVocabulary::kSpecials[i]));
    std::vector<std::string> rest(lines.begin() + 4, lines.end());
    while (!rest.empty() && rest.back().empty()) rest.pop_back();
    for (const auto& t : rest)
        for (auto s : SubwordVocabulary::kSpecials)
            if (t == s) throw ValidationError("vocabulary: special token repeated: " + t);
    return SubwordVocabulary(rest);
}

inline void save_vocabulary(const std::filesystem::path& path, const SubwordVocabulary& vocab) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary: " + path.string());
    for (const auto& t : vocab.tokens()) out << t << '\n';
}

struct EmbeddingTable {
    int rows = 0;
    int dim = 0;
    std::vector<double> values; // rows x dim, row-major

    std::span<const double> row(int id) const {
        return {values.data() + static_cast<std::size_t>(id) * dim, static_cast<std::size_t>(dim)};
    }
};

// Row lookup. The [PAD] row is all zeros.
inline std::vector<std::vector<double>> embed(const std::vector<int>& ids, const EmbeddingTable& table) {
    std::vector<std::vector<double>> out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= table.rows) throw ContractError("embed: id out of range");
        auto r = table.row(id);
        out.emplace_back(r.begin(), r.end());
    }
    return out;
}

inline EmbeddingTable random_embedding_table(int rows, int dim, std::uint64_t seed) {
    Rng rng(seed);
    EmbeddingTable t{rows, dim, std::vector<double>(static_cast<std::size_t>(rows) * dim)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : t.values) v = rng.normal() * scale;
    std::fill_n(t.values.begin(), dim, 0.0);
    return t;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embeddings: " + path.string());
    std::string header;
    std::getline(in, header);
    int rows = -1, dim = -1;
    {
        std::istringstream hs(header);
        std::string a, b;
        hs >> a >> b;
        auto parse_kv = [](const std::string& kv, std::string_view key) {
            if (!kv.starts_with(key)) return -1;
            int v = -1;
            auto r = std::from_chars(kv.data() + key.size(), kv.data() + kv.size(), v);
            return r.ec == std::errc{} && r.ptr == kv.data() + kv.size() ? v : -1;
        };
        rows = parse_kv(a, "V=");
        dim = parse_kv(b, "d=");
    }
    if (rows <= 0 || dim <= 0) throw ParseError(1, "embedding header must be 'V=<int> d=<int>'");
    EmbeddingTable t{rows, dim, {}};
    t.values.reserve(static_cast<std::size_t>(rows) * dim);
    std::string line;
    int r = 0;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        std::string tok;
        int c = 0;
        while (ls >> tok) {
            char* end = nullptr;
            const double v = std::strtod(tok.c_str(), &end);
            if (end != tok.c_str() + tok.size()) throw ParseError(lineno, "not a number: " + tok);
            if (!std::isfinite(v)) throw ValidationError("embedding row " + std::to_string(r) + ": non-finite entry");
            t.values.push_back(v);
            ++c;
        }
        if (c != dim) throw ValidationError("embedding row " + std::to_string(r) + " has " + std::to_string(c) +
                                            " columns, expected " + std::to_string(dim));
        ++r;
    }
    if (r != rows) throw ValidationError("embedding table has " + std::to_string(r) + " rows, header says " +
                                         std::to_string(rows));
    std::fill_n(t.values.begin(), dim, 0.0);
    return t;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& t) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings: " + path.string());
    out << "V=" << t.rows << " d=" << t.dim << '\n';
    out.precision(17);
    for (int r = 0; r < t.rows; ++r) {
        for (int c = 0; c < t.dim; ++c) out << (c ? " " : "") << t.values[static_cast<std::size_t>(r) * t.dim + c];
        out << '\n';
    }
}

inline std::pair<SubwordVocabulary, EmbeddingTable> load_vocab_and_embeddings(const std::filesystem::path& vocab_path,
                                                                              const std::filesystem::path& emb_path) {
    auto vocab = load_vocabulary(vocab_path);
    auto table = load_embeddings(emb_path);
    if (table.rows != vocab.size())
        throw ValidationError("embedding rows (" + std::to_string(table.rows) + ") do not match vocabulary size (" +
                              std::to_string(vocab.size()) + ")");
    return {std::move(vocab), std::move(table)};
}

} // namespace aben
