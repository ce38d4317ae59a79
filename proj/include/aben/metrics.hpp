#pragma once

// Captioning metrics: corpus BLEU-1..4, ROUGE-L, METEOR (exact + synonym
// stages) and CIDEr, plus multi-run aggregation and reporting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "aben/errors.hpp"
#include "aben/tokenizer.hpp"

namespace aben::metrics {

using Tokens = std::vector<std::string>;
using NgramCounts = std::unordered_map<std::string, int>;

inline Tokens words(std::string_view sentence) { return split_words(sentence); }

inline NgramCounts ngram_counts(const Tokens& t, int n) {
    NgramCounts out;
    if (static_cast<int>(t.size()) < n) return out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
        std::string key = t[i];
        for (int k = 1; k < n; ++k) {
            key.push_back('\x1f');
            key += t[i + static_cast<std::size_t>(k)];
        }
        ++out[key];
    }
    return out;
}

// ---------------------------------------------------------------------------
// BLEU

struct BleuStats {
    std::array<double, 4> matches{};
    std::array<double, 4> totals{};
    double candidate_length = 0.0;
    double reference_length = 0.0;
};

// Reference length closest to the candidate length; ties go to the shorter.
inline std::size_t closest_reference_length(std::size_t cand, const std::vector<Tokens>& refs) {
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
        const auto d = [&](std::size_t x) { return x > cand ? x - cand : cand - x; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    return best;
}

inline BleuStats bleu_stats(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& refs,
                            int max_order = 4) {
    if (candidates.size() != refs.size()) throw ContractError("bleu: candidates and reference sets differ in count");
    BleuStats st;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (refs[i].empty()) throw ContractError("bleu: empty reference set");
        const Tokens& c = candidates[i];
        st.candidate_length += static_cast<double>(c.size());
        st.reference_length += static_cast<double>(closest_reference_length(c.size(), refs[i]));
        for (int n = 1; n <= max_order; ++n) {
            NgramCounts cc = ngram_counts(c, n);
            NgramCounts max_ref;
            for (const auto& r : refs[i])
                for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
            int clipped = 0;
            for (const auto& [g, k] : cc) {
                auto it = max_ref.find(g);
                if (it != max_ref.end()) clipped += std::min(k, it->second);
            }
            st.matches[static_cast<std::size_t>(n - 1)] += clipped;
            st.totals[static_cast<std::size_t>(n - 1)] += static_cast<double>(std::max<long>(0, static_cast<long>(c.size()) - n + 1));
        }
    }
    return st;
}

inline double brevity_penalty(double candidate_length, double reference_length) {
    if (candidate_length <= 0.0) return 0.0;
    if (candidate_length > reference_length) return 1.0;
    return std::exp(1.0 - reference_length / candidate_length);
}

// Corpus-level, unsmoothed BLEU-n: brevity penalty times the geometric mean
// of clipped 1..n-gram precisions.
inline double bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& refs, int n) {
    if (n < 1 || n > 4) throw ContractError("bleu: order must be in 1..4");
    if (candidates.empty()) throw ContractError("bleu: undefined on an empty candidate corpus");
    const BleuStats st = bleu_stats(candidates, refs, n);
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        if (st.totals[static_cast<std::size_t>(k)] == 0.0 || st.matches[static_cast<std::size_t>(k)] == 0.0) return 0.0;
        log_sum += std::log(st.matches[static_cast<std::size_t>(k)] / st.totals[static_cast<std::size_t>(k)]);
    }
    return brevity_penalty(st.candidate_length, st.reference_length) * std::exp(log_sum / n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

inline double rouge_l_single(const Tokens& cand, const Tokens& ref, double beta = kRougeBeta) {
    if (cand.empty() || ref.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(cand, ref));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    return (1.0 + beta * beta) * p * r / (r + beta * beta * p);
}

inline double rouge_l(const Tokens& cand, const std::vector<Tokens>& refs, double beta = kRougeBeta) {
    double best = 0.0;
    for (const auto& r : refs) best = std::max(best, rouge_l_single(cand, r, beta));
    return best;
}

inline double rouge_l_corpus(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& refs) {
    if (candidates.size() != refs.size()) throw ContractError("rouge_l: candidates and reference sets differ in count");
    if (candidates.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) acc += rouge_l(candidates[i], refs[i]);
    return acc / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// METEOR

// Symmetric relation from lines "word: syn1 syn2 ...".
class SynonymTable {
  public:
    void add(const std::string& a, const std::string& b) {
        table_[a].insert(b);
        table_[b].insert(a);
    }

    bool related(const std::string& a, const std::string& b) const {
        auto it = table_.find(a);
        return it != table_.end() && it->second.count(b) != 0;
    }

    bool empty() const { return table_.empty(); }

    static SynonymTable load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open synonym table: " + path.string());
        SynonymTable t;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            auto colon = line.find(':');
            if (colon == std::string::npos) throw ParseError(lineno, "expected 'word: synonyms...'");
            auto head = split_words(line.substr(0, colon));
            if (head.size() != 1) throw ParseError(lineno, "expected exactly one head word");
            for (const auto& s : split_words(line.substr(colon + 1))) t.add(head[0], s);
        }
        return t;
    }

  private:
    std::unordered_map<std::string, std::set<std::string>> table_;
};

struct MeteorParams {
    double alpha = 0.9; // F_mean = P R / (alpha P + (1 - alpha) R), i.e. recall weighted 9:1
    double gamma = 0.5;
    double beta = 3.0;
};

struct Alignment {
    int exact = 0;
    int matches = 0;
    int chunks = 0;
    std::vector<std::pair<int, int>> pairs; // (candidate index, reference index), ascending candidate index
};

// Number of maximal runs that are contiguous and in order on both sides.
inline int count_chunks(std::vector<std::pair<int, int>> pairs) {
    std::sort(pairs.begin(), pairs.end());
    int chunks = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (i == 0 || pairs[i].first != pairs[i - 1].first + 1 || pairs[i].second != pairs[i - 1].second + 1) ++chunks;
    return chunks;
}

namespace detail {

// Exhaustive branch-and-bound over one-to-one alignments, ranked by
// (exact matches desc, total matches desc, chunks asc). Exact matches play
// the role of the first matching stage; synonym matches fill in afterwards.
class MeteorAligner {
  public:
    MeteorAligner(const Tokens& cand, const Tokens& ref, const SynonymTable& syn) : cand_(cand), ref_(ref) {
        options_.resize(cand.size());
        for (std::size_t i = 0; i < cand.size(); ++i) {
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (cand[i] == ref[j]) options_[i].push_back({static_cast<int>(j), true});
            }
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (cand[i] != ref[j] && syn.related(cand[i], ref[j])) options_[i].push_back({static_cast<int>(j), false});
            }
        }
        used_.assign(ref.size(), false);
    }

    Alignment solve() {
        best_ = Alignment{};
        best_.chunks = 0;
        have_best_ = false;
        search(0, 0, 0, 0, -2, -2);
        return best_;
    }

  private:
    struct Option {
        int ref;
        bool exact;
    };

    bool better(int e, int m, int c) const {
        if (!have_best_) return true;
        return std::tie(e, m) > std::tie(best_.exact, best_.matches) ||
               (e == best_.exact && m == best_.matches && c < best_.chunks);
    }

    // Upper bounds on exact and total matches still obtainable from position i.
    std::pair<int, int> remaining_bound(std::size_t i) const {
        int e = 0, m = 0;
        for (std::size_t k = i; k < cand_.size(); ++k) {
            bool any = false, any_exact = false;
            for (const auto& o : options_[k])
                if (!used_[static_cast<std::size_t>(o.ref)]) {
                    any = true;
                    any_exact = any_exact || o.exact;
                }
            e += any_exact;
            m += any;
        }
        return {e, m};
    }

    void search(std::size_t i, int exact, int matches, int chunks, int last_c, int last_r) {
        if (i == cand_.size()) {
            if (better(exact, matches, chunks)) {
                best_.exact = exact;
                best_.matches = matches;
                best_.chunks = chunks;
                best_.pairs = current_;
                have_best_ = true;
            }
            return;
        }
        if (have_best_) {
            auto [eb, mb] = remaining_bound(i);
            const int ue = exact + eb, um = matches + mb;
            if (std::tie(ue, um) < std::tie(best_.exact, best_.matches)) return;
            if (ue == best_.exact && um == best_.matches && chunks >= best_.chunks) return;
        }
        // Chunk-extending options first so good incumbents appear early.
        std::vector<Option> order = options_[i];
        std::stable_sort(order.begin(), order.end(), [&](const Option& a, const Option& b) {
            const bool ea = a.ref == last_r + 1 && static_cast<int>(i) == last_c + 1;
            const bool eb = b.ref == last_r + 1 && static_cast<int>(i) == last_c + 1;
            return std::tie(ea, a.exact) > std::tie(eb, b.exact);
        });
        for (const auto& o : order) {
            if (used_[static_cast<std::size_t>(o.ref)]) continue;
            used_[static_cast<std::size_t>(o.ref)] = true;
            current_.push_back({static_cast<int>(i), o.ref});
            const bool extends = static_cast<int>(i) == last_c + 1 && o.ref == last_r + 1;
            search(i + 1, exact + (o.exact ? 1 : 0), matches + 1, chunks + (extends ? 0 : 1), static_cast<int>(i), o.ref);
            current_.pop_back();
            used_[static_cast<std::size_t>(o.ref)] = false;
        }
        search(i + 1, exact, matches, chunks, last_c, last_r);
    }

    const Tokens& cand_;
    const Tokens& ref_;
    std::vector<std::vector<Option>> options_;
    std::vector<bool> used_;
    std::vector<std::pair<int, int>> current_;
    Alignment best_;
    bool have_best_ = false;
};

} // namespace detail

inline Alignment meteor_align(const Tokens& cand, const Tokens& ref, const SynonymTable& syn = {}) {
    return detail::MeteorAligner(cand, ref, syn).solve();
}

inline double meteor_from_alignment(int matches, int chunks, std::size_t cand_len, std::size_t ref_len,
                                    const MeteorParams& prm = {}) {
    if (matches == 0 || cand_len == 0 || ref_len == 0) return 0.0;
    const double p = static_cast<double>(matches) / static_cast<double>(cand_len);
    const double r = static_cast<double>(matches) / static_cast<double>(ref_len);
    const double fmean = p * r / (prm.alpha * p + (1.0 - prm.alpha) * r);
    const double penalty = prm.gamma * std::pow(static_cast<double>(chunks) / matches, prm.beta);
    return fmean * (1.0 - penalty);
}

inline double meteor_single(const Tokens& cand, const Tokens& ref, const SynonymTable& syn = {},
                            const MeteorParams& prm = {}) {
    const Alignment a = meteor_align(cand, ref, syn);
    return meteor_from_alignment(a.matches, a.chunks, cand.size(), ref.size(), prm);
}

// Best score over the reference set.
inline double meteor(const Tokens& cand, const std::vector<Tokens>& refs, const SynonymTable& syn = {},
                     const MeteorParams& prm = {}) {
    double best = 0.0;
    for (const auto& r : refs) best = std::max(best, meteor_single(cand, r, syn, prm));
    return best;
}

inline double meteor_corpus(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& refs,
                            const SynonymTable& syn = {}, const MeteorParams& prm = {}) {
    if (candidates.size() != refs.size()) throw ContractError("meteor: candidates and reference sets differ in count");
    if (candidates.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) acc += meteor(candidates[i], refs[i], syn, prm);
    return acc / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// CIDEr

struct CiderResult {
    double score = 0.0;              // corpus mean
    std::vector<double> per_sample;  // already scaled by 10
    bool degenerate_idf = false;     // corpus smaller than two images
};

inline constexpr double kCiderScale = 10.0;

// TF-IDF n-gram cosine similarity averaged over references and n = 1..4.
// Document frequency counts images whose reference set contains the n-gram;
// n-grams absent from every reference set use df = 1.
inline CiderResult cider(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& refs,
                         int max_order = 4) {
    if (candidates.size() != refs.size()) throw ContractError("cider: candidates and reference sets differ in count");
    CiderResult res;
    const std::size_t images = candidates.size();
    if (images == 0) return res;
    res.degenerate_idf = images < 2;
    if (res.degenerate_idf)
        std::fprintf(stderr, "warning: CIDEr over a corpus of %zu image(s); every IDF weight is log(%zu)\n", images, images);
    const double log_images = std::log(static_cast<double>(images));
    res.per_sample.assign(images, 0.0);
    for (int n = 1; n <= max_order; ++n) {
        std::unordered_map<std::string, int> df;
        std::vector<std::vector<NgramCounts>> ref_counts(images);
        for (std::size_t i = 0; i < images; ++i) {
            std::set<std::string> seen;
            for (const auto& r : refs[i]) {
                ref_counts[i].push_back(ngram_counts(r, n));
                for (const auto& [g, _] : ref_counts[i].back()) seen.insert(g);
            }
            for (const auto& g : seen) ++df[g];
        }
        auto idf = [&](const std::string& g) {
            auto it = df.find(g);
            return log_images - std::log(static_cast<double>(it == df.end() ? 1 : std::max(1, it->second)));
        };
        auto norm = [&](const NgramCounts& v) {
            double s = 0.0;
            for (const auto& [g, k] : v) {
                const double w = k * idf(g);
                s += w * w;
            }
            return std::sqrt(s);
        };
        for (std::size_t i = 0; i < images; ++i) {
            const NgramCounts cc = ngram_counts(candidates[i], n);
            const double cn = norm(cc);
            double acc = 0.0;
            for (const auto& rc : ref_counts[i]) {
                const double rn = norm(rc);
                if (cn == 0.0 || rn == 0.0) continue;
                double dot = 0.0;
                for (const auto& [g, k] : cc) {
                    auto it = rc.find(g);
                    if (it == rc.end()) continue;
                    const double w = idf(g);
                    dot += (k * w) * (it->second * w);
                }
                acc += dot / (cn * rn);
            }
            if (!ref_counts[i].empty()) res.per_sample[i] += acc / static_cast<double>(ref_counts[i].size()) / max_order;
        }
    }
    double total = 0.0;
    for (double& s : res.per_sample) {
        s *= kCiderScale;
        total += s;
    }
    res.score = total / static_cast<double>(images);
    return res;
}

// ---------------------------------------------------------------------------
// Reporting

inline const std::array<std::string, 7>& metric_names() {
    static const std::array<std::string, 7> names = {"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE", "METEOR", "CIDEr"};
    return names;
}

using MetricValues = std::array<double, 7>;

inline MetricValues score_corpus(const std::vector<std::string>& generated,
                                 const std::vector<std::vector<std::string>>& references,
                                 const SynonymTable& syn = {}) {
    if (generated.size() != references.size()) throw ContractError("score_corpus: generated and reference counts differ");
    std::vector<Tokens> cands;
    std::vector<std::vector<Tokens>> refs;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        cands.push_back(words(generated[i]));
        refs.emplace_back();
        for (const auto& r : references[i]) refs.back().push_back(words(r));
    }
    MetricValues v{};
    for (int n = 1; n <= 4; ++n) v[static_cast<std::size_t>(n - 1)] = bleu(cands, refs, n);
    v[4] = rouge_l_corpus(cands, refs);
    v[5] = meteor_corpus(cands, refs, syn);
    v[6] = cider(cands, refs).score;
    return v;
}

struct MetricReport {
    std::vector<MetricValues> runs; // raw values
    MetricValues mean{};            // x100
    MetricValues std{};             // x100, population

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        for (std::size_t m = 0; m < metric_names().size(); ++m)
            j[metric_names()[m]] = {{"mean", mean[m]}, {"std", std[m]}};
        return j;
    }

    std::string table() const {
        std::ostringstream os;
        char buf[64];
        for (const auto& n : metric_names()) {
            std::snprintf(buf, sizeof buf, "%-14s", n.c_str());
            os << buf;
        }
        os << '\n';
        for (std::size_t m = 0; m < metric_names().size(); ++m) {
            std::snprintf(buf, sizeof buf, "%.1f+-%.1f", mean[m], std[m]);
            char cell[64];
            std::snprintf(cell, sizeof cell, "%-14s", buf);
            os << cell;
        }
        os << '\n';
        return os.str();
    }
};

inline MetricReport aggregate_runs(const std::vector<MetricValues>& runs) {
    if (runs.empty()) throw ContractError("aggregate_runs: no runs");
    MetricReport rep;
    rep.runs = runs;
    const double n = static_cast<double>(runs.size());
    for (std::size_t m = 0; m < rep.mean.size(); ++m) {
        double acc = 0.0;
        for (const auto& r : runs) acc += r[m];
        const double mean = acc / n;
        double sq = 0.0;
        for (const auto& r : runs) sq += (r[m] - mean) * (r[m] - mean);
        rep.mean[m] = 100.0 * mean;
        rep.std[m] = 100.0 * std::sqrt(sq / n);
    }
    return rep;
}

// `generated[r][i]` is run r's sentence for sample i.
inline MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& generated,
                                    const std::vector<std::vector<std::string>>& references,
                                    const SynonymTable& syn = {}) {
    std::vector<MetricValues> runs;
    for (const auto& run : generated) {
        if (run.size() != references.size())
            throw ContractError("evaluate_corpus: run has " + std::to_string(run.size()) + " sentences for " +
                                std::to_string(references.size()) + " reference sets");
        runs.push_back(score_corpus(run, references, syn));
    }
    return aggregate_runs(runs);
}

} // namespace aben::metrics
