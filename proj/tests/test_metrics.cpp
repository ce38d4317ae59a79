#include <catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <map>

#include "metric_oracles.hpp"
#include "support.hpp"

using namespace aben;
using namespace aben::metrics;
using Catch::Matchers::WithinAbs;
using namespace oracle;

namespace {

constexpr int kCases = 60;

} // namespace

TEST_CASE("BLEU matches brute-force clipped counts") {
    Rng rng(1);
    int nonzero = 0;
    for (int t = 0; t < kCases; ++t) {
        const auto c = random_corpus(rng, 8);
        for (int n = 1; n <= 4; ++n) {
            const double expected = oracle_bleu(c.cands, c.refs, n);
            REQUIRE_THAT(bleu(c.cands, c.refs, n), WithinAbs(expected, 1e-9));
            if (n == 4 && expected > 0) ++nonzero;
        }
    }
    REQUIRE(nonzero >= 25);
}

TEST_CASE("BLEU examples") {
    const Tokens same = words("a red cup on the table");
    for (int n = 1; n <= 4; ++n) REQUIRE(bleu({same}, {{same}}, n) == 1.0);
    const auto st = bleu_stats({words("the the the the")}, {{words("the cat sat")}}, 1);
    REQUIRE(st.matches[0] == 1);
    REQUIRE(st.totals[0] == 4);
    REQUIRE(bleu({words("the the the the")}, {{words("the cat sat")}}, 1) == 0.25);
    REQUIRE_THAT(bleu({words("a b")}, {{words("a b c d")}}, 1), WithinAbs(std::exp(-1.0), 1e-15));
    REQUIRE_THAT(brevity_penalty(2, 4), WithinAbs(std::exp(-1.0), 1e-15));
    REQUIRE(bleu({words("a b c")}, {{words("d e f")}}, 2) == 0.0);
    REQUIRE_THROWS_AS(bleu({}, {}, 1), ContractError);
    REQUIRE_THROWS_AS(bleu({same}, {{same}}, 5), ContractError);
    REQUIRE_THROWS_AS(bleu({same}, {{same}, {same}}, 1), ContractError);
}

TEST_CASE("BLEU never drops when a non-matching token becomes a matching one") {
    Rng rng(2);
    for (int t = 0; t < 300; ++t) {
        auto c = random_corpus(rng, 8);
        auto& cand = c.cands[0];
        const std::size_t pos = rng.below(cand.size());
        cand[pos] = "zz"; // appears in no reference
        const auto& ref = c.refs[0][rng.below(c.refs[0].size())];
        auto better = c.cands;
        better[0][pos] = ref[rng.below(ref.size())];
        for (int n = 1; n <= 4; ++n) REQUIRE(bleu(better, c.refs, n) >= bleu(c.cands, c.refs, n));
    }
}

TEST_CASE("ROUGE-L matches exhaustive LCS") {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const Tokens a = random_tokens(rng, 0, 12), b = random_tokens(rng, 0, 12);
        REQUIRE(lcs_length(a, b) == oracle_lcs(a, b));
    }
    for (int t = 0; t < kCases; ++t) {
        const auto c = random_corpus(rng, 12);
        double expected = 0.0;
        for (std::size_t s = 0; s < c.cands.size(); ++s) {
            const double got = rouge_l(c.cands[s], c.refs[s]);
            REQUIRE_THAT(got, WithinAbs(oracle_rouge(c.cands[s], c.refs[s]), 1e-9));
            expected += oracle_rouge(c.cands[s], c.refs[s]);
        }
        REQUIRE_THAT(rouge_l_corpus(c.cands, c.refs), WithinAbs(expected / c.cands.size(), 1e-9));
    }
}

TEST_CASE("ROUGE-L examples") {
    REQUIRE(rouge_l_single(words("a b c"), words("a b c")) == 1.0);
    REQUIRE_THAT(rouge_l_single(words("a b c d"), words("a c d e")), WithinAbs(0.75, 1e-15));
    REQUIRE(rouge_l_single(words("a b"), words("c d")) == 0.0);
    REQUIRE(rouge_l_single({}, words("c d")) == 0.0);
    REQUIRE(rouge_l(words("a b c d"), {words("x"), words("a b c d")}) == 1.0);
}

TEST_CASE("METEOR matches alignment enumeration") {
    Rng rng(4);
    SynonymTable table;
    table.add("a", "b");
    table.add("c", "d");
    const Synonyms syn{{"a", "b"}, {"c", "d"}};
    for (int t = 0; t < kCases; ++t) {
        const auto c = random_corpus(rng, 8);
        REQUIRE_THAT(meteor_corpus(c.cands, c.refs), WithinAbs(oracle_meteor(c.cands, c.refs, {}), 1e-9));
        REQUIRE_THAT(meteor_corpus(c.cands, c.refs, table), WithinAbs(oracle_meteor(c.cands, c.refs, syn), 1e-9));
    }
}

TEST_CASE("METEOR examples") {
    REQUIRE(meteor(words("a b c"), {words("d e f")}) == 0.0);
    for (int m = 1; m <= 8; ++m) {
        Tokens s;
        for (int i = 0; i < m; ++i) s.push_back("w" + std::to_string(i));
        REQUIRE(meteor(s, {s}) == 1.0 - 0.5 * std::pow(1.0 / m, 3));
    }
    REQUIRE(meteor(words("cup"), {words("cup")}) == 0.5);
    SynonymTable syn;
    syn.add("big", "large");
    REQUIRE(meteor(words("big dog"), {words("large dog")}) < meteor(words("big dog"), {words("large dog")}, syn));
    REQUIRE(meteor(words("big dog"), {words("large dog")}, syn) == 1.0 - 0.5 / 8.0);
    // exact matches win over synonym matches
    const auto al = meteor_align(words("big"), words("large big"), syn);
    REQUIRE(al.exact == 1);
    REQUIRE(al.pairs == std::vector<std::pair<int, int>>{{0, 1}});
    REQUIRE(count_chunks({{0, 0}, {1, 1}, {3, 2}}) == 2);
}

TEST_CASE("synonym table files") {
    testing::TempDir dir("syn");
    {
        std::ofstream out(dir.path / "syn.txt");
        out << "big: large huge\n\nsmall: little\n";
    }
    const auto t = SynonymTable::load(dir.path / "syn.txt");
    REQUIRE(t.related("big", "huge"));
    REQUIRE(t.related("huge", "big"));
    REQUIRE(t.related("little", "small"));
    REQUIRE(!t.related("large", "huge"));
    {
        std::ofstream out(dir.path / "bad.txt");
        out << "big: large\nno colon here\n";
    }
    try {
        SynonymTable::load(dir.path / "bad.txt");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        REQUIRE(e.line() == 2);
    }
    REQUIRE_THROWS_AS(SynonymTable::load(dir.path / "absent.txt"), IoError);
}

TEST_CASE("CIDEr matches explicit TF-IDF cosine") {
    Rng rng(5);
    for (int t = 0; t < kCases; ++t) {
        auto c = random_corpus(rng, 8);
        if (c.cands.size() < 2) {
            c.cands.push_back(random_tokens(rng, 1, 8));
            c.refs.push_back({random_tokens(rng, 1, 8)});
        }
        const auto res = cider(c.cands, c.refs);
        REQUIRE_THAT(res.score, WithinAbs(oracle_cider(c.cands, c.refs), 1e-9));
        REQUIRE(res.score >= 0.0);
    }
}

TEST_CASE("CIDEr examples and renaming invariance") {
    const auto r = cider({words("red cup on table"), words("blue box under shelf")},
                         {{words("red cup on table")}, {words("blue box under shelf")}});
    REQUIRE_THAT(r.score, WithinAbs(10.0, 1e-12));
    REQUIRE(cider({words("a b"), words("c d")}, {{words("e f")}, {words("g h")}}).score == 0.0);
    const auto single = cider({words("a b")}, {{words("a b")}});
    REQUIRE(single.degenerate_idf);
    REQUIRE(single.score == 0.0);

    Rng rng(6);
    for (int t = 0; t < 30; ++t) {
        auto c = random_corpus(rng, 8);
        c.cands.push_back(random_tokens(rng, 1, 8));
        c.refs.push_back({random_tokens(rng, 1, 8)});
        std::vector<std::string> perm = kWords;
        rng.shuffle(perm);
        std::map<std::string, std::string> rename;
        for (std::size_t i = 0; i < kWords.size(); ++i) rename[kWords[i]] = "w_" + perm[i];
        auto relabel = [&](Tokens x) {
            for (auto& w : x) w = rename.at(w);
            return x;
        };
        Corpus d;
        for (std::size_t s = 0; s < c.cands.size(); ++s) {
            d.cands.push_back(relabel(c.cands[s]));
            d.refs.emplace_back();
            for (const auto& ref : c.refs[s]) d.refs.back().push_back(relabel(ref));
        }
        REQUIRE_THAT(cider(d.cands, d.refs).score, WithinAbs(cider(c.cands, c.refs).score, 1e-12));
    }
}

TEST_CASE("metrics are pure and bounded") {
    Rng rng(7);
    for (int t = 0; t < 30; ++t) {
        const auto c = random_corpus(rng, 8);
        for (int n = 1; n <= 4; ++n) {
            const double b = bleu(c.cands, c.refs, n);
            REQUIRE(b == bleu(c.cands, c.refs, n));
            REQUIRE(b >= 0.0);
            REQUIRE(b <= 1.0);
        }
        const double r = rouge_l_corpus(c.cands, c.refs), m = meteor_corpus(c.cands, c.refs);
        REQUIRE(r == rouge_l_corpus(c.cands, c.refs));
        REQUIRE(m == meteor_corpus(c.cands, c.refs));
        REQUIRE((r >= 0.0 && r <= 1.0));
        REQUIRE((m >= 0.0 && m <= 1.0));
    }
}

TEST_CASE("aggregation over runs") {
    MetricValues a{}, b{};
    a.fill(0.2);
    b.fill(0.4);
    const auto rep = aggregate_runs({a, b});
    for (std::size_t m = 0; m < 7; ++m) {
        REQUIRE_THAT(rep.mean[m], WithinAbs(30.0, 1e-12));
        REQUIRE_THAT(rep.std[m], WithinAbs(10.0, 1e-12));
    }
    const auto one = aggregate_runs({a});
    for (double s : one.std) REQUIRE(s == 0.0);
    REQUIRE_THROWS_AS(aggregate_runs({}), ContractError);

    REQUIRE(std::vector<std::string>(metric_names().begin(), metric_names().end()) ==
            std::vector<std::string>{"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE", "METEOR", "CIDEr"});
    const auto j = rep.to_json();
    std::vector<std::string> keys;
    for (const auto& [k, _] : j.items()) keys.push_back(k);
    REQUIRE(keys == std::vector<std::string>(metric_names().begin(), metric_names().end()));
    REQUIRE(j["CIDEr"]["mean"].get<double>() == rep.mean[6]);
    const std::string table = rep.table();
    std::size_t prev = 0;
    for (const auto& n : metric_names()) {
        const auto pos = table.find(n);
        REQUIRE(pos != std::string::npos);
        REQUIRE(pos >= prev);
        prev = pos;
    }
    REQUIRE(table.find("30.0+-10.0") != std::string::npos);
}

TEST_CASE("corpus evaluation") {
    const std::vector<std::vector<std::string>> refs{{"a red cup on the table"}, {"the blue box", "a blue box"}};
    const auto rep = evaluate_corpus({{"a red cup on the table", "the blue box"}}, refs);
    REQUIRE(rep.runs.size() == 1);
    REQUIRE_THAT(rep.mean[0], WithinAbs(100.0, 1e-12));
    REQUIRE_THAT(rep.mean[4], WithinAbs(100.0, 1e-12));
    for (double s : rep.std) REQUIRE(s == 0.0);
    const auto direct = score_corpus({"a red cup on the table", "the blue box"}, refs);
    for (std::size_t m = 0; m < 7; ++m) REQUIRE(rep.mean[m] == 100.0 * direct[m]);
    REQUIRE_THROWS_AS(evaluate_corpus({{"a red cup on the table"}}, refs), ContractError);
    REQUIRE_THROWS_AS(score_corpus({"x"}, refs), ContractError);
}
