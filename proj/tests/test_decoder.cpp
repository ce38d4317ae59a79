#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace aben;
using Catch::Matchers::WithinAbs;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Decoder make_decoder(nn::ParameterStore& store, DecoderConfig cfg, std::uint64_t seed) {
    Rng rng(seed);
    return Decoder(store, cfg, rng);
}

ag::Var row(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return ag::constant({1, n}, std::move(v));
}

} // namespace

TEST_CASE("decoder rejects invalid configurations") {
    nn::ParameterStore store;
    REQUIRE_THROWS_AS(make_decoder(store, {0, 4, 2, 2, 5}, 1), ConfigError);
    nn::ParameterStore store2;
    REQUIRE_THROWS_AS(make_decoder(store2, {1, 0, 2, 2, 5}, 1), ConfigError);
}

TEST_CASE("initial state from the scene encoding") {
    nn::ParameterStore store;
    const auto dec = make_decoder(store, {3, 16, 5, 4, 23}, 2);
    const auto zero = dec.init(ag::zeros({1, 23}));
    REQUIRE(zero.step == 0);
    REQUIRE(zero.history.empty());
    REQUIRE(zero.hidden.size() == 3);
    for (int l = 0; l < 3; ++l) {
        REQUIRE(zero.hidden[l]->shape == ag::Shape{1, 16});
        REQUIRE(zero.cell[l]->shape == ag::Shape{1, 16});
        for (double v : zero.hidden[l]->value) REQUIRE(v == 0.0);
        for (double v : zero.cell[l]->value) REQUIRE(v == 0.0);
    }
    Rng rng(3);
    std::vector<double> x(23);
    for (double& v : x) v = rng.normal();
    const auto a = dec.init(row(x)), b = dec.init(row(x));
    REQUIRE(a.hidden[0]->value == b.hidden[0]->value);
    REQUIRE(a.hidden[0]->value == a.encoder_projection->value);
    REQUIRE(a.cell[0]->value == a.encoder_projection->value);
    for (double v : a.hidden[1]->value) REQUIRE(v == 0.0);

    x[4] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(dec.init(row(x)), NumericError);
    REQUIRE_THROWS_AS(dec.init(ag::zeros({1, 22})), ShapeError);
}

TEST_CASE("single-layer step matches hand LSTM arithmetic") {
    const int d = 4, e = 2, v = 3, enc = 5;
    nn::ParameterStore store;
    const auto dec = make_decoder(store, {1, d, e, v, enc}, 4);
    // deterministic hand-set weights
    auto set = [](const ag::Var& p, double scale, double offset) {
        for (std::size_t i = 0; i < p->size(); ++i) p->value[i] = scale * std::sin(0.37 * static_cast<double>(i) + offset);
    };
    set(dec.projection().weight, 0.5, 0.1);
    set(dec.projection().bias, 0.2, 0.7);
    set(dec.gates(0).weight, 0.4, 1.3);
    set(dec.gates(0).bias, 0.3, 2.1);

    const std::vector<double> x_f{0.3, -0.2, 0.9, 0.05, -0.6};
    const std::vector<double> emb{0.25, -0.75};
    const std::vector<double> vis{0.1, 0.4, -0.3};

    // hand evaluation
    const auto& P = dec.projection().weight->value;
    const auto& pb = dec.projection().bias->value;
    std::vector<double> h0(d), c0(d);
    for (int j = 0; j < d; ++j) {
        double acc = pb[j];
        for (int i = 0; i < enc; ++i) acc += P[j * enc + i] * x_f[i];
        h0[j] = c0[j] = acc;
    }
    std::vector<double> in;
    in.insert(in.end(), emb.begin(), emb.end());
    in.insert(in.end(), vis.begin(), vis.end());
    in.insert(in.end(), h0.begin(), h0.end());
    const auto& W = dec.gates(0).weight->value;
    const auto& gb = dec.gates(0).bias->value;
    const int width = static_cast<int>(in.size());
    std::vector<double> z(4 * d);
    for (int r = 0; r < 4 * d; ++r) {
        double acc = gb[r];
        for (int i = 0; i < width; ++i) acc += W[r * width + i] * in[i];
        z[r] = acc;
    }
    std::vector<double> expected(d);
    for (int j = 0; j < d; ++j) {
        const double ig = sig(z[j]), fg = sig(z[d + j]), gg = std::tanh(z[2 * d + j]), og = sig(z[3 * d + j]);
        const double c = fg * c0[j] + ig * gg;
        expected[j] = og * std::tanh(c);
    }

    auto st = dec.init(row(x_f));
    const auto h1 = dec.step(st, row(emb), row(vis));
    for (int j = 0; j < d; ++j) REQUIRE_THAT(h1->value[j], WithinAbs(expected[j], 1e-6));
    REQUIRE(st.step == 1);
    REQUIRE(st.history.size() == 1);
}

TEST_CASE("zero weights give zero outputs at every step") {
    nn::ParameterStore store;
    const auto dec = make_decoder(store, {2, 6, 3, 4, 11}, 5);
    for (const auto& e : store.entries()) std::fill(e.var->value.begin(), e.var->value.end(), 0.0);
    Rng rng(6);
    std::vector<double> x(11);
    for (double& v : x) v = rng.normal();
    auto st = dec.init(row(x));
    for (int k = 0; k < 5; ++k) {
        const auto h = dec.step(st, row({0.3, 0.1, -0.2}), row({1, 2, 3, 4}));
        for (double v : h->value) REQUIRE(v == 0.0);
    }
}

TEST_CASE("history tracks the step counter and outputs stay in (-1, 1)") {
    nn::ParameterStore store;
    const auto dec = make_decoder(store, {3, 8, 4, 5, 25}, 7);
    Rng rng(8);
    std::vector<double> x(2 * 25);
    for (double& v : x) v = 3 * rng.normal();
    auto st = dec.init(ag::constant({2, 25}, x));
    for (int k = 1; k <= 12; ++k) {
        std::vector<double> e(8), v(10);
        for (double& a : e) a = 2 * rng.normal();
        for (double& a : v) a = 2 * rng.normal();
        const auto h = dec.step(st, ag::constant({2, 4}, e), ag::constant({2, 5}, v));
        REQUIRE(h->shape == ag::Shape{2, 8});
        REQUIRE(st.step == k);
        REQUIRE(st.history.size() == static_cast<std::size_t>(k));
        for (double a : h->value) {
            REQUIRE(a > -1.0);
            REQUIRE(a < 1.0);
        }
    }
    REQUIRE_THROWS_AS(dec.step(st, ag::zeros({2, 3}), ag::zeros({2, 5})), ShapeError);
    REQUIRE_THROWS_AS(dec.step(st, ag::zeros({2, 4}), ag::zeros({2, 6})), ShapeError);
}

TEST_CASE("decoder gradients match finite differences") {
    nn::ParameterStore store;
    const auto dec = make_decoder(store, {2, 8, 3, 4, 9}, 9);
    Rng rng(10);
    std::vector<double> x(2 * 9), e(2 * 3 * 4), v(2 * 4 * 4);
    for (auto* vec : {&x, &e, &v})
        for (double& a : *vec) a = rng.normal();
    const std::vector<int> labels{3, 5};
    auto loss = [&] {
        auto st = dec.init(ag::constant({2, 9}, x));
        std::vector<ag::Var> terms;
        for (int k = 0; k < 4; ++k) {
            auto ek = ag::constant({2, 3}, {e.begin() + k * 6, e.begin() + (k + 1) * 6});
            auto vk = ag::constant({2, 4}, {v.begin() + k * 8, v.begin() + (k + 1) * 8});
            terms.push_back(ag::softmax_cross_entropy(dec.step(st, ek, vk), labels, 0.5));
        }
        return ag::sum_scalars(terms);
    };
    auto res = testing::grad_check(testing::trainable_named(store), loss, rng, 40);
    INFO(res.worst);
    REQUIRE(res.max_rel_error < 1e-4);
}
