#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace aben;
using Catch::Matchers::WithinAbs;

namespace {

GenerationBranch make_gen(nn::ParameterStore& store, int d, int n, int v, std::uint64_t seed) {
    Rng rng(seed);
    return GenerationBranch(store, {d, n, v}, rng);
}

ag::Var random_rows(int batch, int width, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(batch) * width);
    for (double& x : v) x = rng.normal();
    return ag::constant({batch, width}, std::move(v));
}

} // namespace

TEST_CASE("fused input length") {
    REQUIRE(GenerationConfig{768, 10, 5}.fused_dim() == 8448);
    nn::ParameterStore store;
    const auto gen = make_gen(store, 4, 2, 6, 1);
    REQUIRE(gen.fc1().in_features() == 12);
    REQUIRE(gen.fc1().out_features() == 4);
    REQUIRE(gen.fc2().out_features() == 4);
    REQUIRE(gen.head().out_features() == 6);
}

TEST_CASE("zero weights give a uniform distribution") {
    nn::ParameterStore store;
    const auto gen = make_gen(store, 4, 2, 6, 2);
    for (const auto& e : store.entries()) std::fill(e.var->value.begin(), e.var->value.end(), 0.0);
    Rng rng(3);
    const auto logits = gen.forward(random_rows(2, 4, rng), random_rows(2, 8, rng));
    for (const auto& p : softmax_rows(logits))
        for (double x : p) REQUIRE_THAT(x, WithinAbs(1.0 / 6, 1e-15));
}

TEST_CASE("forward matches a direct evaluation of the FC stack") {
    nn::ParameterStore store;
    const int d = 3, n = 2, v = 5;
    const auto gen = make_gen(store, d, n, v, 4);
    for (const auto& e : store.entries())
        for (std::size_t i = 0; i < e.var->size(); ++i) e.var->value[i] = 0.3 * std::cos(1.7 * static_cast<double>(i) + 0.2);
    Rng rng(5);
    const auto h = random_rows(1, d, rng), l = random_rows(1, n * d, rng);
    auto dense = [](const nn::Linear& f, const std::vector<double>& x) {
        std::vector<double> y(static_cast<std::size_t>(f.out_features()));
        for (int o = 0; o < f.out_features(); ++o) {
            double acc = f.bias->value[o];
            for (int i = 0; i < f.in_features(); ++i) acc += f.weight->value[o * f.in_features() + i] * x[i];
            y[o] = acc;
        }
        return y;
    };
    std::vector<double> x(h->value);
    x.insert(x.end(), l->value.begin(), l->value.end());
    auto a = dense(gen.fc1(), x);
    for (double& t : a) t = std::max(t, 0.0);
    const auto expected = dense(gen.head(), dense(gen.fc2(), a));
    const auto logits = gen.forward(h, l);
    for (int i = 0; i < v; ++i) REQUIRE_THAT(logits->value[i], WithinAbs(expected[i], 1e-14));
}

TEST_CASE("P_g is normalised and shapes are enforced") {
    nn::ParameterStore store;
    const auto gen = make_gen(store, 5, 3, 9, 6);
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial)
        for (const auto& p : softmax_rows(gen.forward(random_rows(3, 5, rng), random_rows(3, 15, rng)))) {
            double s = 0.0;
            for (double x : p) s += x;
            REQUIRE_THAT(s, WithinAbs(1.0, 1e-6));
        }
    REQUIRE_THROWS_AS(gen.forward(ag::zeros({1, 4}), ag::zeros({1, 15})), ShapeError);
    REQUIRE_THROWS_AS(gen.forward(ag::zeros({1, 5}), ag::zeros({1, 14})), ShapeError);
}

TEST_CASE("raising a logit raises its probability") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> logits(7);
        for (double& x : logits) x = 3 * rng.normal();
        const std::size_t t = rng.below(7);
        const auto before = ag::softmax_row(logits);
        logits[t] += rng.uniform(0.01, 2.0);
        const auto after = ag::softmax_row(logits);
        REQUIRE(after[t] > before[t]);
    }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    REQUIRE(argmax(std::vector<double>{0.1, 0.4, 0.4, 0.1}) == 1);
    REQUIRE(argmax(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == 0);
    REQUIRE(argmax(std::vector<double>{0.0, 0.0, 1.0}) == 2);
}

TEST_CASE("generation loss") {
    REQUIRE(gen_loss({{0, 0, 1}}, {2}) == 0.0);
    REQUIRE_THAT(gen_loss({std::vector<double>(100, 0.01)}, {42}), WithinAbs(std::log(100.0), 1e-12));
    std::vector<std::vector<double>> steps;
    std::vector<int> labels;
    double sum = 0.0;
    Rng rng(9);
    for (int k = 0; k < 5; ++k) {
        steps.push_back(ag::softmax_row(std::vector<double>{rng.normal(), rng.normal(), rng.normal()}));
        labels.push_back(static_cast<int>(rng.below(3)));
        sum += branch_cross_entropy(steps.back(), labels.back());
    }
    REQUIRE(gen_loss(steps, labels) == sum);
}

TEST_CASE("flattened context round trips") {
    Rng rng(10);
    std::vector<ag::Var> slots;
    for (int j = 0; j < 3; ++j) slots.push_back(random_rows(2, 4, rng));
    const auto stacked = ag::stack_slots(slots);
    const auto rows = ag::slots_to_rows(stacked);
    // unflatten by hand
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < 3; ++j)
            for (int c = 0; c < 4; ++c)
                REQUIRE(stacked->value[(static_cast<std::size_t>(b) * 4 + c) * 3 + j] == rows->value[b * 12 + j * 4 + c]);
}

TEST_CASE("generation branch gradients match finite differences") {
    nn::ParameterStore store;
    const auto gen = make_gen(store, 4, 2, 6, 11);
    Rng rng(12);
    const auto h = random_rows(3, 4, rng), l = random_rows(3, 8, rng);
    auto loss = [&] { return ag::softmax_cross_entropy(gen.forward(h, l), {0, 3, 5}, 1.0); };
    auto res = testing::grad_check(testing::trainable_named(store), loss, rng, 40);
    INFO(res.worst);
    REQUIRE(res.max_rel_error < 1e-4);
}
