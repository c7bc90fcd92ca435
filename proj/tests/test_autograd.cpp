#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>

#include "rafe/autograd.hpp"

using namespace rafe;

namespace {

// Central finite differences over every coordinate of every leaf.
using Builder = std::function<Value(std::map<std::string, Value>&)>;

void check_gradients(std::map<std::string, Tensor> params, const Builder& build,
                     double h = 1e-6, double tol = 1e-5) {
    std::map<std::string, Value> leaves;
    for (auto& [name, t] : params) leaves[name] = make_leaf(t);
    Value loss = build(leaves);
    backward(loss);

    for (auto& [name, t] : params) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double saved = t.data[i];
            auto eval = [&](double v) {
                t.data[i] = v;
                std::map<std::string, Value> fresh;
                for (auto& [n2, t2] : params) fresh[n2] = make_const(t2);
                return build(fresh)->value.data[0];
            };
            const double fd = (eval(saved + h) - eval(saved - h)) / (2.0 * h);
            t.data[i] = saved;
            const double got = leaves[name]->grad.data.empty() ? 0.0 : leaves[name]->grad.data[i];
            const double denom = std::max({std::abs(fd), std::abs(got), 1e-4});
            CHECK_MESSAGE(std::abs(fd - got) / denom < tol,
                          name << "[" << i << "]: analytic " << got << " vs fd " << fd);
        }
    }
}

Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed, double std_dev = 0.5) {
    SplitMix64 rng(seed);
    return Tensor::randn(std::move(shape), rng, std_dev);
}

}  // namespace

TEST_CASE("grad of 0.5*|x|^2 is x") {
    Tensor t = randn({3, 4}, 11);
    Value x = make_leaf(t);
    Value loss = scale(sum(mul(x, x)), 0.5);
    backward(loss);
    for (std::size_t i = 0; i < t.data.size(); ++i)
        CHECK(x->grad.data[i] == doctest::Approx(t.data[i]).epsilon(1e-12));
}

TEST_CASE("loss independent of a leaf leaves zero gradient") {
    Value x = make_leaf(randn({4}, 3));
    Value loss = sum(sub(x, x));
    backward(loss);
    for (double g : x->grad.data) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-finite and non-scalar roots") {
    Value x = make_leaf(Tensor::vector({0.0}));
    CHECK_THROWS_AS(backward(log_v(x)), Error);  // log(0) = -inf
    Value y = make_leaf(randn({3}, 5));
    CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("matmul gradients") {
    std::map<std::string, Tensor> params{{"a", randn({3, 4}, 21)}, {"b", randn({4, 2}, 22)}};
    check_gradients(params, [](auto& p) { return sum(matmul(p["a"], p["b"])); });
    check_gradients(params, [](auto& p) {
        return mean(mul(matmul(p["a"], p["b"]), matmul(p["a"], p["b"])));
    });
}

TEST_CASE("matmul_nt gradients") {
    std::map<std::string, Tensor> params{{"a", randn({3, 4}, 31)}, {"b", randn({5, 4}, 32)}};
    check_gradients(params, [](auto& p) { return sum(mul(matmul_nt(p["a"], p["b"]),
                                                         matmul_nt(p["a"], p["b"]))); });
}

TEST_CASE("elementwise op gradients") {
    std::map<std::string, Tensor> params{{"x", randn({2, 3}, 41)}, {"y", randn({2, 3}, 42)}};
    check_gradients(params, [](auto& p) { return sum(mul(p["x"], p["y"])); });
    check_gradients(params, [](auto& p) { return sum(sub(scale(p["x"], 1.7), p["y"])); });
    check_gradients(params, [](auto& p) { return sum(gelu(p["x"])); });
    check_gradients(params, [](auto& p) { return sum(sigmoid(mul(p["x"], p["y"]))); });
    check_gradients(params, [](auto& p) { return sum(exp_v(p["x"])); });
    check_gradients(params, [](auto& p) { return sum(log_sigmoid(p["x"])); });
    check_gradients(params, [](auto& p) { return sum(log_v(add_scalar(mul(p["x"], p["x"]), 0.5))); });
}

TEST_CASE("min and clamp subgradients away from kinks") {
    std::map<std::string, Tensor> params{{"x", randn({6}, 51)}, {"y", randn({6}, 52)}};
    check_gradients(params, [](auto& p) { return sum(minimum(p["x"], p["y"])); });
    check_gradients(params, [](auto& p) { return sum(clamp(p["x"], -0.3, 0.3)); });
}

TEST_CASE("structural op gradients") {
    std::map<std::string, Tensor> params{{"t", randn({5, 4}, 61)}};
    check_gradients(params, [](auto& p) { return sum(rows(p["t"], {0, 2, 2, 4})); });
    check_gradients(params, [](auto& p) { return sum(mul(col_slice(p["t"], 1, 3),
                                                         col_slice(p["t"], 1, 3))); });
    check_gradients(params, [](auto& p) {
        return sum(concat_cols({col_slice(p["t"], 0, 1), col_slice(p["t"], 2, 4)}));
    });
    check_gradients(params, [](auto& p) { return sum(pick(p["t"], {{0, 1}, {3, 2}, {4, 0}})); });
}

TEST_CASE("normalization gradients") {
    std::map<std::string, Tensor> params{{"x", randn({3, 6}, 71)},
                                         {"g", randn({6}, 72)},
                                         {"b", randn({6}, 73)}};
    check_gradients(params, [](auto& p) {
        return sum(mul(layer_norm(p["x"], p["g"], p["b"]), layer_norm(p["x"], p["g"], p["b"])));
    });
    check_gradients(params, [](auto& p) {
        Value s = softmax_rows(p["x"]);
        return sum(mul(s, s));
    });
    check_gradients(params, [](auto& p) { return sum(pick(log_softmax_rows(p["x"]),
                                                          {{0, 1}, {1, 4}, {2, 0}})); });
    check_gradients(params, [](auto& p) {
        Value sq = matmul_nt(p["x"], p["x"]);  // [3,3] square for the causal mask
        return sum(mul(softmax_rows(causal_mask(sq)), softmax_rows(causal_mask(sq))));
    });
}

TEST_CASE("softmax rows sum to one") {
    Value x = make_const(randn({4, 9}, 81, 2.0));
    Value s = softmax_rows(x);
    for (std::size_t i = 0; i < 4; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 9; ++j) total += s->value.at(i, j);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reduction and stack gradients") {
    std::map<std::string, Tensor> params{{"x", randn({7}, 91)}};
    check_gradients(params, [](auto& p) { return mean(mul(p["x"], p["x"])); });
    check_gradients(params, [](auto& p) {
        std::vector<Value> parts;
        parts.push_back(sum(p["x"]));
        parts.push_back(mean(p["x"]));
        parts.push_back(sum(mul(p["x"], p["x"])));
        return mean(stack_scalars(parts));
    });
}

TEST_CASE("gradient accumulates when a leaf is used twice") {
    Tensor t = randn({3}, 101);
    Value x = make_leaf(t);
    Value loss = sum(add(x, x));
    backward(loss);
    for (double g : x->grad.data) CHECK(g == doctest::Approx(2.0));
}
