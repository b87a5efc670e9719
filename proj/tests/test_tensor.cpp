// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "soq/tensor.hpp"
#include "test_support.hpp"

using namespace soq;
using namespace soq::ad;
using soq::test::gradcheck;
using soq::test::random_leaf;

TEST_CASE("elementwise forward values") {
    auto a = constant({2, 2}, {1, 2, 3, 4});
    auto b = constant({2, 2}, {5, 6, 7, 8});
    CHECK(add(a, b)->val == std::vector<double>{6, 8, 10, 12});
    CHECK(sub(b, a)->val == std::vector<double>{4, 4, 4, 4});
    CHECK(mul(a, b)->val == std::vector<double>{5, 12, 21, 32});
    CHECK(scale(a, 2.0)->val == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("matmul forward") {
    auto a = constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = constant({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = matmul(a, b);
    CHECK(c->val == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("backward through a small expression") {
    // f = sum((a*b + a)^2); df/da = 2(ab+a)(b+1), df/db = 2(ab+a)a
    auto a = leaf({2}, {1.0, -2.0});
    auto b = leaf({2}, {3.0, 0.5});
    auto f = sum(square(add(mul(a, b), a)));
    backward(f);
    CHECK(a->grad[0] == Catch::Approx(2.0 * 4.0 * 4.0));
    CHECK(a->grad[1] == Catch::Approx(2.0 * -3.0 * 1.5));
    CHECK(b->grad[0] == Catch::Approx(2.0 * 4.0 * 1.0));
    CHECK(b->grad[1] == Catch::Approx(2.0 * -3.0 * -2.0));
}

TEST_CASE("gradcheck core ops") {
    Rng rng(7);
    SECTION("matmul + relu + sum") {
        auto a = random_leaf({3, 4}, rng);
        auto b = random_leaf({4, 5}, rng);
        auto f = [&] { return sum(relu(matmul(a, b))); };
        CHECK(gradcheck(a, f) < 1e-6);
        CHECK(gradcheck(b, f) < 1e-6);
    }
    SECTION("linear") {
        auto x = random_leaf({4, 3}, rng);
        auto W = random_leaf({6, 3}, rng);
        auto b = random_leaf({6}, rng);
        auto f = [&] { return sum(tanh_(linear(x, W, b))); };
        CHECK(gradcheck(x, f) < 1e-6);
        CHECK(gradcheck(W, f) < 1e-6);
        CHECK(gradcheck(b, f) < 1e-6);
    }
    SECTION("softmax rows") {
        auto x = random_leaf({3, 5}, rng);
        auto w = random_leaf({3, 5}, rng);
        auto f = [&] { return sum(mul(softmax_rows(x), w)); };
        CHECK(gradcheck(x, f) < 1e-6);
    }
    SECTION("masked softmax") {
        auto x = random_leaf({2, 4}, rng);
        auto w = random_leaf({2, 4}, rng);
        std::vector<uint8_t> mask = {1, 1, 0, 0, 1, 1, 1, 0};
        auto f = [&] { return sum(mul(softmax_rows(x, mask), w)); };
        CHECK(gradcheck(x, f) < 1e-6);
    }
    SECTION("log_softmax rows") {
        auto x = random_leaf({3, 4}, rng);
        auto w = random_leaf({3, 4}, rng);
        auto f = [&] { return sum(mul(log_softmax_rows(x), w)); };
        CHECK(gradcheck(x, f) < 1e-6);
    }
    SECTION("layer_norm") {
        auto x = random_leaf({4, 6}, rng);
        auto g = random_leaf({6}, rng);
        auto b = random_leaf({6}, rng);
        auto w = random_leaf({4, 6}, rng);
        auto f = [&] { return sum(mul(layer_norm(x, g, b), w)); };
        CHECK(gradcheck(x, f) < 1e-5);
        CHECK(gradcheck(g, f) < 1e-6);
        CHECK(gradcheck(b, f) < 1e-6);
    }
    SECTION("unary chain") {
        auto x = random_leaf({5}, rng, 0.5);
        auto f = [&] { return sum(mul(gelu(x), sigmoid(softplus(x)))); };
        CHECK(gradcheck(x, f) < 1e-5);
    }
    SECTION("concat and slice") {
        auto a = random_leaf({2, 3}, rng);
        auto b = random_leaf({3, 2}, rng);
        auto f = [&] {
            auto cat = concat_rows({a, transpose2d(b)});
            return sum(square(slice_rows(cat, 1, 4)));
        };
        CHECK(gradcheck(a, f) < 1e-6);
        CHECK(gradcheck(b, f) < 1e-6);
        auto g = [&] {
            auto cat = concat_cols({transpose2d(a), b});
            return sum(square(slice_cols(cat, 1, 4)));
        };
        CHECK(gradcheck(a, g) < 1e-6);
        CHECK(gradcheck(b, g) < 1e-6);
    }
    SECTION("gather_rows") {
        auto t = random_leaf({5, 3}, rng);
        std::vector<int64_t> ids = {4, 0, 0, 2};
        auto f = [&] { return sum(square(gather_rows(t, ids))); };
        CHECK(gradcheck(t, f) < 1e-6);
    }
    SECTION("mul_colvec and add_rowvec") {
        auto x = random_leaf({3, 4}, rng);
        auto s = random_leaf({3}, rng);
        auto b = random_leaf({4}, rng);
        auto f = [&] { return sum(square(add_rowvec(mul_colvec(x, s), b))); };
        CHECK(gradcheck(x, f) < 1e-6);
        CHECK(gradcheck(s, f) < 1e-6);
        CHECK(gradcheck(b, f) < 1e-6);
    }
    SECTION("cross entropy") {
        auto x = random_leaf({4, 6}, rng);
        std::vector<int64_t> targets = {1, 5};
        std::vector<int64_t> positions = {0, 2};
        auto f = [&] { return cross_entropy_rows(x, targets, positions); };
        CHECK(gradcheck(x, f) < 1e-6);
    }
}

TEST_CASE("detach blocks gradient") {
    auto x = leaf({2}, {1.0, 2.0});
    auto f = sum(mul(detach(x), x));  // d/dx = detached value only
    backward(f);
    CHECK(x->grad[0] == Catch::Approx(1.0));
    CHECK(x->grad[1] == Catch::Approx(2.0));
}

TEST_CASE("shared subexpression accumulates once per use") {
    auto x = leaf({1}, {3.0});
    auto y = square(x);           // y = 9
    auto f = sum(add(y, y));      // f = 2x^2, df/dx = 4x = 12
    backward(f);
    CHECK(x->grad[0] == Catch::Approx(12.0));
}

TEST_CASE("backward requires scalar root") {
    auto x = leaf({2}, {1.0, 2.0});
    CHECK_THROWS_AS(backward(square(x)), InvalidArgument);
}
