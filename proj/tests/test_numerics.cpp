#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <promode/gradcheck.hpp>

using namespace promode;

namespace {

using T = Tensor<double>;

T random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(numel(shape));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return T::from_data(std::move(shape), std::move(d));
}

// fixed random weights reduce any output to a non-degenerate scalar
T to_scalar(const T& out, uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor(rng, out.shape());
    return sum_all(mul(out, w));
}

constexpr double kTol = 1e-4;

// runs grad_check on op(x) for one input over several shapes
void check_unary(const char* name, const std::function<T(const T&)>& op,
                 const std::vector<Shape>& shapes, double lo = -1.0,
                 double hi = 1.0) {
    for (size_t s = 0; s < shapes.size(); ++s) {
        Rng rng(mix_seed(0x100, s, std::hash<std::string>{}(name)));
        auto x = random_tensor(rng, shapes[s], lo, hi);
        auto res = grad_check([&]() { return to_scalar(op(x), 7 + s); }, {x});
        INFO(name, " shape ", shape_str(shapes[s]), " err ", res.max_rel_error);
        CHECK(res.ok(kTol));
    }
}

void check_binary(const char* name, const std::function<T(const T&, const T&)>& op,
                  const std::vector<std::pair<Shape, Shape>>& shapes,
                  double lo = -1.0, double hi = 1.0) {
    for (size_t s = 0; s < shapes.size(); ++s) {
        Rng rng(mix_seed(0x200, s, std::hash<std::string>{}(name)));
        auto a = random_tensor(rng, shapes[s].first, lo, hi);
        auto b = random_tensor(rng, shapes[s].second, lo, hi);
        auto res = grad_check([&]() { return to_scalar(op(a, b), 9 + s); }, {a, b});
        INFO(name, " shapes ", shape_str(shapes[s].first), " ",
             shape_str(shapes[s].second), " err ", res.max_rel_error);
        CHECK(res.ok(kTol));
    }
}

} // namespace

TEST_CASE("matmul identity: I3 * X == X") {
    Rng rng(1);
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    auto I = T::from_data({3, 3}, eye);
    for (size_t k : {1, 4, 7}) {
        auto x = random_tensor(rng, {3, k});
        auto y = matmul(I, x);
        REQUIRE(y.shape() == x.shape());
        for (size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }
}

TEST_CASE("softmax symmetry and row normalization") {
    auto y = softmax_rows(T::from_data({1, 4}, {0, 0, 0, 0}));
    for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(2);
    auto x = random_tensor(rng, {5, 9}, -4.0, 4.0);
    auto s = softmax_rows(x);
    for (size_t r = 0; r < 5; ++r) {
        double sum = 0;
        for (size_t c = 0; c < 9; ++c) sum += s.data()[r * 9 + c];
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("layernorm rows standardize before affine") {
    Rng rng(3);
    auto x = random_tensor(rng, {6, 16}, -3.0, 3.0);
    auto y = layernorm_rows(x);
    for (size_t r = 0; r < 6; ++r) {
        double mu = 0, var = 0;
        for (size_t c = 0; c < 16; ++c) mu += y.data()[r * 16 + c];
        mu /= 16;
        for (size_t c = 0; c < 16; ++c) {
            double d = y.data()[r * 16 + c] - mu;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mu) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("GRN matches an independent scalar-loop oracle") {
    // batch of two 4x8 inputs (the oracle recomputes the ConvNeXt-V2 formula:
    // Gx = per-channel L2 over time, Nx = Gx / (mean(Gx) + eps),
    // out = gamma * x * Nx + beta + x)
    Rng rng(4);
    for (int rep = 0; rep < 2; ++rep) {
        size_t t = 4, c = 8;
        auto x = random_tensor(rng, {t, c});
        auto gamma = random_tensor(rng, {c});
        auto beta = random_tensor(rng, {c});
        auto y = grn(x, gamma, beta);

        const double eps = 1e-6;
        std::vector<double> gx(c, 0.0);
        for (size_t ci = 0; ci < c; ++ci) {
            for (size_t ti = 0; ti < t; ++ti) {
                double v = x.data()[ti * c + ci];
                gx[ci] += v * v;
            }
            gx[ci] = std::sqrt(gx[ci]);
        }
        double mean_gx = 0;
        for (double g : gx) mean_gx += g;
        mean_gx /= double(c);
        for (size_t ti = 0; ti < t; ++ti)
            for (size_t ci = 0; ci < c; ++ci) {
                double nx = gx[ci] / (mean_gx + eps);
                double expect = gamma.data()[ci] * x.data()[ti * c + ci] * nx +
                                beta.data()[ci] + x.data()[ti * c + ci];
                CHECK(std::abs(y.data()[ti * c + ci] - expect) < 1e-9);
            }
    }
}

TEST_CASE("forward is pure: identical inputs give bit-identical outputs") {
    Rng rng(5);
    auto q = random_tensor(rng, {6, 8});
    auto k = random_tensor(rng, {9, 8});
    auto v = random_tensor(rng, {9, 8});
    auto a1 = attention(q, k, v, 2);
    auto a2 = attention(q, k, v, 2);
    REQUIRE(a1.size() == a2.size());
    for (size_t i = 0; i < a1.size(); ++i) CHECK(a1.data()[i] == a2.data()[i]);
}

TEST_CASE("d/dx sum(2x) is all twos") {
    Rng rng(6);
    auto x = random_tensor(rng, {3, 5});
    x.set_requires_grad(true);
    sum_all(scale(x, 2.0)).backward();
    for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward on separately built graphs accumulates leaf gradients") {
    auto x = T::from_data({3}, {1.0, 2.0, 3.0}, true);
    sum_all(square(x)).backward();
    std::vector<double> once = x.grad();
    for (size_t i = 0; i < 3; ++i)
        CHECK(once[i] == doctest::Approx(2 * x.data()[i]));
    sum_all(square(x)).backward(); // fresh graph, same leaf
    for (size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE("backward rejects non-scalar outputs") {
    auto x = T::from_data({2, 2}, {1, 2, 3, 4}, true);
    CHECK_THROWS_WITH_AS(square(x).backward(),
                         doctest::Contains("must be scalar"), Error);
}

TEST_CASE("shape mismatch names the op and shapes") {
    auto a = T::zeros({2, 3});
    auto b = T::zeros({3, 2});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), Error);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2x3]"), Error);
    CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("matmul"), Error);
}

TEST_CASE("grad_check exactness and kink detection") {
    auto x = T::from_data({1}, {3.0});
    auto r = grad_check([&]() { return square(x); }, {x});
    CHECK(r.max_rel_error < 1e-8);

    auto z = T::from_data({1}, {0.0});
    auto rk = grad_check([&]() { return abs_(z); }, {z});
    CHECK_FALSE(rk.ok(kTol)); // |x| at 0 must be reported, not silently passed
}

TEST_CASE("elementwise op gradients vs finite differences") {
    std::vector<Shape> shapes = {{7}, {3, 5}, {2, 9}};
    check_unary("relu", [](const T& x) { return relu(x); }, shapes, 0.1, 2.0);
    check_unary("relu_neg", [](const T& x) { return relu(x); }, shapes, -2.0, -0.1);
    check_unary("sigmoid", [](const T& x) { return sigmoid(x); }, shapes, -3.0, 3.0);
    check_unary("gelu", [](const T& x) { return gelu(x); }, shapes, -3.0, 3.0);
    check_unary("exp", [](const T& x) { return exp_(x); }, shapes, -2.0, 2.0);
    check_unary("log", [](const T& x) { return log_(x); }, shapes, 0.2, 4.0);
    check_unary("abs", [](const T& x) { return abs_(x); }, shapes, 0.2, 2.0);
    check_unary("sqrt", [](const T& x) { return sqrt_(x); }, shapes, 0.2, 4.0);
    check_unary("square", [](const T& x) { return square(x); }, shapes);
    check_unary("reciprocal", [](const T& x) { return reciprocal(x); }, shapes, 0.5, 3.0);
    check_unary("softplus", [](const T& x) { return softplus(x); }, shapes, -3.0, 3.0);
    check_unary("scale", [](const T& x) { return scale(x, 1.7); }, shapes);
    check_unary("add_const", [](const T& x) { return add_const(x, 0.3); }, shapes);
}

TEST_CASE("binary op gradients vs finite differences") {
    std::vector<std::pair<Shape, Shape>> same = {
        {{6}, {6}}, {{3, 4}, {3, 4}}, {{2, 7}, {2, 7}}};
    check_binary("add", [](const T& a, const T& b) { return add(a, b); }, same);
    check_binary("sub", [](const T& a, const T& b) { return sub(a, b); }, same);
    check_binary("mul", [](const T& a, const T& b) { return mul(a, b); }, same);

    std::vector<std::pair<Shape, Shape>> rowv = {
        {{3, 4}, {4}}, {{5, 2}, {2}}, {{1, 7}, {7}}};
    check_binary("add_rowvec", [](const T& a, const T& b) { return add_rowvec(a, b); }, rowv);
    check_binary("mul_rowvec", [](const T& a, const T& b) { return mul_rowvec(a, b); }, rowv);

    std::vector<std::pair<Shape, Shape>> bs = {{{3, 4}, {1}}, {{6}, {1}}, {{2, 2}, {1}}};
    check_binary("mul_bscalar", [](const T& a, const T& b) { return mul_bscalar(a, b); }, bs);
}

TEST_CASE("matmul gradients including transposed variants") {
    std::vector<std::pair<Shape, Shape>> nn = {{{2, 3}, {3, 4}}, {{1, 5}, {5, 2}}, {{4, 4}, {4, 4}}};
    check_binary("matmul", [](const T& a, const T& b) { return matmul(a, b); }, nn);
    std::vector<std::pair<Shape, Shape>> tn = {{{3, 2}, {3, 4}}, {{5, 1}, {5, 2}}, {{4, 4}, {4, 3}}};
    check_binary("matmul_tn",
                 [](const T& a, const T& b) { return matmul(a, b, true, false); }, tn);
    std::vector<std::pair<Shape, Shape>> nt = {{{2, 3}, {4, 3}}, {{1, 5}, {2, 5}}, {{4, 4}, {3, 4}}};
    check_binary("matmul_nt",
                 [](const T& a, const T& b) { return matmul(a, b, false, true); }, nt);
    std::vector<std::pair<Shape, Shape>> tt = {{{3, 2}, {4, 3}}, {{5, 1}, {2, 5}}, {{4, 4}, {3, 4}}};
    check_binary("matmul_tt",
                 [](const T& a, const T& b) { return matmul(a, b, true, true); }, tt);
}

TEST_CASE("structural op gradients (concat/slice/gather/scatter)") {
    check_binary("concat_cols",
                 [](const T& a, const T& b) { return concat_cols<double>({a, b}); },
                 {{{3, 2}, {3, 5}}, {{1, 4}, {1, 1}}, {{6, 3}, {6, 3}}});
    check_unary("slice_cols", [](const T& x) { return slice_cols(x, 1, 3); },
                {{2, 6}, {4, 5}, {1, 4}});
    check_unary("gather_rows",
                [](const T& x) { return gather_rows(x, {0, 2, 2, 1}); },
                {{3, 4}, {5, 2}, {4, 7}});
    check_unary("scatter_rows",
                [](const T& x) { return scatter_rows(x, {4, 1, 3}, 6); },
                {{3, 4}, {3, 2}, {3, 7}});
    check_unary("masked_select_rows",
                [](const T& x) {
                    return masked_select_rows(x, {true, false, true, false});
                },
                {{4, 3}, {4, 5}, {4, 1}});
}

TEST_CASE("reduction and normalization gradients") {
    std::vector<Shape> shapes = {{5}, {3, 4}, {2, 8}};
    check_unary("sum_all", [](const T& x) { return sum_all(x); }, shapes);
    check_unary("mean_all", [](const T& x) { return mean_all(x); }, shapes);
    check_unary("sum_cols", [](const T& x) { return sum_cols(x); }, shapes);
    check_unary("softmax_rows", [](const T& x) { return softmax_rows(x); },
                {{1, 6}, {3, 4}, {5, 5}}, -2.0, 2.0);
    check_unary("layernorm_rows", [](const T& x) { return layernorm_rows(x); },
                {{1, 8}, {3, 6}, {4, 12}}, -2.0, 2.0);
    check_unary("rotary", [](const T& x) { return rotary(x); },
                {{3, 4}, {5, 8}, {1, 2}});
    check_unary("rotary_offset", [](const T& x) { return rotary(x, 11); },
                {{3, 4}, {5, 8}, {2, 6}});
}

TEST_CASE("layernorm gradient on a 1x8 input (spec example)") {
    Rng rng(17);
    auto x = random_tensor(rng, {1, 8}, -2.0, 2.0);
    auto res = grad_check([&]() { return to_scalar(layernorm_rows(x), 31); }, {x});
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("dwconv1d gradients") {
    for (size_t s = 0; s < 3; ++s) {
        Rng rng(mix_seed(0x300, s));
        size_t t = 4 + 3 * s, c = 2 + s, k = 3 + 2 * (s % 2);
        auto x = random_tensor(rng, {t, c});
        auto w = random_tensor(rng, {c, k});
        auto b = random_tensor(rng, {c});
        auto res = grad_check(
            [&]() { return to_scalar(dwconv1d(x, w, b), 13 + s); }, {x, w, b});
        INFO("dwconv1d t=", t, " c=", c, " k=", k, " err ", res.max_rel_error);
        CHECK(res.ok(kTol));
    }
}

TEST_CASE("linear and attention gradients") {
    for (size_t s = 0; s < 3; ++s) {
        Rng rng(mix_seed(0x400, s));
        auto x = random_tensor(rng, {2 + s, 4});
        auto w = random_tensor(rng, {4, 3});
        auto b = random_tensor(rng, {3});
        auto res = grad_check([&]() { return to_scalar(linear(x, w, b), 5 + s); },
                              {x, w, b});
        CHECK(res.ok(kTol));
    }
    // spec example: 2 heads, length 3
    for (size_t s = 0; s < 3; ++s) {
        Rng rng(mix_seed(0x500, s));
        size_t tq = 3, tk = 3 + s, d = 4 + 2 * s; // d even, divisible by 2 heads
        auto q = random_tensor(rng, {tq, d});
        auto k = random_tensor(rng, {tk, d});
        auto v = random_tensor(rng, {tk, d});
        auto res = grad_check(
            [&]() { return to_scalar(attention(q, k, v, 2), 19 + s); }, {q, k, v});
        INFO("attention err ", res.max_rel_error);
        CHECK(res.ok(kTol));
    }
}

TEST_CASE("grn gradients") {
    for (size_t s = 0; s < 3; ++s) {
        Rng rng(mix_seed(0x600, s));
        size_t t = 3 + s, c = 4 + 2 * s;
        auto x = random_tensor(rng, {t, c});
        auto g = random_tensor(rng, {c});
        auto b = random_tensor(rng, {c});
        auto res = grad_check([&]() { return to_scalar(grn(x, g, b), 23 + s); },
                              {x, g, b});
        INFO("grn err ", res.max_rel_error);
        CHECK(res.ok(kTol));
    }
}
