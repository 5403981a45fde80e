#include <cmath>
#include <random>

#include "doctest.h"
#include "support/fixtures.hpp"
#include "tc/attribution.hpp"
#include "tc/coder.hpp"
#include "tc/error.hpp"
#include "tc/trainer.hpp"

using namespace tc;

namespace {

Coder identity2() {
    Coder c = Coder::zeros(CoderKind::transcoder, 0, 2, 2, 2);
    c.W_enc.data = {1, 0, 0, 1};
    c.W_dec.data = {1, 0, 0, 1};
    return c;
}

// z and reconstruction by explicit loops in double.
std::pair<std::vector<double>, std::vector<double>> loop_forward(const Coder& c, const std::vector<float>& x) {
    std::vector<double> z(c.d_features()), r(c.d_out());
    for (std::size_t i = 0; i < z.size(); ++i) {
        double pre = c.b_enc[i];
        for (std::size_t j = 0; j < x.size(); ++j) pre += static_cast<double>(c.W_enc(i, j)) * x[j];
        z[i] = pre > 0 ? pre : 0;
    }
    for (std::size_t j = 0; j < r.size(); ++j) {
        r[j] = c.b_dec[j];
        for (std::size_t i = 0; i < z.size(); ++i) r[j] += z[i] * c.W_dec(i, j);
    }
    return {z, r};
}

} // namespace

TEST_CASE("identity coder") {
    const auto out = coder_forward(identity2(), std::vector<float>{1.0f, -1.0f});
    CHECK(out.z == Vec{1.0f, 0.0f});
    CHECK(out.reconstruction == Vec{1.0f, 0.0f});
}

TEST_CASE("negative encoder bias shuts every feature") {
    Coder c = fx::random_transcoder(0, 2, 4, 9);
    c.b_enc.assign(4, -1.0f);
    const auto out = coder_forward(c, std::vector<float>{0.0f, 0.0f});
    for (float z : out.z) CHECK(z == 0.0f);
    CHECK(out.reconstruction == c.b_dec);
}

TEST_CASE("seeded coder matches the loop oracle") {
    const Coder c = fx::random_transcoder(0, 2, 4, 42);
    const std::vector<float> x = {0.5f, -0.2f};
    const auto out = coder_forward(c, x);
    const auto [z, r] = loop_forward(c, x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out.z[i] - z[i]) < 1e-7);
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(out.reconstruction[j] - r[j]) < 1e-7);
}

TEST_CASE("length mismatch and bad shapes") {
    const Coder c = fx::random_transcoder(0, 4, 8, 1);
    CHECK_THROWS_AS(coder_forward(c, std::vector<float>{1.0f}), InputError);
    Coder narrow = Coder::zeros(CoderKind::transcoder, 0, 4, 4, 3);
    CHECK_THROWS_AS(narrow.validate(), ConfigError);
    Coder sae = Coder::zeros(CoderKind::sae, 0, 4, 5, 8);
    CHECK_THROWS_AS(sae.validate(), ConfigError);
    CHECK_THROWS_AS(coder_kind_from_string("gated"), ConfigError);
    CHECK(coder_kind_from_string("sae") == CoderKind::sae);
}

TEST_CASE("loss examples") {
    SUBCASE("exact reconstruction with no active features") {
        Coder c = Coder::zeros(CoderKind::transcoder, 0, 2, 2, 2);
        c.b_enc = {-1.0f, -1.0f};
        c.b_dec = {0.25f, 0.5f};
        const auto l = coder_loss(c, std::vector<float>{0.1f, 0.2f}, std::vector<float>{0.25f, 0.5f}, 1.0f);
        CHECK(l.total == 0.0);
        CHECK(l.faithfulness == 0.0);
        CHECK(l.sparsity == 0.0);
    }
    SUBCASE("sparsity arithmetic") {
        const auto l = coder_loss(identity2(), std::vector<float>{1.0f, 2.0f}, std::vector<float>{1.0f, 2.0f}, 0.5f);
        CHECK(l.faithfulness == 0.0);
        CHECK(l.total == 1.5);
    }
    SUBCASE("small coefficient on a seeded batch") {
        const float lambda = 5.5e-5f;
        const Coder c = fx::random_transcoder(0, 6, 12, 77);
        std::mt19937_64 rng(5);
        std::normal_distribution<float> n(0.0f, 1.0f);
        for (int row = 0; row < 16; ++row) {
            std::vector<float> x(6), y(6);
            for (auto& v : x) v = n(rng);
            for (auto& v : y) v = n(rng);
            const auto [z, r] = loop_forward(c, x);
            double f = 0.0, l1 = 0.0;
            for (std::size_t j = 0; j < 6; ++j) f += (y[j] - r[j]) * (y[j] - r[j]);
            for (double v : z) l1 += v;
            const auto l = coder_loss(c, x, y, lambda);
            CHECK(std::abs(l.total - (f + static_cast<double>(lambda) * l1)) < 1e-6 * std::max(1.0, f));
            CHECK(std::abs(l.sparsity - static_cast<double>(lambda) * l1) < 1e-9);
        }
    }
    SUBCASE("an SAE must reconstruct its input") {
        const Coder c = Coder::zeros(CoderKind::sae, 0, 2, 2, 2);
        CHECK_THROWS_AS(coder_loss(c, std::vector<float>{1, 2}, std::vector<float>{1, 3}, 0.0f), UsageError);
        CHECK_NOTHROW(coder_loss(c, std::vector<float>{1, 2}, std::vector<float>{1, 2}, 0.0f));
    }
}

TEST_CASE("feature vectors") {
    const auto [e, d] = feature_vectors(identity2(), 1);
    CHECK(e == Vec{0.0f, 1.0f});
    CHECK(d == Vec{0.0f, 1.0f});
    CHECK_THROWS_AS(feature_vectors(identity2(), 2), InputError);

    // the same coder assembled from a column-per-feature decoder
    const Coder c = fx::random_transcoder(0, 3, 5, 4);
    Matrix cols(3, 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) cols(j, i) = c.W_dec(i, j);
    const Coder c2 = Coder::from_column_decoder(CoderKind::transcoder, 0, c.W_enc, c.b_enc, cols, c.b_dec);
    for (std::size_t i = 0; i < 5; ++i) CHECK(feature_vectors(c, i) == feature_vectors(c2, i));
}

TEST_CASE("invariant matrix equals the direct matrix product") {
    const Coder lower = fx::random_transcoder(0, 6, 10, 1), upper = fx::random_transcoder(1, 6, 12, 2);
    const Matrix m = invariant_matrix(lower, upper);
    REQUIRE(m.rows == 12);
    REQUIRE(m.cols == 10);
    for (std::size_t j = 0; j < 12; ++j)
        for (std::size_t i = 0; i < 10; ++i) {
            double ref = 0.0;
            for (std::size_t k = 0; k < 6; ++k) ref += static_cast<double>(upper.W_enc(j, k)) * lower.W_dec(i, k);
            CHECK(std::abs(m(j, i) - ref) < 1e-6);
        }
}

TEST_CASE("ReLU properties: nonnegative, exact zeros, homogeneity") {
    Coder c = fx::random_transcoder(0, 5, 9, 3);
    std::vector<float> x = {0.3f, -1.2f, 0.8f, 0.1f, -0.4f};
    const auto out = coder_forward(c, x);
    const auto [z, r] = loop_forward(c, x);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(out.z[i] >= 0.0f);
        if (z[i] == 0.0) CHECK(out.z[i] == 0.0f);
    }
    c.b_enc.assign(9, 0.0f);
    const auto a = coder_forward(c, x);
    for (auto& v : x) v *= 2.5f;
    const auto b = coder_forward(c, x);
    for (std::size_t i = 0; i < 9; ++i) CHECK(b.z[i] == doctest::Approx(2.5f * a.z[i]).epsilon(1e-6));
}

TEST_CASE("loss gradient matches finite differences") {
    Coder base = fx::random_transcoder(0, 4, 8, 123);
    const std::vector<float> x = {0.7f, -0.3f, 0.2f, 0.9f}, y = {0.1f, 0.4f, -0.5f, 0.3f};
    const float lambda = 0.05f;
    // move pre-activations away from the ReLU kink so the loss is smooth at the probe points
    for (std::size_t i = 0; i < 8; ++i) {
        double pre = base.b_enc[i];
        for (std::size_t j = 0; j < 4; ++j) pre += base.W_enc(i, j) * x[j];
        if (std::abs(pre) < 0.05) base.b_enc[i] += pre < 0 ? -0.2f : 0.2f;
    }
    const CoderGradient g = coder_loss_gradient(base, x, y, lambda);
    auto check = [&](std::span<float> (*param)(Coder&), std::span<const float> grad) {
        for (std::size_t k = 0; k < grad.size(); ++k) {
            Coder c = base;
            const float h = 1e-3f;
            param(c)[k] += h;
            const double up = coder_loss(c, x, y, lambda).total;
            param(c)[k] -= 2 * h;
            const double dn = coder_loss(c, x, y, lambda).total;
            const double fd = (up - dn) / (2.0 * h);
            CHECK(std::abs(fd - grad[k]) <= 1e-3 * std::max(1.0, std::abs(fd)));
        }
    };
    check([](Coder& c) { return std::span<float>(c.W_enc.data); }, g.W_enc.data);
    check([](Coder& c) { return std::span<float>(c.W_dec.data); }, g.W_dec.data);
    check([](Coder& c) { return std::span<float>(c.b_enc); }, g.b_enc);
    check([](Coder& c) { return std::span<float>(c.b_dec); }, g.b_dec);
}

TEST_CASE("exact-copy transcoder needs a ReLU model") {
    const ModelParams relu = fx::random_model(fx::tiny_config(), 1);
    const Coder c = exact_copy_transcoder(relu, 1);
    CHECK(c.d_features() == relu.config.d_mlp);
    CHECK(c.b_dec == relu.blocks[1].b_out);
    const ModelParams gelu = fx::random_model(fx::tiny_config(2, 2, 8, 16, 20, 8, Activation::gelu), 1);
    CHECK_THROWS_AS(exact_copy_transcoder(gelu, 0), ConfigError);
}
