#include <cstring>
#include <fstream>

#include "doctest.h"
#include "support/fixtures.hpp"
#include "tc/checkpoint.hpp"
#include "tc/error.hpp"
#include "tc/trainer.hpp"

using namespace tc;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST_CASE("model round trip is bit exact") {
    fx::TempDir dir("ckpt");
    const ModelParams p = fx::random_model(fx::tiny_config(2, 2, 8, 16, 20, 8, Activation::gelu), 4);
    save_checkpoint(p, dir.file("m.tcw1"));
    const ModelParams q = load_model(dir.file("m.tcw1"));
    CHECK(q.config.activation == Activation::gelu);
    const auto a = p.named_tensors(), b = q.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(std::memcmp(a[i].data.data(), b[i].data.data(), a[i].data.size() * sizeof(float)) == 0);
    }
    // saving the loaded model reproduces the file byte for byte
    save_checkpoint(q, dir.file("m2.tcw1"));
    CHECK(slurp(dir.file("m.tcw1")) == slurp(dir.file("m2.tcw1")));
}

TEST_CASE("coder round trip keeps metadata") {
    fx::TempDir dir("ckpt");
    Coder c = fx::random_transcoder(1, 8, 24, 3);
    c.lambda1 = 3e-4f;
    c.trained_tokens = 12345;
    save_checkpoint(c, dir.file("c.tcw1"));
    const Coder d = load_coder(dir.file("c.tcw1"));
    CHECK(d.layer == 1);
    CHECK(d.lambda1 == c.lambda1);
    CHECK(d.trained_tokens == 12345);
    CHECK(d.W_enc.data == c.W_enc.data);
    CHECK(d.W_dec.data == c.W_dec.data);
    CHECK(d.b_enc == c.b_enc);
    CHECK(d.b_dec == c.b_dec);
    CHECK(std::holds_alternative<Coder>(load_checkpoint(dir.file("c.tcw1"))));
    CHECK_THROWS_AS(load_model(dir.file("c.tcw1")), FormatError);
}

TEST_CASE("layout: magic, aligned payload, aligned offsets") {
    const std::string bytes = encode_checkpoint(to_checkpoint(fx::random_transcoder(0, 3, 5, 1)));
    CHECK(bytes.substr(0, 4) == "TCW1");
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 4, 4);
    CHECK((8 + hlen) % 64 == 0);
    const auto manifest = nlohmann::json::parse(bytes.substr(8, hlen));
    CHECK(manifest["format_version"] == 1);
    CHECK(manifest["kind"] == "coder");
    for (const auto& [name, meta] : manifest["tensors"].items()) CHECK(meta["offset"].get<std::size_t>() % 64 == 0);
}

TEST_CASE("a hand-written file decodes") {
    const std::string header = R"({"format_version":1,"kind":"coder","config":{},"tensors":{"w":{"dtype":"f32","shape":[2,2],"offset":0}}})";
    std::string bytes = "TCW1";
    std::string padded = header;
    while ((8 + padded.size()) % 64 != 0) padded += ' ';
    const auto hlen = static_cast<std::uint32_t>(padded.size());
    bytes.append(reinterpret_cast<const char*>(&hlen), 4);
    bytes += padded;
    const float w[4] = {1.0f, -2.0f, 0.5f, 3.25f};
    bytes.append(reinterpret_cast<const char*>(w), sizeof w);
    const Checkpoint c = decode_checkpoint(bytes);
    REQUIRE(c.tensors.size() == 1);
    CHECK(c.tensor("w").shape == std::vector<std::size_t>{2, 2});
    CHECK(c.tensor("w").data == std::vector<float>{1.0f, -2.0f, 0.5f, 3.25f});
    CHECK_THROWS_AS(c.tensor("missing"), FormatError);
}

TEST_CASE("corrupt files are format errors") {
    const std::string good = encode_checkpoint(to_checkpoint(fx::random_transcoder(0, 4, 6, 2)));
    SUBCASE("bad magic") {
        std::string b = good;
        b[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
    }
    SUBCASE("too short") { CHECK_THROWS_AS(decode_checkpoint("TCW"), FormatError); }
    SUBCASE("truncated payload names the tensor") {
        const std::string b = good.substr(0, good.size() - 56);
        try {
            decode_checkpoint(b);
            FAIL("expected a FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("b_dec") != std::string::npos);
        }
    }
    SUBCASE("header length past the end") {
        std::string b = good;
        const std::uint32_t huge = 1u << 30;
        std::memcpy(b.data() + 4, &huge, 4);
        CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
    }
    SUBCASE("garbage manifest") {
        std::string b = good;
        b[8] = '#';
        CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
    }
    SUBCASE("missing file is an input error") { CHECK_THROWS_AS(read_checkpoint("/nonexistent/x.tcw1"), InputError); }
}

TEST_CASE("activation pairs round trip") {
    fx::TempDir dir("pairs");
    ActivationPairStream s;
    s.layer = 1;
    s.d_model = 3;
    s.inputs = {1, 2, 3, 4, 5, 6};
    s.outputs = {-1, -2, -3, -4, -5, -6};
    s.provenance = {{0, 1}, {2, 3}};
    save_pairs(s, dir.file("p.tcw1"));
    const auto t = load_pairs(dir.file("p.tcw1"));
    CHECK(t.layer == 1);
    CHECK(t.d_model == 3);
    CHECK(t.inputs == s.inputs);
    CHECK(t.outputs == s.outputs);
    CHECK(t.provenance == s.provenance);
    CHECK(read_checkpoint(dir.file("p.tcw1")).kind == "pairs");
}
