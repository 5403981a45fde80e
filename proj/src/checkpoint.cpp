#include "tc/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tc/error.hpp"

namespace tc {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "TCW1 payloads are written in native little-endian order");

namespace {

constexpr char kMagic[4] = {'T', 'C', 'W', '1'};

std::size_t align_up(std::size_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

} // namespace

const TensorRecord& Checkpoint::tensor(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("checkpoint: missing tensor '" + std::string(name) + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
    json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["kind"] = ckpt.kind;
    manifest["config"] = ckpt.config;
    json tensors = json::object();
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        if (element_count(t.shape) != t.data.size()) {
            throw FormatError("checkpoint: tensor '" + t.name + "' shape does not match its data");
        }
        tensors[t.name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}};
        offset = align_up(offset + t.data.size() * sizeof(float));
    }
    manifest["tensors"] = tensors;

    std::string header = manifest.dump();
    const std::size_t payload_start = align_up(8 + header.size());
    header.append(payload_start - 8 - header.size(), ' ');

    std::string out;
    out.reserve(payload_start + offset);
    out.append(kMagic, 4);
    const auto hlen = static_cast<std::uint32_t>(header.size());
    char lenbuf[4];
    std::memcpy(lenbuf, &hlen, 4);
    out.append(lenbuf, 4);
    out += header;
    for (const auto& t : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
        out.append(align_up(out.size() - payload_start) - (out.size() - payload_start), '\0');
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic (expected \"TCW1\")");
    }
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 4, 4);
    if (8 + static_cast<std::size_t>(hlen) > bytes.size()) throw FormatError("checkpoint: truncated header");

    json manifest;
    try {
        manifest = json::parse(bytes.substr(8, hlen));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
    }
    try {
        if (manifest.at("format_version").get<int>() != kCheckpointVersion) {
            throw FormatError("checkpoint: unsupported format_version " + manifest.at("format_version").dump());
        }
        Checkpoint ckpt;
        ckpt.kind = manifest.at("kind").get<std::string>();
        if (ckpt.kind != "model" && ckpt.kind != "coder" && ckpt.kind != "pairs") throw FormatError("checkpoint: unknown kind '" + ckpt.kind + "'");
        ckpt.config = manifest.value("config", json::object());
        const std::size_t payload_start = 8 + hlen;
        if (payload_start % kCheckpointAlign != 0) throw FormatError("checkpoint: payload is not 64-byte aligned");
        const std::string_view payload = bytes.substr(payload_start);

        // Tensor order follows ascending offset so that re-encoding reproduces the file.
        std::vector<std::pair<std::size_t, TensorRecord>> found;
        for (const auto& [name, meta] : manifest.at("tensors").items()) {
            TensorRecord rec;
            rec.name = name;
            if (meta.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: tensor '" + name + "' has unsupported dtype");
            rec.shape = meta.at("shape").get<std::vector<std::size_t>>();
            const auto offset = meta.at("offset").get<std::size_t>();
            if (offset % kCheckpointAlign != 0) throw FormatError("checkpoint: tensor '" + name + "' offset is not 64-byte aligned");
            const std::size_t n = element_count(rec.shape);
            if (offset + n * sizeof(float) > payload.size()) throw FormatError("checkpoint: tensor '" + name + "' payload truncated");
            rec.data.resize(n);
            std::memcpy(rec.data.data(), payload.data() + offset, n * sizeof(float));
            found.emplace_back(offset, std::move(rec));
        }
        std::stable_sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [off, rec] : found) ckpt.tensors.push_back(std::move(rec));
        return ckpt;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"d_model", c.d_model},
            {"d_head", c.d_head},         {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
            {"context_len", c.context_len}, {"ln_epsilon", c.ln_epsilon},
            {"activation", c.activation == Activation::relu ? "relu" : "gelu"}};
}

ModelConfig config_from_json(const json& j) {
    try {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_head = j.at("d_head").get<std::size_t>();
        c.d_mlp = j.at("d_mlp").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.context_len = j.at("context_len").get<std::size_t>();
        c.ln_epsilon = j.at("ln_epsilon").get<float>();
        const auto act = j.at("activation").get<std::string>();
        if (act != "relu" && act != "gelu") throw FormatError("checkpoint: unknown activation '" + act + "'");
        c.activation = act == "relu" ? Activation::relu : Activation::gelu;
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
    }
}

Checkpoint to_checkpoint(const ModelParams& params) {
    params.validate();
    Checkpoint ckpt;
    ckpt.kind = "model";
    ckpt.config = config_to_json(params.config);
    for (const auto& t : params.named_tensors()) ckpt.tensors.push_back({t.name, t.shape, {t.data.begin(), t.data.end()}});
    return ckpt;
}

ModelParams model_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "model") throw FormatError("checkpoint: expected kind \"model\", found \"" + ckpt.kind + "\"");
    ModelParams params;
    try {
        params = ModelParams::zeros(config_from_json(ckpt.config));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    for (auto& t : params.named_tensors()) {
        const TensorRecord& rec = ckpt.tensor(t.name);
        if (rec.shape != t.shape) throw FormatError("checkpoint: tensor '" + t.name + "' has inconsistent shape");
        std::copy(rec.data.begin(), rec.data.end(), t.data.begin());
    }
    return params;
}

Checkpoint to_checkpoint(const Coder& coder) {
    coder.validate();
    Checkpoint ckpt;
    ckpt.kind = "coder";
    ckpt.config = {{"kind", to_string(coder.kind)},
                   {"layer", coder.layer},
                   {"lambda1", coder.lambda1},
                   {"trained_tokens", coder.trained_tokens},
                   {"d_in", coder.d_in()},
                   {"d_out", coder.d_out()},
                   {"d_features", coder.d_features()}};
    ckpt.tensors.push_back({"W_enc", {coder.W_enc.rows, coder.W_enc.cols}, coder.W_enc.data});
    ckpt.tensors.push_back({"b_enc", {coder.b_enc.size()}, coder.b_enc});
    ckpt.tensors.push_back({"W_dec", {coder.W_dec.rows, coder.W_dec.cols}, coder.W_dec.data});
    ckpt.tensors.push_back({"b_dec", {coder.b_dec.size()}, coder.b_dec});
    return ckpt;
}

Coder coder_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "coder") throw FormatError("checkpoint: expected kind \"coder\", found \"" + ckpt.kind + "\"");
    Coder c;
    std::size_t d_in = 0, d_out = 0, d_features = 0;
    try {
        c.kind = coder_kind_from_string(ckpt.config.at("kind").get<std::string>());
        c.layer = ckpt.config.at("layer").get<std::size_t>();
        c.lambda1 = ckpt.config.value("lambda1", 0.0f);
        c.trained_tokens = ckpt.config.value("trained_tokens", std::uint64_t{0});
        d_in = ckpt.config.at("d_in").get<std::size_t>();
        d_out = ckpt.config.at("d_out").get<std::size_t>();
        d_features = ckpt.config.at("d_features").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad coder config: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    auto matrix = [&](const char* name, std::size_t r, std::size_t cols) {
        const TensorRecord& rec = ckpt.tensor(name);
        if (rec.shape != std::vector<std::size_t>{r, cols}) throw FormatError(std::string("checkpoint: tensor '") + name + "' has inconsistent shape");
        Matrix m(r, cols);
        m.data = rec.data;
        return m;
    };
    auto vec = [&](const char* name, std::size_t n) {
        const TensorRecord& rec = ckpt.tensor(name);
        if (rec.shape != std::vector<std::size_t>{n}) throw FormatError(std::string("checkpoint: tensor '") + name + "' has inconsistent shape");
        return rec.data;
    };
    c.W_enc = matrix("W_enc", d_features, d_in);
    c.b_enc = vec("b_enc", d_features);
    c.W_dec = matrix("W_dec", d_features, d_out);
    c.b_dec = vec("b_dec", d_out);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    return c;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    write_checkpoint(path, to_checkpoint(params));
}

void save_checkpoint(const Coder& coder, const std::filesystem::path& path) { write_checkpoint(path, to_checkpoint(coder)); }

std::variant<ModelParams, Coder> load_checkpoint(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind == "model") return model_from_checkpoint(ckpt);
    return coder_from_checkpoint(ckpt);
}

ModelParams load_model(const std::filesystem::path& path) { return model_from_checkpoint(read_checkpoint(path)); }

Coder load_coder(const std::filesystem::path& path) { return coder_from_checkpoint(read_checkpoint(path)); }

} // namespace tc
