#include "tc/coder.hpp"

#include <algorithm>
#include <string>

#include "tc/error.hpp"
#include "tc/kernels.hpp"
#include "tc/model.hpp"

namespace tc {

std::string_view to_string(CoderKind kind) { return kind == CoderKind::transcoder ? "transcoder" : "sae"; }

CoderKind coder_kind_from_string(std::string_view s) {
    if (s == "transcoder") return CoderKind::transcoder;
    if (s == "sae") return CoderKind::sae;
    throw ConfigError("unknown coder kind '" + std::string(s) + "'");
}

Coder Coder::zeros(CoderKind kind, std::size_t layer, std::size_t d_in, std::size_t d_out, std::size_t d_features) {
    Coder c;
    c.kind = kind;
    c.layer = layer;
    c.W_enc = Matrix(d_features, d_in);
    c.b_enc = Vec(d_features, 0.0f);
    c.W_dec = Matrix(d_features, d_out);
    c.b_dec = Vec(d_out, 0.0f);
    return c;
}

Coder Coder::from_column_decoder(CoderKind kind, std::size_t layer, Matrix w_enc, Vec b_enc,
                                 const Matrix& w_dec_columns, Vec b_dec) {
    Coder c;
    c.kind = kind;
    c.layer = layer;
    c.W_enc = std::move(w_enc);
    c.b_enc = std::move(b_enc);
    c.W_dec = transpose(w_dec_columns);
    c.b_dec = std::move(b_dec);
    c.validate();
    return c;
}

void Coder::validate() const {
    if (W_enc.rows == 0 || W_enc.cols == 0) throw ConfigError("coder: empty encoder");
    if (b_enc.size() != W_enc.rows) throw ConfigError("coder: b_enc length != d_features");
    if (W_dec.rows != W_enc.rows) throw ConfigError("coder: encoder/decoder feature counts differ");
    if (b_dec.size() != W_dec.cols) throw ConfigError("coder: b_dec length != d_out");
    if (d_features() < d_in()) throw ConfigError("coder: d_features must be >= d_in");
    if (kind == CoderKind::sae && d_in() != d_out()) throw ConfigError("coder: SAE needs d_in == d_out");
}

void coder_encode(const Coder& coder, std::span<const float> x, std::span<float> z) {
    kernels::gemv(coder.W_enc, x, z);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const float pre = z[i] + coder.b_enc[i];
        z[i] = pre > 0.0f ? pre : 0.0f;
    }
}

void coder_decode(const Coder& coder, std::span<const float> z, std::span<float> out) {
    std::copy(coder.b_dec.begin(), coder.b_dec.end(), out.begin());
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] != 0.0f) kernels::axpy(z[i], coder.W_dec.row(i), out);
    }
}

CoderOutput coder_forward(const Coder& coder, std::span<const float> x) {
    if (x.size() != coder.d_in()) {
        throw InputError("coder_forward: input has length " + std::to_string(x.size()) + ", expected " +
                         std::to_string(coder.d_in()));
    }
    CoderOutput out{Vec(coder.d_features()), Vec(coder.d_out())};
    coder_encode(coder, x, out.z);
    coder_decode(coder, out.z, out.reconstruction);
    return out;
}

CoderLoss coder_loss(const Coder& coder, std::span<const float> x, std::span<const float> target, float lambda1) {
    if (target.size() != coder.d_out()) throw InputError("coder_loss: target length != d_out");
    if (coder.kind == CoderKind::sae) {
        if (!std::equal(x.begin(), x.end(), target.begin(), target.end())) {
            throw UsageError("coder_loss: an SAE reconstructs its own input; target must equal x");
        }
    }
    const CoderOutput out = coder_forward(coder, x);
    CoderLoss loss;
    for (std::size_t j = 0; j < target.size(); ++j) {
        const double e = static_cast<double>(target[j]) - static_cast<double>(out.reconstruction[j]);
        loss.faithfulness += e * e;
    }
    double l1 = 0.0;
    for (float zi : out.z) l1 += zi;
    loss.sparsity = static_cast<double>(lambda1) * l1;
    loss.total = loss.faithfulness + loss.sparsity;
    return loss;
}

std::pair<Vec, Vec> feature_vectors(const Coder& coder, std::size_t i) {
    if (i >= coder.d_features()) {
        throw InputError("feature index " + std::to_string(i) + " out of range (d_features = " +
                         std::to_string(coder.d_features()) + ")");
    }
    const auto enc = coder.f_enc(i);
    const auto dec = coder.f_dec(i);
    return {Vec(enc.begin(), enc.end()), Vec(dec.begin(), dec.end())};
}

Coder exact_copy_transcoder(const ModelParams& params, std::size_t layer) {
    const ModelConfig& cfg = params.config;
    if (layer >= cfg.n_layers) throw ConfigError("exact_copy_transcoder: layer out of range");
    if (cfg.activation != Activation::relu) {
        throw ConfigError("exact_copy_transcoder: only a ReLU MLP embeds exactly as a transcoder");
    }
    const BlockParams& b = params.blocks[layer];
    Coder c;
    c.kind = CoderKind::transcoder;
    c.layer = layer;
    c.W_enc = b.W_in;
    c.b_enc = b.b_in;
    c.W_dec = transpose(b.W_out);
    c.b_dec = b.b_out;
    c.validate();
    return c;
}

} // namespace tc
