#pragma once

// The epsilon network.
//
//   [x_k ; masked history]   N x 2P x T
//     -> temporal encoder (dilated causal convs + noise-level embedding)
//     -> masked relational transformer over stocks (tokens = flattened d x T)
//     -> temporal decoder (second dilated causal stack)
//     -> 1x1 head                                              N x P x T
//
// Temporal weights are shared across stocks; the transformer only mixes
// information between stocks, never across time.

#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "matchs/checkpoint.hpp"
#include "matchs/diffusion.hpp"
#include "matchs/errors.hpp"
#include "matchs/relations.hpp"
#include "matchs/rng.hpp"
#include "matchs/tensor.hpp"

namespace matchs {

struct DenoiserConfig {
    std::size_t n_indicators = 3;   // P
    std::size_t length = 17;        // T = L + horizon
    std::size_t d_model = 16;       // temporal feature width d
    std::size_t n_masked_heads = 12;
    std::size_t n_unmasked_heads = 4;
    std::size_t head_dim = 16;
    std::size_t n_encoder_layers = 2;
    std::size_t ff_dim = 64;
    std::size_t kernel = 2;
    std::vector<std::size_t> dilations = {1, 2, 4, 8};
    std::size_t steps = 100;        // K
    double emb_base = 1e4;          // r
    std::size_t emb_dim = 32;       // D
    std::size_t attn_bottleneck = 4;

    std::size_t total_heads() const { return n_masked_heads + n_unmasked_heads; }
    std::size_t token_width() const { return d_model * length; }

    void validate() const {
        if (n_indicators < 1) throw ConfigError("n_indicators", "must be >= 1");
        if (length < 1) throw ConfigError("length", "must be >= 1");
        if (d_model < 1) throw ConfigError("d", "must be >= 1");
        if (n_masked_heads > 12) throw ConfigError("n_masked_heads", "at most 12 masked heads");
        if (total_heads() < 1) throw ConfigError("n_masked_heads", "need at least one attention head");
        if (head_dim < 1) throw ConfigError("head_dim", "must be >= 1");
        if (n_encoder_layers < 1) throw ConfigError("n_encoder_layers", "must be >= 1");
        if (ff_dim < 1) throw ConfigError("ff_dim", "must be >= 1");
        if (kernel < 1) throw ConfigError("kernel", "must be >= 1");
        if (dilations.empty()) throw ConfigError("dilations", "need at least one dilated layer");
        for (std::size_t i = 0; i < dilations.size(); ++i) {
            const std::size_t d = dilations[i];
            if (d == 0 || (d & (d - 1)) != 0) throw ConfigError("dilations", "each dilation must be a power of 2");
            if (i > 0 && d <= dilations[i - 1]) throw ConfigError("dilations", "dilations must be strictly increasing");
        }
        if (steps < 1) throw ConfigError("K", "must be >= 1");
        if (emb_dim == 0 || emb_dim % 2 != 0) throw ConfigError("emb_dim", "must be a positive even number");
        if (!(emb_base > 1.0)) throw ConfigError("emb_base", "must be > 1");
        if (attn_bottleneck < 1) throw ConfigError("attn_bottleneck", "must be >= 1");
    }
};

// Sinusoidal noise-level embedding: entries 2s and 2s+1 are cos and sin of
// k * r^(-2s/D), s = 0 .. D/2-1.
inline std::vector<double> noise_embedding(double k, std::size_t dim, double base = 1e4) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("emb_dim", "must be a positive even number");
    std::vector<double> out(dim);
    for (std::size_t s = 0; s < dim / 2; ++s) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(s) / static_cast<double>(dim));
        out[2 * s] = std::cos(k * freq);
        out[2 * s + 1] = std::sin(k * freq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention

// softmax(Q K^T / sqrt(d_k)) V restricted to mask entries; zero-mask entries
// get exactly zero weight.
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const BinaryMatrix& mask) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw DimensionError("masked_attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                             shape_str(v.shape()));
    }
    if (mask.n != q.dim(0) || mask.n != k.dim(0)) throw DimensionError("masked_attention: mask size does not match tokens");
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose(k)), scale_factor);
    return matmul(masked_softmax_rows(scores, mask.bits), v);
}

inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw DimensionError("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                             shape_str(v.shape()));
    }
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    return matmul(softmax_rows(scale(matmul(q, transpose(k)), scale_factor)), v);
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

class ParameterRegistry {
   public:
    Tensor& add(std::string name, Shape shape, Rng& rng, double stddev) {
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) x = stddev * rng.gaussian();
        return push(std::move(name), parameter(std::move(shape), std::move(v)));
    }

    Tensor& constant(std::string name, Shape shape, double value) {
        const std::size_t n = shape_numel(shape);
        return push(std::move(name), parameter(std::move(shape), std::vector<double>(n, value)));
    }

    std::vector<NamedTensor>& named() { return params_; }
    const std::vector<NamedTensor>& named() const { return params_; }

   private:
    Tensor& push(std::string name, Tensor t) {
        params_.push_back({std::move(name), std::move(t)});
        return params_.back().value;
    }

    std::vector<NamedTensor> params_;
};

// Dilated causal convolution stack with gated activations, residual sums and
// a causal squeeze-style channel attention. Optionally adds a projected
// noise-level embedding after the input convolution.
class TemporalBlock {
   public:
    TemporalBlock() = default;

    TemporalBlock(const std::string& prefix, std::size_t in_channels, const DenoiserConfig& cfg, bool with_embedding,
                  ParameterRegistry& reg, Rng& rng)
        : dilations_(cfg.dilations) {
        const std::size_t d = cfg.d_model, w = cfg.kernel;
        auto conv_std = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
        in_w_ = idx(reg, prefix + ".in.weight", {d, in_channels, w}, rng, conv_std(in_channels * w));
        in_b_ = idx0(reg, prefix + ".in.bias", {d});
        if (with_embedding) {
            emb1_w_ = idx(reg, prefix + ".emb.fc1.weight", {cfg.emb_dim, d}, rng, conv_std(cfg.emb_dim));
            emb1_b_ = idx0(reg, prefix + ".emb.fc1.bias", {d});
            emb2_w_ = idx(reg, prefix + ".emb.fc2.weight", {d, d}, rng, conv_std(d));
            emb2_b_ = idx0(reg, prefix + ".emb.fc2.bias", {d});
        }
        for (std::size_t l = 0; l < dilations_.size(); ++l) {
            const std::string p = prefix + ".layer" + std::to_string(l);
            Layer layer;
            layer.filt_w = idx(reg, p + ".filter.weight", {d, d, w}, rng, conv_std(d * w));
            layer.filt_b = idx0(reg, p + ".filter.bias", {d});
            layer.gate_w = idx(reg, p + ".gate.weight", {d, d, w}, rng, conv_std(d * w));
            layer.gate_b = idx0(reg, p + ".gate.bias", {d});
            layer.res_w = idx(reg, p + ".residual.weight", {d, d, 1}, rng, conv_std(d));
            layer.res_b = idx0(reg, p + ".residual.bias", {d});
            layers_.push_back(layer);
        }
        const std::size_t r = std::max<std::size_t>(1, d / cfg.attn_bottleneck);
        att1_w_ = idx(reg, prefix + ".chan_att.fc1.weight", {r, d, 1}, rng, conv_std(d));
        att1_b_ = idx0(reg, prefix + ".chan_att.fc1.bias", {r});
        att2_w_ = idx(reg, prefix + ".chan_att.fc2.weight", {d, r, 1}, rng, conv_std(r));
        att2_b_ = idx0(reg, prefix + ".chan_att.fc2.bias", {d});
    }

    // x: [N x C_in x T] -> [N x d x T]; `emb` is [1 x D] or undefined.
    Tensor forward(const std::vector<NamedTensor>& p, const Tensor& x, const Tensor& emb) const {
        Tensor h = conv1d_causal(x, p[in_w_].value, p[in_b_].value, 1);
        if (emb1_w_ != kNone) {
            if (!emb.defined()) throw ContractError("temporal block expects a noise-level embedding");
            Tensor e = gelu(add_row_bias(matmul(emb, p[emb1_w_].value), p[emb1_b_].value));
            e = add_row_bias(matmul(e, p[emb2_w_].value), p[emb2_b_].value);
            h = add_channel_bias(h, reshape(e, {e.numel()}));
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const Layer& L = layers_[l];
            Tensor f = tanh(conv1d_causal(h, p[L.filt_w].value, p[L.filt_b].value, dilations_[l]));
            Tensor g = sigmoid(conv1d_causal(h, p[L.gate_w].value, p[L.gate_b].value, dilations_[l]));
            h = add(h, conv1d_causal(mul(f, g), p[L.res_w].value, p[L.res_b].value, 1));
        }
        // Channel attention from the running (causal) mean of the features.
        Tensor s = cumulative_mean_time(h);
        Tensor a = gelu(conv1d_causal(s, p[att1_w_].value, p[att1_b_].value, 1));
        a = sigmoid(conv1d_causal(a, p[att2_w_].value, p[att2_b_].value, 1));
        return mul(h, a);
    }

   private:
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

    struct Layer {
        std::size_t filt_w, filt_b, gate_w, gate_b, res_w, res_b;
    };

    static std::size_t idx(ParameterRegistry& reg, std::string name, Shape shape, Rng& rng, double sd) {
        reg.add(std::move(name), std::move(shape), rng, sd);
        return reg.named().size() - 1;
    }
    static std::size_t idx0(ParameterRegistry& reg, std::string name, Shape shape) {
        reg.constant(std::move(name), std::move(shape), 0.0);
        return reg.named().size() - 1;
    }

    std::vector<std::size_t> dilations_;
    std::size_t in_w_ = kNone, in_b_ = kNone;
    std::size_t emb1_w_ = kNone, emb1_b_ = kNone, emb2_w_ = kNone, emb2_b_ = kNone;
    std::vector<Layer> layers_;
    std::size_t att1_w_ = kNone, att1_b_ = kNone, att2_w_ = kNone, att2_b_ = kNone;
};

// Post-norm transformer encoder layer whose heads attend over stocks; head h
// uses masks[h] when present and is unrestricted otherwise.
class EncoderLayer {
   public:
    EncoderLayer() = default;

    EncoderLayer(const std::string& prefix, const DenoiserConfig& cfg, ParameterRegistry& reg, Rng& rng)
        : heads_(cfg.total_heads()), head_dim_(cfg.head_dim) {
        const std::size_t f = cfg.token_width(), hd = heads_ * head_dim_;
        auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
        auto add = [&](const std::string& name, Shape shape, double s) {
            reg.add(prefix + name, std::move(shape), rng, s);
            return reg.named().size() - 1;
        };
        auto fill = [&](const std::string& name, Shape shape, double v) {
            reg.constant(prefix + name, std::move(shape), v);
            return reg.named().size() - 1;
        };
        wq_ = add(".attn.w_q", {f, hd}, sd(f));
        wk_ = add(".attn.w_k", {f, hd}, sd(f));
        wv_ = add(".attn.w_v", {f, hd}, sd(f));
        wo_ = add(".attn.w_h", {hd, f}, sd(hd));
        bo_ = fill(".attn.b_h", {f}, 0.0);
        ln1_g_ = fill(".norm1.gamma", {f}, 1.0);
        ln1_b_ = fill(".norm1.beta", {f}, 0.0);
        ff1_w_ = add(".ff.fc1.weight", {f, cfg.ff_dim}, sd(f));
        ff1_b_ = fill(".ff.fc1.bias", {cfg.ff_dim}, 0.0);
        ff2_w_ = add(".ff.fc2.weight", {cfg.ff_dim, f}, sd(cfg.ff_dim));
        ff2_b_ = fill(".ff.fc2.bias", {f}, 0.0);
        ln2_g_ = fill(".norm2.gamma", {f}, 1.0);
        ln2_b_ = fill(".norm2.beta", {f}, 0.0);
    }

    Tensor forward(const std::vector<NamedTensor>& p, const Tensor& x, const std::vector<const BinaryMatrix*>& masks) const {
        Tensor q = matmul(x, p[wq_].value);
        Tensor k = matmul(x, p[wk_].value);
        Tensor v = matmul(x, p[wv_].value);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t b = h * head_dim_, e = b + head_dim_;
            Tensor qh = slice_cols(q, b, e), kh = slice_cols(k, b, e), vh = slice_cols(v, b, e);
            heads.push_back(masks[h] ? masked_attention(qh, kh, vh, *masks[h]) : attention(qh, kh, vh));
        }
        Tensor attn = add_row_bias(matmul(concat_cols(heads), p[wo_].value), p[bo_].value);
        Tensor h1 = layer_norm_rows(add(x, attn), p[ln1_g_].value, p[ln1_b_].value);
        Tensor ff = gelu(add_row_bias(matmul(h1, p[ff1_w_].value), p[ff1_b_].value));
        ff = add_row_bias(matmul(ff, p[ff2_w_].value), p[ff2_b_].value);
        return layer_norm_rows(add(h1, ff), p[ln2_g_].value, p[ln2_b_].value);
    }

    std::size_t heads() const { return heads_; }

   private:
    std::size_t heads_ = 0, head_dim_ = 0;
    std::size_t wq_ = 0, wk_ = 0, wv_ = 0, wo_ = 0, bo_ = 0, ln1_g_ = 0, ln1_b_ = 0;
    std::size_t ff1_w_ = 0, ff1_b_ = 0, ff2_w_ = 0, ff2_b_ = 0, ln2_g_ = 0, ln2_b_ = 0;
};

class MatchsDenoiser {
   public:
    MatchsDenoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng = Rng::stream(seed, "init");
        encoder_ = TemporalBlock("dicem", 2 * cfg_.n_indicators, cfg_, true, registry_, rng);
        for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l)
            layers_.emplace_back("mrt.layer" + std::to_string(l), cfg_, registry_, rng);
        decoder_ = TemporalBlock("dcnn", cfg_.d_model, cfg_, false, registry_, rng);
        head_w_ = registry_.named().size();
        registry_.add("head.weight", {cfg_.n_indicators, cfg_.d_model, 1}, rng,
                      1.0 / std::sqrt(static_cast<double>(cfg_.d_model)));
        head_b_ = registry_.named().size();
        registry_.constant("head.bias", {cfg_.n_indicators}, 0.0);
    }

    const DenoiserConfig& config() const { return cfg_; }

    std::vector<NamedTensor>& named_parameters() { return registry_.named(); }
    const std::vector<NamedTensor>& named_parameters() const { return registry_.named(); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& p : registry_.named()) out.push_back(p.value);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : registry_.named()) n += p.value.numel();
        return n;
    }

    // Parameter counts grouped by the first two name components.
    std::map<std::string, std::size_t> describe() const {
        std::map<std::string, std::size_t> out;
        for (const auto& p : registry_.named()) {
            const auto first = p.name.find('.');
            const auto second = first == std::string::npos ? first : p.name.find('.', first + 1);
            out[p.name.substr(0, second)] += p.value.numel();
        }
        return out;
    }

    // Temporal encoder on the concatenated [x_k ; history] input.
    Tensor encode(const Tensor& input, std::size_t k) const {
        const auto e = noise_embedding(static_cast<double>(k), cfg_.emb_dim, cfg_.emb_base);
        return encoder_.forward(registry_.named(), input, Tensor({1, cfg_.emb_dim}, e));
    }

    // Masked relational transformer on [N x d*T] tokens. Needs exactly
    // n_masked_heads masks.
    Tensor mrt_forward(const Tensor& tokens, const std::vector<BinaryMatrix>& masks) const {
        if (masks.size() != cfg_.n_masked_heads) {
            throw ContractError("mrt_forward: got " + std::to_string(masks.size()) + " head masks, config has " +
                                std::to_string(cfg_.n_masked_heads) + " masked heads");
        }
        std::vector<const BinaryMatrix*> per_head;
        for (const auto& m : masks) {
            if (m.n != tokens.dim(0)) throw DimensionError("mrt_forward: mask size does not match stock count");
            per_head.push_back(&m);
        }
        per_head.resize(cfg_.total_heads(), nullptr);
        Tensor x = tokens;
        for (const auto& layer : layers_) x = layer.forward(registry_.named(), x, per_head);
        return x;
    }

    // Masked heads beyond the available groups reuse the union mask.
    std::vector<BinaryMatrix> resolve_masks(const HeadMaskSet& set, std::size_t n) const {
        if (set.masks.size() > cfg_.n_masked_heads) {
            throw ContractError("head mask set has " + std::to_string(set.masks.size()) + " masks but only " +
                                std::to_string(cfg_.n_masked_heads) + " masked heads are configured");
        }
        std::vector<BinaryMatrix> out = set.masks;
        BinaryMatrix fallback = set.masks.empty() ? BinaryMatrix::identity(n) : set.coverage();
        while (out.size() < cfg_.n_masked_heads) out.push_back(fallback);
        return out;
    }

    Tensor predict(const Tensor& x_k, const ConditioningBundle& bundle, std::size_t k) const {
        const std::size_t n = x_k.dim(0), p = cfg_.n_indicators, len = cfg_.length;
        if (x_k.rank() != 3 || x_k.dim(1) != p || x_k.dim(2) != len || bundle.history.shape() != x_k.shape()) {
            throw DimensionError("denoiser: x_k " + shape_str(x_k.shape()) + " / history " +
                                 shape_str(bundle.history.shape()) + " do not match config");
        }
        std::vector<double> in(n * 2 * p * len);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t c = 0; c < p; ++c)
                for (std::size_t t = 0; t < len; ++t) {
                    in[(s * 2 * p + c) * len + t] = x_k.values()[(s * p + c) * len + t];
                    in[(s * 2 * p + p + c) * len + t] = bundle.history.values()[(s * p + c) * len + t];
                }
        Tensor h = encode(Tensor({n, 2 * p, len}, std::move(in)), k);

        const HeadMaskSet empty;
        const auto masks = resolve_masks(bundle.head_masks ? *bundle.head_masks : empty, n);
        Tensor tokens = reshape(h, {n, cfg_.d_model * len});
        Tensor mixed = add(tokens, mrt_forward(tokens, masks));
        Tensor g = decoder_.forward(registry_.named(), reshape(mixed, {n, cfg_.d_model, len}), Tensor());
        const auto& reg = registry_.named();
        return conv1d_causal(g, reg[head_w_].value, reg[head_b_].value, 1);
    }

    const TemporalBlock& encoder() const { return encoder_; }
    const TemporalBlock& decoder() const { return decoder_; }

   private:
    DenoiserConfig cfg_;
    ParameterRegistry registry_;
    TemporalBlock encoder_;
    std::vector<EncoderLayer> layers_;
    TemporalBlock decoder_;
    std::size_t head_w_ = 0, head_b_ = 0;
};

static_assert(EpsilonModel<MatchsDenoiser>);

}  // namespace matchs
