#pragma once

// Toy pixel-space DDPM with decoupled conditioning: per attention site the
// token stream adds a text cross-attention result and a style cross-attention
// result (the adapter branch). The adapter's output projections start at
// zero, so attaching it cannot perturb the base model.

#include <optional>
#include <string>
#include <vector>

#include "fable/nn.hpp"
#include "fable/styleseq.hpp"

namespace fable {

// ---- schedule ----

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar, sigma;
};

// Linear beta ramp. sigma_t = sqrt(beta_t) (fixed-variance choice), except
// sigma_0 = 0: the final denoising step is deterministic.
inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.2) {
    if (T < 1) throw ValueError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ValueError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));
    double acc = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * t / (T - 1);
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        acc *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = acc;
        s.sigma[static_cast<size_t>(t)] = t == 0 ? 0.0 : std::sqrt(b);
    }
    return s;
}

// One reverse step:
//   x_{t-1} = (1/sqrt(a_t)) * (x_t - ((1-a_t)/sqrt(1-abar_t)) * eps) + sigma_t * z
inline Array ddpm_step(const Array& x_t, const Array& eps_pred, int t, const NoiseSchedule& sch,
                       const Array& z) {
    if (x_t.shape != eps_pred.shape || x_t.shape != z.shape)
        throw ShapeError("ddpm_step: x_t, eps_pred, z must share a shape");
    if (t < 0 || t >= sch.T) throw IndexError("ddpm_step: t out of range");
    double a = sch.alpha[static_cast<size_t>(t)];
    double abar = sch.alpha_bar[static_cast<size_t>(t)];
    double inv_sqrt_a = 1.0 / std::sqrt(a);
    double coef = (1.0 - a) / std::sqrt(1.0 - abar);
    double sig = sch.sigma[static_cast<size_t>(t)];
    Array out = x_t;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = inv_sqrt_a * (x_t.data[i] - coef * eps_pred.data[i]) + sig * z.data[i];
    return out;
}

// ---- conditioning ----

// nullopt means "use the model's learned null token" for that condition.
struct Conditioning {
    std::optional<Array> text;   // [txt_len x txt_dim]
    std::optional<Array> style;  // [style_len x style_dim]
};

// Graph-valued conditioning: the same contract, but conditions enter as graph
// tensors, so gradients can flow back into whatever produced them (e.g. a
// latent-query resampler trained jointly with the denoiser).
struct ConditioningGraph {
    std::optional<Tensor> text;
    std::optional<Tensor> style;
};

struct DropoutEvents {
    bool drop_text = false, drop_style = false, drop_pair = false;
};

// Three independent draws, in a fixed order (text, style, pair).
inline DropoutEvents draw_dropout_events(Rng& rng, double p = 0.05) {
    DropoutEvents e;
    e.drop_text = rng.bernoulli(p);
    e.drop_style = rng.bernoulli(p);
    e.drop_pair = rng.bernoulli(p);
    return e;
}

inline Conditioning conditioning_dropout(Conditioning cond, Rng& rng, double p = 0.05) {
    DropoutEvents e = draw_dropout_events(rng, p);
    if (e.drop_text || e.drop_pair) cond.text.reset();
    if (e.drop_style || e.drop_pair) cond.style.reset();
    return cond;
}

// ---- toy text encoder (frozen stand-in for a pretrained text tower) ----

struct ToyTextEncoder {
    int vocab, len, dim;
    Array table;  // [vocab x dim], frozen

    ToyTextEncoder(int vocab_, int len_, int dim_, uint64_t seed)
        : vocab(vocab_), len(len_), dim(dim_), table(Shape{vocab_, dim_}) {
        Rng rng(seed);
        rng.fill_normal(table.data, 0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
    }

    // Pads with id 0 / truncates to a fixed length: [len x dim].
    Array encode(const std::vector<int>& ids) const {
        Array out(Shape{len, dim});
        for (int i = 0; i < len; ++i) {
            int id = i < static_cast<int>(ids.size()) ? ids[static_cast<size_t>(i)] : 0;
            if (id < 0 || id >= vocab) throw IndexError("ToyTextEncoder: id out of range");
            const double* src = table.data.data() + static_cast<size_t>(id) * dim;
            std::copy(src, src + dim, out.data.data() + static_cast<size_t>(i) * dim);
        }
        return out;
    }
};

// Sinusoidal step features [1 x dim], interleaved sin/cos over a geometric
// frequency ladder.
inline Array time_features(int t, int dim) {
    Array out(Shape{1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -static_cast<double>(i) / half);
        out.data[static_cast<size_t>(2 * i)] = std::sin(t * freq);
        out.data[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    if (dim % 2) out.data[static_cast<size_t>(dim - 1)] = 1.0;
    return out;
}

// ---- the denoiser ----

struct DenoiserConfig {
    int img = 16;         // square input resolution (divisible by 4)
    int base = 10;        // channel width F of the first stage
    int txt_len = 8;      // text tokens
    int txt_dim = 16;     // text channel dim
    int style_len = 4;    // style latent rows (L_s)
    int style_dim = 64;   // style latent channels
    int t_dim = 16;       // time feature width
    int heads = 1;
    uint64_t adapter_seed = 0xada;  // adapter q/k/v init, separate stream so
                                    // base weights match a no-adapter build
};

class ToyDenoiser {
public:
    // Base parameters land in `base_ps`; adapter parameters (style-attention
    // branches + style null token) land in `*adapter_ps`. Passing nullptr
    // builds a text-only model. Base initialization consumes `rng` in an
    // adapter-independent order.
    ToyDenoiser(ParamStore& base_ps, ParamStore* adapter_ps, DenoiserConfig cfg, Rng& rng)
        : cfg_(cfg) {
        if (cfg_.img % 4 != 0) throw ValueError("ToyDenoiser: resolution must divide by 4");
        int F = cfg_.base;
        conv_in_ = Conv3x3(base_ps, "dn.in", 3, F, rng);
        conv_d1_ = Conv3x3(base_ps, "dn.d1", F, F, rng);
        conv_d2_ = Conv3x3(base_ps, "dn.d2", F, 2 * F, rng);
        conv_mid_ = Conv3x3(base_ps, "dn.mid", 2 * F, 2 * F, rng);
        conv_u1_ = Conv3x3(base_ps, "dn.u1", 4 * F, F, rng);
        conv_u2_ = Conv3x3(base_ps, "dn.u2", 2 * F, F, rng);
        conv_out_ = Conv3x3(base_ps, "dn.out", F, 3, rng);
        t_shared_ = Linear(base_ps, "dn.t.shared", cfg_.t_dim, cfg_.t_dim, rng);
        int stage_ch[6] = {F, F, 2 * F, 2 * F, F, F};
        for (int i = 0; i < 6; ++i)
            t_stage_[i] = Linear(base_ps, "dn.t.s" + std::to_string(i), cfg_.t_dim, stage_ch[i],
                                 rng);
        txt_attn1_ = SqAttention(base_ps, "dn.a1.txt", F, cfg_.txt_dim, F, cfg_.heads, rng);
        txt_attn2_ = SqAttention(base_ps, "dn.a2.txt", 2 * F, cfg_.txt_dim, 2 * F, cfg_.heads,
                                 rng);
        null_text_ = &base_ps.add("dn.null_text",
                                  randn(Shape{cfg_.txt_len, cfg_.txt_dim}, rng, 0.5));

        if (adapter_ps) {
            Rng arng(cfg_.adapter_seed);
            sty_attn1_ = SqAttention(*adapter_ps, "ad.a1.sty", F, cfg_.style_dim, F, cfg_.heads,
                                     arng, /*zero_out_proj=*/true);
            sty_attn2_ = SqAttention(*adapter_ps, "ad.a2.sty", 2 * F, cfg_.style_dim, 2 * F,
                                     cfg_.heads, arng, /*zero_out_proj=*/true);
            null_style_ = &adapter_ps->add(
                "ad.null_style", randn(Shape{cfg_.style_len, cfg_.style_dim}, arng, 0.5));
            has_adapter_ = true;
        }
    }

    const DenoiserConfig& config() const { return cfg_; }
    bool has_adapter() const { return has_adapter_; }

    // Predicts the noise component of x_t ([3, img, img]).
    Tensor forward(Leaves& lv, const Array& x_t, const Conditioning& cond, int t) const {
        check_xt(x_t);
        Tensor text = bind_condition(lv, cond.text, null_text_, cfg_.txt_len, cfg_.txt_dim,
                                     "text");
        Tensor style;
        if (has_adapter_)
            style = bind_condition(lv, cond.style, null_style_, cfg_.style_len, cfg_.style_dim,
                                   "style");
        return forward_bound(lv, x_t, text, style, t);
    }

    // Same forward pass with graph-valued conditions, so the style (or text)
    // producer is trained through this model.
    Tensor forward(Leaves& lv, const Array& x_t, const ConditioningGraph& cond, int t) const {
        check_xt(x_t);
        Tensor text = bind_graph(lv, cond.text, null_text_, cfg_.txt_len, cfg_.txt_dim, "text");
        Tensor style;
        if (has_adapter_)
            style = bind_graph(lv, cond.style, null_style_, cfg_.style_len, cfg_.style_dim,
                               "style");
        return forward_bound(lv, x_t, text, style, t);
    }

    Array denoise(const Array& x_t, const Conditioning& cond, int t) const {
        Leaves lv(false);
        return forward(lv, x_t, cond, t).value();
    }

private:
    void check_xt(const Array& x_t) const {
        if (x_t.shape != Shape{3, cfg_.img, cfg_.img})
            throw ShapeError("denoise: want x_t [3," + std::to_string(cfg_.img) + "," +
                             std::to_string(cfg_.img) + "], got " + shape_str(x_t.shape));
    }

    // U-Net body, shared by both forward entry points.
    Tensor forward_bound(Leaves& lv, const Array& x_t, const Tensor& text, const Tensor& style,
                         int t) const {
        Tensor temb = silu(t_shared_(lv, Tensor::constant(time_features(t, cfg_.t_dim))));
        int n = cfg_.img;

        Tensor x = Tensor::constant(x_t);
        Tensor h0 = silu(stage(lv, conv_in_(lv, x), 0, temb, n));
        Tensor h1 = silu(stage(lv, conv_d1_(lv, h0), 1, temb, n));
        Tensor a1 = attend(lv, avgpool2(h1), txt_attn1_, sty_attn1_, text, style, n / 2);
        Tensor h2 = silu(stage(lv, conv_d2_(lv, a1), 2, temb, n / 2));
        Tensor a2 = attend(lv, avgpool2(h2), txt_attn2_, sty_attn2_, text, style, n / 4);
        Tensor m = silu(stage(lv, conv_mid_(lv, a2), 3, temb, n / 4));
        Tensor h3 = silu(stage(lv, conv_u1_(lv, concat0({upsample2(m), h2})), 4, temb, n / 2));
        Tensor h4 = silu(stage(lv, conv_u2_(lv, concat0({upsample2(h3), h1})), 5, temb, n));
        return conv_out_(lv, h4);
    }

    Tensor bind_condition(Leaves& lv, const std::optional<Array>& given, Param* null_token,
                          int rows, int dim, const char* what) const {
        if (!given) return lv(*null_token);
        if (given->shape != Shape{rows, dim})
            throw ShapeError(std::string("denoise: ") + what + " condition wants [" +
                             std::to_string(rows) + "x" + std::to_string(dim) + "], got " +
                             shape_str(given->shape));
        return Tensor::constant(*given);
    }

    Tensor bind_graph(Leaves& lv, const std::optional<Tensor>& given, Param* null_token,
                      int rows, int dim, const char* what) const {
        if (!given) return lv(*null_token);
        if (given->shape() != Shape{rows, dim})
            throw ShapeError(std::string("denoise: ") + what + " condition wants [" +
                             std::to_string(rows) + "x" + std::to_string(dim) + "], got " +
                             shape_str(given->shape()));
        return *given;
    }

    Tensor stage(Leaves& lv, const Tensor& x_chw, int idx, const Tensor& temb, int hw) const {
        Tensor bias = t_stage_[idx](lv, temb);  // [1 x C]
        Tensor toks = add_bias(tokens_from_chw(x_chw),
                               reshape(bias, Shape{bias.shape()[1]}));
        return chw_from_tokens(toks, hw, hw);
    }

    // Decoupled conditioning: tokens + text-attention + style-attention.
    Tensor attend(Leaves& lv, const Tensor& x_chw, const SqAttention& txt,
                  const SqAttention& sty, const Tensor& text, const Tensor& style,
                  int hw) const {
        Tensor toks = tokens_from_chw(x_chw);
        Tensor y = add(toks, txt(lv, toks, text));
        if (has_adapter_) y = add(y, sty(lv, toks, style));
        return chw_from_tokens(y, hw, hw);
    }

    DenoiserConfig cfg_;
    Conv3x3 conv_in_, conv_d1_, conv_d2_, conv_mid_, conv_u1_, conv_u2_, conv_out_;
    Linear t_shared_;
    Linear t_stage_[6];
    SqAttention txt_attn1_, txt_attn2_;
    SqAttention sty_attn1_, sty_attn2_;
    Param* null_text_ = nullptr;
    Param* null_style_ = nullptr;
    bool has_adapter_ = false;
};

inline Array adapter_denoise(const ToyDenoiser& model, const Array& x_t, const Conditioning& cond,
                             int t) {
    return model.denoise(x_t, cond, t);
}

// ---- training objective ----

// Graph-mode epsilon-prediction MSE at one (x0, t, noise) triple.
inline Tensor diffusion_loss_graph(Leaves& lv, const ToyDenoiser& model, const Array& x0,
                                   const Conditioning& cond, int t, const Array& noise,
                                   const NoiseSchedule& sch) {
    if (x0.shape != noise.shape) throw ShapeError("diffusion_loss: x0/noise shape mismatch");
    if (t < 0 || t >= sch.T) throw IndexError("diffusion_loss: t out of range");
    double abar = sch.alpha_bar[static_cast<size_t>(t)];
    Array x_t = x0;
    double sa = std::sqrt(abar), sn = std::sqrt(1.0 - abar);
    for (size_t i = 0; i < x_t.data.size(); ++i)
        x_t.data[i] = sa * x0.data[i] + sn * noise.data[i];
    Tensor pred = model.forward(lv, x_t, cond, t);
    Tensor diff = sub(pred, Tensor::constant(noise));
    return mean(mul(diff, diff));
}

// Same objective with graph-valued conditions (see ConditioningGraph).
inline Tensor diffusion_loss_graph(Leaves& lv, const ToyDenoiser& model, const Array& x0,
                                   const ConditioningGraph& cond, int t, const Array& noise,
                                   const NoiseSchedule& sch) {
    if (x0.shape != noise.shape) throw ShapeError("diffusion_loss: x0/noise shape mismatch");
    if (t < 0 || t >= sch.T) throw IndexError("diffusion_loss: t out of range");
    double abar = sch.alpha_bar[static_cast<size_t>(t)];
    Array x_t = x0;
    double sa = std::sqrt(abar), sn = std::sqrt(1.0 - abar);
    for (size_t i = 0; i < x_t.data.size(); ++i)
        x_t.data[i] = sa * x0.data[i] + sn * noise.data[i];
    Tensor pred = model.forward(lv, x_t, cond, t);
    Tensor diff = sub(pred, Tensor::constant(noise));
    return mean(mul(diff, diff));
}

inline double diffusion_loss(const ToyDenoiser& model, const Array& x0, const Conditioning& cond,
                             int t, const Array& noise, const NoiseSchedule& sch) {
    Leaves lv(false);
    return diffusion_loss_graph(lv, model, x0, cond, t, noise, sch).item();
}

// ---- sampling ----

// Deterministic given the seed: draws x_T, then one z per step with t > 0.
// Conditioning never consumes randomness, so the draw sequence is identical
// across conditioned/unconditioned runs of the same seed.
inline Array sample_image(const ToyDenoiser& model, const NoiseSchedule& sch,
                          const Conditioning& cond, uint64_t seed) {
    Rng rng(seed);
    int n = model.config().img;
    Array x(Shape{3, n, n});
    rng.fill_normal(x.data);
    Array zero(x.shape);
    for (int t = sch.T - 1; t >= 0; --t) {
        Array eps = model.denoise(x, cond, t);
        if (t > 0) {
            Array z(x.shape);
            rng.fill_normal(z.data);
            x = ddpm_step(x, eps, t, sch, z);
        } else {
            x = ddpm_step(x, eps, t, sch, zero);
        }
    }
    return x;
}

// Classifier-free guidance along the style direction: the conditioning dropout
// seen in training makes the style-free estimate meaningful, and extrapolating
// past it sharpens the style at sampling time. weight 1 is the plain
// conditioned path and weight 0 the style-free one, bit for bit; conditioning
// consumes no randomness, so all of them share the same noise stream.
inline Array guided_sample_image(const ToyDenoiser& model, const NoiseSchedule& sch,
                                 const Array& text, const Array& style, double weight,
                                 uint64_t seed) {
    Conditioning with{text, style}, without{text, std::nullopt};
    Rng rng(seed);
    int n = model.config().img;
    Array x(Shape{3, n, n});
    rng.fill_normal(x.data);
    Array zero(x.shape);
    for (int t = sch.T - 1; t >= 0; --t) {
        Array eps = model.denoise(x, with, t);
        if (weight != 1.0) {
            Array eps_free = model.denoise(x, without, t);
            for (size_t i = 0; i < eps.data.size(); ++i)
                eps.data[i] = eps_free.data[i] + weight * (eps.data[i] - eps_free.data[i]);
        }
        if (t > 0) {
            Array z(x.shape);
            rng.fill_normal(z.data);
            x = ddpm_step(x, eps, t, sch, z);
        } else {
            x = ddpm_step(x, eps, t, sch, zero);
        }
    }
    return x;
}

}  // namespace fable
