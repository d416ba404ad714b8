#pragma once

// Style-sequence encoder: a learned latent query resampled over a
// variable-length image sequence by alternating cross-attention and
// self-attention blocks, producing a fixed-size style latent.

#include <string>
#include <vector>

#include "fable/image.hpp"
#include "fable/nn.hpp"

namespace fable {

// ---- toy image feature encoder ----
//
// Stand-in for a big pretrained encoder: per image, split into grid x grid
// patches; box-average each patch down to cell x cell mean colors; map the
// flattened 3*cell^2 vector through a frozen seeded affine projection to C
// channels. One output token per patch: [k x L_v x C], L_v = grid^2.

struct ToyEncoderConfig {
    int grid = 2;
    int cell = 2;
    int channels = 64;
    uint64_t seed = 0x7f3e;
};

struct ToyImageEncoder {
    ToyEncoderConfig cfg;
    Array W;  // [3*cell^2 x C], frozen
    Array b;  // [C]

    explicit ToyImageEncoder(ToyEncoderConfig c = {}) : cfg(c) {
        Rng rng(cfg.seed);
        int in = 3 * cfg.cell * cfg.cell;
        W = Array(Shape{in, cfg.channels});
        rng.fill_normal(W.data, 0.0, 1.0 / std::sqrt(static_cast<double>(in)));
        b = Array(Shape{cfg.channels});
        rng.fill_normal(b.data, 0.0, 0.1);
    }

    int tokens_per_image() const { return cfg.grid * cfg.grid; }

    Array encode(const std::vector<Image>& images) const {
        if (images.empty()) throw ValueError("encode: need at least one image");
        int H = images[0].h, Wd = images[0].w;
        for (const auto& im : images)
            if (im.h != H || im.w != Wd)
                throw ShapeError("encode: images must share dimensions");
        int side = cfg.grid * cfg.cell;
        if (H < side || Wd < side)
            throw ShapeError("encode: image smaller than patch grid");

        int k = static_cast<int>(images.size());
        int Lv = tokens_per_image(), C = cfg.channels;
        Array out(Shape{k, Lv, C});
        std::vector<double> cells(static_cast<size_t>(3 * cfg.cell * cfg.cell));
        for (int n = 0; n < k; ++n) {
            const Image& im = images[static_cast<size_t>(n)];
            for (int pi = 0; pi < cfg.grid; ++pi)
                for (int pj = 0; pj < cfg.grid; ++pj) {
                    // subcell (ci,cj) of patch (pi,pj): box mean over its pixel span
                    std::fill(cells.begin(), cells.end(), 0.0);
                    int sub = cfg.grid * cfg.cell;
                    for (int ci = 0; ci < cfg.cell; ++ci)
                        for (int cj = 0; cj < cfg.cell; ++cj) {
                            int gi = pi * cfg.cell + ci, gj = pj * cfg.cell + cj;
                            int i0 = gi * H / sub, i1 = (gi + 1) * H / sub;
                            int j0 = gj * Wd / sub, j1 = (gj + 1) * Wd / sub;
                            double acc[3] = {0, 0, 0};
                            for (int i = i0; i < i1; ++i)
                                for (int j = j0; j < j1; ++j)
                                    for (int c = 0; c < 3; ++c) acc[c] += im.at(i, j)[c];
                            double cnt = static_cast<double>(i1 - i0) * (j1 - j0);
                            for (int c = 0; c < 3; ++c)
                                cells[static_cast<size_t>((ci * cfg.cell + cj) * 3 + c)] =
                                    acc[c] / cnt;
                        }
                    double* tok = out.data.data() +
                                  (static_cast<size_t>(n) * Lv + pi * cfg.grid + pj) * C;
                    for (int c = 0; c < C; ++c) {
                        double s = b.data[static_cast<size_t>(c)];
                        for (size_t i = 0; i < cells.size(); ++i)
                            s += cells[i] * W.data[i * static_cast<size_t>(C) + c];
                        tok[c] = s;
                    }
                }
        }
        return out;
    }
};

inline Array encode_image_features(const ToyImageEncoder& enc, const std::vector<Image>& images) {
    return enc.encode(images);
}

// ---- fourier position embedding over the image index ----
//
// Row j holds interleaved (sin, cos) pairs of 2^b * pi * u_j for
// b = 0..num_bands-1, with u_j = j / max(k-1, 1). Shape [k x 2*num_bands].
inline Array fourier_position_embed(int k, int num_bands = 6) {
    if (k < 1) throw ValueError("fourier_position_embed: k must be >= 1");
    if (num_bands < 1) throw ValueError("fourier_position_embed: num_bands must be >= 1");
    int P = 2 * num_bands;
    Array out(Shape{k, P});
    for (int j = 0; j < k; ++j) {
        double u = static_cast<double>(j) / std::max(k - 1, 1);
        for (int bnd = 0; bnd < num_bands; ++bnd) {
            double arg = std::pow(2.0, bnd) * M_PI * u;
            out(j, 2 * bnd) = std::sin(arg);
            out(j, 2 * bnd + 1) = std::cos(arg);
        }
    }
    return out;
}

// Tiles per-image position rows across the token axis and concatenates onto
// the channel axis: [k x L_v x C] + [k x P] -> [k x L_v x (C+P)]. The leading
// C channels are the untouched source features.
inline Array augment_features(const Array& feats, const Array& pos) {
    if (feats.shape.size() != 3) throw ShapeError("augment_features: want [k, L_v, C]");
    if (pos.shape.size() != 2 || pos.shape[0] != feats.shape[0])
        throw ShapeError("augment_features: position rows must match image count");
    int k = feats.shape[0], Lv = feats.shape[1], C = feats.shape[2], P = pos.shape[1];
    Array out(Shape{k, Lv, C + P});
    for (int n = 0; n < k; ++n)
        for (int t = 0; t < Lv; ++t) {
            const double* src = feats.data.data() + (static_cast<size_t>(n) * Lv + t) * C;
            const double* pr = pos.data.data() + static_cast<size_t>(n) * P;
            double* dst = out.data.data() + (static_cast<size_t>(n) * Lv + t) * (C + P);
            std::copy(src, src + C, dst);
            std::copy(pr, pr + P, dst + C);
        }
    return out;
}

// ---- the resampler ----

struct SqConfig {
    int latent_len = 4;   // L_s
    int channels = 64;    // C (latent width; also the query input dim)
    int aug_dim = 76;     // C + P: what key/value projections consume
    int depth = 4;
    int head_count = 1;
    uint64_t seed = 1;
};

// Multi-head attention stated as a sum over heads: per head,
// softmax(Q K^T / sqrt(d)) V followed by that head's slice of the output
// projection. head_count = 1 recovers the plain printed formula.
struct SqAttention {
    std::vector<Linear> wq, wk, wv;  // per head: [C x d], [kv_dim x d]
    std::vector<Linear> wo;          // per head: [d x C]
    int head_dim = 0;

    SqAttention() = default;
    SqAttention(ParamStore& ps, const std::string& name, int q_dim, int kv_dim, int channels,
                int heads, Rng& rng, bool zero_out_proj = false) {
        if (channels % heads != 0)
            throw ValueError("SqAttention: channels must divide by head count");
        head_dim = channels / heads;
        for (int h = 0; h < heads; ++h) {
            std::string hp = name + ".h" + std::to_string(h);
            wq.emplace_back(ps, hp + ".q", q_dim, head_dim, rng);
            wk.emplace_back(ps, hp + ".k", kv_dim, head_dim, rng);
            wv.emplace_back(ps, hp + ".v", kv_dim, head_dim, rng);
            wo.emplace_back(ps, hp + ".o", head_dim, channels, rng, 1.0, zero_out_proj);
        }
    }

    Tensor operator()(Leaves& lv, const Tensor& q_in, const Tensor& kv_in) const {
        Tensor out;
        for (size_t h = 0; h < wq.size(); ++h) {
            Tensor q = wq[h](lv, q_in);
            Tensor k = wk[h](lv, kv_in);
            Tensor v = wv[h](lv, kv_in);
            Tensor att = softmax_rows(
                scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim))));
            Tensor head = wo[h](lv, matmul(att, v));
            out = h == 0 ? head : add(out, head);
        }
        return out;
    }
};

struct SqFfn {
    Linear in, out;
    SqFfn() = default;
    SqFfn(ParamStore& ps, const std::string& name, int channels, Rng& rng)
        : in(ps, name + ".in", channels, 4 * channels, rng),
          out(ps, name + ".out", 4 * channels, channels, rng) {}
    Tensor operator()(Leaves& lv, const Tensor& x) const { return out(lv, gelu(in(lv, x))); }
};

struct SqAdapter {
    SqConfig cfg;
    Param* s0 = nullptr;  // initial latent query, drawn once, then trained

    struct Block {
        SqAttention cross, self;
        SqFfn ffn_cross, ffn_self;
    };
    std::vector<Block> blocks;

    SqAdapter() = default;
    SqAdapter(ParamStore& ps, const std::string& prefix, SqConfig c, Rng& rng) : cfg(c) {
        s0 = &ps.add(prefix + ".s0", randn(Shape{cfg.latent_len, cfg.channels}, rng));
        for (int d = 0; d < cfg.depth; ++d) {
            std::string bp = prefix + ".blk" + std::to_string(d);
            Block blk;
            blk.cross = SqAttention(ps, bp + ".cross", cfg.channels, cfg.aug_dim, cfg.channels,
                                    cfg.head_count, rng);
            blk.ffn_cross = SqFfn(ps, bp + ".fc", cfg.channels, rng);
            blk.self = SqAttention(ps, bp + ".self", cfg.channels, cfg.channels, cfg.channels,
                                   cfg.head_count, rng);
            blk.ffn_self = SqFfn(ps, bp + ".fs", cfg.channels, rng);
            blocks.push_back(std::move(blk));
        }
    }

    // Graph-mode forward over augmented features [k x L_v x (C+P)].
    // Update order per block, residuals exactly as the update rule prints
    // them (the intermediate feeds both the FFN input and the outer
    // residual — a deliberate double residual):
    //   t = FFN(s + CrossAttn(s, features)) + s
    //   s = FFN(t + SelfAttn(t)) + t
    // No normalization layers anywhere.
    Tensor forward(Leaves& lv, const Array& augmented) const {
        if (augmented.shape.size() != 3 || augmented.shape[2] != cfg.aug_dim)
            throw ShapeError("sq_forward: want [k, L_v, " + std::to_string(cfg.aug_dim) +
                             "], got " + shape_str(augmented.shape));
        if (!augmented.all_finite()) throw NumericError("sq_forward: non-finite input feature");
        int rows = augmented.shape[0] * augmented.shape[1];
        Tensor kv = Tensor::constant(Array(Shape{rows, cfg.aug_dim}, augmented.data));
        Tensor s = lv(*s0);
        for (const auto& blk : blocks) {
            Tensor t = add(blk.ffn_cross(lv, add(s, blk.cross(lv, s, kv))), s);
            s = add(blk.ffn_self(lv, add(t, blk.self(lv, t, t))), t);
        }
        return s;
    }

    // Eval-mode convenience: -> style latent [L_s x C].
    Array encode(const Array& augmented) const {
        Leaves lv(false);
        return forward(lv, augmented).value();
    }
};

inline Array sq_forward(const SqAdapter& adapter, const Array& augmented) {
    return adapter.encode(augmented);
}

}  // namespace fable
