#pragma once

// Toy sequence storyteller: a small causal transformer decoder that consumes
// projected per-image token blocks plus an instruction, and is trained jointly
// on full-story generation (all N images observed) and story prediction (a
// uniformly sampled k-image prefix observed, all N plots supervised).
//
// Story region layout is fixed-length: each plot is terminated by the reserved
// separator token, and decoding emits exactly `story_tokens` tokens. Keeping
// the region length independent of the decoded content makes the separator
// structure a positional pattern the tiny decoder can learn quickly, and the
// parser stays grammar-agnostic (it only splits on separators).
//
// Learnability note for tiny models: the story region starts at
// k*proj.out_tokens + |instruction| + 1, which varies with the prefix length
// k. When proj.out_tokens is a multiple of the per-plot period (plot length +
// separator) and all instruction variants share one length, separator slots
// fall on the same absolute positions modulo the period for every k, so the
// positional embeddings alone can carry the structure. The defaults satisfy
// this (out_tokens = 4, three-word plots).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fable/errors.hpp"
#include "fable/nn.hpp"
#include "fable/rng.hpp"
#include "fable/styleseq.hpp"
#include "fable/tensor.hpp"
#include "fable/vocab.hpp"

namespace fable {

enum class StoryTask { generate, predict };

// ---------------------------------------------------------------------------
// image token projection: two affine maps with a nonlinearity between,
// applied to the flattened feature block of one image

struct ProjectionConfig {
    int in_tokens = 4;    // rows of the incoming feature block
    int in_dim = 16;      // channels of the incoming feature block
    int out_tokens = 4;   // rows of the projected block (32 at paper scale)
    int out_dim = 48;     // channels of the projected block (768 at paper scale)
    int hidden = 96;
};

struct ImageProjection {
    ProjectionConfig cfg;
    Linear fc1, fc2;

    ImageProjection(ParamStore& ps, const std::string& name, const ProjectionConfig& c, Rng& rng)
        : cfg(c),
          fc1(ps, name + ".fc1", c.in_tokens * c.in_dim, c.hidden, rng),
          fc2(ps, name + ".fc2", c.hidden, c.out_tokens * c.out_dim, rng) {
        if (c.in_tokens < 1 || c.in_dim < 1 || c.out_tokens < 1 || c.out_dim < 1 || c.hidden < 1)
            throw ValueError("projection dims must be positive");
    }

    // [in_tokens × in_dim] -> [out_tokens × out_dim]
    Tensor operator()(Leaves& lv, const Tensor& block) const {
        Tensor flat = reshape(block, Shape{1, cfg.in_tokens * cfg.in_dim});
        Tensor h = relu(fc1(lv, flat));
        return reshape(fc2(lv, h), Shape{cfg.out_tokens, cfg.out_dim});
    }
};

// frozen evaluation over a feature stack [k × in_tokens × in_dim];
// one projected block per image, in image-stream order
inline std::vector<Array> project_image_tokens(const ImageProjection& proj, const Array& features) {
    if (features.shape.size() != 3 || features.shape[1] != proj.cfg.in_tokens ||
        features.shape[2] != proj.cfg.in_dim)
        throw ShapeError("project_image_tokens: want [k, " + std::to_string(proj.cfg.in_tokens) +
                         ", " + std::to_string(proj.cfg.in_dim) + "], got " +
                         shape_str(features.shape));
    if (!features.all_finite()) throw NumericError("project_image_tokens: non-finite features");
    int k = features.shape[0];
    size_t block = static_cast<size_t>(proj.cfg.in_tokens) * static_cast<size_t>(proj.cfg.in_dim);
    std::vector<Array> out;
    out.reserve(static_cast<size_t>(k));
    Leaves lv(false);
    for (int i = 0; i < k; ++i) {
        Array one(Shape{proj.cfg.in_tokens, proj.cfg.in_dim});
        std::copy_n(features.data.begin() + static_cast<long>(block) * i, block, one.data.begin());
        out.push_back(proj(lv, Tensor::constant(one)).value());
    }
    return out;
}

// ---------------------------------------------------------------------------
// story plots and token-stream helpers

struct StoryPlots {
    std::vector<std::vector<int>> plot_ids;  // exactly N entries
    std::vector<std::string> plots;          // decoded text, aligned with plot_ids
};

// uniform k in [1, N-1]
inline int sample_k(int n, Rng& rng) {
    if (n < 2) throw ValueError("sample_k: need story length >= 2, got " + std::to_string(n));
    return rng.uniform_int(1, n - 1);
}

// ---------------------------------------------------------------------------
// decoder configuration and model

struct NarratorConfig {
    int vocab = 64;
    int dim = 48;
    int heads = 4;
    int blocks = 2;
    int max_len = 96;        // positional table size
    int story_len = 5;       // N
    int story_tokens = 20;   // fixed story-region length, separators included
    double lambda_g = 1.0;
    double lambda_p = 1.0;
    double temperature = 0.0;  // 0 = greedy decoding
    ProjectionConfig proj;
};

namespace detail {

// causal self-attention over one sequence; reuses the shared attention block
// shapes but adds a lower-triangular mask on the logits
struct CausalSelfAttention {
    int dim, heads, head_dim;
    std::vector<Linear> wq, wk, wv, wo;

    CausalSelfAttention(ParamStore& ps, const std::string& name, int dim_, int heads_, Rng& rng)
        : dim(dim_), heads(heads_), head_dim(dim_ / heads_) {
        if (heads_ < 1 || dim_ % heads_ != 0)
            throw ValueError("attention dim must be divisible by head count");
        for (int h = 0; h < heads_; ++h) {
            std::string p = name + ".h" + std::to_string(h);
            wq.emplace_back(ps, p + ".q", dim_, head_dim, rng);
            wk.emplace_back(ps, p + ".k", dim_, head_dim, rng);
            wv.emplace_back(ps, p + ".v", dim_, head_dim, rng);
            wo.emplace_back(ps, p + ".o", head_dim, dim_, rng);
        }
    }

    Tensor operator()(Leaves& lv, const Tensor& x) const {
        int len = x.shape()[0];
        Array mask(Shape{len, len});
        for (int i = 0; i < len; ++i)
            for (int j = i + 1; j < len; ++j) mask(i, j) = -1e30;
        Tensor maskT = Tensor::constant(mask);
        double inv = 1.0 / std::sqrt(static_cast<double>(head_dim));
        Tensor out;
        for (int h = 0; h < heads; ++h) {
            Tensor q = wq[static_cast<size_t>(h)](lv, x);
            Tensor k = wk[static_cast<size_t>(h)](lv, x);
            Tensor v = wv[static_cast<size_t>(h)](lv, x);
            Tensor logits = add(scale(matmul(q, transpose(k)), inv), maskT);
            Tensor mixed = matmul(softmax_rows(logits), v);
            Tensor proj = wo[static_cast<size_t>(h)](lv, mixed);
            out = (h == 0) ? proj : add(out, proj);
        }
        return out;
    }
};

}  // namespace detail

struct ToyNarrator {
    NarratorConfig cfg;
    Vocab vocab;
    ParamStore* ps;
    Param* tok_embed;  // [vocab × dim]
    Param* pos_embed;  // [max_len × dim]
    ImageProjection proj;
    std::vector<detail::CausalSelfAttention> attn;
    std::vector<SqFfn> ffn;
    Linear head;
    std::vector<std::vector<int>> gen_instructions, pred_instructions;

    ToyNarrator(ParamStore& store, const NarratorConfig& c, Rng& rng, Vocab v = Vocab::story_vocab())
        : cfg(c),
          vocab(std::move(v)),
          ps(&store),
          tok_embed(nullptr),
          pos_embed(nullptr),
          proj(checked(store, c, vocab), "nar.proj", decoder_proj(c), rng),
          head(store, "nar.head", c.dim, c.vocab, rng) {
        tok_embed = &store.add("nar.tok", randn(Shape{c.vocab, c.dim}, rng, 1.0 / std::sqrt(c.dim)));
        pos_embed = &store.add("nar.pos", randn(Shape{c.max_len, c.dim}, rng, 1.0 / std::sqrt(c.dim)));
        for (int b = 0; b < c.blocks; ++b) {
            std::string p = "nar.blk" + std::to_string(b);
            attn.emplace_back(store, p + ".attn", c.dim, c.heads, rng);
            ffn.emplace_back(store, p + ".ffn", c.dim, rng);
        }
        for (const char* s : {"tell the story of these images", "write the story for this sequence"})
            gen_instructions.push_back(vocab.encode(s));
        for (const char* s : {"continue the story from these images", "predict the story from these scenes"})
            pred_instructions.push_back(vocab.encode(s));
    }

    static ParamStore& checked(ParamStore& store, const NarratorConfig& c, const Vocab& v) {
        if (c.lambda_g < 0.0 || c.lambda_p < 0.0) throw ValueError("loss weights must be >= 0");
        if (c.vocab != v.size()) throw ValueError("config vocab size does not match vocabulary");
        if (c.story_len < 2) throw ValueError("story length must be >= 2");
        return store;
    }

    // projected blocks live in decoder space
    static ProjectionConfig decoder_proj(const NarratorConfig& c) {
        ProjectionConfig pc = c.proj;
        pc.out_dim = c.dim;
        return pc;
    }

    const std::vector<std::vector<int>>& instruction_list(StoryTask task) const {
        switch (task) {
            case StoryTask::generate: return gen_instructions;
            case StoryTask::predict: return pred_instructions;
        }
        throw ValueError("unknown story task");
    }

    std::vector<int> pick_instruction(StoryTask task, Rng& rng) const {
        const auto& list = instruction_list(task);
        if (list.empty()) throw ValueError("no instruction variants for task");
        return list[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(list.size()) - 1))];
    }

    // context rows: [projected image blocks in stream order ; instruction embeddings]
    Tensor context_graph(Leaves& lv, const Array& features, const std::vector<int>& instruction) const {
        std::vector<Tensor> parts;
        int k = features.shape.size() == 3 ? features.shape[0] : -1;
        if (k < 1) throw ShapeError("context: want [k, tokens, dim] features, got " +
                                    shape_str(features.shape));
        if (features.shape[1] != proj.cfg.in_tokens || features.shape[2] != proj.cfg.in_dim)
            throw ShapeError("context: feature block is " + shape_str(features.shape));
        size_t block = static_cast<size_t>(proj.cfg.in_tokens) * static_cast<size_t>(proj.cfg.in_dim);
        for (int i = 0; i < k; ++i) {
            Array one(Shape{proj.cfg.in_tokens, proj.cfg.in_dim});
            std::copy_n(features.data.begin() + static_cast<long>(block) * i, block, one.data.begin());
            parts.push_back(proj(lv, Tensor::constant(one)));
        }
        if (!instruction.empty())
            parts.push_back(embedding(lv(*tok_embed), instruction));
        return parts.size() == 1 ? parts[0] : concat0(parts);
    }

    // full forward: returns next-token logits for every position
    Tensor logits_graph(Leaves& lv, const Tensor& context, const std::vector<int>& story_inputs) const {
        Tensor x = context;
        if (!story_inputs.empty())
            x = concat0({context, embedding(lv(*tok_embed), story_inputs)});
        int len = x.shape()[0];
        if (len > cfg.max_len)
            throw ShapeError("sequence length " + std::to_string(len) + " exceeds positional table " +
                             std::to_string(cfg.max_len));
        x = add(x, slice0(lv(*pos_embed), 0, len));
        for (size_t b = 0; b < attn.size(); ++b) {
            x = add(x, attn[b](lv, x));
            x = add(x, ffn[b](lv, x));
        }
        return head(lv, x);
    }

    // flattens N plots into the fixed-length supervised story stream:
    // plot tokens with a separator after each plot
    std::vector<int> story_stream(const std::vector<std::vector<int>>& plots) const {
        if (static_cast<int>(plots.size()) != cfg.story_len)
            throw ShapeError("story_stream: want " + std::to_string(cfg.story_len) + " plots, got " +
                             std::to_string(plots.size()));
        std::vector<int> ys;
        for (const auto& p : plots) {
            if (p.empty()) throw ValueError("story_stream: empty plot");
            for (int id : p) {
                if (id < 0 || id >= cfg.vocab) throw IndexError("story_stream: token id out of range");
                ys.push_back(id);
            }
            ys.push_back(Vocab::sep);
        }
        if (static_cast<int>(ys.size()) != cfg.story_tokens)
            throw ShapeError("story_stream: plots flatten to " + std::to_string(ys.size()) +
                             " tokens, configured region is " + std::to_string(cfg.story_tokens));
        return ys;
    }

    // teacher-forced story logits: context + [<bos>, y_0 .. y_{m-2}] in,
    // rows aligned with y_0 .. y_{m-1} out
    Tensor story_logits_graph(Leaves& lv, const Array& features, const std::vector<int>& instruction,
                              const std::vector<int>& targets) const {
        if (targets.empty()) throw ShapeError("story_logits: no target tokens");
        std::vector<int> inputs;
        inputs.reserve(targets.size());
        inputs.push_back(Vocab::bos);
        inputs.insert(inputs.end(), targets.begin(), targets.end() - 1);
        Tensor ctx = context_graph(lv, features, instruction);
        Tensor logits = logits_graph(lv, ctx, inputs);
        int len = logits.shape()[0];
        return slice0(logits, len - static_cast<int>(targets.size()), len);
    }
};

// ---------------------------------------------------------------------------
// losses

// token-level cross-entropy averaged over non-padding positions
inline Tensor cross_entropy_graph(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2 || logits.shape()[0] != static_cast<int>(targets.size()))
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    std::vector<int> mask(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= logits.shape()[1])
            throw IndexError("cross_entropy: target id out of range");
        mask[i] = targets[i] == Vocab::pad ? 0 : 1;
    }
    Tensor logp = pick(log_softmax_rows(logits), targets);
    return scale(masked_mean(logp, mask), -1.0);
}

// joint objective over aligned generation and prediction logits:
// lambda_g * CE(gen) + lambda_p * CE(pred)
inline Tensor joint_loss(const Tensor& gen_logits, const Tensor& pred_logits,
                         const std::vector<int>& targets, double lambda_g, double lambda_p) {
    if (lambda_g < 0.0 || lambda_p < 0.0) throw ValueError("joint_loss: weights must be >= 0");
    Tensor g = scale(cross_entropy_graph(gen_logits, targets), lambda_g);
    Tensor p = scale(cross_entropy_graph(pred_logits, targets), lambda_p);
    return add(g, p);
}

// one training sample: per-image features plus the N aligned plots
struct StorySample {
    Array features;  // [N × in_tokens × in_dim]
    std::vector<std::vector<int>> plot_ids;
};

// builds the generation pass (all N images) and the prediction pass (first k
// images) against the same full-story targets, weighted by the config lambdas
inline Tensor sample_joint_loss_graph(Leaves& lv, const ToyNarrator& model, const StorySample& s,
                                      int k, const std::vector<int>& gen_instr,
                                      const std::vector<int>& pred_instr) {
    int n = model.cfg.story_len;
    if (s.features.shape.size() != 3 || s.features.shape[0] != n)
        throw ShapeError("sample_joint_loss: want " + std::to_string(n) + " feature blocks, got " +
                         shape_str(s.features.shape));
    if (k < 1 || k >= n) throw ValueError("sample_joint_loss: k out of range");
    std::vector<int> ys = model.story_stream(s.plot_ids);

    Tensor gen_logits = model.story_logits_graph(lv, s.features, gen_instr, ys);

    size_t block = static_cast<size_t>(s.features.shape[1]) * static_cast<size_t>(s.features.shape[2]);
    Array prefix(Shape{k, s.features.shape[1], s.features.shape[2]});
    std::copy_n(s.features.data.begin(), block * static_cast<size_t>(k), prefix.data.begin());
    Tensor pred_logits = model.story_logits_graph(lv, prefix, pred_instr, ys);

    return joint_loss(gen_logits, pred_logits, ys, model.cfg.lambda_g, model.cfg.lambda_p);
}

// ---------------------------------------------------------------------------
// decoding

namespace detail {

inline int argmax_row(const Array& logits, int row) {
    int v = logits.shape[1];
    int best = 0;
    double bv = logits(row, 0);
    for (int j = 1; j < v; ++j)
        if (logits(row, j) > bv) {
            bv = logits(row, j);
            best = j;
        }
    return best;
}

inline int sample_row(const Array& logits, int row, double temperature, Rng& rng) {
    int v = logits.shape[1];
    double m = logits(row, 0);
    for (int j = 1; j < v; ++j) m = std::max(m, logits(row, j));
    std::vector<double> p(static_cast<size_t>(v));
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
        p[static_cast<size_t>(j)] = std::exp((logits(row, j) - m) / temperature);
        z += p[static_cast<size_t>(j)];
    }
    double u = rng.uniform() * z, acc = 0.0;
    for (int j = 0; j < v; ++j) {
        acc += p[static_cast<size_t>(j)];
        if (u < acc) return j;
    }
    return v - 1;
}

// emits exactly cfg.story_tokens tokens autoregressively, then splits on the
// separator; throws DecodeError carrying the plots parsed so far when the
// separator structure is malformed
inline StoryPlots decode_story(const ToyNarrator& model, const Array& features,
                               const std::vector<int>& instruction, Rng* rng) {
    Leaves lv(false);
    Tensor ctx = model.context_graph(lv, features, instruction);
    std::vector<int> emitted;
    for (int step = 0; step < model.cfg.story_tokens; ++step) {
        std::vector<int> inputs;
        inputs.push_back(Vocab::bos);
        inputs.insert(inputs.end(), emitted.begin(), emitted.end());
        Tensor logits = model.logits_graph(lv, ctx, inputs);
        const Array& lv_ = logits.value();
        int row = lv_.shape[0] - 1;
        int next = (model.cfg.temperature > 0.0 && rng != nullptr)
                       ? sample_row(lv_, row, model.cfg.temperature, *rng)
                       : argmax_row(lv_, row);
        emitted.push_back(next);
    }

    StoryPlots out;
    std::vector<int> cur;
    auto partial = [&] {
        std::vector<std::string> got = out.plots;
        if (!cur.empty()) got.push_back(model.vocab.decode(cur));
        return got;
    };
    for (int id : emitted) {
        if (id == Vocab::sep) {
            if (cur.empty())
                throw DecodeError("empty plot before separator", partial());
            out.plot_ids.push_back(cur);
            out.plots.push_back(model.vocab.decode(cur));
            cur.clear();
        } else {
            cur.push_back(id);
        }
    }
    if (!cur.empty())
        throw DecodeError("story region ended inside an unterminated plot", partial());
    if (static_cast<int>(out.plot_ids.size()) != model.cfg.story_len)
        throw DecodeError("decoded " + std::to_string(out.plot_ids.size()) + " plots, want " +
                              std::to_string(model.cfg.story_len),
                          partial());
    return out;
}

}  // namespace detail

// full-story generation from exactly N images' features [N × tokens × dim]
inline StoryPlots generate_story(const ToyNarrator& model, const Array& features,
                                 const std::vector<int>& instruction, Rng* rng = nullptr) {
    if (features.shape.size() != 3 || features.shape[0] != model.cfg.story_len)
        throw ShapeError("generate_story: want " + std::to_string(model.cfg.story_len) +
                         " feature blocks, got " + shape_str(features.shape));
    return detail::decode_story(model, features, instruction, rng);
}

// story prediction from a k-image prefix, 1 <= k <= N-1; still returns N plots
inline StoryPlots predict_story(const ToyNarrator& model, const Array& features,
                                const std::vector<int>& instruction, Rng* rng = nullptr) {
    if (features.shape.size() != 3)
        throw ShapeError("predict_story: want [k, tokens, dim] features, got " +
                         shape_str(features.shape));
    int k = features.shape[0];
    if (k < 1 || k >= model.cfg.story_len)
        throw ValueError("predict_story: k must be in [1, N-1], got " + std::to_string(k));
    return detail::decode_story(model, features, instruction, rng);
}

}  // namespace fable
