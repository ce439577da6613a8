#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mgpt2/lora.hpp"
#include "mgpt2/nn.hpp"
#include "mgpt2/rng.hpp"

namespace mgpt2::lm {

using nn::Tensor;

struct LmConfig {
    int layers = 4;
    int width = 256;
    int heads = 4;
    int context = 512;
    int vocab_size = 0;
    double dropout = 0.0;

    void validate() const {
        check_config(layers >= 1 && width >= 1 && heads >= 1 && context >= 1 && vocab_size >= 1,
                     "lm config fields must be positive");
        check_config(width % heads == 0, "lm width must divide by head count");
        check_config(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    }
};

struct GenerationConfig {
    int max_new_tokens = 64;
    double temperature = 1.0;
    int top_k = 10;
    std::vector<int> stop_ids;
    std::uint64_t seed = 0;

    void validate() const {
        check_config(temperature > 0.0, "generation temperature must be positive");
        check_config(top_k >= 1, "generation top_k must be at least 1");
        check_config(max_new_tokens >= 1, "generation needs max_new_tokens >= 1");
    }
};

// ---------------------------------------------------------------------------
// Transformer block (pre-norm, causal, LoRA-wrappable projections)
// ---------------------------------------------------------------------------

template <class S>
class LmBlock : public nn::Module<S> {
public:
    LmBlock() = default;
    LmBlock(int width, int heads, Rng& rng, const std::string& name)
        : width_(width),
          heads_(heads),
          ln1_(width, name + ".ln1"),
          ln2_(width, name + ".ln2"),
          qkv_(width, 3 * width, rng, name + ".attn.qkv"),
          attn_out_(width, width, rng, name + ".attn.out"),
          fc1_(width, 4 * width, rng, name + ".mlp.fc1"),
          fc2_(4 * width, width, rng, name + ".mlp.fc2") {}

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        ln1_.collect_parameters(out);
        ln2_.collect_parameters(out);
        qkv_.collect_parameters(out);
        attn_out_.collect_parameters(out);
        fc1_.collect_parameters(out);
        fc2_.collect_parameters(out);
    }

    void attach_adapters(int rank, double alpha, Rng& rng) {
        qkv_.attach_adapter(rank, alpha, rng);
        attn_out_.attach_adapter(rank, alpha, rng);
        fc1_.attach_adapter(rank, alpha, rng);
        fc2_.attach_adapter(rank, alpha, rng);
    }

    void collect_adapter_parameters(std::vector<nn::Parameter<S>*>& out) {
        for (auto* lin : {&qkv_, &attn_out_, &fc1_, &fc2_})
            if (lin->has_adapter()) lin->adapter().collect_parameters(out);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        const int b = x.dim(0), t = x.dim(1);
        const int hd = width_ / heads_;
        Tensor<S> h = ln1_.forward(x);
        Tensor<S> qkv = qkv_.forward(h);
        auto split = [&](int off) {
            return nn::permute(nn::reshape(nn::slice_last(qkv, off, width_), {b, t, heads_, hd}),
                               {0, 2, 1, 3});
        };
        Tensor<S> q = split(0);
        Tensor<S> k = split(width_);
        Tensor<S> v = split(2 * width_);
        Tensor<S> scores = nn::scale(nn::matmul(q, nn::permute(k, {0, 1, 3, 2})),
                                     static_cast<S>(1.0 / std::sqrt(double(hd))));
        scores = nn::add(scores, causal_mask(t));
        Tensor<S> ctx = nn::matmul(nn::softmax(scores), v);
        ctx = nn::reshape(nn::permute(ctx, {0, 2, 1, 3}), {b, t, width_});
        Tensor<S> attn = attn_out_.forward(ctx);
        Tensor<S> y = nn::add(x, attn);
        Tensor<S> m = fc2_.forward(nn::gelu(fc1_.forward(ln2_.forward(y))));
        return nn::add(y, m);
    }

    nn::LoraLinear<S>& qkv() { return qkv_; }
    nn::LoraLinear<S>& attn_out() { return attn_out_; }
    nn::LoraLinear<S>& fc1() { return fc1_; }
    nn::LoraLinear<S>& fc2() { return fc2_; }
    nn::LayerNorm<S>& ln1() { return ln1_; }
    nn::LayerNorm<S>& ln2() { return ln2_; }
    int heads() const { return heads_; }

private:
    Tensor<S> causal_mask(int t) {
        std::vector<S> m(static_cast<std::int64_t>(t) * t, S(0));
        for (int i = 0; i < t; ++i)
            for (int j = i + 1; j < t; ++j) m[static_cast<std::int64_t>(i) * t + j] = S(-1e9);
        return Tensor<S>::from({t, t}, std::move(m));
    }

    int width_ = 0, heads_ = 0;
    nn::LayerNorm<S> ln1_, ln2_;
    nn::LoraLinear<S> qkv_, attn_out_, fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

template <class S>
struct KvCache {
    std::vector<S> keys;    // t * width, layer-local
    std::vector<S> values;  // t * width
    int length = 0;
};

template <class S>
class Lm : public nn::Module<S> {
public:
    Lm() = default;
    Lm(const LmConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        wte_ = nn::EmbeddingTable<S>(cfg.vocab_size, cfg.width, rng, "lm.wte");
        wpe_ = nn::EmbeddingTable<S>(cfg.context, cfg.width, rng, "lm.wpe");
        for (int l = 0; l < cfg.layers; ++l)
            blocks_.emplace_back(cfg.width, cfg.heads, rng, "lm.block" + std::to_string(l));
        ln_f_ = nn::LayerNorm<S>(cfg.width, "lm.ln_f");
        head_ = nn::Parameter<S>(
            nn::gaussian_init<S>({cfg.vocab_size, cfg.width}, 0.0, 0.02, rng), "lm.head.weight");
    }

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        wte_.collect_parameters(out);
        wpe_.collect_parameters(out);
        for (auto& b : blocks_) b.collect_parameters(out);
        ln_f_.collect_parameters(out);
        out.push_back(&head_);
    }

    // Parameters excluding adapters (the freeze set for instruction tuning).
    std::vector<nn::Parameter<S>*> base_parameters() {
        std::vector<nn::Parameter<S>*> out;
        wte_.collect_parameters(out);
        wpe_.collect_parameters(out);
        for (auto& b : blocks_) {
            b.ln1().collect_parameters(out);
            b.ln2().collect_parameters(out);
            b.qkv().base().collect_parameters(out);
            b.attn_out().base().collect_parameters(out);
            b.fc1().base().collect_parameters(out);
            b.fc2().base().collect_parameters(out);
        }
        ln_f_.collect_parameters(out);
        out.push_back(&head_);
        return out;
    }

    std::vector<nn::Parameter<S>*> adapter_parameters() {
        std::vector<nn::Parameter<S>*> out;
        for (auto& b : blocks_) b.collect_adapter_parameters(out);
        return out;
    }

    void attach_adapters(int rank, double alpha, Rng& rng) {
        for (auto& b : blocks_) b.attach_adapters(rank, alpha, rng);
    }

    bool has_adapters() { return !adapter_parameters().empty(); }

    const LmConfig& config() const { return cfg_; }
    nn::EmbeddingTable<S>& wte() { return wte_; }
    nn::Parameter<S>& head() { return head_; }
    std::vector<LmBlock<S>>& blocks() { return blocks_; }

    // Appends input-embedding and output-projection rows for ids
    // [old_vocab, new_vocab); existing rows stay bit-identical.
    void grow_embeddings(int new_vocab, Rng& rng) {
        const int old_vocab = cfg_.vocab_size;
        check_contract(new_vocab >= old_vocab, "vocabulary growth cannot shrink");
        if (new_vocab == old_vocab) return;
        wte_.grow(new_vocab, rng);
        std::vector<S> head_data(static_cast<std::int64_t>(new_vocab) * cfg_.width);
        std::copy(head_.value.values().begin(), head_.value.values().end(), head_data.begin());
        for (std::int64_t i = static_cast<std::int64_t>(old_vocab) * cfg_.width;
             i < static_cast<std::int64_t>(new_vocab) * cfg_.width; ++i)
            head_data[i] = static_cast<S>(rng.gaussian(0.0, 0.02));
        head_.value = Tensor<S>::from({new_vocab, cfg_.width}, std::move(head_data));
        head_.value.set_requires_grad(true);
        cfg_.vocab_size = new_vocab;
    }

    // Full-sequence forward: ids [B, T] -> logits [B, T, V].
    Tensor<S> logits(const std::vector<int>& ids, int batch, int t, Rng* dropout_rng = nullptr) {
        check_contract(t <= cfg_.context,
                       "sequence length " + std::to_string(t) + " exceeds context " +
                           std::to_string(cfg_.context));
        std::vector<int> positions(static_cast<std::size_t>(batch) * t);
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < t; ++i) positions[static_cast<std::size_t>(b) * t + i] = i;
        Tensor<S> x = nn::add(wte_.forward(ids, {batch, t}),
                              wpe_.forward(positions, {batch, t}));
        x = maybe_dropout(x, dropout_rng);
        for (auto& blk : blocks_) x = maybe_dropout(blk.forward(x), dropout_rng);
        x = ln_f_.forward(x);
        return nn::linear(x, head_.value);
    }

    // Mean cross entropy over target positions only. Each pair is
    // (prompt ids, target ids); the model predicts every next token of the
    // concatenation but only target tokens enter the loss.
    Tensor<S> ce_loss(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch,
                      int pad_id, Rng* dropout_rng = nullptr) {
        check_contract(!batch.empty(), "ce_loss needs at least one sequence");
        int max_len = 0;
        for (const auto& [prompt, target] : batch) {
            const int len = static_cast<int>(prompt.size() + target.size());
            check_contract(len >= 2, "ce_loss sequence too short");
            check_contract(len <= cfg_.context, "sequence length " + std::to_string(len) +
                                                    " exceeds context " +
                                                    std::to_string(cfg_.context));
            max_len = std::max(max_len, len);
        }
        const int b = static_cast<int>(batch.size());
        const int t_in = max_len - 1;
        std::vector<int> inputs(static_cast<std::size_t>(b) * t_in, pad_id);
        std::vector<int> targets(static_cast<std::size_t>(b) * t_in, 0);
        std::vector<S> weights(static_cast<std::size_t>(b) * t_in, S(0));
        for (int i = 0; i < b; ++i) {
            std::vector<int> seq(batch[i].first);
            seq.insert(seq.end(), batch[i].second.begin(), batch[i].second.end());
            const int prompt_len = static_cast<int>(batch[i].first.size());
            for (int p = 0; p + 1 < static_cast<int>(seq.size()); ++p) {
                inputs[static_cast<std::size_t>(i) * t_in + p] = seq[p];
                targets[static_cast<std::size_t>(i) * t_in + p] = seq[p + 1];
                if (p + 1 >= prompt_len)
                    weights[static_cast<std::size_t>(i) * t_in + p] = S(1);
            }
        }
        Tensor<S> l = logits(inputs, b, t_in, dropout_rng);
        return nn::cross_entropy(l, targets, weights);
    }

    // ------------------------------------------------------------------
    // Incremental inference with a per-layer KV cache
    // ------------------------------------------------------------------

    std::vector<KvCache<S>> make_cache() const {
        return std::vector<KvCache<S>>(cfg_.layers);
    }

    // Feeds one token at the given position, returns the logits row.
    std::vector<S> forward_step(int token, int position, std::vector<KvCache<S>>& cache) {
        check_contract(position < cfg_.context, "generation position exceeds context window");
        const int w = cfg_.width;
        std::vector<S> x(w);
        {
            const auto& te = wte_.table().value.values();
            const auto& pe = wpe_.table().value.values();
            check_contract(token >= 0 && token < cfg_.vocab_size, "token id out of vocabulary");
            for (int j = 0; j < w; ++j)
                x[j] = te[static_cast<std::int64_t>(token) * w + j] +
                       pe[static_cast<std::int64_t>(position) * w + j];
        }
        for (int l = 0; l < cfg_.layers; ++l) {
            auto& blk = blocks_[l];
            auto& kv = cache[l];
            std::vector<S> h = norm_row(x, blk.ln1());
            std::vector<S> qkv = lora_gemv(blk.qkv(), h);
            kv.keys.insert(kv.keys.end(), qkv.begin() + w, qkv.begin() + 2 * w);
            kv.values.insert(kv.values.end(), qkv.begin() + 2 * w, qkv.begin() + 3 * w);
            ++kv.length;

            const int heads = blk.heads();
            const int hd = w / heads;
            const double scale = 1.0 / std::sqrt(double(hd));
            std::vector<S> ctx(w, S(0));
            std::vector<double> scores(kv.length);
            for (int hh = 0; hh < heads; ++hh) {
                const S* q = qkv.data() + hh * hd;
                double mx = -1e300;
                for (int tpos = 0; tpos < kv.length; ++tpos) {
                    const S* kr = kv.keys.data() + static_cast<std::int64_t>(tpos) * w + hh * hd;
                    double dot = 0;
                    for (int j = 0; j < hd; ++j) dot += double(q[j]) * double(kr[j]);
                    scores[tpos] = dot * scale;
                    mx = std::max(mx, scores[tpos]);
                }
                double denom = 0;
                for (int tpos = 0; tpos < kv.length; ++tpos) {
                    scores[tpos] = std::exp(scores[tpos] - mx);
                    denom += scores[tpos];
                }
                for (int tpos = 0; tpos < kv.length; ++tpos) {
                    const double p = scores[tpos] / denom;
                    const S* vr = kv.values.data() + static_cast<std::int64_t>(tpos) * w + hh * hd;
                    for (int j = 0; j < hd; ++j)
                        ctx[hh * hd + j] += static_cast<S>(p * double(vr[j]));
                }
            }
            std::vector<S> attn = lora_gemv(blk.attn_out(), ctx);
            for (int j = 0; j < w; ++j) x[j] += attn[j];
            std::vector<S> m = norm_row(x, blk.ln2());
            std::vector<S> f1 = lora_gemv(blk.fc1(), m);
            for (auto& v : f1) {
                const double xv = double(v);
                v = static_cast<S>(xv * 0.5 * (1.0 + std::erf(xv * 0.70710678118654752440)));
            }
            std::vector<S> f2 = lora_gemv(blk.fc2(), f1);
            for (int j = 0; j < w; ++j) x[j] += f2[j];
        }
        std::vector<S> hf = norm_row(x, ln_f_);
        std::vector<S> out(cfg_.vocab_size, S(0));
        nn::gemm_nt(out.data(), hf.data(), head_.value.values().data(), 1, cfg_.vocab_size, w);
        return out;
    }

    // Autoregressive sampling: top-k filter, temperature softmax, seeded
    // draw; greedy argmax when top_k == 1. Returns only the new ids,
    // including the stop id when one fires.
    std::vector<int> generate(const std::vector<int>& prompt, const GenerationConfig& cfg) {
        cfg.validate();
        check_contract(!prompt.empty(), "generation needs a non-empty prompt");
        check_contract(static_cast<int>(prompt.size()) < cfg_.context,
                       "prompt length " + std::to_string(prompt.size()) +
                           " must be below context " + std::to_string(cfg_.context));
        nn::NoGradGuard no_grad;
        Rng rng(cfg.seed);
        auto cache = make_cache();
        std::vector<S> logits_row;
        for (std::size_t i = 0; i < prompt.size(); ++i)
            logits_row = forward_step(prompt[i], static_cast<int>(i), cache);

        std::vector<int> out;
        int position = static_cast<int>(prompt.size());
        for (int stepi = 0; stepi < cfg.max_new_tokens; ++stepi) {
            const int next = sample_from(logits_row, cfg, rng);
            out.push_back(next);
            if (std::find(cfg.stop_ids.begin(), cfg.stop_ids.end(), next) != cfg.stop_ids.end())
                break;
            if (position >= cfg_.context) break;  // window exhausted
            logits_row = forward_step(next, position, cache);
            ++position;
        }
        return out;
    }

private:
    Tensor<S> maybe_dropout(const Tensor<S>& x, Rng* rng) {
        if (cfg_.dropout <= 0.0 || rng == nullptr) return x;
        const S keep_scale = static_cast<S>(1.0 / (1.0 - cfg_.dropout));
        std::vector<S> mask(x.numel());
        for (auto& m : mask) m = rng->uniform() < cfg_.dropout ? S(0) : keep_scale;
        return nn::mul(x, Tensor<S>::from(x.shape(), std::move(mask)));
    }

    std::vector<S> norm_row(const std::vector<S>& x, nn::LayerNorm<S>& ln) {
        std::vector<nn::Parameter<S>*> ps;
        ln.collect_parameters(ps);
        const auto& gamma = ps[0]->value.values();
        const auto& beta = ps[1]->value.values();
        const int w = static_cast<int>(x.size());
        double mu = 0;
        for (auto v : x) mu += double(v);
        mu /= w;
        double var = 0;
        for (auto v : x) var += (double(v) - mu) * (double(v) - mu);
        var /= w;
        const double is = 1.0 / std::sqrt(var + 1e-5);
        std::vector<S> out(w);
        for (int j = 0; j < w; ++j)
            out[j] = static_cast<S>((double(x[j]) - mu) * is * double(gamma[j]) + double(beta[j]));
        return out;
    }

    std::vector<S> lora_gemv(nn::LoraLinear<S>& lin, const std::vector<S>& x) {
        const auto& w = lin.base().weight().value;
        const int out_dim = w.dim(0), in_dim = w.dim(1);
        std::vector<S> y(out_dim, S(0));
        nn::gemm_nt(y.data(), x.data(), w.values().data(), 1, out_dim, in_dim);
        std::vector<nn::Parameter<S>*> ps;
        lin.base().collect_parameters(ps);
        if (ps.size() > 1) {
            const auto& bias = ps[1]->value.values();
            for (int j = 0; j < out_dim; ++j) y[j] += bias[j];
        }
        if (lin.has_adapter()) {
            auto& ad = lin.adapter();
            const int r = ad.rank();
            std::vector<S> t1(r, S(0));
            nn::gemm_nt(t1.data(), x.data(), ad.down().value.values().data(), 1, r, in_dim);
            std::vector<S> t2(out_dim, S(0));
            nn::gemm_nt(t2.data(), t1.data(), ad.up().value.values().data(), 1, out_dim, r);
            const S sc = static_cast<S>(ad.alpha() / ad.rank());
            for (int j = 0; j < out_dim; ++j) y[j] += sc * t2[j];
        }
        return y;
    }

    int sample_from(const std::vector<S>& logits_row, const GenerationConfig& cfg, Rng& rng) {
        const int v = static_cast<int>(logits_row.size());
        if (cfg.top_k == 1) {
            int best = 0;
            for (int j = 1; j < v; ++j)
                if (logits_row[j] > logits_row[best]) best = j;  // ties keep the lowest id
            return best;
        }
        const int k = std::min(cfg.top_k, v);
        std::vector<int> idx(v);
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (logits_row[a] != logits_row[b]) return logits_row[a] > logits_row[b];
            return a < b;
        });
        double mx = double(logits_row[idx[0]]);
        std::vector<double> probs(k);
        double denom = 0;
        for (int j = 0; j < k; ++j) {
            probs[j] = std::exp((double(logits_row[idx[j]]) - mx) / cfg.temperature);
            denom += probs[j];
        }
        double r = rng.uniform() * denom;
        for (int j = 0; j < k; ++j) {
            r -= probs[j];
            if (r <= 0) return idx[j];
        }
        return idx[k - 1];
    }

    LmConfig cfg_;
    nn::EmbeddingTable<S> wte_, wpe_;
    std::vector<LmBlock<S>> blocks_;
    nn::LayerNorm<S> ln_f_;
    nn::Parameter<S> head_;
};

}  // namespace mgpt2::lm
