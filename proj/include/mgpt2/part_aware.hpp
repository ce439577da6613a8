#pragma once

#include <string>
#include <vector>

#include "mgpt2/vqvae.hpp"

namespace mgpt2::vq {

struct HolisticTokenPair {
    std::vector<int> body_ids;
    std::vector<int> hand_ids;
    int source_length = 0;
    int downsample_rate = 4;
};

// Two-stream tokenizer: separate body and hand encoders and codebooks. The
// hand stream quantizes first; the body stream quantizes a fusion of its own
// latents with the quantized hand stream (concatenation followed by a learned
// projection back to body latent width), so body tokens are conditioned on
// hand tokens. One joint decoder reconstructs both parts from the token pair.
template <class S>
class PartAwareVqVae : public nn::Module<S> {
public:
    PartAwareVqVae() = default;
    PartAwareVqVae(int body_dim, int hand_dim, int codebook_size, const VqEncoderConfig& cfg,
                   Rng& rng, const std::string& name = "pa_vqvae")
        : body_dim_(body_dim),
          hand_dim_(hand_dim),
          cfg_(cfg),
          body_encoder_(body_dim, cfg, rng, name + ".body_encoder"),
          hand_encoder_(hand_dim, cfg, rng, name + ".hand_encoder"),
          fusion_(2 * cfg.latent_dim, cfg.latent_dim, rng, name + ".fusion"),
          body_book_(Codebook<S>::random_init(codebook_size, cfg.latent_dim, rng)),
          hand_book_(Codebook<S>::random_init(codebook_size, cfg.latent_dim, rng)) {
        VqEncoderConfig dec_cfg = cfg;
        dec_cfg.latent_dim = 2 * cfg.latent_dim;
        decoder_ = MotionDecoder<S>(body_dim + hand_dim, dec_cfg, rng, name + ".decoder");
    }

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        body_encoder_.collect_parameters(out);
        hand_encoder_.collect_parameters(out);
        fusion_.collect_parameters(out);
        decoder_.collect_parameters(out);
    }

    // (body [B,T,d_b], hand [B,T,d_h]) -> two [B, T/rate, D] latent sequences.
    std::pair<Tensor<S>, Tensor<S>> encode_parts(const Tensor<S>& body, const Tensor<S>& hand) {
        check_contract(body.dim(1) == hand.dim(1),
                       "body and hand streams must share the frame count");
        return {body_encoder_.forward(body), hand_encoder_.forward(hand)};
    }

    QuantizeResult<S> quantize_hand_first(const Tensor<S>& hand_latents) {
        return quantize(hand_book_, hand_latents);
    }

    // Concatenate [e_b ; q_h] per step and project back to body latent width.
    Tensor<S> fuse(const Tensor<S>& body_latents, const Tensor<S>& quantized_hand) {
        check_contract(body_latents.dim(1) == quantized_hand.dim(1),
                       "body and hand token streams must have equal length");
        return fusion_.forward(nn::concat_last(body_latents, quantized_hand));
    }

    struct BodyQuantizeResult {
        Tensor<S> fused;  // pre-quantization body latents conditioned on hands
        QuantizeResult<S> q;
    };

    BodyQuantizeResult fuse_and_quantize_body(const Tensor<S>& body_latents,
                                              const Tensor<S>& quantized_hand) {
        BodyQuantizeResult out;
        out.fused = fuse(body_latents, quantized_hand);
        out.q = quantize(body_book_, out.fused);
        return out;
    }

    // Joint decode of quantized streams -> (body [B,T,d_b], hand [B,T,d_h]).
    std::pair<Tensor<S>, Tensor<S>> decode_quantized(const Tensor<S>& quantized_body,
                                                     const Tensor<S>& quantized_hand) {
        Tensor<S> joint = decoder_.forward(nn::concat_last(quantized_body, quantized_hand));
        return {nn::slice_last(joint, 0, body_dim_),
                nn::slice_last(joint, body_dim_, hand_dim_)};
    }

    // Token-pair decode used after training.
    motion::HolisticClip decode_holistic(const HolisticTokenPair& pair) {
        nn::NoGradGuard no_grad;
        check_contract(pair.body_ids.size() == pair.hand_ids.size(),
                       "body and hand token streams must have equal length");
        check_contract(!pair.body_ids.empty(), "cannot decode an empty token pair");
        const int len = static_cast<int>(pair.body_ids.size());
        Tensor<S> eb = lookup_entries(body_book_, pair.body_ids, {1, len});
        Tensor<S> eh = lookup_entries(hand_book_, pair.hand_ids, {1, len});
        auto [body, hand] = decode_quantized(eb, eh);
        motion::HolisticClip out;
        out.t = body.dim(1);
        out.body_dim = body_dim_;
        out.hand_dim = hand_dim_;
        out.body.resize(body.numel());
        out.hand.resize(hand.numel());
        for (std::int64_t i = 0; i < body.numel(); ++i)
            out.body[i] = static_cast<float>(body.values()[i]);
        for (std::int64_t i = 0; i < hand.numel(); ++i)
            out.hand[i] = static_cast<float>(hand.values()[i]);
        return out;
    }

    HolisticTokenPair tokenize_holistic(const motion::MotionClip& clip) {
        nn::NoGradGuard no_grad;
        auto parts = motion::split_body_hand(clip);
        check_contract(parts.body_dim == body_dim_ && parts.hand_dim == hand_dim_,
                       "holistic clip split does not match encoder widths");
        Tensor<S> body = part_tensor(parts.body, parts.t, body_dim_);
        Tensor<S> hand = part_tensor(parts.hand, parts.t, hand_dim_);
        auto [eb, eh] = encode_parts(body, hand);
        auto qh = quantize_hand_first(eh);
        auto qb = fuse_and_quantize_body(eb, qh.quantized);
        return {std::move(qb.q.indices), std::move(qh.indices), clip.t, cfg_.downsample_rate};
    }

    Codebook<S>& body_book() { return body_book_; }
    Codebook<S>& hand_book() { return hand_book_; }
    nn::Linear<S>& fusion_proj() { return fusion_; }
    const VqEncoderConfig& config() const { return cfg_; }
    int body_dim() const { return body_dim_; }
    int hand_dim() const { return hand_dim_; }

    Tensor<S> part_tensor(const std::vector<float>& data, int t, int d) const {
        std::vector<S> vals(data.begin(), data.end());
        return Tensor<S>::from({1, t, d}, std::move(vals));
    }

private:
    int body_dim_ = 0, hand_dim_ = 0;
    VqEncoderConfig cfg_;
    MotionEncoder<S> body_encoder_, hand_encoder_;
    nn::Linear<S> fusion_;
    MotionDecoder<S> decoder_;
    Codebook<S> body_book_, hand_book_;
};

// ---------------------------------------------------------------------------
// Training: body and hand losses are weighted equally; both codebooks get the
// same EMA and reset maintenance.
// ---------------------------------------------------------------------------

template <class S>
VqTrainReport train_part_aware(PartAwareVqVae<S>& model,
                               const std::vector<motion::MotionClip>& corpus,
                               const VqTrainConfig& cfg) {
    check_config(!corpus.empty(), "part-aware training needs a non-empty corpus");
    Rng rng(cfg.seed);
    nn::AdamW<S> opt({cfg.learning_rate, cfg.weight_decay});
    auto params = model.parameters();
    VqTrainReport report;
    const int latent_dim = model.config().latent_dim;
    LatentPool<S> body_pool(cfg.pool_capacity, latent_dim);
    LatentPool<S> hand_pool(cfg.pool_capacity, latent_dim);

    std::vector<int> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    int batches_since_sweep = 0;
    const int db = model.body_dim(), dh = model.hand_dim();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(i + 1)]);
        double loss_sum = 0;
        int steps = 0;
        std::unordered_set<int> hit;  // body codes; utilization tracks B_b
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const int b = static_cast<int>(
                std::min<std::size_t>(cfg.batch_size, order.size() - start));
            std::vector<S> body_batch(static_cast<std::size_t>(b) * cfg.window * db);
            std::vector<S> hand_batch(static_cast<std::size_t>(b) * cfg.window * dh);
            for (int i = 0; i < b; ++i) {
                const auto& clip = corpus[order[start + i]];
                check_contract(clip.t >= cfg.window, "clip shorter than training window");
                auto parts = motion::split_body_hand(clip);
                const int offset = static_cast<int>(rng.uniform_int(clip.t - cfg.window + 1));
                for (int f = 0; f < cfg.window; ++f) {
                    std::transform(
                        parts.body.begin() + static_cast<std::size_t>(offset + f) * db,
                        parts.body.begin() + static_cast<std::size_t>(offset + f + 1) * db,
                        body_batch.begin() + (static_cast<std::size_t>(i) * cfg.window + f) * db,
                        [](float v) { return static_cast<S>(v); });
                    std::transform(
                        parts.hand.begin() + static_cast<std::size_t>(offset + f) * dh,
                        parts.hand.begin() + static_cast<std::size_t>(offset + f + 1) * dh,
                        hand_batch.begin() + (static_cast<std::size_t>(i) * cfg.window + f) * dh,
                        [](float v) { return static_cast<S>(v); });
                }
            }
            Tensor<S> body = Tensor<S>::from({b, cfg.window, db}, std::move(body_batch));
            Tensor<S> hand = Tensor<S>::from({b, cfg.window, dh}, std::move(hand_batch));

            auto [eb, eh] = model.encode_parts(body, hand);
            auto qh = model.quantize_hand_first(eh);
            auto qb = model.fuse_and_quantize_body(eb, qh.quantized);
            auto [body_hat, hand_hat] = model.decode_quantized(qb.q.quantized, qh.quantized);

            auto body_loss = vqvae_loss(body, body_hat, qb.fused, qb.q.entries, cfg.weights);
            auto hand_loss = vqvae_loss(hand, hand_hat, eh, qh.entries, cfg.weights);
            Tensor<S> total = nn::add(body_loss.total, hand_loss.total);
            nn::backward(total);
            opt.step(params);
            loss_sum += static_cast<double>(total.item());
            ++steps;

            ema_update(model.body_book(), qb.fused.values().data(), qb.q.indices);
            ema_update(model.hand_book(), eh.values().data(), qh.indices);
            body_pool.push(qb.fused.values().data(), qb.fused.numel() / latent_dim);
            hand_pool.push(eh.values().data(), eh.numel() / latent_dim);
            for (int id : qb.q.indices) hit.insert(id);

            if (cfg.reset_enabled && ++batches_since_sweep >= cfg.reset_window_batches) {
                batches_since_sweep = 0;
                if (!body_pool.empty())
                    report.total_resets +=
                        reset_dead_codes(model.body_book(), body_pool.data(), rng,
                                         cfg.reset_usage_threshold, cfg.reset_jitter);
                if (!hand_pool.empty())
                    report.total_resets +=
                        reset_dead_codes(model.hand_book(), hand_pool.data(), rng,
                                         cfg.reset_usage_threshold, cfg.reset_jitter);
            }
        }
        report.epoch_loss.push_back(loss_sum / std::max(steps, 1));
        report.epoch_utilization.push_back(static_cast<double>(hit.size()) /
                                           model.body_book().n);
    }
    return report;
}

// Reconstruction MSE over both parts against the normalized input frames.
template <class S>
VqEvalResult evaluate_part_aware(PartAwareVqVae<S>& model,
                                 const std::vector<motion::MotionClip>& corpus) {
    nn::NoGradGuard no_grad;
    std::unordered_set<int> hit;
    double err = 0;
    std::int64_t count = 0;
    for (const auto& clip : corpus) {
        auto pair = model.tokenize_holistic(clip);
        hit.insert(pair.body_ids.begin(), pair.body_ids.end());
        auto parts = motion::split_body_hand(clip);
        auto decoded = model.decode_holistic(pair);
        for (std::size_t i = 0; i < decoded.body.size(); ++i) {
            const double diff = double(decoded.body[i]) - double(parts.body[i]);
            err += diff * diff;
        }
        for (std::size_t i = 0; i < decoded.hand.size(); ++i) {
            const double diff = double(decoded.hand[i]) - double(parts.hand[i]);
            err += diff * diff;
        }
        count += static_cast<std::int64_t>(decoded.body.size() + decoded.hand.size());
    }
    return {static_cast<double>(hit.size()) / model.body_book().n,
            err / static_cast<double>(count)};
}

}  // namespace mgpt2::vq
