#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "mgpt2/codebook.hpp"
#include "mgpt2/motion.hpp"
#include "mgpt2/nn.hpp"

namespace mgpt2::vq {

using nn::Tensor;

struct VqEncoderConfig {
    int downsample_rate = 4;  // one stride-2 stage per factor of two
    std::vector<int> channels = {128, 128};
    int kernel = 4;
    int latent_dim = 512;

    int stages() const {
        int rate = downsample_rate, s = 0;
        while (rate > 1) {
            check_config(rate % 2 == 0, "downsample_rate must be a power of two");
            rate /= 2;
            ++s;
        }
        check_config(s == static_cast<int>(channels.size()),
                     "channel list must give one width per stride-2 stage");
        return s;
    }
};

struct VqLossWeights {
    double beta = 0.25;
    double recon = 1.0;
    double velocity = 0.5;

    void validate() const {
        check_config(beta >= 0 && recon >= 0 && velocity >= 0,
                     "vq loss weights must be non-negative");
    }
};

struct MotionTokenSequence {
    std::vector<int> ids;
    int source_length = 0;
    int downsample_rate = 4;
};

// ---------------------------------------------------------------------------
// Residual stack shared by the plain and part-aware tokenizers
// ---------------------------------------------------------------------------

template <class S>
class ResBlock1d : public nn::Module<S> {
public:
    ResBlock1d() = default;
    ResBlock1d(int channels, Rng& rng, const std::string& name)
        : conv1_(channels, channels, 3, 1, 1, rng, name + ".conv1"),
          conv2_(channels, channels, 1, 1, 0, rng, name + ".conv2") {}

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        conv1_.collect_parameters(out);
        conv2_.collect_parameters(out);
    }

    Tensor<S> forward(const Tensor<S>& x) {
        return nn::add(x, conv2_.forward(nn::relu(conv1_.forward(nn::relu(x)))));
    }

private:
    nn::Conv1d<S> conv1_, conv2_;
};

template <class S>
class MotionEncoder : public nn::Module<S> {
public:
    MotionEncoder() = default;
    MotionEncoder(int frame_dim, const VqEncoderConfig& cfg, Rng& rng, const std::string& name)
        : cfg_(cfg) {
        const int stages = cfg.stages();
        conv_in_ = nn::Conv1d<S>(frame_dim, cfg.channels[0], 3, 1, 1, rng, name + ".conv_in");
        for (int s = 0; s < stages; ++s) {
            const int cin = s == 0 ? cfg.channels[0] : cfg.channels[s - 1];
            down_.emplace_back(cin, cfg.channels[s], cfg.kernel, 2, 1, rng,
                               name + ".down" + std::to_string(s));
            res_.emplace_back(cfg.channels[s], rng, name + ".res" + std::to_string(s));
        }
        proj_ = nn::Conv1d<S>(cfg.channels.back(), cfg.latent_dim, 3, 1, 1, rng, name + ".proj");
    }

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        conv_in_.collect_parameters(out);
        for (auto& d : down_) d.collect_parameters(out);
        for (auto& r : res_) r.collect_parameters(out);
        proj_.collect_parameters(out);
    }

    // [B, T, d] -> [B, T/rate, latent_dim]; T must divide by the rate.
    Tensor<S> forward(const Tensor<S>& frames) {
        check_contract(frames.dim(1) % cfg_.downsample_rate == 0,
                       "encoder input length " + std::to_string(frames.dim(1)) +
                           " is not aligned to rate " + std::to_string(cfg_.downsample_rate) +
                           " (crop first)");
        Tensor<S> h = nn::relu(conv_in_.forward(frames));
        for (std::size_t s = 0; s < down_.size(); ++s)
            h = res_[s].forward(nn::relu(down_[s].forward(h)));
        return proj_.forward(h);
    }

private:
    VqEncoderConfig cfg_;
    nn::Conv1d<S> conv_in_, proj_;
    std::vector<nn::Conv1d<S>> down_;
    std::vector<ResBlock1d<S>> res_;
};

template <class S>
class MotionDecoder : public nn::Module<S> {
public:
    MotionDecoder() = default;
    MotionDecoder(int frame_dim, const VqEncoderConfig& cfg, Rng& rng, const std::string& name)
        : cfg_(cfg) {
        const int stages = cfg.stages();
        proj_in_ = nn::Conv1d<S>(cfg.latent_dim, cfg.channels.back(), 3, 1, 1, rng,
                                 name + ".proj_in");
        for (int s = stages - 1; s >= 0; --s) {
            const int cout = s == 0 ? cfg.channels[0] : cfg.channels[s - 1];
            res_.emplace_back(cfg.channels[s], rng, name + ".res" + std::to_string(s));
            up_.emplace_back(cfg.channels[s], cout, cfg.kernel, 2, 1, rng,
                             name + ".up" + std::to_string(s));
        }
        conv_out_ = nn::Conv1d<S>(cfg.channels[0], frame_dim, 3, 1, 1, rng, name + ".conv_out");
    }

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        proj_in_.collect_parameters(out);
        for (auto& r : res_) r.collect_parameters(out);
        for (auto& u : up_) u.collect_parameters(out);
        conv_out_.collect_parameters(out);
    }

    // [B, L, latent_dim] -> [B, L*rate, d]
    Tensor<S> forward(const Tensor<S>& quantized) {
        Tensor<S> h = nn::relu(proj_in_.forward(quantized));
        for (std::size_t s = 0; s < up_.size(); ++s)
            h = nn::relu(up_[s].forward(res_[s].forward(h)));
        return conv_out_.forward(h);
    }

private:
    VqEncoderConfig cfg_;
    nn::Conv1d<S> proj_in_, conv_out_;
    std::vector<ResBlock1d<S>> res_;
    std::vector<nn::ConvTranspose1d<S>> up_;
};

// ---------------------------------------------------------------------------
// Quantization with straight-through gradients
// ---------------------------------------------------------------------------

template <class S>
struct QuantizeResult {
    Tensor<S> quantized;      // straight-through: values of e, gradient of z
    Tensor<S> entries;        // plain codebook lookup (constant)
    std::vector<int> indices;
};

template <class S>
Tensor<S> lookup_entries(const Codebook<S>& cb, const std::vector<int>& indices,
                         const nn::Shape& seq_shape) {
    std::vector<S> vals(indices.size() * cb.d);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        check_contract(indices[i] >= 0 && indices[i] < cb.n,
                       "token id " + std::to_string(indices[i]) + " outside codebook of size " +
                           std::to_string(cb.n));
        std::copy_n(cb.entry(indices[i]), cb.d, vals.begin() + i * cb.d);
    }
    nn::Shape shape(seq_shape);
    shape.push_back(cb.d);
    return Tensor<S>::from(shape, std::move(vals));
}

template <class S>
QuantizeResult<S> quantize(const Codebook<S>& cb, const Tensor<S>& latents) {
    check_contract(latents.dim(-1) == cb.d, "latent width does not match codebook entry width");
    const std::int64_t count = latents.numel() / cb.d;
    check_contract(count > 0, "cannot quantize an empty latent sequence");
    QuantizeResult<S> out;
    out.indices = quantize_indices(cb, latents.values().data(), count);
    nn::Shape seq_shape(latents.shape().begin(), latents.shape().end() - 1);
    out.entries = lookup_entries(cb, out.indices, seq_shape);
    // e = z + sg(lookup - z): forward value is the entry, gradient is identity.
    out.quantized = nn::add(latents, nn::stop_gradient(nn::sub(out.entries, latents)));
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <class S>
struct VqLossBreakdown {
    Tensor<S> total;
    double reconstruction = 0;
    double velocity = 0;
    double codebook = 0;
    double commitment = 0;
};

// recon * SmoothL1(m_hat, m) + velocity * SmoothL1(d m_hat, d m)
//   + ||sg[z] - e||^2 + beta * ||z - sg[e]||^2        (mean-reduced terms)
// The codebook term carries no gradient anywhere (entries move by EMA); the
// commitment term reaches the encoder only.
template <class S>
VqLossBreakdown<S> vqvae_loss(const Tensor<S>& frames, const Tensor<S>& decoded,
                              const Tensor<S>& latents, const Tensor<S>& entries,
                              const VqLossWeights& weights) {
    weights.validate();
    nn::check_shapes(frames.shape() == decoded.shape(), "vqvae_loss frames", frames.shape(),
                     decoded.shape());
    nn::check_shapes(latents.shape() == entries.shape(), "vqvae_loss latents", latents.shape(),
                     entries.shape());
    VqLossBreakdown<S> out;
    Tensor<S> recon = nn::smooth_l1(decoded, frames);
    // Single-frame inputs have no frame differences; the velocity term is 0.
    Tensor<S> vel = frames.dim(-2) >= 2
                        ? nn::smooth_l1(nn::time_diff(decoded), nn::time_diff(frames))
                        : Tensor<S>::zeros({1});
    Tensor<S> codebook_term = nn::mse(nn::stop_gradient(latents), entries);
    Tensor<S> commit = nn::mse(latents, entries);  // entries carry no grad path
    out.reconstruction = static_cast<double>(recon.item());
    out.velocity = static_cast<double>(vel.item());
    out.codebook = static_cast<double>(codebook_term.item());
    out.commitment = static_cast<double>(commit.item());
    out.total = nn::add(
        nn::add(nn::scale(recon, static_cast<S>(weights.recon)),
                nn::scale(vel, static_cast<S>(weights.velocity))),
        nn::add(codebook_term, nn::scale(commit, static_cast<S>(weights.beta))));
    return out;
}

// ---------------------------------------------------------------------------
// The tokenizer model
// ---------------------------------------------------------------------------

template <class S>
class VqVae : public nn::Module<S> {
public:
    VqVae() = default;
    VqVae(int frame_dim, int codebook_size, const VqEncoderConfig& cfg, Rng& rng,
          const std::string& name = "vqvae")
        : frame_dim_(frame_dim),
          cfg_(cfg),
          encoder_(frame_dim, cfg, rng, name + ".encoder"),
          decoder_(frame_dim, cfg, rng, name + ".decoder"),
          codebook_(Codebook<S>::random_init(codebook_size, cfg.latent_dim, rng)) {}

    void collect_parameters(std::vector<nn::Parameter<S>*>& out) override {
        encoder_.collect_parameters(out);
        decoder_.collect_parameters(out);
    }

    Tensor<S> encode(const Tensor<S>& frames) { return encoder_.forward(frames); }
    Tensor<S> decode(const Tensor<S>& quantized) { return decoder_.forward(quantized); }
    QuantizeResult<S> quantize_latents(const Tensor<S>& latents) {
        return quantize(codebook_, latents);
    }

    Codebook<S>& codebook() { return codebook_; }
    const Codebook<S>& codebook() const { return codebook_; }
    const VqEncoderConfig& config() const { return cfg_; }
    int frame_dim() const { return frame_dim_; }

    // Frozen-tokenizer composition: indices of quantize(encode(clip)).
    MotionTokenSequence tokenize(const motion::MotionClip& clip) {
        nn::NoGradGuard no_grad;
        Tensor<S> frames = clip_tensor(clip);
        Tensor<S> z = encode(frames);
        auto q = quantize_latents(z);
        return {std::move(q.indices), clip.t, cfg_.downsample_rate};
    }

    // decode(entries[ids]) -> frames (rate * len(ids)) x d.
    std::vector<float> detokenize(const MotionTokenSequence& tokens) {
        nn::NoGradGuard no_grad;
        check_contract(!tokens.ids.empty(), "cannot detokenize an empty token sequence");
        Tensor<S> e = lookup_entries(codebook_, tokens.ids,
                                     {1, static_cast<int>(tokens.ids.size())});
        Tensor<S> frames = decode(e);
        std::vector<float> out(frames.numel());
        for (std::int64_t i = 0; i < frames.numel(); ++i)
            out[i] = static_cast<float>(frames.values()[i]);
        return out;
    }

    Tensor<S> clip_tensor(const motion::MotionClip& clip) const {
        std::vector<S> vals(clip.frames.begin(), clip.frames.end());
        return Tensor<S>::from({1, clip.t, clip.d}, std::move(vals));
    }

private:
    int frame_dim_ = 0;
    VqEncoderConfig cfg_;
    MotionEncoder<S> encoder_;
    MotionDecoder<S> decoder_;
    Codebook<S> codebook_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct VqTrainConfig {
    int epochs = 6;
    int batch_size = 8;
    int window = 40;  // frames sampled per clip per step
    double learning_rate = 1e-4;
    double weight_decay = 1e-5;
    VqLossWeights weights;
    bool reset_enabled = true;
    int reset_window_batches = 256;
    std::int64_t reset_usage_threshold = 1;
    double reset_jitter = 0.01;
    int pool_capacity = 4096;
    std::uint64_t seed = 0;
};

struct VqTrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_utilization;  // fraction of codes hit per epoch
    int total_resets = 0;
};

// Latent pool feeding dead-code resets: a ring buffer of recent rows.
template <class S>
class LatentPool {
public:
    LatentPool(int capacity, int width) : capacity_(capacity), width_(width) {}

    void push(const S* rows, std::int64_t count) {
        for (std::int64_t i = 0; i < count; ++i) {
            if (static_cast<int>(data_.size()) < capacity_ * width_)
                data_.insert(data_.end(), rows + i * width_, rows + (i + 1) * width_);
            else {
                std::copy_n(rows + i * width_, width_,
                            data_.begin() + static_cast<std::size_t>(cursor_) * width_);
            }
            cursor_ = (cursor_ + 1) % capacity_;
        }
    }

    const std::vector<S>& data() const { return data_; }
    bool empty() const { return data_.empty(); }

private:
    int capacity_, width_;
    std::int64_t cursor_ = 0;
    std::vector<S> data_;
};

template <class S>
VqTrainReport train_vqvae(VqVae<S>& model, const std::vector<motion::MotionClip>& corpus,
                          const VqTrainConfig& cfg) {
    check_config(!corpus.empty(), "vqvae training needs a non-empty corpus");
    check_config(cfg.window % model.config().downsample_rate == 0,
                 "training window must align to the downsample rate");
    for (const auto& c : corpus)
        check_contract(c.t >= cfg.window, "clip '" + c.id + "' shorter than training window");

    Rng rng(cfg.seed);
    nn::AdamW<S> opt({cfg.learning_rate, cfg.weight_decay});
    auto params = model.parameters();
    const int d = model.frame_dim();
    VqTrainReport report;
    LatentPool<S> pool(cfg.pool_capacity, model.config().latent_dim);

    std::vector<int> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    int batches_since_sweep = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Seeded Fisher-Yates shuffle.
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(i + 1)]);

        double loss_sum = 0;
        int steps = 0;
        std::unordered_set<int> codes_hit;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const int b = static_cast<int>(
                std::min<std::size_t>(cfg.batch_size, order.size() - start));
            std::vector<S> batch(static_cast<std::size_t>(b) * cfg.window * d);
            for (int i = 0; i < b; ++i) {
                const auto& clip = corpus[order[start + i]];
                const int offset = static_cast<int>(rng.uniform_int(clip.t - cfg.window + 1));
                for (int f = 0; f < cfg.window; ++f) {
                    auto frame = clip.frame(offset + f);
                    std::transform(frame.begin(), frame.end(),
                                   batch.begin() + (static_cast<std::size_t>(i) * cfg.window + f) * d,
                                   [](float v) { return static_cast<S>(v); });
                }
            }
            Tensor<S> frames = Tensor<S>::from({b, cfg.window, d}, std::move(batch));
            Tensor<S> z = model.encode(frames);
            auto q = model.quantize_latents(z);
            Tensor<S> decoded = model.decode(q.quantized);
            auto loss = vqvae_loss(frames, decoded, z, q.entries, cfg.weights);
            nn::backward(loss.total);
            opt.step(params);
            loss_sum += static_cast<double>(loss.total.item());
            ++steps;

            ema_update(model.codebook(), z.values().data(), q.indices);
            pool.push(z.values().data(), z.numel() / model.config().latent_dim);
            for (int id : q.indices) codes_hit.insert(id);

            if (cfg.reset_enabled && ++batches_since_sweep >= cfg.reset_window_batches) {
                batches_since_sweep = 0;
                if (!pool.empty())
                    report.total_resets +=
                        reset_dead_codes(model.codebook(), pool.data(), rng,
                                         cfg.reset_usage_threshold, cfg.reset_jitter);
            }
        }
        report.epoch_loss.push_back(loss_sum / std::max(steps, 1));
        report.epoch_utilization.push_back(static_cast<double>(codes_hit.size()) /
                                           model.codebook().n);
    }
    return report;
}

// Fraction of codes hit at least once when tokenizing the whole corpus, and
// mean reconstruction MSE against the (already normalized) input frames.
struct VqEvalResult {
    double utilization = 0;
    double recon_mse = 0;
};

template <class S>
VqEvalResult evaluate_vqvae(VqVae<S>& model, const std::vector<motion::MotionClip>& corpus) {
    nn::NoGradGuard no_grad;
    std::unordered_set<int> hit;
    double err = 0;
    std::int64_t count = 0;
    for (const auto& clip : corpus) {
        auto tokens = model.tokenize(clip);
        hit.insert(tokens.ids.begin(), tokens.ids.end());
        auto decoded = model.detokenize(tokens);
        for (std::size_t i = 0; i < decoded.size(); ++i) {
            const double diff = static_cast<double>(decoded[i]) - clip.frames[i];
            err += diff * diff;
        }
        count += static_cast<std::int64_t>(decoded.size());
    }
    return {static_cast<double>(hit.size()) / model.codebook().n,
            err / static_cast<double>(count)};
}

}  // namespace mgpt2::vq
