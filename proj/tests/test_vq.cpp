#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "mgpt2/synth.hpp"
#include "mgpt2/vqvae.hpp"
#include "testutil.hpp"

using namespace mgpt2;
using namespace mgpt2::vq;
using nn::Tensor;

namespace {

// Independent oracle: plain exhaustive scan, first minimum wins.
template <class S>
std::vector<int> brute_force_nearest(const Codebook<S>& cb, const std::vector<S>& latents) {
    const std::int64_t count = static_cast<std::int64_t>(latents.size()) / cb.d;
    std::vector<int> ids(count);
    for (std::int64_t i = 0; i < count; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int k = 0; k < cb.n; ++k) {
            double dist = 0;
            for (int j = 0; j < cb.d; ++j) {
                const double diff = double(latents[i * cb.d + j]) - double(cb.entry(k)[j]);
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                arg = k;
            }
        }
        ids[i] = arg;
    }
    return ids;
}

VqEncoderConfig tiny_config() {
    VqEncoderConfig cfg;
    cfg.downsample_rate = 4;
    cfg.channels = {16, 16};
    cfg.latent_dim = 12;
    return cfg;
}

}  // namespace

TEST_CASE("quantize selects exact matches and breaks ties low") {
    Rng rng(41);
    auto cb = Codebook<float>::random_init(16, 4, rng);

    SECTION("latent equal to entry 7") {
        std::vector<float> z(cb.entry(7), cb.entry(7) + 4);
        Tensor<float> latents = Tensor<float>::from({1, 1, 4}, std::move(z));
        auto q = quantize(cb, latents);
        REQUIRE(q.indices == std::vector<int>{7});
        for (int j = 0; j < 4; ++j)
            CHECK(q.quantized.values()[j] == cb.entry(7)[j]);
    }

    SECTION("equidistant latent resolves to the lower index") {
        std::fill(cb.entries.begin(), cb.entries.end(), 10.0f);
        std::fill(cb.entry(2), cb.entry(2) + 4, 0.0f);
        std::fill(cb.entry(5), cb.entry(5) + 4, 0.0f);
        cb.entry(2)[0] = 1.0f;
        cb.entry(5)[0] = -1.0f;
        Tensor<float> latents = Tensor<float>::from({1, 1, 4}, {0, 0, 0, 0});
        auto far = quantize(cb, latents);
        CHECK(far.indices == std::vector<int>{2});
    }

    SECTION("100 random latents match the brute-force oracle") {
        std::vector<float> z(100 * 4);
        for (auto& v : z) v = static_cast<float>(rng.gaussian());
        auto oracle = brute_force_nearest(cb, z);
        auto got = quantize_indices(cb, z.data(), 100);
        CHECK(got == oracle);
    }

    SECTION("idempotence: quantizing quantized output returns the same ids") {
        std::vector<float> z(32 * 4);
        for (auto& v : z) v = static_cast<float>(rng.gaussian());
        Tensor<float> latents = Tensor<float>::from({1, 32, 4}, std::move(z));
        auto q1 = quantize(cb, latents);
        auto q2 = quantize(cb, q1.entries);
        CHECK(q1.indices == q2.indices);
    }

    SECTION("empty latent sequence is a contract error") {
        std::vector<float> empty;
        CHECK_THROWS_AS(quantize_indices(cb, empty.data(), 0), ContractError);
    }
}

TEST_CASE("encoder length arithmetic") {
    Rng rng(7);
    VqVae<float> model(263, 32, tiny_config(), rng);
    auto clip_tensor = [&](int t) {
        std::vector<float> vals(static_cast<std::size_t>(t) * 263, 0.1f);
        return Tensor<float>::from({1, t, 263}, std::move(vals));
    };
    CHECK(model.encode(clip_tensor(196)).dim(1) == 49);
    CHECK(model.encode(clip_tensor(40)).dim(1) == 10);
    CHECK_THROWS_AS(model.encode(clip_tensor(197)), ContractError);
}

TEST_CASE("decode is deterministic and inverts token length") {
    Rng rng(9);
    VqVae<float> model(251, 32, tiny_config(), rng);
    MotionTokenSequence tokens;
    tokens.ids.assign(49, 3);
    tokens.source_length = 196;
    auto a = model.detokenize(tokens);
    auto b = model.detokenize(tokens);
    CHECK(a.size() == 196 * 251);
    CHECK(a == b);

    MotionTokenSequence bad;
    bad.ids = {32};  // N = 32
    CHECK_THROWS_AS(model.detokenize(bad), ContractError);
}

TEST_CASE("vqvae loss") {
    SECTION("perfect reconstruction and assignment gives zero loss") {
        Tensor<float> m = Tensor<float>::from({1, 3, 2}, {0, 1, 2, 3, 4, 5});
        Tensor<float> z = Tensor<float>::from({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
        auto loss = vqvae_loss(m, m, z, z, VqLossWeights{});
        CHECK(loss.total.item() == 0.0f);
    }

    SECTION("two-frame toy equals the hand-computed term sum") {
        Tensor<float> m = Tensor<float>::from({1, 2, 1}, {0.0f, 1.0f});
        Tensor<float> mhat = Tensor<float>::from({1, 2, 1}, {0.5f, 2.0f});
        Tensor<float> z = Tensor<float>::from({1, 2, 1}, {0.3f, -0.2f});
        Tensor<float> e = Tensor<float>::from({1, 2, 1}, {0.5f, 0.0f});
        auto loss = vqvae_loss(m, mhat, z, e, VqLossWeights{});
        // recon (0.125+0.5)/2, velocity 0.5*0.125, codebook 0.04, commit 0.25*0.04
        CHECK(loss.reconstruction == Catch::Approx(0.3125));
        CHECK(loss.velocity == Catch::Approx(0.125));
        CHECK(loss.codebook == Catch::Approx(0.04));
        CHECK(loss.commitment == Catch::Approx(0.04));
        CHECK(loss.total.item() ==
              Catch::Approx(0.3125 + 0.5 * 0.125 + 0.04 + 0.25 * 0.04));
    }

    SECTION("codebook term sends no gradient to the encoder side") {
        Tensor<double> z = Tensor<double>::from({1, 2, 2}, {0.1, 0.2, 0.3, 0.4}, true);
        Tensor<double> e = Tensor<double>::from({1, 2, 2}, {0.0, 0.0, 1.0, 1.0});
        Tensor<double> codebook_term = nn::mse(nn::stop_gradient(z), e);
        CHECK_FALSE(codebook_term.requires_grad());
    }

    SECTION("negative weights are a config error") {
        Tensor<float> m = Tensor<float>::from({1, 2, 1}, {0.0f, 1.0f});
        VqLossWeights w;
        w.velocity = -0.5;
        CHECK_THROWS_AS(vqvae_loss(m, m, m, m, w), ConfigError);
    }
}

TEST_CASE("straight-through loss gradients match finite differences") {
    Rng rng(31);
    VqEncoderConfig cfg;
    cfg.downsample_rate = 2;
    cfg.channels = {6};
    cfg.latent_dim = 5;
    VqVae<double> model(4, 6, cfg, rng);
    Tensor<double> frames = nn::gaussian_init<double>({1, 8, 4}, 0.0, 1.0, rng);

    // Freeze the quantization offset at the base point so the finite
    // difference probes the straight-through surrogate rather than the
    // piecewise-constant argmin.
    Tensor<double> z0 = model.encode(frames);
    auto q0 = model.quantize_latents(z0);
    std::vector<double> offset_vals(q0.entries.values());
    for (std::int64_t i = 0; i < z0.numel(); ++i) offset_vals[i] -= z0.values()[i];
    Tensor<double> offset = Tensor<double>::from(z0.shape(), std::move(offset_vals));
    Tensor<double> e0 = Tensor<double>::from(q0.entries.shape(), q0.entries.values());

    auto loss_fn = [&] {
        Tensor<double> z = model.encode(frames);
        Tensor<double> st = nn::add(z, offset);
        Tensor<double> decoded = model.decode(st);
        Tensor<double> recon = nn::smooth_l1(decoded, frames);
        Tensor<double> vel = nn::smooth_l1(nn::time_diff(decoded), nn::time_diff(frames));
        Tensor<double> commit = nn::mse(z, e0);
        return nn::add(nn::add(recon, nn::scale(vel, 0.5)), nn::scale(commit, 0.25));
    };
    CHECK(testutil::max_grad_rel_error(loss_fn, model.parameters(), 1e-5, 16) < 1e-4);
}

TEST_CASE("ema codebook maintenance") {
    SECTION("fixed assignments converge to the cluster latent") {
        Rng rng(3);
        auto cb = Codebook<float>::random_init(4, 3, rng);
        cb.decay = 0.99;
        std::vector<float> v{0.5f, -1.0f, 2.0f};
        std::vector<float> batch;
        for (int i = 0; i < 3; ++i) batch.insert(batch.end(), v.begin(), v.end());
        std::vector<int> assign{1, 1, 1};
        for (int step = 0; step < 200; ++step) ema_update(cb, batch.data(), assign);

        // Geometric series: size = m(1-decay^t), sum = m v (1-decay^t), so the
        // prediction is exactly v.
        for (int j = 0; j < 3; ++j) {
            CHECK(std::abs(cb.entry(1)[j] - v[j]) < 1e-3);
            const double m = 3.0, t = 200.0;
            const double geom = 1.0 - std::pow(0.99, t);
            const double predicted = (m * v[j] * geom) / (m * geom);
            CHECK(std::abs(cb.entry(1)[j] - predicted) < 1e-3);
        }
    }

    SECTION("a code never assigned keeps its entry") {
        Rng rng(5);
        auto cb = Codebook<float>::random_init(4, 3, rng);
        std::vector<float> before(cb.entry(2), cb.entry(2) + 3);
        std::vector<float> batch{1, 1, 1, 2, 2, 2};
        std::vector<int> assign{0, 1};
        for (int step = 0; step < 10; ++step) ema_update(cb, batch.data(), assign);
        for (int j = 0; j < 3; ++j) CHECK(cb.entry(2)[j] == before[j]);
    }

    SECTION("a code with stale statistics holds position while they decay") {
        Rng rng(6);
        auto cb = Codebook<float>::random_init(4, 2, rng);
        std::vector<float> first{1.5f, -0.5f};
        std::vector<int> k0{0};
        ema_update(cb, first.data(), k0);
        std::vector<float> entry_after(cb.entry(0), cb.entry(0) + 2);
        std::vector<float> other{9.0f, 9.0f};
        std::vector<int> k1{1};
        for (int step = 0; step < 10; ++step) ema_update(cb, other.data(), k1);
        for (int j = 0; j < 2; ++j)
            CHECK(cb.entry(0)[j] == Catch::Approx(entry_after[j]).margin(1e-6));
    }

    SECTION("decay zero snaps to the batch cluster mean") {
        Rng rng(8);
        auto cb = Codebook<float>::random_init(4, 2, rng);
        cb.decay = 0.0;
        std::vector<float> batch{1.0f, 2.0f, 3.0f, 4.0f};
        std::vector<int> assign{2, 2};
        ema_update(cb, batch.data(), assign);
        CHECK(cb.entry(2)[0] == Catch::Approx(2.0).margin(1e-6));
        CHECK(cb.entry(2)[1] == Catch::Approx(3.0).margin(1e-6));
    }

    SECTION("batch increments conserve the latent count") {
        Rng rng(9);
        auto cb = Codebook<float>::random_init(8, 2, rng);
        std::vector<float> batch(10 * 2, 0.5f);
        std::vector<int> assign{0, 1, 1, 3, 5, 5, 5, 7, 0, 2};
        auto before = cb.ema_cluster_size;
        ema_update(cb, batch.data(), assign);
        double total = 0;
        for (int k = 0; k < cb.n; ++k)
            total += (cb.ema_cluster_size[k] - cb.decay * before[k]) / (1.0 - cb.decay);
        CHECK(total == Catch::Approx(10.0));
    }
}

TEST_CASE("dead code reset") {
    Rng rng(77);
    auto cb = Codebook<float>::random_init(4, 3, rng);

    SECTION("no resets when every code is used") {
        for (auto& u : cb.usage_count) u = 5;
        std::vector<float> pool{1, 2, 3};
        Rng reset_rng(1);
        CHECK(reset_dead_codes(cb, pool, reset_rng) == 0);
    }

    SECTION("a dead code is re-seeded from the pool") {
        cb.usage_count = {4, 0, 7, 2};
        std::vector<float> pool{10.f, 20.f, 30.f, -1.f, -2.f, -3.f};
        Rng reset_rng(123);
        Rng replay(123);  // same stream predicts the pool pick and jitter
        const int pick = static_cast<int>(replay.uniform_int(2));
        CHECK(reset_dead_codes(cb, pool, reset_rng, 1, 0.01) == 1);
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(cb.entry(1)[j] - pool[pick * 3 + j]) < 0.1);
        for (auto u : cb.usage_count) CHECK(u == 0);
        CHECK(cb.ema_cluster_size[1] == 0.0);
    }
}

TEST_CASE("tokenize and detokenize contracts") {
    Rng rng(15);
    auto corpus = motion::synth_corpus(2, {.n_clips = 4, .layout_name = "humanml3d-263"});
    auto stats = motion::compute_stats(corpus);
    VqVae<float> model(263, 32, tiny_config(), rng);

    auto normed = motion::normalize(corpus[0], stats);
    auto tokens = model.tokenize(normed);
    CHECK(static_cast<int>(tokens.ids.size()) == normed.t / 4);
    CHECK(tokens.source_length == normed.t);

    auto again = model.tokenize(normed);
    CHECK(tokens.ids == again.ids);

    auto frames = model.detokenize(tokens);
    CHECK(frames.size() == normed.frames.size());
}

TEST_CASE("short training run reduces loss and spreads code usage") {
    Rng rng(4);
    auto corpus = motion::synth_corpus(11, {.n_clips = 48, .layout_name = "humanml3d-263"});
    auto stats = motion::compute_stats(corpus);
    std::vector<motion::MotionClip> normed;
    for (const auto& c : corpus) normed.push_back(motion::normalize(c, stats));

    VqEncoderConfig cfg;
    cfg.channels = {32, 32};
    cfg.latent_dim = 32;
    VqVae<float> model(263, 64, cfg, rng);
    VqTrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.learning_rate = 3e-4;
    tc.reset_window_batches = 8;
    tc.seed = 1;
    auto report = train_vqvae(model, normed, tc);
    REQUIRE(report.epoch_loss.size() == 3);
    CHECK(report.epoch_loss.back() < report.epoch_loss.front());

    auto eval = evaluate_vqvae(model, normed);
    CHECK(eval.utilization > 0.05);
    CHECK(eval.recon_mse < 2.0);
}

TEST_CASE("codebook serialization round trips") {
    Rng rng(21);
    auto cb = Codebook<float>::random_init(8, 4, rng);
    cb.usage_count[3] = 9;
    cb.ema_cluster_size[2] = 1.5;
    const auto path =
        (std::filesystem::temp_directory_path() / "book.cbk").string();
    save_codebook(path, cb);
    auto loaded = load_codebook<float>(path);
    CHECK(loaded.entries == cb.entries);
    CHECK(loaded.ema_cluster_size == cb.ema_cluster_size);
    CHECK(loaded.usage_count == cb.usage_count);

    const auto pair_path =
        (std::filesystem::temp_directory_path() / "pair.pab").string();
    save_codebook_pair(pair_path, cb, cb);
    auto [body, hand] = load_codebook_pair<float>(pair_path);
    CHECK(body.entries == cb.entries);
    CHECK(hand.entries == cb.entries);
    CHECK_THROWS_AS(load_codebook<float>(pair_path), FormatError);
}
