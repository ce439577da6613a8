#include <catch2/catch_amalgamated.hpp>

#include "mgpt2/part_aware.hpp"
#include "mgpt2/synth.hpp"
#include "testutil.hpp"

using namespace mgpt2;
using namespace mgpt2::vq;
using nn::Tensor;

namespace {

VqEncoderConfig tiny_config() {
    VqEncoderConfig cfg;
    cfg.downsample_rate = 4;
    cfg.channels = {12, 12};
    cfg.latent_dim = 8;
    return cfg;
}

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

}  // namespace

TEST_CASE("part encoders are independent and length-aligned") {
    Rng rng(2);
    PartAwareVqVae<float> model(10, 6, 16, tiny_config(), rng);
    Tensor<float> body = nn::gaussian_init<float>({1, 200, 10}, 0.0, 1.0, rng);
    Tensor<float> hand = nn::gaussian_init<float>({1, 200, 6}, 0.0, 1.0, rng);
    auto [eb, eh] = model.encode_parts(body, hand);
    CHECK(eb.dim(1) == 50);
    CHECK(eh.dim(1) == 50);

    // Zeroing the hand input leaves body latents untouched.
    Tensor<float> zero_hand = Tensor<float>::zeros({1, 200, 6});
    auto [eb2, eh2] = model.encode_parts(body, zero_hand);
    CHECK(eb2.values() == eb.values());

    Tensor<float> short_hand = nn::gaussian_init<float>({1, 196, 6}, 0.0, 1.0, rng);
    CHECK_THROWS_AS(model.encode_parts(body, short_hand), ContractError);
}

TEST_CASE("hand-first quantization") {
    Rng rng(5);
    PartAwareVqVae<float> model(10, 6, 16, tiny_config(), rng);

    SECTION("exact hand entry maps to its index everywhere") {
        auto& book = model.hand_book();
        std::vector<float> z;
        for (int i = 0; i < 5; ++i) z.insert(z.end(), book.entry(3), book.entry(3) + book.d);
        auto q = model.quantize_hand_first(Tensor<float>::from({1, 5, book.d}, std::move(z)));
        CHECK(q.indices == std::vector<int>(5, 3));
    }

    SECTION("indices equal the brute-force scan against the hand book") {
        std::vector<float> z(20 * model.hand_book().d);
        for (auto& v : z) v = static_cast<float>(rng.gaussian());
        auto got = model.quantize_hand_first(
            Tensor<float>::from({1, 20, model.hand_book().d}, std::vector<float>(z)));
        CHECK(got.indices == brute_force_nearest(model.hand_book(), z));
    }

    SECTION("hand quantization never reads the body book") {
        std::vector<float> z(8 * model.hand_book().d);
        for (auto& v : z) v = static_cast<float>(rng.gaussian());
        auto before = model.quantize_hand_first(
            Tensor<float>::from({1, 8, model.hand_book().d}, std::vector<float>(z)));
        std::fill(model.body_book().entries.begin(), model.body_book().entries.end(), 99.0f);
        auto after = model.quantize_hand_first(
            Tensor<float>::from({1, 8, model.hand_book().d}, std::vector<float>(z)));
        CHECK(before.indices == after.indices);
    }
}

TEST_CASE("fuse-before-quantize body stream") {
    Rng rng(8);
    PartAwareVqVae<float> model(10, 6, 16, tiny_config(), rng);
    const int d = model.config().latent_dim;
    Tensor<float> eb = nn::gaussian_init<float>({1, 6, d}, 0.0, 1.0, rng);
    Tensor<float> qh1 = nn::gaussian_init<float>({1, 6, d}, 0.0, 1.0, rng);
    Tensor<float> qh2 = nn::gaussian_init<float>({1, 6, d}, 0.0, 1.0, rng);

    SECTION("fusion is genuinely conditioned on the hand stream") {
        auto f1 = model.fuse(eb, qh1);
        auto f2 = model.fuse(eb, qh2);
        CHECK(f1.values() != f2.values());
    }

    SECTION("body indices equal the brute-force scan of fused vectors") {
        auto r = model.fuse_and_quantize_body(eb, qh1);
        CHECK(r.q.indices == brute_force_nearest(model.body_book(), r.fused.values()));
    }

    SECTION("identity-on-body projection reduces to plain body quantization") {
        auto& w = model.fusion_proj().weight().value;
        std::fill(w.values().begin(), w.values().end(), 0.0f);
        for (int i = 0; i < d; ++i) w.values()[i * 2 * d + i] = 1.0f;  // select e_b block
        auto r = model.fuse_and_quantize_body(eb, qh1);
        auto plain = quantize(model.body_book(), eb);
        CHECK(r.q.indices == plain.indices);
    }

    SECTION("length mismatch is a contract error") {
        Tensor<float> short_qh = nn::gaussian_init<float>({1, 5, d}, 0.0, 1.0, rng);
        CHECK_THROWS_AS(model.fuse(eb, short_qh), ContractError);
    }
}

TEST_CASE("holistic decode shapes and determinism") {
    Rng rng(13);
    PartAwareVqVae<float> model(10, 6, 16, tiny_config(), rng);
    HolisticTokenPair pair;
    pair.body_ids.assign(50, 2);
    pair.hand_ids.assign(50, 9);
    pair.source_length = 200;
    auto a = model.decode_holistic(pair);
    CHECK(a.t == 200);
    CHECK(a.body.size() == 200u * 10);
    CHECK(a.hand.size() == 200u * 6);
    auto b = model.decode_holistic(pair);
    CHECK(a.body == b.body);
    CHECK(a.hand == b.hand);

    SECTION("unequal streams rejected") {
        pair.hand_ids.pop_back();
        CHECK_THROWS_AS(model.decode_holistic(pair), ContractError);
    }

    SECTION("out-of-range id rejected") {
        pair.body_ids[0] = 16;
        CHECK_THROWS_AS(model.decode_holistic(pair), ContractError);
    }
}

TEST_CASE("tokenize_holistic on synthetic motionx clips") {
    Rng rng(17);
    auto corpus = motion::synth_corpus(4, {.n_clips = 3, .layout_name = "motionx-623"});
    auto stats = motion::compute_stats(corpus);
    PartAwareVqVae<float> model(263, 360, 32, tiny_config(), rng);

    auto clip = motion::normalize(corpus[0], stats);
    auto pair = model.tokenize_holistic(clip);
    CHECK(pair.body_ids.size() == pair.hand_ids.size());
    CHECK(static_cast<int>(pair.body_ids.size()) == clip.t / 4);
    for (int id : pair.body_ids) {
        CHECK(id >= 0);
        CHECK(id < 32);
    }
    auto again = model.tokenize_holistic(clip);
    CHECK(pair.body_ids == again.body_ids);
    CHECK(pair.hand_ids == again.hand_ids);
}

TEST_CASE("part-aware joint loss gradients match finite differences") {
    Rng rng(29);
    VqEncoderConfig cfg;
    cfg.downsample_rate = 2;
    cfg.channels = {5};
    cfg.latent_dim = 4;
    PartAwareVqVae<double> model(4, 3, 6, cfg, rng);
    Tensor<double> body = nn::gaussian_init<double>({1, 6, 4}, 0.0, 1.0, rng);
    Tensor<double> hand = nn::gaussian_init<double>({1, 6, 3}, 0.0, 1.0, rng);

    // Freeze both quantization offsets at the base point (straight-through
    // surrogate), as in the single-stream check.
    auto [eb0, eh0] = model.encode_parts(body, hand);
    auto qh0 = model.quantize_hand_first(eh0);
    std::vector<double> hand_off(qh0.entries.values());
    for (std::int64_t i = 0; i < eh0.numel(); ++i) hand_off[i] -= eh0.values()[i];
    Tensor<double> hand_offset = Tensor<double>::from(eh0.shape(), std::move(hand_off));
    Tensor<double> eh_entries = Tensor<double>::from(qh0.entries.shape(), qh0.entries.values());

    auto fused0 = model.fuse(eb0, nn::add(eh0, hand_offset));
    auto qb0 = quantize(model.body_book(), fused0);
    std::vector<double> body_off(qb0.entries.values());
    for (std::int64_t i = 0; i < fused0.numel(); ++i) body_off[i] -= fused0.values()[i];
    Tensor<double> body_offset = Tensor<double>::from(fused0.shape(), std::move(body_off));
    Tensor<double> eb_entries = Tensor<double>::from(qb0.entries.shape(), qb0.entries.values());

    auto loss_fn = [&] {
        auto [eb, eh] = model.encode_parts(body, hand);
        Tensor<double> qh = nn::add(eh, hand_offset);
        Tensor<double> fused = model.fuse(eb, qh);
        Tensor<double> qb = nn::add(fused, body_offset);
        auto [body_hat, hand_hat] = model.decode_quantized(qb, qh);
        Tensor<double> loss = nn::smooth_l1(body_hat, body);
        loss = nn::add(loss, nn::smooth_l1(hand_hat, hand));
        loss = nn::add(loss, nn::scale(nn::smooth_l1(nn::time_diff(body_hat), nn::time_diff(body)), 0.5));
        loss = nn::add(loss, nn::scale(nn::smooth_l1(nn::time_diff(hand_hat), nn::time_diff(hand)), 0.5));
        loss = nn::add(loss, nn::scale(nn::mse(fused, eb_entries), 0.25));
        loss = nn::add(loss, nn::scale(nn::mse(eh, eh_entries), 0.25));
        return loss;
    };
    CHECK(testutil::max_grad_rel_error(loss_fn, model.parameters(), 1e-5, 12) < 1e-4);
}

TEST_CASE("short part-aware training run reduces loss") {
    Rng rng(19);
    auto corpus = motion::synth_corpus(6, {.n_clips = 24, .layout_name = "motionx-623"});
    auto stats = motion::compute_stats(corpus);
    std::vector<motion::MotionClip> normed;
    for (const auto& c : corpus) normed.push_back(motion::normalize(c, stats));

    VqEncoderConfig cfg;
    cfg.channels = {24, 24};
    cfg.latent_dim = 16;
    PartAwareVqVae<float> model(263, 360, 32, cfg, rng);
    VqTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.learning_rate = 3e-4;
    tc.reset_window_batches = 4;
    tc.seed = 11;
    auto report = train_part_aware(model, normed, tc);
    CHECK(report.epoch_loss.back() < report.epoch_loss.front());
    auto eval = evaluate_part_aware(model, normed);
    CHECK(eval.recon_mse < 2.5);
}
