#pragma once

#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "mgpt2/checkpoint.hpp"
#include "mgpt2/motion.hpp"
#include "mgpt2/nn.hpp"
#include "mgpt2/vocab.hpp"

namespace mgpt2::eval {

using nn::Tensor;

// Desk-scale stand-in for the pretrained evaluator networks: a motion encoder
// over pooled per-dimension statistics and a bag-of-words text encoder,
// trained contrastively so matched clip/label pairs embed nearby. All
// embeddings are unit-norm. Clips are expected in normalized feature space.

struct FeatureExtractorConfig {
    int embed_dim = 32;
    int hidden = 128;
    double temperature = 0.1;
    int epochs = 10;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

class FeatureExtractor {
public:
    FeatureExtractor() = default;

    FeatureExtractor(int frame_dim, std::vector<std::string> word_list,
                     const FeatureExtractorConfig& cfg, Rng& rng)
        : cfg_(cfg), frame_dim_(frame_dim), words_(std::move(word_list)) {
        for (std::size_t i = 0; i < words_.size(); ++i) word_index_[words_[i]] = int(i);
        motion_fc1_ = nn::Linear<float>(3 * frame_dim, cfg.hidden, rng, "fx.motion.fc1");
        motion_fc2_ = nn::Linear<float>(cfg.hidden, cfg.embed_dim, rng, "fx.motion.fc2");
        text_fc1_ = nn::Linear<float>(static_cast<int>(words_.size()), cfg.hidden, rng,
                                      "fx.text.fc1");
        text_fc2_ = nn::Linear<float>(cfg.hidden, cfg.embed_dim, rng, "fx.text.fc2");
    }

    int embed_dim() const { return cfg_.embed_dim; }
    int frame_dim() const { return frame_dim_; }

    std::vector<nn::Parameter<float>*> parameters() {
        std::vector<nn::Parameter<float>*> out;
        motion_fc1_.collect_parameters(out);
        motion_fc2_.collect_parameters(out);
        text_fc1_.collect_parameters(out);
        text_fc2_.collect_parameters(out);
        return out;
    }

    // Pooled statistics per feature column: mean, standard deviation, and mean
    // absolute frame difference.
    std::vector<float> motion_features(const float* frames, int t, int d) const {
        check_contract(d == frame_dim_, "clip width does not match extractor");
        check_contract(t >= 1, "cannot embed an empty clip");
        std::vector<float> out(3 * d, 0.0f);
        for (int j = 0; j < d; ++j) {
            double mean = 0;
            for (int i = 0; i < t; ++i) mean += frames[static_cast<std::size_t>(i) * d + j];
            mean /= t;
            double var = 0, vel = 0;
            for (int i = 0; i < t; ++i) {
                const double dv = frames[static_cast<std::size_t>(i) * d + j] - mean;
                var += dv * dv;
                if (i + 1 < t)
                    vel += std::abs(double(frames[static_cast<std::size_t>(i + 1) * d + j]) -
                                    double(frames[static_cast<std::size_t>(i) * d + j]));
            }
            out[j] = static_cast<float>(mean);
            out[d + j] = static_cast<float>(std::sqrt(var / t));
            out[2 * d + j] = static_cast<float>(t > 1 ? vel / (t - 1) : 0.0);
        }
        return out;
    }

    std::vector<float> text_features(const std::string& label) const {
        std::vector<float> bow(words_.size(), 0.0f);
        int total = 0;
        std::istringstream is(lang::UnifiedVocabulary::lowercase(label));
        std::string w;
        while (is >> w) {
            auto it = word_index_.find(w);
            if (it != word_index_.end()) {
                bow[it->second] += 1.0f;
                ++total;
            }
        }
        if (total > 0)
            for (auto& v : bow) v /= static_cast<float>(total);
        return bow;
    }

    Tensor<float> motion_embed_batch(const std::vector<std::vector<float>>& feats) {
        const int b = static_cast<int>(feats.size());
        std::vector<float> data;
        data.reserve(static_cast<std::size_t>(b) * 3 * frame_dim_);
        for (const auto& f : feats) data.insert(data.end(), f.begin(), f.end());
        Tensor<float> x = Tensor<float>::from({b, 3 * frame_dim_}, std::move(data));
        return nn::l2_normalize_rows(motion_fc2_.forward(nn::gelu(motion_fc1_.forward(x))));
    }

    Tensor<float> text_embed_batch(const std::vector<std::vector<float>>& bows) {
        const int b = static_cast<int>(bows.size());
        std::vector<float> data;
        data.reserve(static_cast<std::size_t>(b) * words_.size());
        for (const auto& f : bows) data.insert(data.end(), f.begin(), f.end());
        Tensor<float> x = Tensor<float>::from({b, static_cast<int>(words_.size())},
                                              std::move(data));
        return nn::l2_normalize_rows(text_fc2_.forward(nn::gelu(text_fc1_.forward(x))));
    }

    std::vector<double> embed_motion(const float* frames, int t, int d) {
        nn::NoGradGuard no_grad;
        auto e = motion_embed_batch({motion_features(frames, t, d)});
        return {e.values().begin(), e.values().end()};
    }

    std::vector<double> embed_motion(const motion::MotionClip& clip) {
        return embed_motion(clip.frames.data(), clip.t, clip.d);
    }

    std::vector<double> embed_text(const std::string& label) {
        nn::NoGradGuard no_grad;
        auto e = text_embed_batch({text_features(label)});
        return {e.values().begin(), e.values().end()};
    }

    // Symmetric InfoNCE over in-batch similarities.
    double train(const std::vector<motion::MotionClip>& corpus) {
        check_config(!corpus.empty(), "feature extractor training needs a corpus");
        for (const auto& c : corpus)
            check_config(!c.labels.empty(),
                         "feature extractor training needs labeled clips ('" + c.id + "')");
        Rng rng(cfg_.seed);
        nn::AdamW<float> opt({cfg_.learning_rate, 1e-5});
        auto params = parameters();
        std::vector<int> order(corpus.size());
        std::iota(order.begin(), order.end(), 0);
        double last_loss = 0;
        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
                std::swap(order[i], order[rng.uniform_int(i + 1)]);
            for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
                const int b = static_cast<int>(
                    std::min<std::size_t>(cfg_.batch_size, order.size() - start));
                if (b < 2) continue;
                std::vector<std::vector<float>> feats, bows;
                for (int i = 0; i < b; ++i) {
                    const auto& clip = corpus[order[start + i]];
                    feats.push_back(motion_features(clip.frames.data(), clip.t, clip.d));
                    bows.push_back(text_features(
                        clip.labels[rng.uniform_int(clip.labels.size())]));
                }
                Tensor<float> me = motion_embed_batch(feats);
                Tensor<float> te = text_embed_batch(bows);
                Tensor<float> sims = nn::scale(nn::matmul(me, nn::permute(te, {1, 0})),
                                               static_cast<float>(1.0 / cfg_.temperature));
                std::vector<int> diag(b);
                std::iota(diag.begin(), diag.end(), 0);
                std::vector<float> ones(b, 1.0f);
                Tensor<float> loss =
                    nn::scale(nn::add(nn::cross_entropy(sims, diag, ones),
                                      nn::cross_entropy(nn::permute(sims, {1, 0}), diag, ones)),
                              0.5f);
                nn::backward(loss);
                opt.step(params);
                last_loss = static_cast<double>(loss.item());
            }
        }
        return last_loss;
    }

    void save(const std::string& path) {
        std::ostringstream words;
        for (const auto& w : words_) words << w << "\n";
        io::write_file(path + ".words", words.str());
        std::ostringstream meta;
        meta << frame_dim_ << " " << cfg_.embed_dim << " " << cfg_.hidden << "\n";
        io::write_file(path + ".meta", meta.str());
        nn::save_checkpoint<float>(path, parameters());
    }

    static FeatureExtractor load(const std::string& path) {
        std::istringstream meta(io::read_file(path + ".meta"));
        FeatureExtractorConfig cfg;
        int frame_dim = 0;
        meta >> frame_dim >> cfg.embed_dim >> cfg.hidden;
        std::vector<std::string> words;
        std::istringstream ws(io::read_file(path + ".words"));
        std::string line;
        while (std::getline(ws, line))
            if (!line.empty()) words.push_back(line);
        Rng rng(0);
        FeatureExtractor fx(frame_dim, std::move(words), cfg, rng);
        nn::restore_parameters(nn::load_checkpoint(path), fx.parameters());
        return fx;
    }

    // Word list for the text branch: all distinct label words.
    static std::vector<std::string> collect_words(const std::vector<motion::MotionClip>& corpus) {
        std::vector<std::string> words;
        std::unordered_map<std::string, int> seen;
        for (const auto& c : corpus)
            for (const auto& label : c.labels) {
                std::istringstream is(lang::UnifiedVocabulary::lowercase(label));
                std::string w;
                while (is >> w)
                    if (seen.emplace(w, 1).second) words.push_back(w);
            }
        return words;
    }

private:
    FeatureExtractorConfig cfg_;
    int frame_dim_ = 0;
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> word_index_;
    nn::Linear<float> motion_fc1_, motion_fc2_, text_fc1_, text_fc2_;
};

}  // namespace mgpt2::eval
