#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "mgpt2/lm.hpp"
#include "mgpt2/prompts.hpp"

namespace mgpt2::lm {

enum class Stage { Alignment, InstructionTuning };

inline std::string stage_name(Stage s) {
    return s == Stage::Alignment ? "align" : "instruct";
}

inline Stage stage_from_name(const std::string& s) {
    if (s == "align" || s == "alignment") return Stage::Alignment;
    if (s == "instruct" || s == "instruction") return Stage::InstructionTuning;
    throw ConfigError("unknown stage '" + s + "'");
}

struct StagePlan {
    Stage stage = Stage::Alignment;
    int epochs = 1;
    int batch_size = 8;
    double learning_rate = 2e-4;
    double weight_decay = 1e-5;
    // Fraction of text-only next-token batches interleaved during alignment.
    double text_mixture_weight = 0.25;
    // Instruction tuning in adapter mode trains only LoRA parameters plus
    // embedding/head rows at or above new_rows_begin; the base stays frozen.
    bool adapter_mode = true;
    int lora_rank = 32;
    double lora_alpha = 16.0;
    int new_rows_begin = 0;
    std::uint64_t seed = 0;

    void validate() const {
        check_config(epochs >= 1 && batch_size >= 1, "stage plan needs positive epochs/batch");
        check_config(text_mixture_weight >= 0.0 && text_mixture_weight < 1.0,
                     "text mixture weight must lie in [0, 1)");
    }
};

struct TrainCurve {
    std::vector<double> step_loss;
    std::vector<double> epoch_loss;
};

namespace detail {

template <class S>
void configure_instruction_freeze(Lm<S>& model, const StagePlan& plan, Rng& rng) {
    if (!model.has_adapters()) model.attach_adapters(plan.lora_rank, plan.lora_alpha, rng);
    for (auto* p : model.base_parameters()) {
        p->frozen = true;
        p->update_row_begin = 0;
    }
    if (plan.new_rows_begin > 0) {
        model.wte().table().frozen = false;
        model.wte().table().update_row_begin = plan.new_rows_begin;
        model.head().frozen = false;
        model.head().update_row_begin = plan.new_rows_begin;
    }
    for (auto* p : model.adapter_parameters()) p->frozen = false;
}

}  // namespace detail

// One training stage over instruction records (prompt -> target pairs) and,
// during alignment, interleaved text-only next-token sequences.
template <class S>
TrainCurve train_stage(Lm<S>& model, const StagePlan& plan,
                       const std::vector<lang::InstructionRecord>& records,
                       const std::vector<std::vector<int>>& text_sequences, int pad_id) {
    plan.validate();
    check_config(!records.empty(), "training stage needs instruction records");
    if (plan.stage == Stage::Alignment && plan.text_mixture_weight > 0)
        check_config(!text_sequences.empty(),
                     "alignment with a text mixture needs text sequences");

    Rng rng(plan.seed);
    if (plan.stage == Stage::InstructionTuning && plan.adapter_mode)
        detail::configure_instruction_freeze(model, plan, rng);

    nn::AdamW<S> opt({plan.learning_rate, plan.weight_decay});
    auto params = model.parameters();
    const bool use_dropout = model.config().dropout > 0.0;

    std::vector<int> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t text_cursor = 0;
    TrainCurve curve;
    std::int64_t global_step = 0;
    double text_err = 0.0;

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_int(i + 1)]);
        double epoch_sum = 0;
        int epoch_steps = 0;
        for (std::size_t start = 0; start < order.size();) {
            std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
            text_err += plan.stage == Stage::Alignment ? plan.text_mixture_weight : 0.0;
            if (text_err >= 1.0) {
                text_err -= 1.0;
                for (int i = 0; i < plan.batch_size; ++i) {
                    batch.emplace_back(std::vector<int>{},
                                       text_sequences[text_cursor % text_sequences.size()]);
                    ++text_cursor;
                }
            } else {
                const std::size_t n =
                    std::min<std::size_t>(plan.batch_size, order.size() - start);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto& r = records[order[start + i]];
                    batch.emplace_back(r.prompt_ids, r.target_ids);
                }
                start += n;
            }
            Tensor<S> loss = model.ce_loss(batch, pad_id, use_dropout ? &rng : nullptr);
            nn::backward(loss);
            opt.step(params);
            const double l = static_cast<double>(loss.item());
            curve.step_loss.push_back(l);
            epoch_sum += l;
            ++epoch_steps;
            ++global_step;
        }
        curve.epoch_loss.push_back(epoch_sum / std::max(epoch_steps, 1));
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Memorization probe: trains until greedy decoding reproduces every target
// token-exactly, or the step budget runs out.
// ---------------------------------------------------------------------------

struct MemorizationResult {
    bool success = false;
    int steps_used = 0;
    double final_loss = 0;
};

template <class S>
bool reproduces_all_targets(Lm<S>& model, const std::vector<lang::InstructionRecord>& records,
                            int eoa_id) {
    nn::NoGradGuard no_grad;
    for (const auto& r : records) {
        GenerationConfig gen;
        gen.top_k = 1;
        gen.max_new_tokens = static_cast<int>(r.target_ids.size()) + 4;
        gen.stop_ids = {eoa_id};
        auto out = model.generate(r.prompt_ids, gen);
        if (out != r.target_ids) return false;
    }
    return true;
}

template <class S>
MemorizationResult memorize_records(Lm<S>& model,
                                    const std::vector<lang::InstructionRecord>& records,
                                    int pad_id, int eoa_id, int max_steps = 2000,
                                    double learning_rate = 1e-3, int check_every = 25) {
    check_config(!records.empty(), "memorization needs records");
    nn::AdamW<S> opt({learning_rate, 0.0, 0.9, 0.95});
    auto params = model.parameters();
    std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
    for (const auto& r : records) batch.emplace_back(r.prompt_ids, r.target_ids);

    MemorizationResult result;
    for (int step = 1; step <= max_steps; ++step) {
        Tensor<S> loss = model.ce_loss(batch, pad_id);
        nn::backward(loss);
        opt.step(params);
        result.final_loss = static_cast<double>(loss.item());
        result.steps_used = step;
        if (step % check_every == 0 || result.final_loss < 1e-3) {
            if (reproduces_all_targets(model, records, eoa_id)) {
                result.success = true;
                return result;
            }
        }
    }
    result.success = reproduces_all_targets(model, records, eoa_id);
    return result;
}

}  // namespace mgpt2::lm
