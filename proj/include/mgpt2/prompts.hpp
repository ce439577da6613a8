#pragma once

#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgpt2/rng.hpp"
#include "mgpt2/vocab.hpp"

namespace mgpt2::lang {

enum class TaskKind {
    TextToMotion,
    TextPoseToMotion,
    Captioning,
    Prediction,
    InBetween,
    HolisticTextToMotion,
};

enum class PosePosition { None, Initial, Last, Key };
enum class PromptVariant { V0, V1, V2 };

// Motion-range names used across the pipeline: plain tokenizers write
// "motion"; the part-aware tokenizer writes "body" and "hand".
inline constexpr const char* kRangeMotion = "motion";
inline constexpr const char* kRangeBody = "body";
inline constexpr const char* kRangeHand = "hand";

inline std::string task_name(TaskKind k) {
    switch (k) {
        case TaskKind::TextToMotion: return "t2m";
        case TaskKind::TextPoseToMotion: return "tpose2m";
        case TaskKind::Captioning: return "caption";
        case TaskKind::Prediction: return "predict";
        case TaskKind::InBetween: return "inbetween";
        case TaskKind::HolisticTextToMotion: return "holistic";
    }
    return "?";
}

inline TaskKind task_from_name(const std::string& s) {
    if (s == "t2m") return TaskKind::TextToMotion;
    if (s == "tpose2m") return TaskKind::TextPoseToMotion;
    if (s == "caption") return TaskKind::Captioning;
    if (s == "predict") return TaskKind::Prediction;
    if (s == "inbetween") return TaskKind::InBetween;
    if (s == "holistic") return TaskKind::HolisticTextToMotion;
    throw ConfigError("unknown task '" + s + "'");
}

inline std::string pose_position_name(PosePosition p) {
    switch (p) {
        case PosePosition::None: return "none";
        case PosePosition::Initial: return "init";
        case PosePosition::Last: return "last";
        case PosePosition::Key: return "key";
    }
    return "?";
}

inline PosePosition pose_position_from_name(const std::string& s) {
    if (s == "none") return PosePosition::None;
    if (s == "init" || s == "initial") return PosePosition::Initial;
    if (s == "last") return PosePosition::Last;
    if (s == "key" || s == "random") return PosePosition::Key;
    throw ConfigError("unknown pose position '" + s + "'");
}

inline std::string variant_name(PromptVariant v) {
    switch (v) {
        case PromptVariant::V0: return "v0";
        case PromptVariant::V1: return "v1";
        case PromptVariant::V2: return "v2";
    }
    return "?";
}

inline PromptVariant variant_from_name(const std::string& s) {
    if (s == "v0") return PromptVariant::V0;
    if (s == "v1") return PromptVariant::V1;
    if (s == "v2") return PromptVariant::V2;
    throw ConfigError("unknown prompt variant '" + s + "'");
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

namespace templates {

inline constexpr const char* kStandardPreamble =
    "Below is an instruction that describes a task, paired with an input that provides further "
    "context. Write a response that appropriately completes the request.";

inline constexpr const char* kV1Preamble =
    "Human motion can be represented by token indices by VQ-VAE. Below is an instruction that "
    "describes human motion generation condition types, paired with an input that provides "
    "specific conditions. Write a sequence of tokens matching with given conditions.";

// Preamble by (task, variant). V0 generation prompts carry no preamble; the
// captioning / completion / holistic families always use the scaffold.
inline std::string preamble(TaskKind task, PromptVariant variant) {
    if (variant == PromptVariant::V1) return kV1Preamble;
    if (variant == PromptVariant::V2) return kStandardPreamble;
    const bool bare =
        task == TaskKind::TextToMotion || task == TaskKind::TextPoseToMotion;
    return bare ? "" : kStandardPreamble;
}

inline std::string pose_word(PosePosition p) {
    switch (p) {
        case PosePosition::Initial: return "init";
        case PosePosition::Last: return "last";
        case PosePosition::Key: return "key";
        default: return "";
    }
}

inline std::string task_sentence(TaskKind task, PromptVariant variant, PosePosition pos) {
    const std::string pw = pose_word(pos);
    switch (task) {
        case TaskKind::TextToMotion:
            switch (variant) {
                case PromptVariant::V0:
                    return "Generate a sequence of motion tokens matching the following human "
                           "motion description.";
                case PromptVariant::V1: return "Motion description.";
                case PromptVariant::V2:
                    return "Generate the token sequence of the motion description.";
            }
            break;
        case TaskKind::TextPoseToMotion:
            switch (variant) {
                case PromptVariant::V0:
                    return "Generate a sequence of motion tokens matching the following human "
                           "motion description given the " + pw + " pose tokens.";
                case PromptVariant::V1:
                    return "Motion description and the " + pw + " pose tokens.";
                case PromptVariant::V2:
                    return "Generate the token sequence of the motion description under the "
                           "premise of given " + pw + " pose tokens.";
            }
            break;
        case TaskKind::Captioning:
            switch (variant) {
                case PromptVariant::V0:
                    return "Generate a text description matching the following sequence of "
                           "motion tokens.";
                case PromptVariant::V1: return "Describe the motion.";
                case PromptVariant::V2:
                    return "Generate the text description of the following motion tokens.";
            }
            break;
        case TaskKind::Prediction:
            switch (variant) {
                case PromptVariant::V0:
                    return "Predict the remaining motion tokens completing the following initial "
                           "motion tokens.";
                case PromptVariant::V1: return "Motion prediction.";
                case PromptVariant::V2:
                    return "Generate the token sequence completing the following initial motion "
                           "tokens.";
            }
            break;
        case TaskKind::InBetween:
            switch (variant) {
                case PromptVariant::V0:
                    return "Complete the motion by generating the masked motion tokens given the "
                           "known motion tokens at the marked positions.";
                case PromptVariant::V1: return "Motion in-betweening.";
                case PromptVariant::V2:
                    return "Generate the full token sequence filling the masked positions of the "
                           "following motion tokens.";
            }
            break;
        case TaskKind::HolisticTextToMotion:
            switch (variant) {
                case PromptVariant::V0:
                    return "Generate body and hand motion token sequences matching the following "
                           "human motion description.";
                case PromptVariant::V1: return "Holistic motion description.";
                case PromptVariant::V2:
                    return "Generate the body and hand token sequences of the motion description.";
            }
            break;
    }
    return "";
}

// Every template string plus "@k" position markers, fed into the text
// vocabulary so prompts tokenize into single ids.
inline std::vector<std::string> all_strings(int max_positions = 80) {
    std::vector<std::string> out{kStandardPreamble, kV1Preamble};
    const TaskKind kinds[] = {TaskKind::TextToMotion,  TaskKind::TextPoseToMotion,
                              TaskKind::Captioning,    TaskKind::Prediction,
                              TaskKind::InBetween,     TaskKind::HolisticTextToMotion};
    const PromptVariant variants[] = {PromptVariant::V0, PromptVariant::V1, PromptVariant::V2};
    const PosePosition positions[] = {PosePosition::None, PosePosition::Initial,
                                      PosePosition::Last, PosePosition::Key};
    for (auto k : kinds)
        for (auto v : variants)
            for (auto p : positions) out.push_back(task_sentence(k, v, p));
    std::string markers;
    for (int i = 0; i < max_positions; ++i) markers += "@" + std::to_string(i) + " ";
    out.push_back(markers);
    return out;
}

}  // namespace templates

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct InstructionRecord {
    TaskKind task = TaskKind::TextToMotion;
    PosePosition pose_position = PosePosition::None;
    PromptVariant variant = PromptVariant::V0;
    std::string prompt_text;
    std::vector<int> prompt_ids;
    std::vector<int> target_ids;
    // Provenance for evaluation.
    std::string clip_id;
    std::string text_condition;
    std::vector<int> pose_condition;        // vocab-space motion ids
    std::vector<int> pose_token_positions;  // positions in the source token stream
};

struct CompletionSpec {
    TaskKind mode = TaskKind::Prediction;  // Prediction or InBetween
    double prefix_fraction = 0.20;
    double mask_fraction = 0.50;
    std::uint64_t seed = 0;

    void validate() const {
        check_config(mode == TaskKind::Prediction || mode == TaskKind::InBetween,
                     "completion mode must be predict or inbetween");
        check_config(prefix_fraction > 0 && prefix_fraction < 1 && mask_fraction > 0 &&
                         mask_fraction < 1,
                     "completion fractions must lie in (0, 1)");
    }
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

inline void append_word(std::string& s, const std::string& w) {
    if (w.empty()) return;
    if (!s.empty()) s += ' ';
    s += w;
}

inline std::string pose_block(const UnifiedVocabulary& vocab, const std::vector<int>& pose_ids,
                              const std::vector<int>* positions) {
    std::string block = SpecialTokens::motion_open;
    for (std::size_t i = 0; i < pose_ids.size(); ++i) {
        block += ' ';
        block += vocab.surface(pose_ids[i]);
        if (positions) block += " @" + std::to_string((*positions)[i]);
    }
    block += ' ';
    block += SpecialTokens::motion_close;
    return block;
}

}  // namespace detail

// Deterministic prompt assembly for one record. Conditions must be consistent
// with the task (text-only tasks reject pose tokens and vice versa).
inline InstructionRecord build_instruction(TaskKind task, PromptVariant variant,
                                           const std::string& text_condition,
                                           const std::vector<int>& pose_condition,
                                           const UnifiedVocabulary& vocab,
                                           PosePosition pose_position = PosePosition::None,
                                           const std::vector<int>& pose_positions = {}) {
    const bool has_text = !text_condition.empty();
    const bool has_pose = !pose_condition.empty();
    switch (task) {
        case TaskKind::TextToMotion:
        case TaskKind::HolisticTextToMotion:
            check_contract(has_text && !has_pose,
                           task_name(task) + " takes a text condition and no pose tokens");
            break;
        case TaskKind::TextPoseToMotion:
            check_contract(has_text && has_pose && pose_position != PosePosition::None,
                           "tpose2m takes text, pose tokens and a pose position");
            break;
        case TaskKind::Captioning:
        case TaskKind::Prediction:
            check_contract(!has_text && has_pose,
                           task_name(task) + " takes pose tokens and no text condition");
            break;
        case TaskKind::InBetween:
            check_contract(!has_text && has_pose &&
                               pose_positions.size() == pose_condition.size(),
                           "inbetween takes pose tokens with one position marker each");
            break;
    }

    InstructionRecord rec;
    rec.task = task;
    rec.variant = variant;
    rec.pose_position = pose_position;
    rec.text_condition = text_condition;
    rec.pose_condition = pose_condition;
    rec.pose_token_positions = pose_positions;

    std::string prompt;
    detail::append_word(prompt, templates::preamble(task, variant));
    detail::append_word(prompt, templates::task_sentence(task, variant, pose_position));
    detail::append_word(prompt, text_condition);
    if (has_pose) {
        const std::vector<int>* marks = task == TaskKind::InBetween ? &pose_positions : nullptr;
        detail::append_word(prompt, detail::pose_block(vocab, pose_condition, marks));
    }
    rec.prompt_text = prompt;
    rec.prompt_ids = vocab.encode(prompt);
    return rec;
}

// Answer payloads. Generation answers wrap motion ids in motion markers;
// holistic answers carry one body block and one hand block; captions are
// plain text. All end with the end-of-answer token.
inline std::vector<int> render_motion_answer(const UnifiedVocabulary& vocab,
                                             const std::vector<int>& codebook_indices,
                                             const std::string& range_name = kRangeMotion) {
    std::vector<int> ids;
    ids.push_back(vocab.special_id(SpecialTokens::motion_open));
    for (int id : vocab.codebook_indices_to_motion_ids(codebook_indices, range_name))
        ids.push_back(id);
    ids.push_back(vocab.special_id(SpecialTokens::motion_close));
    ids.push_back(vocab.special_id(SpecialTokens::end_of_answer));
    return ids;
}

inline std::vector<int> render_holistic_answer(const UnifiedVocabulary& vocab,
                                               const std::vector<int>& body_indices,
                                               const std::vector<int>& hand_indices) {
    std::vector<int> ids;
    ids.push_back(vocab.special_id(SpecialTokens::body_open));
    for (int id : vocab.codebook_indices_to_motion_ids(body_indices, kRangeBody))
        ids.push_back(id);
    ids.push_back(vocab.special_id(SpecialTokens::body_close));
    ids.push_back(vocab.special_id(SpecialTokens::hand_open));
    for (int id : vocab.codebook_indices_to_motion_ids(hand_indices, kRangeHand))
        ids.push_back(id);
    ids.push_back(vocab.special_id(SpecialTokens::hand_close));
    ids.push_back(vocab.special_id(SpecialTokens::end_of_answer));
    return ids;
}

inline std::vector<int> render_caption_answer(const UnifiedVocabulary& vocab,
                                              const std::string& text) {
    std::vector<int> ids = vocab.encode(text);
    ids.push_back(vocab.special_id(SpecialTokens::end_of_answer));
    return ids;
}

// ---------------------------------------------------------------------------
// Completion conditioning (prefix prediction / random in-betweening)
// ---------------------------------------------------------------------------

inline InstructionRecord make_completion_pair(const std::vector<int>& codebook_indices,
                                              const CompletionSpec& spec,
                                              const UnifiedVocabulary& vocab,
                                              PromptVariant variant = PromptVariant::V0,
                                              const std::string& range_name = kRangeMotion) {
    spec.validate();
    const int len = static_cast<int>(codebook_indices.size());
    check_contract(len >= 5, "completion needs at least 5 tokens, got " + std::to_string(len));
    const auto motion_ids = vocab.codebook_indices_to_motion_ids(codebook_indices, range_name);

    if (spec.mode == TaskKind::Prediction) {
        const int n_cond = static_cast<int>(std::ceil(spec.prefix_fraction * len));
        std::vector<int> cond(motion_ids.begin(), motion_ids.begin() + n_cond);
        std::vector<int> rest(codebook_indices.begin() + n_cond, codebook_indices.end());
        auto rec = build_instruction(TaskKind::Prediction, variant, "", cond, vocab);
        rec.target_ids = render_motion_answer(vocab, rest, range_name);
        std::vector<int> positions(n_cond);
        std::iota(positions.begin(), positions.end(), 0);
        rec.pose_token_positions = positions;
        return rec;
    }

    // InBetween: a seeded random subset of positions is masked; the condition
    // is the kept tokens with explicit position markers, the target the full
    // sequence.
    const int n_masked = static_cast<int>(std::llround(spec.mask_fraction * len));
    std::vector<int> order(len);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(spec.seed);
    for (int i = len - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(i + 1)]);
    std::vector<bool> masked(len, false);
    for (int i = 0; i < n_masked; ++i) masked[order[i]] = true;

    std::vector<int> kept_ids;
    std::vector<int> kept_positions;
    for (int i = 0; i < len; ++i)
        if (!masked[i]) {
            kept_ids.push_back(motion_ids[i]);
            kept_positions.push_back(i);
        }
    check_contract(!kept_ids.empty(), "in-betweening mask left no conditioning tokens");
    auto rec = build_instruction(TaskKind::InBetween, variant, "", kept_ids, vocab,
                                 PosePosition::None, kept_positions);
    rec.target_ids = render_motion_answer(vocab, codebook_indices, range_name);
    return rec;
}

// ---------------------------------------------------------------------------
// Answer parsing
// ---------------------------------------------------------------------------

struct ParsedAnswer {
    std::vector<int> motion_indices;  // codebook space
    std::vector<int> body_indices;
    std::vector<int> hand_indices;
    std::string text;
    int trailing_discarded = 0;
};

namespace detail {

// Extracts the ids between an open and close marker. The payload must lie in
// the named range; a missing close marker ends at eoa / sequence end.
inline std::pair<std::vector<int>, std::size_t> extract_block(
    const std::vector<int>& ids, std::size_t from, int open_id, int close_id, int eoa_id,
    const UnifiedVocabulary& vocab, const std::string& range_name, const std::string& label) {
    std::size_t i = from;
    while (i < ids.size() && ids[i] != open_id) ++i;
    if (i == ids.size())
        throw MalformedAnswerError("missing open marker for " + label + " block");
    ++i;
    std::vector<int> payload;
    for (; i < ids.size(); ++i) {
        if (ids[i] == close_id) {
            ++i;
            break;
        }
        if (ids[i] == eoa_id) break;
        if (!vocab.is_motion_id(ids[i], range_name))
            throw MalformedAnswerError("token id " + std::to_string(ids[i]) + " inside " + label +
                                       " block is not in range '" + range_name + "'");
        payload.push_back(ids[i]);
    }
    return {vocab.motion_ids_to_codebook_indices(payload, range_name), i};
}

}  // namespace detail

inline ParsedAnswer parse_answer(const std::vector<int>& ids, TaskKind task,
                                 const UnifiedVocabulary& vocab) {
    ParsedAnswer out;
    const int eoa = vocab.special_id(SpecialTokens::end_of_answer);
    const int pad = vocab.special_id(SpecialTokens::padding);

    auto count_trailing = [&](std::size_t from) {
        int n = 0;
        for (std::size_t i = from; i < ids.size(); ++i)
            if (ids[i] != eoa && ids[i] != pad) ++n;
        return n;
    };

    switch (task) {
        case TaskKind::TextToMotion:
        case TaskKind::TextPoseToMotion:
        case TaskKind::Prediction:
        case TaskKind::InBetween: {
            auto [payload, next] = detail::extract_block(
                ids, 0, vocab.special_id(SpecialTokens::motion_open),
                vocab.special_id(SpecialTokens::motion_close), eoa, vocab, kRangeMotion,
                "motion");
            out.motion_indices = std::move(payload);
            out.trailing_discarded = count_trailing(next);
            return out;
        }
        case TaskKind::HolisticTextToMotion: {
            auto [body, after_body] = detail::extract_block(
                ids, 0, vocab.special_id(SpecialTokens::body_open),
                vocab.special_id(SpecialTokens::body_close), eoa, vocab, kRangeBody, "body");
            auto [hand, after_hand] = detail::extract_block(
                ids, after_body, vocab.special_id(SpecialTokens::hand_open),
                vocab.special_id(SpecialTokens::hand_close), eoa, vocab, kRangeHand, "hand");
            if (body.size() != hand.size())
                throw MalformedAnswerError("holistic answer has " + std::to_string(body.size()) +
                                           " body tokens but " + std::to_string(hand.size()) +
                                           " hand tokens");
            out.body_indices = std::move(body);
            out.hand_indices = std::move(hand);
            out.trailing_discarded = count_trailing(after_hand);
            return out;
        }
        case TaskKind::Captioning: {
            std::vector<int> text_ids;
            std::size_t i = 0;
            for (; i < ids.size(); ++i) {
                if (ids[i] == eoa) {
                    ++i;
                    break;
                }
                if (ids[i] == pad) continue;
                if (!vocab.is_text_id(ids[i]))
                    throw MalformedAnswerError("caption answer contains non-text id " +
                                               std::to_string(ids[i]));
                text_ids.push_back(ids[i]);
            }
            out.text = vocab.decode(text_ids);
            out.trailing_discarded = count_trailing(i);
            return out;
        }
    }
    throw MalformedAnswerError("unhandled task kind");
}

// ---------------------------------------------------------------------------
// Instruction dataset serialization (one JSON record per line)
// ---------------------------------------------------------------------------

inline nlohmann::json record_to_json(const InstructionRecord& rec) {
    nlohmann::json j;
    j["task"] = task_name(rec.task);
    j["variant"] = variant_name(rec.variant);
    j["pose_position"] = pose_position_name(rec.pose_position);
    j["prompt_text"] = rec.prompt_text;
    j["prompt_ids"] = rec.prompt_ids;
    j["target_ids"] = rec.target_ids;
    j["clip_id"] = rec.clip_id;
    j["text"] = rec.text_condition;
    j["pose_ids"] = rec.pose_condition;
    j["pose_positions"] = rec.pose_token_positions;
    return j;
}

inline InstructionRecord record_from_json(const nlohmann::json& j) {
    InstructionRecord rec;
    rec.task = task_from_name(j.at("task").get<std::string>());
    rec.variant = variant_from_name(j.at("variant").get<std::string>());
    rec.pose_position = pose_position_from_name(j.at("pose_position").get<std::string>());
    rec.prompt_text = j.at("prompt_text").get<std::string>();
    rec.prompt_ids = j.at("prompt_ids").get<std::vector<int>>();
    rec.target_ids = j.at("target_ids").get<std::vector<int>>();
    rec.clip_id = j.at("clip_id").get<std::string>();
    rec.text_condition = j.at("text").get<std::string>();
    rec.pose_condition = j.at("pose_ids").get<std::vector<int>>();
    rec.pose_token_positions = j.at("pose_positions").get<std::vector<int>>();
    return rec;
}

inline void save_instructions(const std::string& path,
                              const std::vector<InstructionRecord>& records) {
    std::ostringstream os;
    for (const auto& r : records) os << record_to_json(r).dump() << "\n";
    io::write_file(path, os.str());
}

inline std::vector<InstructionRecord> load_instructions(const std::string& path) {
    std::istringstream is(io::read_file(path));
    std::vector<InstructionRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad instruction record in " + path + ": " + e.what());
        }
    }
    return out;
}

}  // namespace mgpt2::lang
