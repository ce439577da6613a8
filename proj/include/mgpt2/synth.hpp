#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mgpt2/motion.hpp"
#include "mgpt2/rng.hpp"

namespace mgpt2::motion {

// Procedural corpus generation. Each clip is one of a fixed set of motion
// archetypes (gaits, jumps, waves, ...) rendered as structured root channels
// plus per-archetype sinusoid profiles over the joint feature columns, paired
// with 1-4 template text labels over a small controlled vocabulary.
// Generation is a pure function of (seed, config).

struct SynthConfig {
    int n_clips = 1;
    std::string layout_name = "humanml3d-263";
    double noise_std = 0.05;
    std::string id_prefix = "synth";
};

namespace synth_detail {

struct Archetype {
    const char* key;
    double base_freq;  // Hz
    std::vector<const char*> phrases;
};

inline const std::vector<Archetype>& archetypes() {
    static const std::vector<Archetype> table = {
        {"walk_forward", 1.0, {"a person walks forward {adv}", "someone walks straight ahead",
                               "the person walks ahead {adv}", "a man walks forward"}},
        {"walk_backward", 1.0, {"a person walks backwards {adv}", "someone steps backwards",
                                "the person walks in reverse"}},
        {"walk_circle", 1.0, {"a person walks in a circle {adv}",
                              "someone walks along a circular path",
                              "the person walks round in a circle"}},
        {"walk_scurve", 1.0, {"a person walks in an s shaped curve",
                              "someone walks in a winding path {adv}",
                              "the person weaves left and right while walking"}},
        {"run_forward", 2.0, {"a person runs forward {adv}", "someone jogs straight ahead",
                              "the person runs ahead"}},
        {"jump_in_place", 1.4, {"a person jumps up and down in place {adv}",
                                "someone hops on the spot", "the person jumps vertically"}},
        {"jump_forward", 1.2, {"a person jumps forward {adv}", "someone leaps ahead",
                               "the person makes a long jump forward"}},
        {"wave_left", 1.6, {"a person waves the left hand {adv}",
                            "someone raises the left arm and waves",
                            "the person waves with the left hand"}},
        {"wave_right", 1.6, {"a person waves the right hand {adv}",
                             "someone raises the right arm and waves",
                             "the person waves with the right hand"}},
        {"squat", 0.8, {"a person squats down and stands up {adv}", "someone performs squats",
                        "the person bends the knees into a squat"}},
        {"turn_around", 0.7, {"a person turns around {adv}",
                              "someone rotates to face the other way", "the person spins round"}},
        {"sidestep_left", 1.1, {"a person steps sideways to the left {adv}",
                                "someone shuffles left",
                                "the person moves side to side leftwards"}},
        {"sidestep_right", 1.1, {"a person steps sideways to the right {adv}",
                                 "someone shuffles right",
                                 "the person moves side to side rightwards"}},
        {"kick", 1.3, {"a person kicks with one leg {adv}", "someone performs a kick",
                       "the person kicks forward"}},
    };
    return table;
}

inline const std::vector<const char*>& hand_phrases() {
    static const std::vector<const char*> table = {
        "while wiggling the fingers",
        "while clenching the fists",
        "with open palms",
        "while tapping the fingers",
    };
    return table;
}

// Per-(archetype, column) offset/amplitude/phase signature. Keyed RNG makes
// the profile a fixed property of the archetype, independent of clip order.
struct DimProfile {
    std::vector<double> offset;
    std::vector<double> amplitude;
    std::vector<double> phase;
};

inline DimProfile make_profile(std::uint64_t key, int dims) {
    Rng rng(key);
    DimProfile p;
    p.offset.resize(dims);
    p.amplitude.resize(dims);
    p.phase.resize(dims);
    for (int i = 0; i < dims; ++i) {
        p.offset[i] = rng.uniform(-0.3, 0.3);
        p.amplitude[i] = rng.uniform(0.05, 0.6);
        p.phase[i] = rng.uniform(0.0, 6.283185307179586);
    }
    return p;
}

inline bool is_gait(int arch) { return arch <= 4 || arch == 6 || arch == 11 || arch == 12; }

inline std::string expand_phrase(std::string phrase, int speed) {
    const std::string slot = " {adv}";
    const auto pos = phrase.find(slot);
    if (pos != std::string::npos) {
        const char* adv = speed == 0 ? " slowly" : (speed == 2 ? " quickly" : "");
        phrase.replace(pos, slot.size(), adv);
    }
    return phrase;
}

}  // namespace synth_detail

inline std::vector<MotionClip> synth_corpus(std::uint64_t seed, const SynthConfig& cfg) {
    using namespace synth_detail;
    check_config(cfg.n_clips >= 1, "synth corpus needs n_clips >= 1");
    const auto& layout = layout_by_name(cfg.layout_name);
    const auto& archs = archetypes();
    const int n_arch = static_cast<int>(archs.size());

    // Fixed per-archetype signatures over every feature column.
    std::vector<DimProfile> profiles;
    profiles.reserve(archs.size());
    for (int a = 0; a < n_arch; ++a)
        profiles.push_back(make_profile(0x5137aULL * (a + 1), layout.frame_dim));
    std::vector<DimProfile> hand_profiles;
    if (layout.has_hand())
        for (int h = 0; h < 4; ++h)
            hand_profiles.push_back(make_profile(0x9a250ULL * (h + 1), layout.frame_dim));

    Rng root(seed);
    std::vector<MotionClip> corpus;
    corpus.reserve(cfg.n_clips);
    const double speed_mult[3] = {0.6, 1.0, 1.5};
    const int max_t_units = layout.frame_dim == 623 ? 75 : 49;

    for (int ci = 0; ci < cfg.n_clips; ++ci) {
        Rng rng = root.split(ci);
        const int arch = static_cast<int>(rng.uniform_int(n_arch));
        const int speed = static_cast<int>(rng.uniform_int(3));
        const int hand_pattern =
            layout.has_hand() ? static_cast<int>(rng.uniform_int(4)) : -1;
        const int t = 4 * static_cast<int>(10 + rng.uniform_int(max_t_units - 10 + 1));
        const double clip_phase = rng.uniform(0.0, 6.283185307179586);
        const double freq = archs[arch].base_freq * speed_mult[speed];
        const double v = 0.8 * speed_mult[speed];

        MotionClip clip;
        clip.id = cfg.id_prefix + "-" + std::to_string(seed) + "-" + std::to_string(ci);
        clip.layout_name = layout.name;
        clip.fps = layout.fps;
        clip.t = t;
        clip.d = layout.frame_dim;
        clip.frames.resize(static_cast<std::size_t>(t) * layout.frame_dim);

        const auto& prof = profiles[arch];
        const std::string key = archs[arch].key;
        for (int fi = 0; fi < t; ++fi) {
            auto frame = clip.frame(fi);
            const double time = fi / layout.fps;
            const double harm = std::sin(6.283185307179586 * freq * time + clip_phase);
            for (const auto& range : layout.sub_ranges) {
                switch (range.kind) {
                    case RangeKind::RootRotVelocity: {
                        double w = 0.0;
                        if (key == "walk_circle") w = 0.5;
                        else if (key == "walk_scurve")
                            w = 0.8 * std::sin(6.283185307179586 * 0.3 * speed_mult[speed] * time);
                        else if (key == "turn_around")
                            w = 1.2 * std::exp(-8.0 * (time * layout.fps / t - 0.5) *
                                               (time * layout.fps / t - 0.5));
                        frame[range.begin] =
                            static_cast<float>(w + cfg.noise_std * 0.2 * rng.gaussian());
                        break;
                    }
                    case RangeKind::RootLinearVelocity: {
                        double vx = 0.0, vz = 0.0;
                        if (key == "walk_forward") vz = v;
                        else if (key == "walk_backward") vz = -v;
                        else if (key == "run_forward") vz = 2.2 * v;
                        else if (key == "jump_forward") vz = v * (0.5 + 0.5 * std::abs(harm));
                        else if (key == "sidestep_left") vx = -v;
                        else if (key == "sidestep_right") vx = v;
                        else if (key == "walk_circle") {
                            vx = v * std::sin(0.5 * time + clip_phase);
                            vz = v * std::cos(0.5 * time + clip_phase);
                        } else if (key == "walk_scurve") {
                            vx = v * std::sin(6.283185307179586 * 0.3 * speed_mult[speed] * time);
                            vz = v;
                        }
                        frame[range.begin] =
                            static_cast<float>(vx + cfg.noise_std * 0.2 * rng.gaussian());
                        frame[range.begin + 1] =
                            static_cast<float>(vz + cfg.noise_std * 0.2 * rng.gaussian());
                        break;
                    }
                    case RangeKind::RootHeight: {
                        double h = 0.9;
                        if (key == "jump_in_place" || key == "jump_forward")
                            h += 0.25 * std::abs(harm);
                        else if (key == "squat")
                            h -= 0.25 * (0.5 - 0.5 * std::cos(6.283185307179586 * freq * time +
                                                              clip_phase));
                        frame[range.begin] =
                            static_cast<float>(h + cfg.noise_std * 0.1 * rng.gaussian());
                        break;
                    }
                    case RangeKind::FootContacts: {
                        const bool left = harm > 0.0;
                        const float lf = is_gait(arch) ? (left ? 1.0f : 0.0f) : 1.0f;
                        const float rf = is_gait(arch) ? (left ? 0.0f : 1.0f) : 1.0f;
                        frame[range.begin] = lf;
                        frame[range.begin + 1] = lf;
                        frame[range.begin + 2] = rf;
                        frame[range.begin + 3] = rf;
                        break;
                    }
                    default: {
                        const bool hand = range.part == BodyPart::Hand;
                        const auto& p = hand ? hand_profiles[hand_pattern] : prof;
                        const double f = hand ? 1.8 * freq : freq;
                        for (int c = range.begin; c < range.end; ++c) {
                            const double s = std::sin(6.283185307179586 * f * time + p.phase[c] +
                                                      clip_phase);
                            frame[c] = static_cast<float>(p.offset[c] + p.amplitude[c] * s +
                                                          cfg.noise_std * rng.gaussian());
                        }
                        break;
                    }
                }
            }
        }

        // 1-4 labels drawn in order from the archetype's phrasings.
        const auto& phrases = archs[arch].phrases;
        const int n_labels =
            1 + static_cast<int>(rng.uniform_int(std::min<std::size_t>(4, phrases.size())));
        const int start = static_cast<int>(rng.uniform_int(phrases.size()));
        for (int li = 0; li < n_labels; ++li) {
            std::string label =
                expand_phrase(phrases[(start + li) % phrases.size()], speed);
            if (hand_pattern >= 0)
                label += std::string(" ") + hand_phrases()[hand_pattern];
            clip.labels.push_back(std::move(label));
        }
        corpus.push_back(std::move(clip));
    }
    return corpus;
}

}  // namespace mgpt2::motion
