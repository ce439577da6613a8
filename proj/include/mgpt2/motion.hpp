#pragma once

#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgpt2/error.hpp"
#include "mgpt2/io.hpp"

namespace mgpt2::motion {

// ---------------------------------------------------------------------------
// Feature layouts
// ---------------------------------------------------------------------------

enum class RangeKind {
    RootRotVelocity,
    RootLinearVelocity,
    RootHeight,
    JointPositions,
    JointVelocities,
    JointRotations6d,
    FootContacts,
};

enum class BodyPart { Body, Hand };

struct SubRange {
    std::string name;
    RangeKind kind;
    BodyPart part;
    int begin = 0;
    int end = 0;  // exclusive

    int width() const { return end - begin; }
};

struct FeatureLayout {
    std::string name;
    int frame_dim = 0;
    double fps = 0.0;
    std::vector<SubRange> sub_ranges;

    // Sub-ranges must partition [0, frame_dim) exactly.
    void validate() const {
        int cursor = 0;
        for (const auto& r : sub_ranges) {
            check_contract(r.begin == cursor && r.end > r.begin,
                           "layout '" + name + "' sub-ranges must be contiguous and non-empty");
            cursor = r.end;
        }
        check_contract(cursor == frame_dim,
                       "layout '" + name + "' sub-ranges do not cover [0, frame_dim)");
    }

    bool has_hand() const {
        for (const auto& r : sub_ranges)
            if (r.part == BodyPart::Hand) return true;
        return false;
    }

    int part_dim(BodyPart part) const {
        int d = 0;
        for (const auto& r : sub_ranges)
            if (r.part == part) d += r.width();
        return d;
    }

    // Column indices of all joint-position features (used by displacement
    // metrics and the stick-figure renderer).
    std::vector<int> position_columns() const {
        std::vector<int> cols;
        for (const auto& r : sub_ranges)
            if (r.kind == RangeKind::JointPositions)
                for (int c = r.begin; c < r.end; ++c) cols.push_back(c);
        return cols;
    }
};

namespace detail {

inline FeatureLayout body_layout(const std::string& name, double fps, int joints) {
    // root rotational velocity (1), root linear velocity (2), root height (1),
    // local positions 3(J-1), 6-D rotations 6(J-1), velocities 3J, contacts 4.
    FeatureLayout l;
    l.name = name;
    l.fps = fps;
    const int jp = 3 * (joints - 1), jr = 6 * (joints - 1), jv = 3 * joints;
    int c = 0;
    auto push = [&](const std::string& n, RangeKind k, int w) {
        l.sub_ranges.push_back({n, k, BodyPart::Body, c, c + w});
        c += w;
    };
    push("root_rot_velocity", RangeKind::RootRotVelocity, 1);
    push("root_linear_velocity", RangeKind::RootLinearVelocity, 2);
    push("root_height", RangeKind::RootHeight, 1);
    push("joint_positions", RangeKind::JointPositions, jp);
    push("joint_rotations_6d", RangeKind::JointRotations6d, jr);
    push("joint_velocities", RangeKind::JointVelocities, jv);
    push("foot_contacts", RangeKind::FootContacts, 4);
    l.frame_dim = c;
    return l;
}

}  // namespace detail

inline const std::map<std::string, FeatureLayout>& layout_registry() {
    static const std::map<std::string, FeatureLayout> registry = [] {
        std::map<std::string, FeatureLayout> m;
        auto h = detail::body_layout("humanml3d-263", 20.0, 22);  // 263 columns
        m.emplace(h.name, h);
        auto k = detail::body_layout("kitml-251", 12.5, 21);  // 251 columns
        m.emplace(k.name, k);
        // Holistic layout: a 263-wide body block followed by a 360-wide hand
        // block (30 hand joints x (3 pos + 6 rot + 3 vel)).
        auto x = detail::body_layout("motionx-623", 30.0, 22);
        x.name = "motionx-623";
        int c = x.frame_dim;
        auto push_hand = [&](const std::string& n, RangeKind kind, int w) {
            x.sub_ranges.push_back({n, kind, BodyPart::Hand, c, c + w});
            c += w;
        };
        push_hand("hand_positions", RangeKind::JointPositions, 90);
        push_hand("hand_rotations_6d", RangeKind::JointRotations6d, 180);
        push_hand("hand_velocities", RangeKind::JointVelocities, 90);
        x.frame_dim = c;
        m.emplace(x.name, x);
        for (auto& [name, layout] : m) layout.validate();
        return m;
    }();
    return registry;
}

inline const FeatureLayout& layout_by_name(const std::string& name) {
    const auto& reg = layout_registry();
    auto it = reg.find(name);
    if (it == reg.end()) throw FormatError("unknown layout name '" + name + "'");
    return it->second;
}

// Training-time length bounds (enforced at ingestion, not at load).
inline int min_length(const FeatureLayout&) { return 40; }
inline int max_length(const FeatureLayout& l) { return l.frame_dim == 623 ? 300 : 196; }

// ---------------------------------------------------------------------------
// Clips
// ---------------------------------------------------------------------------

struct MotionClip {
    std::string id;
    std::string layout_name;
    double fps = 0.0;
    int t = 0;
    int d = 0;
    std::vector<float> frames;  // row-major T x d
    std::vector<std::string> labels;
    // Token sequences ride along inside container records once tokenized.
    std::vector<int> tokens;
    std::vector<int> tokens_body;
    std::vector<int> tokens_hand;

    std::span<const float> frame(int i) const {
        return {frames.data() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d)};
    }
    std::span<float> frame(int i) {
        return {frames.data() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d)};
    }

    const FeatureLayout& layout() const { return layout_by_name(layout_name); }
};

struct HolisticClip {
    std::vector<float> body;  // T x body_dim
    std::vector<float> hand;  // T x hand_dim
    int t = 0;
    int body_dim = 0;
    int hand_dim = 0;
    double fps = 0.0;
};

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // floored at 1e-8

    int dim() const { return static_cast<int>(mean.size()); }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline NormalizationStats compute_stats(const std::vector<MotionClip>& corpus) {
    check_contract(!corpus.empty(), "cannot compute stats of an empty corpus");
    const int d = corpus.front().d;
    NormalizationStats s;
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    std::int64_t n = 0;
    for (const auto& c : corpus) {
        check_contract(c.d == d, "mixed frame dims in corpus");
        for (int i = 0; i < c.t; ++i) {
            auto f = c.frame(i);
            for (int j = 0; j < d; ++j) s.mean[j] += f[j];
        }
        n += c.t;
    }
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (const auto& c : corpus)
        for (int i = 0; i < c.t; ++i) {
            auto f = c.frame(i);
            for (int j = 0; j < d; ++j) {
                const double dv = f[j] - s.mean[j];
                s.stddev[j] += dv * dv;
            }
        }
    for (auto& v : s.stddev) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-8);
    return s;
}

inline MotionClip normalize(const MotionClip& clip, const NormalizationStats& stats) {
    check_contract(stats.dim() == clip.d, "stats dimension does not match clip dimension");
    MotionClip out = clip;
    for (int i = 0; i < out.t; ++i) {
        auto f = out.frame(i);
        for (int j = 0; j < out.d; ++j)
            f[j] = static_cast<float>((f[j] - stats.mean[j]) / stats.stddev[j]);
    }
    return out;
}

inline MotionClip denormalize(const MotionClip& clip, const NormalizationStats& stats) {
    check_contract(stats.dim() == clip.d, "stats dimension does not match clip dimension");
    MotionClip out = clip;
    for (int i = 0; i < out.t; ++i) {
        auto f = out.frame(i);
        for (int j = 0; j < out.d; ++j)
            f[j] = static_cast<float>(f[j] * stats.stddev[j] + stats.mean[j]);
    }
    return out;
}

// Crops trailing frames so the length is a whole multiple (padding would
// fabricate poses and distort velocity features).
inline MotionClip pad_or_crop(const MotionClip& clip, int multiple) {
    check_config(multiple >= 1, "pad_or_crop multiple must be >= 1");
    const int t = clip.t / multiple * multiple;
    if (t == 0)
        throw ContractError("degenerate clip: " + std::to_string(clip.t) +
                            " frames cannot align to multiple " + std::to_string(multiple));
    MotionClip out = clip;
    out.t = t;
    out.frames.resize(static_cast<std::size_t>(t) * clip.d);
    return out;
}

inline HolisticClip split_body_hand(const MotionClip& clip) {
    const auto& layout = clip.layout();
    check_contract(layout.has_hand(),
                   "layout '" + layout.name + "' declares no hand sub-ranges");
    HolisticClip out;
    out.t = clip.t;
    out.fps = clip.fps;
    out.body_dim = layout.part_dim(BodyPart::Body);
    out.hand_dim = layout.part_dim(BodyPart::Hand);
    out.body.resize(static_cast<std::size_t>(clip.t) * out.body_dim);
    out.hand.resize(static_cast<std::size_t>(clip.t) * out.hand_dim);
    for (int i = 0; i < clip.t; ++i) {
        auto f = clip.frame(i);
        int cb = 0, ch = 0;
        for (const auto& r : layout.sub_ranges) {
            auto* dst = r.part == BodyPart::Body ? &out.body : &out.hand;
            int* cursor = r.part == BodyPart::Body ? &cb : &ch;
            const int base = r.part == BodyPart::Body ? out.body_dim : out.hand_dim;
            std::copy(f.begin() + r.begin, f.begin() + r.end,
                      dst->begin() + static_cast<std::size_t>(i) * base + *cursor);
            *cursor += r.width();
        }
    }
    return out;
}

// Exact inverse of split_body_hand for the given layout.
inline MotionClip combine_body_hand(const HolisticClip& parts, const FeatureLayout& layout) {
    check_contract(layout.part_dim(BodyPart::Body) == parts.body_dim &&
                       layout.part_dim(BodyPart::Hand) == parts.hand_dim,
                   "holistic parts do not match layout '" + layout.name + "'");
    MotionClip out;
    out.layout_name = layout.name;
    out.fps = parts.fps;
    out.t = parts.t;
    out.d = layout.frame_dim;
    out.frames.resize(static_cast<std::size_t>(parts.t) * layout.frame_dim);
    for (int i = 0; i < parts.t; ++i) {
        auto f = out.frame(i);
        int cb = 0, ch = 0;
        for (const auto& r : layout.sub_ranges) {
            const auto* src = r.part == BodyPart::Body ? &parts.body : &parts.hand;
            int* cursor = r.part == BodyPart::Body ? &cb : &ch;
            const int base = r.part == BodyPart::Body ? parts.body_dim : parts.hand_dim;
            std::copy(src->begin() + static_cast<std::size_t>(i) * base + *cursor,
                      src->begin() + static_cast<std::size_t>(i) * base + *cursor + r.width(),
                      f.begin() + r.begin);
            *cursor += r.width();
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clip container: one file per corpus, one JSON record per line with
// base64-encoded little-endian float32 frames.
// ---------------------------------------------------------------------------

inline nlohmann::json clip_to_record(const MotionClip& clip) {
    nlohmann::json rec;
    rec["id"] = clip.id;
    rec["layout"] = clip.layout_name;
    rec["fps"] = clip.fps;
    rec["t"] = clip.t;
    rec["labels"] = clip.labels;
    rec["frames_b64"] =
        io::base64_encode(clip.frames.data(), clip.frames.size() * sizeof(float));
    if (!clip.tokens.empty()) rec["tokens"] = clip.tokens;
    if (!clip.tokens_body.empty()) rec["tokens_body"] = clip.tokens_body;
    if (!clip.tokens_hand.empty()) rec["tokens_hand"] = clip.tokens_hand;
    return rec;
}

inline MotionClip clip_from_record(const nlohmann::json& rec) {
    MotionClip clip;
    clip.id = rec.at("id").get<std::string>();
    clip.layout_name = rec.at("layout").get<std::string>();
    const auto& layout = layout_by_name(clip.layout_name);  // throws on unknown name
    clip.fps = rec.at("fps").get<double>();
    clip.t = rec.at("t").get<int>();
    clip.labels = rec.at("labels").get<std::vector<std::string>>();
    const auto bytes = io::base64_decode(rec.at("frames_b64").get<std::string>());
    if (bytes.size() % sizeof(float) != 0) throw FormatError("frame bytes not float-aligned");
    const std::size_t n = bytes.size() / sizeof(float);
    if (clip.t <= 0 || n == 0) throw FormatError("empty clip '" + clip.id + "'");
    if (n % clip.t != 0 || static_cast<int>(n / clip.t) != layout.frame_dim)
        throw FormatError("frame matrix of clip '" + clip.id + "' is " +
                          std::to_string(n / clip.t) + " wide, layout '" + clip.layout_name +
                          "' requires " + std::to_string(layout.frame_dim));
    clip.d = layout.frame_dim;
    clip.frames.resize(n);
    std::memcpy(clip.frames.data(), bytes.data(), bytes.size());
    if (rec.contains("tokens")) clip.tokens = rec.at("tokens").get<std::vector<int>>();
    if (rec.contains("tokens_body"))
        clip.tokens_body = rec.at("tokens_body").get<std::vector<int>>();
    if (rec.contains("tokens_hand"))
        clip.tokens_hand = rec.at("tokens_hand").get<std::vector<int>>();
    return clip;
}

inline void save_corpus(const std::string& path, const std::vector<MotionClip>& clips) {
    std::ostringstream os;
    for (const auto& c : clips) os << clip_to_record(c).dump() << "\n";
    io::write_file(path, os.str());
}

inline std::vector<MotionClip> load_corpus(const std::string& path) {
    std::istringstream is(io::read_file(path));
    std::vector<MotionClip> clips;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad clip record in " + path + ": " + e.what());
        }
        clips.push_back(clip_from_record(rec));
    }
    return clips;
}

inline MotionClip load_clip(const std::string& path) {
    auto clips = load_corpus(path);
    if (clips.empty()) throw FormatError("empty clip container: " + path);
    return clips.front();
}

// Human-readable sidecar: "dimension,mean,std" per line.
inline void save_stats(const std::string& path, const NormalizationStats& stats) {
    std::ostringstream os;
    os << "dimension,mean,std\n";
    os.precision(17);
    for (int i = 0; i < stats.dim(); ++i)
        os << i << "," << stats.mean[i] << "," << stats.stddev[i] << "\n";
    io::write_file(path, os.str());
}

inline NormalizationStats load_stats(const std::string& path) {
    std::istringstream is(io::read_file(path));
    std::string line;
    std::getline(is, line);
    if (line != "dimension,mean,std") throw FormatError("bad stats header in " + path);
    NormalizationStats s;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string dim, mean, sd;
        if (!std::getline(row, dim, ',') || !std::getline(row, mean, ',') ||
            !std::getline(row, sd, ','))
            throw FormatError("bad stats row in " + path);
        s.mean.push_back(std::stod(mean));
        s.stddev.push_back(std::max(std::stod(sd), 1e-8));
    }
    return s;
}

}  // namespace mgpt2::motion
