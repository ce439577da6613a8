#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mgpt2/error.hpp"
#include "mgpt2/io.hpp"

namespace mgpt2::lang {

// Fixed special-token surfaces, appended last in the unified vocabulary.
struct SpecialTokens {
    static constexpr const char* motion_open = "<motion>";
    static constexpr const char* motion_close = "</motion>";
    static constexpr const char* body_open = "<Motion_Body_Token>";
    static constexpr const char* body_close = "</Motion_Body_Token>";
    static constexpr const char* hand_open = "<Motion_Hand_Token>";
    static constexpr const char* hand_close = "</Motion_Hand_Token>";
    static constexpr const char* end_of_answer = "<eoa>";
    static constexpr const char* padding = "<pad>";

    static const std::vector<std::string>& all() {
        static const std::vector<std::string> list = {
            motion_open, motion_close, body_open,      body_close,
            hand_open,   hand_close,   end_of_answer,  padding};
        return list;
    }
};

struct MotionRange {
    std::string name;
    int begin = 0;
    int end = 0;  // exclusive

    int size() const { return end - begin; }
};

// Disjoint union of word-level text tokens (with byte fallbacks), one
// contiguous id range per motion codebook, and the special tokens:
//   [0, text_size) | motion ranges in order | specials.
// Ids and surfaces are in bijection.
class UnifiedVocabulary {
public:
    // Lower-cased word-level text vocabulary from the corpus labels and task
    // prompt strings, in encounter order, plus 256 byte-fallback entries.
    static std::vector<std::string> build_text_vocab(const std::vector<std::string>& texts) {
        std::vector<std::string> words;
        std::unordered_map<std::string, int> seen;
        for (const auto& text : texts)
            for (const auto& tok : split_words(lowercase(text)))
                if (seen.emplace(tok, 1).second) words.push_back(tok);
        for (int b = 0; b < 256; ++b) words.push_back(byte_surface(b));
        return words;
    }

    // Appends one contiguous range of "<mot_<name>_k>" surfaces per book and
    // the special tokens last.
    static UnifiedVocabulary extend_with_motion_tokens(
        const std::vector<std::string>& text_vocab,
        const std::vector<std::pair<std::string, int>>& books) {
        UnifiedVocabulary v;
        for (const auto& w : text_vocab) v.push_surface(w);
        v.text_size_ = static_cast<int>(v.id_to_surface_.size());
        for (const auto& [name, size] : books) {
            check_config(size >= 1, "motion book '" + name + "' must have at least one entry");
            for (const auto& r : v.motion_ranges_)
                check_config(r.name != name, "duplicate motion book name '" + name + "'");
            MotionRange range{name, static_cast<int>(v.id_to_surface_.size()), 0};
            for (int k = 0; k < size; ++k)
                v.push_surface("<mot_" + name + "_" + std::to_string(k) + ">");
            range.end = static_cast<int>(v.id_to_surface_.size());
            v.motion_ranges_.push_back(range);
        }
        v.specials_begin_ = static_cast<int>(v.id_to_surface_.size());
        for (const auto& s : SpecialTokens::all()) v.push_surface(s);
        return v;
    }

    static UnifiedVocabulary build(const std::vector<std::string>& texts,
                                   const std::vector<std::pair<std::string, int>>& books) {
        return extend_with_motion_tokens(build_text_vocab(texts), books);
    }

    int total_size() const { return static_cast<int>(id_to_surface_.size()); }
    int text_size() const { return text_size_; }
    int specials_begin() const { return specials_begin_; }
    const std::vector<MotionRange>& motion_ranges() const { return motion_ranges_; }

    const MotionRange& range(const std::string& name) const {
        for (const auto& r : motion_ranges_)
            if (r.name == name) return r;
        throw ContractError("no motion range named '" + name + "'");
    }

    bool is_text_id(int id) const { return id >= 0 && id < text_size_; }
    bool is_special_id(int id) const { return id >= specials_begin_ && id < total_size(); }
    bool is_motion_id(int id, const std::string& range_name) const {
        const auto& r = range(range_name);
        return id >= r.begin && id < r.end;
    }

    int special_id(const std::string& surface) const {
        auto it = surface_to_id_.find(surface);
        check_contract(it != surface_to_id_.end() && is_special_id(it->second),
                       "unknown special token '" + surface + "'");
        return it->second;
    }

    std::optional<int> id_of(const std::string& surface) const {
        auto it = surface_to_id_.find(surface);
        if (it == surface_to_id_.end()) return std::nullopt;
        return it->second;
    }

    const std::string& surface(int id) const {
        check_contract(id >= 0 && id < total_size(),
                       "id " + std::to_string(id) + " outside vocabulary of size " +
                           std::to_string(total_size()));
        return id_to_surface_[id];
    }

    // Whitespace tokenization. A token matching a known surface (exactly, or
    // lower-cased) becomes that id; anything else falls back to the bytes of
    // its lower-cased form, closed by a space byte that marks the word end.
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& raw : split_words(text)) {
            auto it = surface_to_id_.find(raw);
            if (it == surface_to_id_.end()) it = surface_to_id_.find(lowercase(raw));
            if (it != surface_to_id_.end()) {
                ids.push_back(it->second);
                continue;
            }
            for (unsigned char c : lowercase(raw))
                ids.push_back(surface_to_id_.at(byte_surface(c)));
            ids.push_back(surface_to_id_.at(byte_surface(' ')));
        }
        return ids;
    }

    // Inverse of encode on the closed surface set: byte runs reassemble into
    // words (the space byte terminates a run), everything else joins with
    // single spaces.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        std::string byte_run;
        bool in_run = false;
        auto flush = [&] {
            if (!in_run) return;
            if (!out.empty()) out += ' ';
            out += byte_run;
            byte_run.clear();
            in_run = false;
        };
        for (int id : ids) {
            const std::string& s = surface(id);
            if (auto b = byte_of(s)) {
                if (*b == ' ') {
                    flush();
                } else {
                    in_run = true;
                    byte_run.push_back(static_cast<char>(*b));
                }
                continue;
            }
            flush();
            if (!out.empty()) out += ' ';
            out += s;
        }
        flush();
        return out;
    }

    // LM-space motion id -> codebook index (id - range start), and back.
    std::vector<int> motion_ids_to_codebook_indices(const std::vector<int>& ids,
                                                    const std::string& range_name) const {
        const auto& r = range(range_name);
        std::vector<int> out;
        out.reserve(ids.size());
        for (int id : ids) {
            check_contract(id >= r.begin && id < r.end,
                           "id " + std::to_string(id) + " outside motion range '" + range_name +
                               "' [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                               ")");
            out.push_back(id - r.begin);
        }
        return out;
    }

    std::vector<int> codebook_indices_to_motion_ids(const std::vector<int>& indices,
                                                    const std::string& range_name) const {
        const auto& r = range(range_name);
        std::vector<int> out;
        out.reserve(indices.size());
        for (int k : indices) {
            check_contract(k >= 0 && k < r.size(),
                           "codebook index " + std::to_string(k) + " outside range '" +
                               range_name + "' of size " + std::to_string(r.size()));
            out.push_back(r.begin + k);
        }
        return out;
    }

    // Plain-text file: range header lines, then one "surface<TAB>id" per entry.
    void save(const std::string& path) const {
        std::ostringstream os;
        os << "# mgpt2-vocab v1\n";
        os << "# text_size\t" << text_size_ << "\n";
        for (const auto& r : motion_ranges_)
            os << "# range\t" << r.name << "\t" << r.begin << "\t" << r.end << "\n";
        os << "# specials_begin\t" << specials_begin_ << "\n";
        for (int i = 0; i < total_size(); ++i) os << id_to_surface_[i] << "\t" << i << "\n";
        io::write_file(path, os.str());
    }

    static UnifiedVocabulary load(const std::string& path) {
        std::istringstream is(io::read_file(path));
        std::string line;
        if (!std::getline(is, line) || line != "# mgpt2-vocab v1")
            throw FormatError("bad vocabulary header in " + path);
        UnifiedVocabulary v;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (line[0] == '#') {
                std::istringstream row(line);
                std::string hash, key;
                row >> hash >> key;
                if (key == "text_size") {
                    row >> v.text_size_;
                } else if (key == "range") {
                    MotionRange r;
                    row >> r.name >> r.begin >> r.end;
                    v.motion_ranges_.push_back(r);
                } else if (key == "specials_begin") {
                    row >> v.specials_begin_;
                }
                continue;
            }
            const auto tab = line.rfind('\t');
            if (tab == std::string::npos) throw FormatError("bad vocabulary row in " + path);
            const std::string surface = line.substr(0, tab);
            const int id = std::stoi(line.substr(tab + 1));
            if (id != static_cast<int>(v.id_to_surface_.size()))
                throw FormatError("non-contiguous vocabulary ids in " + path);
            v.push_surface(surface);
        }
        return v;
    }

    static std::string lowercase(std::string s) {
        for (auto& c : s)
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        return s;
    }

private:
    void push_surface(const std::string& s) {
        check_config(surface_to_id_.emplace(s, static_cast<int>(id_to_surface_.size())).second,
                     "duplicate vocabulary surface '" + s + "'");
        id_to_surface_.push_back(s);
    }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
                if (!cur.empty()) out.push_back(std::move(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
        return out;
    }

    static std::string byte_surface(int b) {
        static const char* hex = "0123456789abcdef";
        std::string s = "<byte_";
        s.push_back(hex[(b >> 4) & 0xf]);
        s.push_back(hex[b & 0xf]);
        s.push_back('>');
        return s;
    }

    static std::optional<int> byte_of(const std::string& s) {
        if (s.size() != 9 || s.rfind("<byte_", 0) != 0 || s.back() != '>') return std::nullopt;
        auto hex_val = [](char c) -> int {
            if (c >= '0' && c <= '9') return c - '0';
            if (c >= 'a' && c <= 'f') return c - 'a' + 10;
            return -1;
        };
        const int hi = hex_val(s[6]), lo = hex_val(s[7]);
        if (hi < 0 || lo < 0) return std::nullopt;
        return hi * 16 + lo;
    }

    std::vector<std::string> id_to_surface_;
    std::unordered_map<std::string, int> surface_to_id_;
    std::vector<MotionRange> motion_ranges_;
    int text_size_ = 0;
    int specials_begin_ = 0;
};

}  // namespace mgpt2::lang
