#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "mgpt2/rng.hpp"
#include "mgpt2/vocab.hpp"

using namespace mgpt2;
using namespace mgpt2::lang;

TEST_CASE("text vocabulary construction") {
    auto words = UnifiedVocabulary::build_text_vocab({"a person walks"});
    // 3 words + 256 byte fallbacks
    REQUIRE(words.size() == 259);
    CHECK(words[0] == "a");
    CHECK(words[1] == "person");
    CHECK(words[2] == "walks");

    SECTION("two builds over the same corpus assign identical ids") {
        auto again = UnifiedVocabulary::build_text_vocab({"a person walks"});
        CHECK(words == again);
    }

    SECTION("case folds and repeats deduplicate") {
        auto v = UnifiedVocabulary::build_text_vocab({"A Person WALKS", "a person walks fast"});
        REQUIRE(v.size() == 260);
        CHECK(v[3] == "fast");
    }
}

TEST_CASE("vocabulary extension arithmetic") {
    // 44 distinct words + 256 bytes = |B_t| = 300.
    std::string corpus;
    for (int i = 0; i < 44; ++i) corpus += "w" + std::to_string(i) + " ";

    SECTION("one 512-entry book and 8 specials total 820") {
        auto vocab = UnifiedVocabulary::build({corpus}, {{"motion", 512}});
        CHECK(vocab.text_size() == 300);
        CHECK(vocab.total_size() == 820);
        const auto& r = vocab.range("motion");
        CHECK(r.begin == 300);
        CHECK(r.end == 812);
        CHECK(vocab.specials_begin() == 812);
        CHECK(*vocab.id_of("<mot_motion_511>") == 811);
        CHECK(*vocab.id_of("<pad>") == 819);
    }

    SECTION("body and hand books make two disjoint ranges") {
        auto vocab = UnifiedVocabulary::build({corpus}, {{"body", 512}, {"hand", 512}});
        const auto& body = vocab.range("body");
        const auto& hand = vocab.range("hand");
        CHECK(body.size() == 512);
        CHECK(hand.size() == 512);
        CHECK(body.end == hand.begin);
        CHECK(vocab.total_size() == 300 + 1024 + 8);
    }

    SECTION("duplicate book name is a config error") {
        CHECK_THROWS_AS(UnifiedVocabulary::build({corpus}, {{"motion", 8}, {"motion", 8}}),
                        ConfigError);
    }

    SECTION("ids and surfaces are a bijection") {
        auto vocab = UnifiedVocabulary::build({corpus}, {{"motion", 32}});
        for (int id = 0; id < vocab.total_size(); ++id)
            CHECK(*vocab.id_of(vocab.surface(id)) == id);
    }
}

TEST_CASE("encode and decode") {
    auto vocab = UnifiedVocabulary::build({"a person walks in a circle"}, {{"motion", 16}});

    SECTION("mixed string round trip") {
        const std::string s = "<motion> <mot_motion_5> </motion>";
        auto ids = vocab.encode(s);
        REQUIRE(ids.size() == 3);
        CHECK(vocab.decode(ids) == s);
    }

    SECTION("unknown word round trips via byte fallback") {
        auto ids = vocab.encode("pirouette");
        CHECK(ids.size() == 10);  // 9 bytes + terminator
        CHECK(vocab.decode(ids) == "pirouette");
        CHECK(vocab.decode(vocab.encode("a person does a pirouette quickly")) ==
              "a person does a pirouette quickly");
    }

    SECTION("adjacent unknown words stay separate") {
        CHECK(vocab.decode(vocab.encode("zig zag")) == "zig zag");
    }

    SECTION("out-of-range id is a contract error") {
        CHECK_THROWS_AS(vocab.decode({vocab.total_size()}), ContractError);
        CHECK_THROWS_AS(vocab.surface(-1), ContractError);
    }

    SECTION("100 random mixed prompts round trip exactly") {
        Rng rng(2024);
        const std::vector<std::string> words = {"a",      "person", "walks", "in",
                                                "circle", "waves",  "the",   "hand"};
        for (int trial = 0; trial < 100; ++trial) {
            std::string s;
            const int n = 3 + static_cast<int>(rng.uniform_int(10));
            for (int i = 0; i < n; ++i) {
                if (!s.empty()) s += ' ';
                const int pick = static_cast<int>(rng.uniform_int(4));
                if (pick == 0)
                    s += "<mot_motion_" + std::to_string(rng.uniform_int(16)) + ">";
                else if (pick == 1)
                    s += SpecialTokens::all()[rng.uniform_int(8)];
                else if (pick == 2)
                    s += "unseen" + std::to_string(rng.uniform_int(50));
                else
                    s += words[rng.uniform_int(words.size())];
            }
            CHECK(vocab.decode(vocab.encode(s)) == s);
        }
    }
}

TEST_CASE("motion id to codebook index bridge") {
    std::string corpus;
    for (int i = 0; i < 44; ++i) corpus += "w" + std::to_string(i) + " ";
    auto vocab = UnifiedVocabulary::build({corpus}, {{"motion", 512}});
    REQUIRE(vocab.range("motion").begin == 300);

    CHECK(vocab.motion_ids_to_codebook_indices({307}, "motion") == std::vector<int>{7});
    CHECK(vocab.codebook_indices_to_motion_ids({7}, "motion") == std::vector<int>{307});

    SECTION("inverse composed with forward is the identity over the range") {
        std::vector<int> all(512);
        std::iota(all.begin(), all.end(), 0);
        auto ids = vocab.codebook_indices_to_motion_ids(all, "motion");
        CHECK(vocab.motion_ids_to_codebook_indices(ids, "motion") == all);
    }

    SECTION("a text id passed as a motion id is a contract error") {
        CHECK_THROWS_AS(vocab.motion_ids_to_codebook_indices({5}, "motion"), ContractError);
    }

    SECTION("unknown range name is a contract error") {
        CHECK_THROWS_AS(vocab.range("fингers"), ContractError);
    }
}

TEST_CASE("vocabulary file round trip") {
    auto vocab =
        UnifiedVocabulary::build({"a person walks", "someone jumps"}, {{"motion", 32}});
    const auto path = (std::filesystem::temp_directory_path() / "vocab.tsv").string();
    vocab.save(path);
    auto loaded = UnifiedVocabulary::load(path);
    CHECK(loaded.total_size() == vocab.total_size());
    CHECK(loaded.text_size() == vocab.text_size());
    CHECK(loaded.range("motion").begin == vocab.range("motion").begin);
    for (int id = 0; id < vocab.total_size(); ++id)
        CHECK(loaded.surface(id) == vocab.surface(id));
    CHECK(loaded.decode(loaded.encode("a person walks <motion> <mot_motion_3> </motion>")) ==
          "a person walks <motion> <mot_motion_3> </motion>");
}
