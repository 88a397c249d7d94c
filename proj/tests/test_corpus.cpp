#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dms/corpus.hpp"

using namespace dms;
using corpus::Corpus;
using corpus::Item;
using corpus::Kind;
using corpus::Split;
using corpus::TaskConfig;

namespace {

TaskConfig small_config() {
    TaskConfig c;
    c.modulus = 5;
    c.n_fact_keys = 6;
    c.contamination_fraction = 0.0;
    c.answer_len = 3;
    c.rule_holdout_fraction = 0.2;
    c.vocab_size = 32;
    c.seed = 42;
    return c;
}

int count_kind_split(const Corpus& c, Kind k, Split s) {
    int n = 0;
    for (const Item& item : c.items) {
        if (item.kind == k && item.split == s) {
            ++n;
        }
    }
    return n;
}

}  // namespace

TEST_CASE("holdout counting: p=5, holdout=0.2 gives 20 trained and 5 held-out pairs") {
    const Corpus c = corpus::generate_corpus(small_config());
    CHECK(count_kind_split(c, Kind::RULE, Split::TRAIN) == 20);
    CHECK(count_kind_split(c, Kind::RULE, Split::HELDOUT_RULE) == 5);
}

TEST_CASE("rule answer encodes (a+b) mod p") {
    const Corpus c = corpus::generate_corpus(small_config());
    // 2 + 3 = 0 (mod 5); digits least-significant first.
    const std::vector<int> expect = corpus::encode_value(c, 0, 3);
    for (const Item& item : c.items) {
        if (item.id == "rule:2+3") {
            CHECK(item.answer == expect);
            return;
        }
    }
    FAIL("rule:2+3 not found");
}

TEST_CASE("generation is deterministic: same config twice is byte-identical") {
    const Corpus a = corpus::generate_corpus(small_config());
    const Corpus b = corpus::generate_corpus(small_config());
    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
        CHECK(a.items[i].prompt == b.items[i].prompt);
        CHECK(a.items[i].answer == b.items[i].answer);
        CHECK(a.items[i].id == b.items[i].id);
    }

    const auto path_a = std::filesystem::temp_directory_path() / "dms_corpus_a.tsv";
    const auto path_b = std::filesystem::temp_directory_path() / "dms_corpus_b.tsv";
    corpus::save_corpus(a, path_a);
    corpus::save_corpus(b, path_b);
    std::ifstream fa(path_a, std::ios::binary), fb(path_b, std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
    std::filesystem::remove(path_a);
    std::filesystem::remove(path_b);
}

TEST_CASE("different seeds differ") {
    TaskConfig c1 = small_config();
    TaskConfig c2 = small_config();
    c2.seed = 43;
    const Corpus a = corpus::generate_corpus(c1);
    const Corpus b = corpus::generate_corpus(c2);
    bool any_diff = a.items.size() != b.items.size();
    for (size_t i = 0; !any_diff && i < a.items.size(); ++i) {
        any_diff = a.items[i].id != b.items[i].id || a.items[i].answer != b.items[i].answer;
    }
    CHECK(any_diff);
}

TEST_CASE("split disjointness: no prompt occurs in two splits") {
    TaskConfig cfg = small_config();
    cfg.contamination_fraction = 0.2;
    cfg.modulus = 13;
    cfg.n_fact_keys = 20;
    const Corpus c = corpus::generate_corpus(cfg);
    std::set<std::vector<int>> prompts;
    for (const Item& item : c.items) {
        CHECK(prompts.insert(item.prompt).second);  // prompts globally unique
    }
}

TEST_CASE("answer-length uniformity") {
    TaskConfig cfg = small_config();
    cfg.contamination_fraction = 0.2;
    const Corpus c = corpus::generate_corpus(cfg);
    for (const Item& item : c.items) {
        CHECK(item.answer.size() == static_cast<size_t>(cfg.answer_len));
        if (item.kind == Kind::CONTAMINATED) {
            CHECK(item.rule_correct_answer.size() == static_cast<size_t>(cfg.answer_len));
        } else {
            CHECK(item.rule_correct_answer.empty());
        }
    }
}

TEST_CASE("contamination soundness: stored answer wrong, rule answer right") {
    TaskConfig cfg;
    cfg.modulus = 13;
    cfg.n_fact_keys = 10;
    cfg.contamination_fraction = 0.2;
    cfg.rule_holdout_fraction = 0.2;
    cfg.vocab_size = 32;
    cfg.seed = 7;
    const Corpus c = corpus::generate_corpus(cfg);
    int n_contam = 0;
    for (const Item& item : c.items) {
        if (item.kind != Kind::CONTAMINATED) {
            continue;
        }
        ++n_contam;
        CHECK(item.split == Split::EVAL_CONTAM);
        CHECK(item.answer != item.rule_correct_answer);
        // first answer token (units digit) differs by construction
        CHECK(item.answer[0] != item.rule_correct_answer[0]);
        // rule_correct_answer really is the rule applied to the operands
        const auto symbols = corpus::decode(c.tokens, item.prompt);
        REQUIRE(symbols.size() == 5);
        const int a = std::stoi(symbols[1]);
        const int b = std::stoi(symbols[3]);
        CHECK(item.rule_correct_answer == corpus::encode_value(c, (a + b) % cfg.modulus, 3));
    }
    CHECK(n_contam > 0);
}

TEST_CASE("config validation rejects bad settings") {
    TaskConfig cfg = small_config();
    cfg.contamination_fraction = 0.5;
    CHECK_THROWS_AS(corpus::generate_corpus(cfg), std::invalid_argument);

    cfg = small_config();
    cfg.vocab_size = 10;
    CHECK_THROWS_AS(corpus::generate_corpus(cfg), std::invalid_argument);

    cfg = small_config();
    cfg.modulus = 1;
    CHECK_THROWS_AS(corpus::generate_corpus(cfg), std::invalid_argument);

    cfg = small_config();
    cfg.rule_holdout_fraction = 0.0;
    CHECK_THROWS_AS(corpus::generate_corpus(cfg), std::invalid_argument);

    cfg = small_config();
    cfg.answer_len = 0;
    CHECK_THROWS_AS(corpus::generate_corpus(cfg), std::invalid_argument);
}

TEST_CASE("encode/decode round-trips and rejects unknown symbols") {
    const Corpus c = corpus::generate_corpus(small_config());

    SUBCASE("decode(encode(s)) == s") {
        const std::vector<std::string> symbols{"2", "+", "3", "=", "d0"};
        const auto ids = corpus::encode(c.tokens, symbols);
        CHECK(corpus::decode(c.tokens, ids) == symbols);
    }
    SUBCASE("encode(decode(t)) == t over every item") {
        for (const Item& item : c.items) {
            const auto syms = corpus::decode(c.tokens, item.prompt);
            CHECK(corpus::encode(c.tokens, syms) == item.prompt);
        }
    }
    SUBCASE("empty sequence maps to empty sequence") {
        CHECK(corpus::encode(c.tokens, {}).empty());
        CHECK(corpus::decode(c.tokens, {}).empty());
    }
    SUBCASE("unknown symbol is an explicit error") {
        const std::vector<std::string> bad{"walrus"};
        CHECK_THROWS_AS(corpus::encode(c.tokens, bad), std::invalid_argument);
    }
    SUBCASE("all token ids below vocab_size") {
        for (const Item& item : c.items) {
            for (int t : item.prompt) {
                CHECK(t < c.config.vocab_size);
                CHECK(t >= 0);
            }
            for (int t : item.answer) {
                CHECK(t < c.config.vocab_size);
            }
        }
        CHECK(c.tokens.size() <= c.config.vocab_size);
    }
}

TEST_CASE("save/load round trip validates content") {
    const Corpus c = corpus::generate_corpus(small_config());
    const auto path = std::filesystem::temp_directory_path() / "dms_corpus_rt.tsv";
    corpus::save_corpus(c, path);
    const Corpus loaded = corpus::load_corpus(path);
    CHECK(loaded.items.size() == c.items.size());
    CHECK(loaded.config.seed == c.config.seed);

    // Tampering with the body must be caught.
    {
        std::ifstream in(path, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string text = ss.str();
        text.push_back('x');
        std::ofstream out(path, std::ios::binary);
        out << text;
    }
    CHECK_THROWS(corpus::load_corpus(path));
    std::filesystem::remove(path);
}

TEST_CASE("default config shape: trained facts split between train and probe pool") {
    TaskConfig cfg;  // defaults: p=97, 500 facts
    const Corpus c = corpus::generate_corpus(cfg);
    const int probe_facts = count_kind_split(c, Kind::FACT, Split::PROBE_POOL);
    const int train_facts = count_kind_split(c, Kind::FACT, Split::TRAIN);
    CHECK(probe_facts + train_facts == cfg.n_fact_keys);
    CHECK(probe_facts == 200);
    const int contam = count_kind_split(c, Kind::CONTAMINATED, Split::EVAL_CONTAM);
    // 5% of the 8469 trained pairs
    CHECK(contam == 423);
    CHECK(count_kind_split(c, Kind::RULE, Split::HELDOUT_RULE) == 940);
}
