#pragma once

// Synthetic dual-mode task corpus. Two task families share one vocabulary:
//
//   rule items     "a + b ="       answer = digits of (a+b) mod p
//   fact items     "fact k1 k2 ="  answer = three digits fixed by (key, seed)
//
// Rule pairs held out of training probe generalization; fact items can only
// be answered by recall. A configurable fraction of the trained rule pairs
// is contaminated: the stored answer is deliberately wrong, so a trained
// model pits a memorized wrong answer against the rule it otherwise learned.
//
// Answers are answer_len digit tokens, least-significant digit first, so the
// first generated token already separates competing answers.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dms::corpus {

enum class Kind { RULE, FACT, CONTAMINATED };
enum class Split { TRAIN, HELDOUT_RULE, EVAL_CONTAM, PROBE_POOL };

const char* kind_name(Kind k);
const char* split_name(Split s);

struct TaskConfig {
    int modulus = 97;
    int n_fact_keys = 500;
    double contamination_fraction = 0.05;
    int answer_len = 3;
    double rule_holdout_fraction = 0.1;
    int vocab_size = 120;
    uint64_t seed = 0xD5C0FFEEULL;

    void validate() const;  // throws std::invalid_argument
};

struct Item {
    std::vector<int> prompt;
    std::vector<int> answer;
    Kind kind = Kind::RULE;
    // Present iff kind == CONTAMINATED (empty otherwise).
    std::vector<int> rule_correct_answer;
    Split split = Split::TRAIN;
    std::string id;

    // What a correct answer looks like at evaluation time: the stored answer,
    // except for contaminated items where only the rule answer counts.
    const std::vector<int>& eval_target() const {
        return kind == Kind::CONTAMINATED ? rule_correct_answer : answer;
    }
};

// Bijection between token ids and surface symbols.
class TokenMap {
public:
    int add(const std::string& symbol);
    int id(const std::string& symbol) const;           // throws on unknown symbol
    const std::string& symbol(int id) const;           // throws on out-of-range id
    bool contains(const std::string& symbol) const;
    int size() const { return static_cast<int>(symbols_.size()); }

private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> ids_;
};

struct Corpus {
    TaskConfig config;
    TokenMap tokens;
    std::vector<Item> items;

    int bos_id = -1;
    int plus_id = -1;
    int eq_id = -1;
    int fact_id = -1;
    int digit_id[10] = {-1, -1, -1, -1, -1, -1, -1, -1, -1, -1};

    std::vector<const Item*> split_items(Split s) const;
    // Items whose stored answers the model is trained on (everything except
    // the held-out rule pairs).
    std::vector<const Item*> trainable_items() const;
};

// Share of fact keys reserved for the probe prompt pool.
inline constexpr double kProbePoolFactShare = 0.4;

Corpus generate_corpus(const TaskConfig& config);

std::vector<int> encode(const TokenMap& tokens, std::span<const std::string> symbols);
std::vector<std::string> decode(const TokenMap& tokens, std::span<const int> ids);

// Digits of value, least-significant first, exactly answer_len tokens.
std::vector<int> encode_value(const Corpus& corpus, int value, int answer_len);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace dms::corpus
