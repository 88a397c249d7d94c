#include "dms/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dms/rng.hpp"

namespace dms::corpus {

namespace {

// Marker tokens: bos, +, =, fact, and ten digit tokens.
constexpr int kMarkerTokens = 14;

void serialize_corpus(const Corpus& corpus, std::ostream& out) {
    const TaskConfig& c = corpus.config;
    out << "# modulus=" << c.modulus << " n_fact_keys=" << c.n_fact_keys
        << " contamination_fraction=" << c.contamination_fraction << " answer_len=" << c.answer_len
        << " rule_holdout_fraction=" << c.rule_holdout_fraction << " vocab_size=" << c.vocab_size
        << " seed=" << c.seed << "\n";
    auto join = [&](const std::vector<int>& ids) {
        std::string s;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) {
                s += ' ';
            }
            s += corpus.tokens.symbol(ids[i]);
        }
        return s;
    };
    for (const Item& item : corpus.items) {
        out << kind_name(item.kind) << '\t' << split_name(item.split) << '\t' << join(item.prompt)
            << '\t' << join(item.answer) << '\t'
            << (item.kind == Kind::CONTAMINATED ? join(item.rule_correct_answer) : std::string("-"))
            << '\n';
    }
}

}  // namespace

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::RULE: return "RULE";
        case Kind::FACT: return "FACT";
        case Kind::CONTAMINATED: return "CONTAMINATED";
    }
    return "?";
}

const char* split_name(Split s) {
    switch (s) {
        case Split::TRAIN: return "TRAIN";
        case Split::HELDOUT_RULE: return "HELDOUT_RULE";
        case Split::EVAL_CONTAM: return "EVAL_CONTAM";
        case Split::PROBE_POOL: return "PROBE_POOL";
    }
    return "?";
}

void TaskConfig::validate() const {
    if (modulus < 2) {
        throw std::invalid_argument("corpus: modulus must be >= 2");
    }
    if (answer_len < 1) {
        throw std::invalid_argument("corpus: answer_len must be >= 1");
    }
    if (n_fact_keys < 0) {
        throw std::invalid_argument("corpus: n_fact_keys must be >= 0");
    }
    if (contamination_fraction < 0.0 || contamination_fraction >= 0.5) {
        // Above one half the model could learn that rules are unreliable.
        throw std::invalid_argument("corpus: contamination_fraction must be in [0, 0.5)");
    }
    if (rule_holdout_fraction <= 0.0 || rule_holdout_fraction >= 1.0) {
        throw std::invalid_argument("corpus: rule_holdout_fraction must be in (0, 1)");
    }
    if (vocab_size < modulus + kMarkerTokens) {
        throw std::invalid_argument("corpus: vocab_size too small; need modulus + " +
                                    std::to_string(kMarkerTokens) + " tokens");
    }
    if (n_fact_keys > modulus * modulus) {
        throw std::invalid_argument("corpus: n_fact_keys exceeds addressable keys");
    }
    // answer_len digits base 10 must cover every rule result.
    double cap = 1.0;
    for (int i = 0; i < answer_len; ++i) {
        cap *= 10.0;
    }
    if (cap < modulus) {
        throw std::invalid_argument("corpus: answer_len too small for modulus");
    }
}

int TokenMap::add(const std::string& symbol) {
    auto it = ids_.find(symbol);
    if (it != ids_.end()) {
        return it->second;
    }
    const int id = static_cast<int>(symbols_.size());
    symbols_.push_back(symbol);
    ids_.emplace(symbol, id);
    return id;
}

int TokenMap::id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    if (it == ids_.end()) {
        throw std::invalid_argument("token map: unknown symbol '" + symbol + "'");
    }
    return it->second;
}

const std::string& TokenMap::symbol(int id) const {
    if (id < 0 || id >= static_cast<int>(symbols_.size())) {
        throw std::invalid_argument("token map: id out of range: " + std::to_string(id));
    }
    return symbols_[static_cast<size_t>(id)];
}

bool TokenMap::contains(const std::string& symbol) const {
    return ids_.count(symbol) != 0;
}

std::vector<const Item*> Corpus::split_items(Split s) const {
    std::vector<const Item*> out;
    for (const Item& item : items) {
        if (item.split == s) {
            out.push_back(&item);
        }
    }
    return out;
}

std::vector<const Item*> Corpus::trainable_items() const {
    std::vector<const Item*> out;
    for (const Item& item : items) {
        if (item.split != Split::HELDOUT_RULE) {
            out.push_back(&item);
        }
    }
    return out;
}

std::vector<int> encode(const TokenMap& tokens, std::span<const std::string> symbols) {
    std::vector<int> out;
    out.reserve(symbols.size());
    for (const std::string& s : symbols) {
        out.push_back(tokens.id(s));
    }
    return out;
}

std::vector<std::string> decode(const TokenMap& tokens, std::span<const int> ids) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) {
        out.push_back(tokens.symbol(id));
    }
    return out;
}

std::vector<int> encode_value(const Corpus& corpus, int value, int answer_len) {
    if (value < 0) {
        throw std::invalid_argument("encode_value: negative value");
    }
    std::vector<int> out(static_cast<size_t>(answer_len));
    int v = value;
    for (int i = 0; i < answer_len; ++i) {
        out[static_cast<size_t>(i)] = corpus.digit_id[v % 10];
        v /= 10;
    }
    if (v != 0) {
        throw std::invalid_argument("encode_value: value does not fit in answer_len digits");
    }
    return out;
}

Corpus generate_corpus(const TaskConfig& config) {
    config.validate();

    Corpus corpus;
    corpus.config = config;

    corpus.bos_id = corpus.tokens.add("bos");
    corpus.plus_id = corpus.tokens.add("+");
    corpus.eq_id = corpus.tokens.add("=");
    corpus.fact_id = corpus.tokens.add("fact");
    for (int d = 0; d < 10; ++d) {
        corpus.digit_id[d] = corpus.tokens.add("d" + std::to_string(d));
    }
    std::vector<int> number_id(static_cast<size_t>(config.modulus));
    for (int n = 0; n < config.modulus; ++n) {
        number_id[static_cast<size_t>(n)] = corpus.tokens.add(std::to_string(n));
    }

    const int p = config.modulus;

    // Partition all (a, b) pairs into trained and held-out sets.
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(p) * static_cast<size_t>(p));
    for (int a = 0; a < p; ++a) {
        for (int b = 0; b < p; ++b) {
            pairs.emplace_back(a, b);
        }
    }
    Rng holdout_rng(mix_seed(config.seed, 3));
    holdout_rng.shuffle(pairs);
    const size_t n_heldout =
        static_cast<size_t>(config.rule_holdout_fraction * static_cast<double>(pairs.size()));
    std::vector<std::pair<int, int>> heldout(pairs.begin(),
                                             pairs.begin() + static_cast<ptrdiff_t>(n_heldout));
    std::vector<std::pair<int, int>> trained(pairs.begin() + static_cast<ptrdiff_t>(n_heldout),
                                             pairs.end());

    // Pick the contaminated subset of the trained pairs.
    Rng contam_rng(mix_seed(config.seed, 7));
    contam_rng.shuffle(trained);
    const size_t n_contam = static_cast<size_t>(config.contamination_fraction *
                                                static_cast<double>(trained.size()));
    std::vector<std::pair<int, int>> contaminated(trained.begin(),
                                                  trained.begin() + static_cast<ptrdiff_t>(n_contam));
    std::vector<std::pair<int, int>> clean_trained(trained.begin() + static_cast<ptrdiff_t>(n_contam),
                                                   trained.end());

    std::sort(heldout.begin(), heldout.end());
    std::sort(contaminated.begin(), contaminated.end());
    std::sort(clean_trained.begin(), clean_trained.end());

    auto rule_prompt = [&](int a, int b) {
        return std::vector<int>{corpus.bos_id, number_id[static_cast<size_t>(a)], corpus.plus_id,
                                number_id[static_cast<size_t>(b)], corpus.eq_id};
    };
    auto rule_id_str = [](int a, int b) {
        return "rule:" + std::to_string(a) + "+" + std::to_string(b);
    };

    for (const auto& [a, b] : clean_trained) {
        Item item;
        item.prompt = rule_prompt(a, b);
        item.answer = encode_value(corpus, (a + b) % p, config.answer_len);
        item.kind = Kind::RULE;
        item.split = Split::TRAIN;
        item.id = rule_id_str(a, b);
        corpus.items.push_back(std::move(item));
    }

    // Fact items: the answer value is a pure function of (seed, key). A share
    // of the keys is set aside as the probe prompt pool; those items are
    // trained exactly like the rest.
    int64_t answer_cap = 1;
    for (int i = 0; i < config.answer_len && answer_cap < 1000000000; ++i) {
        answer_cap *= 10;
    }
    const int n_probe_facts =
        static_cast<int>(kProbePoolFactShare * static_cast<double>(config.n_fact_keys));
    for (int key = 0; key < config.n_fact_keys; ++key) {
        const int k_hi = key / p;
        const int k_lo = key % p;
        const int value = static_cast<int>(
            mix_seed(mix_seed(config.seed, 11), static_cast<uint64_t>(key)) %
            static_cast<uint64_t>(answer_cap));
        Item item;
        item.prompt = std::vector<int>{corpus.bos_id, corpus.fact_id,
                                       number_id[static_cast<size_t>(k_hi)],
                                       number_id[static_cast<size_t>(k_lo)], corpus.eq_id};
        item.answer = encode_value(corpus, value, config.answer_len);
        item.kind = Kind::FACT;
        item.split = key < n_probe_facts ? Split::PROBE_POOL : Split::TRAIN;
        item.id = "fact:" + std::to_string(key);
        corpus.items.push_back(std::move(item));
    }

    // Contaminated items: trained with a wrong stored answer. The wrong value
    // is forced to differ from the rule answer in the first (units) digit so
    // the competing answers already diverge at the first generated token.
    Rng wrong_rng(mix_seed(config.seed, 13));
    for (const auto& [a, b] : contaminated) {
        const int correct = (a + b) % p;
        int wrong = correct;
        while (wrong == correct || wrong % 10 == correct % 10) {
            wrong = static_cast<int>(wrong_rng.next_below(static_cast<uint64_t>(p)));
        }
        Item item;
        item.prompt = rule_prompt(a, b);
        item.answer = encode_value(corpus, wrong, config.answer_len);
        item.rule_correct_answer = encode_value(corpus, correct, config.answer_len);
        item.kind = Kind::CONTAMINATED;
        item.split = Split::EVAL_CONTAM;
        item.id = "contam:" + std::to_string(a) + "+" + std::to_string(b);
        corpus.items.push_back(std::move(item));
    }

    for (const auto& [a, b] : heldout) {
        Item item;
        item.prompt = rule_prompt(a, b);
        item.answer = encode_value(corpus, (a + b) % p, config.answer_len);
        item.kind = Kind::RULE;
        item.split = Split::HELDOUT_RULE;
        item.id = rule_id_str(a, b);
        corpus.items.push_back(std::move(item));
    }

    // Stable global order: by split, then by id.
    std::stable_sort(corpus.items.begin(), corpus.items.end(), [](const Item& x, const Item& y) {
        if (x.split != y.split) {
            return static_cast<int>(x.split) < static_cast<int>(y.split);
        }
        return x.id < y.id;
    });

    return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("corpus: cannot write " + path.string());
    }
    serialize_corpus(corpus, out);
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("corpus: cannot read " + path.string());
    }
    std::ostringstream file_text;
    file_text << in.rdbuf();

    std::istringstream first_line(file_text.str());
    std::string header;
    if (!std::getline(first_line, header) || header.size() < 2 || header[0] != '#') {
        throw std::runtime_error("corpus: missing config header in " + path.string());
    }

    TaskConfig config;
    {
        std::istringstream hs(header.substr(1));
        std::string kv;
        while (hs >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw std::runtime_error("corpus: bad header field '" + kv + "'");
            }
            const std::string key = kv.substr(0, eq);
            const std::string val = kv.substr(eq + 1);
            if (key == "modulus") config.modulus = std::stoi(val);
            else if (key == "n_fact_keys") config.n_fact_keys = std::stoi(val);
            else if (key == "contamination_fraction") config.contamination_fraction = std::stod(val);
            else if (key == "answer_len") config.answer_len = std::stoi(val);
            else if (key == "rule_holdout_fraction") config.rule_holdout_fraction = std::stod(val);
            else if (key == "vocab_size") config.vocab_size = std::stoi(val);
            else if (key == "seed") config.seed = std::stoull(val);
            else throw std::runtime_error("corpus: unknown header key '" + key + "'");
        }
    }

    // Generation is a pure function of the config, so the items are rebuilt
    // from the header and the file body is checked against them.
    Corpus corpus = generate_corpus(config);
    std::ostringstream expected;
    serialize_corpus(corpus, expected);
    if (expected.str() != file_text.str()) {
        throw std::runtime_error("corpus: file body does not match regeneration from its header: " +
                                 path.string());
    }
    return corpus;
}

}  // namespace dms::corpus
