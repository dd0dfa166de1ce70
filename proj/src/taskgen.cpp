#include "aulab/taskgen.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "aulab/rng.hpp"

namespace aulab {

using ojson = nlohmann::ordered_json;

// --- vocab ------------------------------------------------------------------

int Vocab::letter(int idx) const {
    if (idx < 0 || idx >= 4) throw std::out_of_range("letter index must be 0..3");
    return kLetterA + idx;
}

int Vocab::letter_index(int token) const {
    return token >= kLetterA && token < kLetterA + 4 ? token - kLetterA : -1;
}

std::string Vocab::token_name(int token) const {
    if (token == kQ) return "Q";
    if (token == kQuestionMark) return "?";
    if (token == kEquals) return "=";
    if (letter_index(token) >= 0) return std::string(1, static_cast<char>('A' + letter_index(token)));
    if (token >= relation_base() && token < op_base())
        return "R" + std::to_string(token - relation_base());
    if (token >= op_base() && token < subject_base())
        return "OP" + std::to_string(token - op_base() + 1);
    if (token >= subject_base() && token < object_base())
        return "S" + std::to_string(token - subject_base());
    if (token >= object_base() && token < number_base())
        return "O" + std::to_string(token - object_base());
    if (token >= number_base() && token < size()) return "N" + std::to_string(token - number_base());
    throw std::out_of_range("token id outside vocabulary");
}

const char* to_string(Family f) { return f == Family::Fact ? "fact" : "arith"; }

const char* to_string(Split s) {
    switch (s) {
        case Split::LmTrain: return "lm_train";
        case Split::EasyCal: return "easy_cal";
        case Split::EasyVal: return "easy_val";
        case Split::HardTest: return "hard_test";
        case Split::Retain: return "retain";
    }
    throw std::invalid_argument("bad split");
}

Split split_from_string(const std::string& s) {
    if (s == "lm_train") return Split::LmTrain;
    if (s == "easy_cal") return Split::EasyCal;
    if (s == "easy_val") return Split::EasyVal;
    if (s == "hard_test") return Split::HardTest;
    if (s == "retain") return Split::Retain;
    throw std::invalid_argument("unknown split name: " + s);
}

Family family_from_string(const std::string& s) {
    if (s == "fact") return Family::Fact;
    if (s == "arith") return Family::Arith;
    throw std::invalid_argument("unknown family name: " + s);
}

// --- spec -------------------------------------------------------------------

void CorpusSpec::validate() const {
    if (vocab.n_relations < 1 || vocab.n_ops < 1 || vocab.n_subjects < 1 || vocab.modulus < 5)
        throw std::invalid_argument("corpus spec: vocabulary sections too small");
    if (vocab.n_objects < 4)
        throw std::invalid_argument("corpus spec: need at least 4 objects for options");
    if (vocab.n_ops >= vocab.modulus)
        throw std::invalid_argument("corpus spec: op count must be below the modulus");
    if (n_facts_train < 1 || n_facts_hard < 0 || renderings_per_fact < 1)
        throw std::invalid_argument("corpus spec: bad counts");
    if (n_facts_train + n_facts_hard > vocab.n_subjects * vocab.n_relations)
        throw std::invalid_argument("corpus spec: more facts requested than (subject, relation) pairs");
    if (n_easy_cal + n_easy_val > n_facts_train)
        throw std::invalid_argument("corpus spec: easy_cal + easy_val exceed the train facts");
    if (n_arith_train < 1 || n_arith_train > vocab.modulus * vocab.n_ops)
        throw std::invalid_argument("corpus spec: bad arith count");
    if (n_retain > n_arith_train)
        throw std::invalid_argument("corpus spec: retain set exceeds trained arith questions");
    if (relation_pool_size < 4 || relation_pool_size > vocab.n_objects)
        throw std::invalid_argument("corpus spec: relation pool must hold 4..n_objects objects");
}

// --- universe ---------------------------------------------------------------

Universe generate_universe(const CorpusSpec& spec) {
    spec.validate();
    const Vocab& v = spec.vocab;
    Universe u;
    u.spec = spec;

    Rng rng(mix_seed(spec.seed, "universe"));

    // All (subject, relation) pairs, shuffled; the head becomes train facts,
    // the next block hard facts. Disjointness holds by construction.
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(v.n_subjects) * v.n_relations);
    for (int s = 0; s < v.n_subjects; ++s)
        for (int r = 0; r < v.n_relations; ++r)
            pairs.emplace_back(v.subject_base() + s, v.relation_base() + r);
    rng.shuffle(pairs);

    // Each relation gets a fixed object pool; facts and distractors both draw
    // from it, so options never betray the answer by type.
    for (int r = 0; r < v.n_relations; ++r) {
        std::vector<int> all_objects(v.n_objects);
        for (int i = 0; i < v.n_objects; ++i) all_objects[i] = v.object_base() + i;
        rng.shuffle(all_objects);
        all_objects.resize(spec.relation_pool_size);
        std::sort(all_objects.begin(), all_objects.end());
        u.relation_objects[v.relation_base() + r] = std::move(all_objects);
    }

    auto draw_fact = [&](std::pair<int, int> sr) {
        const auto& pool = u.relation_objects.at(sr.second);
        return Fact{sr.first, sr.second, pool[rng.uniform_int(pool.size())]};
    };
    for (int i = 0; i < spec.n_facts_train; ++i) u.train_facts.push_back(draw_fact(pairs[i]));
    for (int i = 0; i < spec.n_facts_hard; ++i)
        u.hard_facts.push_back(draw_fact(pairs[spec.n_facts_train + i]));

    // Arith questions: (a, k) -> (a + k) mod m, shuffled, head trained on.
    std::vector<std::pair<int, int>> aks;
    for (int a = 0; a < v.modulus; ++a)
        for (int k = 1; k <= v.n_ops; ++k) aks.emplace_back(a, k);
    rng.shuffle(aks);
    for (int i = 0; i < spec.n_arith_train; ++i) {
        auto [a, k] = aks[i];
        u.arith_train.push_back(Fact{v.number_base() + a, v.op_base() + k - 1,
                                     v.number_base() + (a + k) % v.modulus});
    }

    // Op relations can produce any residue, so their pool is every number.
    for (int k = 0; k < v.n_ops; ++k) {
        auto& pool = u.relation_objects[v.op_base() + k];
        for (int a = 0; a < v.modulus; ++a) pool.push_back(v.number_base() + a);
    }
    return u;
}

// --- rendering --------------------------------------------------------------

MCQExample render_mcq(const Fact& fact, const Universe& universe, uint64_t seed) {
    const Vocab& v = universe.spec.vocab;
    Rng rng(seed);

    std::vector<int> pool;
    if (universe.spec.distractor_policy == CorpusSpec::DistractorPolicy::SameRelation) {
        auto it = universe.relation_objects.find(fact.relation);
        if (it != universe.relation_objects.end()) pool = it->second;
    } else {
        bool arith = v.is_op_relation(fact.relation);
        int base = arith ? v.number_base() : v.object_base();
        int count = arith ? v.modulus : v.n_objects;
        for (int i = 0; i < count; ++i) pool.push_back(base + i);
    }
    std::vector<int> candidates;
    for (int obj : pool)
        if (obj != fact.object) candidates.push_back(obj);
    if (candidates.size() < 3)
        throw std::invalid_argument("render_mcq: insufficient distractors for relation " +
                                    v.token_name(fact.relation));

    MCQExample ex;
    ex.family = v.is_op_relation(fact.relation) ? Family::Arith : Family::Fact;
    ex.gold_index = static_cast<int>(rng.uniform_int(4));
    ex.options.assign(4, -1);
    ex.options[ex.gold_index] = fact.object;
    for (int slot = 0; slot < 4; ++slot) {
        if (slot == ex.gold_index) continue;
        size_t pick = rng.uniform_int(candidates.size());
        ex.options[slot] = candidates[pick];
        candidates.erase(candidates.begin() + static_cast<long>(pick));
    }

    ex.question_tokens = {Vocab::kQ, fact.subject, fact.relation, Vocab::kQuestionMark};
    for (int slot = 0; slot < 4; ++slot) {
        ex.question_tokens.push_back(v.letter(slot));
        ex.question_tokens.push_back(ex.options[slot]);
    }
    ex.question_tokens.push_back(Vocab::kEquals);
    return ex;
}

// --- splits -----------------------------------------------------------------

namespace {

std::string pad4(int i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%04d", i);
    return buf;
}

}  // namespace

SplitMap make_splits(const CorpusSpec& spec) {
    Universe u = generate_universe(spec);
    SplitMap out;

    auto rid = [&](Split split, Family fam, int idx, int rendering) {
        std::string id = std::string(to_string(split)) + "-" + to_string(fam) + "-" + pad4(idx);
        if (rendering >= 0) id += "-r" + std::to_string(rendering);
        return id;
    };
    auto seed_for = [&](const std::string& id) { return mix_seed(spec.seed, "render:" + id); };
    auto emit = [&](Split split, const Fact& fact, int idx, int rendering) {
        Family fam = spec.vocab.is_op_relation(fact.relation) ? Family::Arith : Family::Fact;
        std::string id = rid(split, fam, idx, rendering);
        MCQExample ex = render_mcq(fact, u, seed_for(id));
        ex.id = id;
        ex.split = split;
        out[split].push_back(std::move(ex));
    };

    for (int i = 0; i < spec.n_facts_train; ++i)
        for (int j = 0; j < spec.renderings_per_fact; ++j)
            emit(Split::LmTrain, u.train_facts[i], i, j);
    for (int i = 0; i < spec.n_arith_train; ++i)
        for (int j = 0; j < spec.renderings_per_fact; ++j)
            emit(Split::LmTrain, u.arith_train[i], spec.n_facts_train + i, j);

    for (int i = 0; i < spec.n_easy_cal; ++i) emit(Split::EasyCal, u.train_facts[i], i, -1);
    for (int i = 0; i < spec.n_easy_val; ++i)
        emit(Split::EasyVal, u.train_facts[spec.n_easy_cal + i], i, -1);
    for (int i = 0; i < spec.n_facts_hard; ++i) emit(Split::HardTest, u.hard_facts[i], i, -1);
    for (int i = 0; i < spec.n_retain; ++i) emit(Split::Retain, u.arith_train[i], i, -1);
    return out;
}

int exact_match(int predicted_index, int gold_index) {
    if (predicted_index < 0 || predicted_index >= 4 || gold_index < 0 || gold_index >= 4)
        throw std::out_of_range("exact_match: option index outside [0, 4)");
    return predicted_index == gold_index ? 1 : 0;
}

TrainingSequence to_training_sequence(const MCQExample& ex, const Vocab& v) {
    TrainingSequence seq;
    seq.tokens = ex.question_tokens;
    seq.tokens.push_back(ex.gold_letter_token(v));
    seq.tokens.push_back(ex.gold_object_token());
    seq.loss_mask.assign(seq.tokens.size(), 0);
    seq.loss_mask[seq.tokens.size() - 2] = 1;
    seq.loss_mask[seq.tokens.size() - 1] = 1;
    return seq;
}

// --- serialization ----------------------------------------------------------

namespace {

ojson example_to_json(const MCQExample& ex) {
    ojson j;
    j["id"] = ex.id;
    j["family"] = to_string(ex.family);
    j["question_tokens"] = ex.question_tokens;
    j["options"] = ex.options;
    j["gold_index"] = ex.gold_index;
    j["split"] = to_string(ex.split);
    return j;
}

MCQExample example_from_json(const ojson& j) {
    MCQExample ex;
    ex.id = j.at("id").get<std::string>();
    ex.family = family_from_string(j.at("family").get<std::string>());
    ex.question_tokens = j.at("question_tokens").get<std::vector<int>>();
    ex.options = j.at("options").get<std::vector<int>>();
    ex.gold_index = j.at("gold_index").get<int>();
    ex.split = split_from_string(j.at("split").get<std::string>());
    return ex;
}

}  // namespace

std::string corpus_to_jsonl(const SplitMap& splits) {
    static const Split order[] = {Split::LmTrain, Split::EasyCal, Split::EasyVal, Split::HardTest,
                                  Split::Retain};
    std::string out;
    for (Split s : order) {
        auto it = splits.find(s);
        if (it == splits.end()) continue;
        for (const MCQExample& ex : it->second) {
            out += example_to_json(ex).dump();
            out += '\n';
        }
    }
    return out;
}

SplitMap corpus_from_jsonl(const std::string& text) {
    SplitMap out;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        MCQExample ex;
        try {
            ex = example_from_json(ojson::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!seen.insert(ex.id).second)
            throw std::runtime_error("corpus line " + std::to_string(lineno) + ": duplicate id " + ex.id);
        out[ex.split].push_back(std::move(ex));
    }
    return out;
}

}  // namespace aulab
