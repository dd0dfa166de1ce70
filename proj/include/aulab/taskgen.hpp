#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace aulab {

// Symbolic vocabulary for the synthetic multiple-choice corpus. Two question
// families share one 13-token template
//
//     Q <subject> <relation> ? A <opt0> B <opt1> C <opt2> D <opt3> =
//
// followed by a 2-token answer span: the option letter and the answer symbol.
// The fact family pairs entity subjects with arbitrary objects (pure recall);
// the arith family uses number subjects and add-k-mod-m relations whose
// answers follow a rule, so they survive interventions that target facts.
struct Vocab {
    int n_relations = 12;
    int n_ops = 4;
    int n_subjects = 48;
    int n_objects = 24;
    int modulus = 29;

    static constexpr int kQ = 0;
    static constexpr int kQuestionMark = 1;
    static constexpr int kEquals = 2;
    static constexpr int kLetterA = 3;  // letters A..D are ids 3..6

    int relation_base() const { return 7; }
    int op_base() const { return relation_base() + n_relations; }
    int subject_base() const { return op_base() + n_ops; }
    int object_base() const { return subject_base() + n_subjects; }
    int number_base() const { return object_base() + n_objects; }
    int size() const { return number_base() + modulus; }

    int letter(int idx) const;              // idx in [0,4)
    int letter_index(int token) const;      // inverse of letter(), -1 if not a letter
    bool is_op_relation(int token) const {
        return token >= op_base() && token < op_base() + n_ops;
    }
    std::string token_name(int token) const;
};

enum class Family { Fact, Arith };
enum class Split { LmTrain, EasyCal, EasyVal, HardTest, Retain };

const char* to_string(Family f);
const char* to_string(Split s);
Split split_from_string(const std::string& s);
Family family_from_string(const std::string& s);

// One (subject, relation) -> object association, all fields token ids.
// Arith entries use number/op tokens and are marked by their relation range.
struct Fact {
    int subject = 0;
    int relation = 0;
    int object = 0;

    bool operator==(const Fact&) const = default;
};

struct MCQExample {
    std::string id;
    Family family = Family::Fact;
    std::vector<int> question_tokens;  // fixed 13-token template
    std::vector<int> options;          // 4 object/number token ids, gold included once
    int gold_index = 0;                // 0..3
    Split split = Split::LmTrain;

    int question_len() const { return static_cast<int>(question_tokens.size()); }
    // Position whose logits choose the answer letter (the '=' token).
    int answer_logit_pos() const { return question_len() - 1; }
    int gold_letter_token(const Vocab& v) const { return v.letter(gold_index); }
    int gold_object_token() const { return options[gold_index]; }
};

struct CorpusSpec {
    uint64_t seed = 7;
    Vocab vocab;
    int n_facts_train = 320;
    int n_facts_hard = 128;
    int n_arith_train = 96;
    int renderings_per_fact = 4;  // distinct option layouts per lm_train fact
    int n_easy_cal = 128;
    int n_easy_val = 128;
    int n_retain = 96;
    int relation_pool_size = 12;  // objects admissible per relation
    enum class DistractorPolicy { SameRelation, Uniform };
    DistractorPolicy distractor_policy = DistractorPolicy::SameRelation;

    void validate() const;  // throws std::invalid_argument when inconsistent
};

// The generated fact universe: train and hard fact sets are disjoint by
// (subject, relation) construction; arith entries are rule-consistent.
struct Universe {
    CorpusSpec spec;
    std::vector<Fact> train_facts;
    std::vector<Fact> hard_facts;
    std::vector<Fact> arith_train;  // (number a, op k) -> (a + k) mod m
    // Objects observed per relation, used as the same-relation distractor pool.
    std::map<int, std::vector<int>> relation_objects;
};

Universe generate_universe(const CorpusSpec& spec);

// Renders one fact through the canonical template. Distractors and the gold
// position come from the given seed; id and split are assigned by the caller
// (make_splits fills both).
MCQExample render_mcq(const Fact& fact, const Universe& universe, uint64_t seed);

using SplitMap = std::map<Split, std::vector<MCQExample>>;

// Deterministic split construction:
//   lm_train  - every train fact rendered renderings_per_fact times plus all
//               arith questions (the saturation corpus and unlearning pool)
//   easy_cal  - fresh renderings of the first n_easy_cal train facts
//   easy_val  - fresh renderings of the next n_easy_val train facts
//   hard_test - the held-out facts, never seen in lm_train
//   retain    - fresh renderings of arith questions
SplitMap make_splits(const CorpusSpec& spec);

int exact_match(int predicted_index, int gold_index);  // 0/1, throws on range

// Training view of an example: template plus answer span, with the loss mask
// covering the two answer tokens.
struct TrainingSequence {
    std::vector<int> tokens;
    std::vector<uint8_t> loss_mask;
};
TrainingSequence to_training_sequence(const MCQExample& ex, const Vocab& v);

// JSONL round trip, fixed key order, '\n' separators.
std::string corpus_to_jsonl(const SplitMap& splits);
SplitMap corpus_from_jsonl(const std::string& text);

}  // namespace aulab
