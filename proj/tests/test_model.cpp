#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "aulab/checkpoint.hpp"
#include "aulab/io.hpp"
#include "aulab/model.hpp"
#include "aulab/taskgen.hpp"

using namespace aulab;

namespace {

CorpusSpec tiny_corpus_spec() {
    CorpusSpec spec;
    spec.seed = 21;
    spec.vocab.n_relations = 6;
    spec.vocab.n_ops = 2;
    spec.vocab.n_subjects = 12;
    spec.vocab.n_objects = 8;
    spec.vocab.modulus = 7;
    spec.relation_pool_size = 6;
    spec.n_facts_train = 24;
    spec.n_facts_hard = 8;
    spec.n_arith_train = 10;
    spec.renderings_per_fact = 2;
    spec.n_easy_cal = 8;
    spec.n_easy_val = 8;
    spec.n_retain = 6;
    return spec;
}

ModelConfig tiny_model_config(const Vocab& v) {
    ModelConfig c;
    c.vocab_size = v.size();
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 64;
    c.max_seq_len = 32;
    c.seed = 3;
    return c;
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
    for (const std::string& n : a.names())
        if (!same_values(a.at(n), b.at(n))) return false;
    return true;
}

std::vector<int> demo_tokens(const ModelConfig& c, int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> toks(n);
    for (int& t : toks) t = static_cast<int>(rng.uniform_int(c.vocab_size));
    return toks;
}

}  // namespace

TEST_CASE("init_model is deterministic and seed-sensitive") {
    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 124;
    ModelParams a = init_model(cfg, 5);
    ModelParams b = init_model(cfg, 5);
    CHECK(same_params(a, b));

    ModelParams c = init_model(cfg, 6);
    bool any_diff = false;
    for (const std::string& n : a.names()) any_diff = any_diff || !same_values(a.at(n), c.at(n));
    CHECK(any_diff);
}

TEST_CASE("init_model weight scale tracks 1/sqrt(d_model)") {
    ModelConfig cfg;
    cfg.vocab_size = 124;
    cfg.d_model = 64;
    ModelParams p = init_model(cfg, 9);
    const Tensor& w = p.at("layers.0.attn.wq");
    double m = 0, v = 0;
    for (double x : w.data()) m += x;
    m /= static_cast<double>(w.size());
    for (double x : w.data()) v += (x - m) * (x - m);
    v /= static_cast<double>(w.size());
    double sd = std::sqrt(v);
    double target = 1.0 / std::sqrt(64.0);
    CHECK(sd > target * 0.8);
    CHECK(sd < target * 1.2);

    // biases zero, gains one
    for (double x : p.at("layers.0.attn.bq").data()) CHECK(x == 0.0);
    for (double x : p.at("final_ln.gain").data()) CHECK(x == 1.0);
}

TEST_CASE("eval forward is a pure function and ignores config dropout") {
    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 64;
    cfg.dropout_site = DropoutSite::Attention;
    cfg.dropout_rate = 0.5;
    ModelParams p = init_model(cfg, 1);
    std::vector<int> toks = demo_tokens(cfg, 9, 44);

    ForwardOptions fo;
    fo.taps = {0, 8};
    ForwardOutput a = forward(p, toks, fo);
    ForwardOutput b = forward(p, toks, fo);
    CHECK(same_values(a.logits, b.logits));
    CHECK(same_values(a.tapped_hidden.at(8), b.tapped_hidden.at(8)));
}

TEST_CASE("dropout override contracts") {
    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 64;
    ModelParams p = init_model(cfg, 2);
    std::vector<int> toks = demo_tokens(cfg, 11, 7);

    ForwardOptions plain;
    plain.taps = {10};
    ForwardOutput base = forward(p, toks, plain);

    // rate 0 override is bit-identical to no override
    ForwardOptions zero = plain;
    Rng rng0(123);
    zero.dropout_override = DropoutSpec{DropoutSite::Attention, 0.0};
    zero.rng = &rng0;
    ForwardOutput z = forward(p, toks, zero);
    CHECK(same_values(base.logits, z.logits));

    // same rng seed, different site: tapped vectors differ
    ForwardOptions att = plain;
    Rng rng_a(9);
    att.dropout_override = DropoutSpec{DropoutSite::Attention, 0.1};
    att.rng = &rng_a;
    ForwardOutput oa = forward(p, toks, att);

    ForwardOptions mlp = plain;
    Rng rng_m(9);
    mlp.dropout_override = DropoutSpec{DropoutSite::Mlp, 0.1};
    mlp.rng = &rng_m;
    ForwardOutput om = forward(p, toks, mlp);
    CHECK(!same_values(oa.tapped_hidden.at(10), om.tapped_hidden.at(10)));

    // active dropout demands an rng
    ForwardOptions norng = plain;
    norng.dropout_override = DropoutSpec{DropoutSite::Attention, 0.1};
    CHECK_THROWS_AS(forward(p, toks, norng), std::invalid_argument);

    // site none forces effective rate 0 regardless of the stated rate
    ForwardOptions none = plain;
    Rng rng_n(5);
    none.dropout_override = DropoutSpec{DropoutSite::None, 0.9};
    none.rng = &rng_n;
    CHECK(same_values(base.logits, forward(p, toks, none).logits));
}

TEST_CASE("causality: later tokens never change earlier logits") {
    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 64;
    ModelParams p = init_model(cfg, 8);
    std::vector<int> toks = demo_tokens(cfg, 12, 3);

    ForwardOptions fo;
    ForwardOutput a = forward(p, toks, fo);
    for (int j : {5, 11}) {
        std::vector<int> mutated = toks;
        mutated[j] = (mutated[j] + 17) % cfg.vocab_size;
        ForwardOutput b = forward(p, mutated, fo);
        for (int i = 0; i < j; ++i)
            for (int c = 0; c < cfg.vocab_size; ++c) CHECK(a.logits.at(i, c) == b.logits.at(i, c));
    }
}

TEST_CASE("inverted dropout preserves expectation over many masks") {
    // 10^4 masks at rates 0.1 and 0.5; elementwise mean within 3 standard
    // errors of the unmasked activation.
    const int n_masks = 10000;
    std::vector<double> activation{1.25, -0.4, 2.0, 0.03, -1.7};
    Tensor x = Tensor::from({1, 5}, activation);
    for (double rate : {0.1, 0.5}) {
        Rng rng(mix_seed(404, rate == 0.1 ? "r01" : "r05"));
        std::vector<double> mean(activation.size(), 0.0);
        for (int i = 0; i < n_masks; ++i) {
            Tensor d = dropout(nullptr, x, rate, rng);
            for (size_t j = 0; j < mean.size(); ++j) mean[j] += d.data()[j];
        }
        for (size_t j = 0; j < mean.size(); ++j) {
            mean[j] /= n_masks;
            double se = std::fabs(activation[j]) * std::sqrt(rate / (1.0 - rate) / n_masks);
            CHECK(std::fabs(mean[j] - activation[j]) <= 3.0 * se + 1e-12);
        }
    }
}

TEST_CASE("dropout sites mask disjoint paths (grad flow on 1-layer model)") {
    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 32;
    cfg.n_layers = 1;
    ModelParams p = init_model(cfg, 12);
    std::vector<int> toks = demo_tokens(cfg, 6, 2);
    std::vector<int> targets(toks.begin() + 1, toks.end());
    targets.push_back(0);

    auto grads_with = [&](DropoutSite site) {
        p.zero_grads();
        Tape tape;
        Rng rng(31);
        ForwardOptions fo;
        fo.mode = RunMode::Train;
        fo.tape = &tape;
        fo.rng = &rng;
        fo.dropout_override = DropoutSpec{site, 1.0};
        ForwardOutput out = forward(p, toks, fo);
        Tensor loss = cross_entropy_logits(&tape, out.logits, targets);
        tape.backward(loss);
        auto norm = [&](const std::string& name) {
            double s = 0;
            for (double g : p.at(name).grad()) s += g * g;
            return s;
        };
        return std::pair<double, double>{norm("layers.0.attn.wo"), norm("layers.0.mlp.w2")};
    };

    // Full attention dropout starves the attention output projection of
    // gradient while the MLP path still learns, and vice versa.
    auto [attn_wo, mlp_w2] = grads_with(DropoutSite::Attention);
    CHECK(attn_wo == 0.0);
    CHECK(mlp_w2 > 0.0);
    auto [attn_wo2, mlp_w22] = grads_with(DropoutSite::Mlp);
    CHECK(attn_wo2 > 0.0);
    CHECK(mlp_w22 == 0.0);
}

TEST_CASE("train_lm: zero steps is the identity, loss decreases on a tiny corpus") {
    CorpusSpec cspec = tiny_corpus_spec();
    SplitMap splits = make_splits(cspec);
    std::vector<TrainingSequence> corpus;
    for (const MCQExample& ex : splits[Split::LmTrain])
        corpus.push_back(to_training_sequence(ex, cspec.vocab));

    ModelConfig cfg = tiny_model_config(cspec.vocab);
    ModelParams p = init_model(cfg, 17);
    ModelParams before = p.deep_copy();

    TrainHyper none;
    none.steps = 0;
    TrainResult r0 = train_lm(p, corpus, none);
    CHECK(r0.loss_trace.empty());
    CHECK(same_params(p, before));

    TrainHyper hyper;
    hyper.lr = 3e-3;
    hyper.steps = 60;
    hyper.batch = 8;
    hyper.seed = 5;
    TrainResult r = train_lm(p, corpus, hyper);
    REQUIRE(r.loss_trace.size() == 60);
    double head = (r.loss_trace[0] + r.loss_trace[1] + r.loss_trace[2]) / 3;
    double tail = (r.loss_trace[57] + r.loss_trace[58] + r.loss_trace[59]) / 3;
    CHECK(tail < head);

    CHECK_THROWS_AS(train_lm(p, {}, hyper), std::invalid_argument);
}

TEST_CASE("answer_mcq taps the documented positions") {
    CorpusSpec cspec = tiny_corpus_spec();
    SplitMap splits = make_splits(cspec);
    const MCQExample& ex = splits[Split::EasyCal][0];

    ModelConfig cfg = tiny_model_config(cspec.vocab);
    ModelParams p = init_model(cfg, 23);

    McqAnswer ans = answer_mcq(p, ex, cspec.vocab);
    CHECK(ans.chosen >= 0);
    CHECK(ans.chosen < 4);
    CHECK(ans.hidden_pre.size() == static_cast<size_t>(cfg.d_model));
    CHECK(ans.hidden_post.size() == static_cast<size_t>(cfg.d_model));

    // hidden_pre is the final hidden state at the last question token;
    // hidden_post the state at the emitted answer letter.
    int qlen = ex.question_len();
    ForwardOptions fo;
    fo.taps = {qlen - 1};
    ForwardOutput direct = forward(p, ex.question_tokens, fo);
    CHECK(same_values(ans.hidden_pre, direct.tapped_hidden.at(qlen - 1)));

    std::vector<int> extended = ex.question_tokens;
    extended.push_back(cspec.vocab.letter(ans.chosen));
    ForwardOptions fo2;
    fo2.taps = {qlen};
    ForwardOutput ext = forward(p, extended, fo2);
    CHECK(same_values(ans.hidden_post, ext.tapped_hidden.at(qlen)));

    // Two eval-mode calls agree (deterministic greedy answer).
    McqAnswer again = answer_mcq(p, ex, cspec.vocab);
    CHECK(again.chosen == ans.chosen);
    CHECK(same_values(again.hidden_post, ans.hidden_post));

    // Template violations are rejected.
    MCQExample broken = ex;
    broken.question_tokens.pop_back();
    CHECK_THROWS_AS(answer_mcq(p, broken, cspec.vocab), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is byte-exact and validated") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "aulab_ckpt_test";
    fs::remove_all(dir);

    ModelConfig cfg = tiny_model_config(Vocab{});
    cfg.vocab_size = 48;
    ModelParams p = init_model(cfg, 77);

    save_checkpoint(p, dir);
    std::string manifest1 = read_file(dir / "manifest.json");
    std::string weights1 = read_file(dir / "weights.bin");

    LoadedCheckpoint loaded = load_checkpoint(dir);
    CHECK(loaded.params.config() == cfg);
    CHECK(!loaded.optimizer.has_value());

    fs::path dir2 = fs::temp_directory_path() / "aulab_ckpt_test2";
    fs::remove_all(dir2);
    save_checkpoint(loaded.params, dir2);
    CHECK(read_file(dir2 / "manifest.json") == manifest1);
    CHECK(read_file(dir2 / "weights.bin") == weights1);

    // manifest lists every parameter exactly once
    auto names = ModelParams::parameter_names(cfg);
    auto manifest = nlohmann::ordered_json::parse(manifest1);
    CHECK(manifest.at("tensors").size() == names.size());

    // tampering with the byte length is caught
    std::ofstream trunc(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    trunc.write(weights1.data(), static_cast<std::streamsize>(weights1.size() - 4));
    trunc.close();
    CHECK_THROWS_AS(load_checkpoint(dir), std::runtime_error);

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("checkpoint carries optimizer state") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "aulab_ckpt_opt";
    fs::remove_all(dir);

    CorpusSpec cspec = tiny_corpus_spec();
    SplitMap splits = make_splits(cspec);
    std::vector<TrainingSequence> corpus;
    for (const MCQExample& ex : splits[Split::LmTrain])
        corpus.push_back(to_training_sequence(ex, cspec.vocab));

    ModelConfig cfg = tiny_model_config(cspec.vocab);
    ModelParams p = init_model(cfg, 31);
    std::vector<Tensor> tensors = p.tensors();
    AdamState state = AdamState::init_for(tensors);
    TrainHyper hyper;
    hyper.steps = 4;
    hyper.batch = 4;
    train_lm(p, corpus, hyper, &state);

    save_checkpoint(p, dir, &state);
    LoadedCheckpoint loaded = load_checkpoint(dir);
    REQUIRE(loaded.optimizer.has_value());
    CHECK(loaded.optimizer->step == state.step);
    REQUIRE(loaded.optimizer->m.size() == state.m.size());
    // f64 -> f32 -> f64 truncation applies to moments as well; compare at
    // float precision.
    for (size_t k = 0; k < state.m.size(); ++k)
        for (size_t i = 0; i < state.m[k].size(); ++i) {
            CHECK(static_cast<float>(loaded.optimizer->m[k][i]) == static_cast<float>(state.m[k][i]));
            CHECK(static_cast<float>(loaded.optimizer->v[k][i]) == static_cast<float>(state.v[k][i]));
        }
    fs::remove_all(dir);
}
