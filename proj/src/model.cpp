#include "aulab/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aulab {

using ojson = nlohmann::ordered_json;

const char* to_string(DropoutSite s) {
    switch (s) {
        case DropoutSite::None: return "none";
        case DropoutSite::Attention: return "attention";
        case DropoutSite::Mlp: return "mlp";
    }
    throw std::invalid_argument("bad dropout site");
}

DropoutSite dropout_site_from_string(const std::string& s) {
    if (s == "none") return DropoutSite::None;
    if (s == "attention") return DropoutSite::Attention;
    if (s == "mlp") return DropoutSite::Mlp;
    throw std::invalid_argument("unknown dropout site: " + s);
}

void ModelConfig::validate() const {
    if (vocab_size < 2 || d_model < 2 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 1)
        throw std::invalid_argument("model config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (dropout_rate < 0.0 || dropout_rate > 1.0)
        throw std::invalid_argument("model config: dropout_rate must lie in [0,1]");
}

ojson model_config_to_json(const ModelConfig& c) {
    ojson j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["max_seq_len"] = c.max_seq_len;
    j["dropout_site"] = to_string(c.dropout_site);
    j["dropout_rate"] = c.dropout_rate;
    j["seed"] = c.seed;
    return j;
}

ModelConfig model_config_from_json(const ojson& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.dropout_site = dropout_site_from_string(j.at("dropout_site").get<std::string>());
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

// --- parameter table --------------------------------------------------------

std::vector<std::string> ModelParams::parameter_names(const ModelConfig& c) {
    std::vector<std::string> names{"embed.pos", "embed.tokens", "final_ln.bias", "final_ln.gain",
                                   "head.w"};
    for (int i = 0; i < c.n_layers; ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        for (const char* leaf :
             {"attn.bk", "attn.bo", "attn.bq", "attn.bv", "attn.wk", "attn.wo", "attn.wq",
              "attn.wv", "ln1.bias", "ln1.gain", "ln2.bias", "ln2.gain", "mlp.b1", "mlp.b2",
              "mlp.w1", "mlp.w2"})
            names.push_back(p + leaf);
    }
    std::sort(names.begin(), names.end());
    return names;
}

std::vector<int> ModelParams::expected_shape(const ModelConfig& c, const std::string& name) {
    if (name == "embed.tokens") return {c.vocab_size, c.d_model};
    if (name == "embed.pos") return {c.max_seq_len, c.d_model};
    if (name == "final_ln.gain" || name == "final_ln.bias") return {c.d_model};
    if (name == "head.w") return {c.d_model, c.vocab_size};
    if (name.rfind("layers.", 0) == 0) {
        size_t dot = name.find('.', 7);
        if (dot != std::string::npos) {
            int layer = std::stoi(name.substr(7, dot - 7));
            std::string leaf = name.substr(dot + 1);
            if (layer >= 0 && layer < c.n_layers) {
                if (leaf == "attn.wq" || leaf == "attn.wk" || leaf == "attn.wv" ||
                    leaf == "attn.wo")
                    return {c.d_model, c.d_model};
                if (leaf == "attn.bq" || leaf == "attn.bk" || leaf == "attn.bv" ||
                    leaf == "attn.bo")
                    return {c.d_model};
                if (leaf == "ln1.gain" || leaf == "ln1.bias" || leaf == "ln2.gain" ||
                    leaf == "ln2.bias")
                    return {c.d_model};
                if (leaf == "mlp.w1") return {c.d_model, c.d_ff};
                if (leaf == "mlp.b1") return {c.d_ff};
                if (leaf == "mlp.w2") return {c.d_ff, c.d_model};
                if (leaf == "mlp.b2") return {c.d_model};
            }
        }
    }
    throw std::invalid_argument("unknown parameter name: " + name);
}

ModelParams ModelParams::zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    p.config_ = c;
    p.names_ = parameter_names(c);
    for (const std::string& n : p.names_)
        p.table_.emplace(n, Tensor::zeros(expected_shape(c, n), /*requires_grad=*/true));
    return p;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = table_.find(name);
    if (it == table_.end()) throw std::invalid_argument("no such parameter: " + name);
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = table_.find(name);
    if (it == table_.end()) throw std::invalid_argument("no such parameter: " + name);
    return it->second;
}

std::vector<Tensor> ModelParams::tensors() {
    std::vector<Tensor> out;
    out.reserve(names_.size());
    for (const std::string& n : names_) out.push_back(table_.at(n));
    return out;
}

ModelParams ModelParams::deep_copy() const {
    ModelParams p;
    p.config_ = config_;
    p.names_ = names_;
    for (const auto& [n, t] : table_) p.table_.emplace(n, t.clone());
    return p;
}

void ModelParams::zero_grads() {
    for (auto& [n, t] : table_) t.zero_grad();
}

ModelParams init_model(const ModelConfig& config, uint64_t seed) {
    ModelParams p = ModelParams::zeros(config);
    double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    for (const std::string& name : p.names()) {
        Tensor& t = p.at(name);
        bool is_gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
        bool is_matrix = t.shape().size() == 2;
        if (is_gain) {
            std::fill(t.data().begin(), t.data().end(), 1.0);
        } else if (is_matrix) {
            Rng rng(mix_seed(seed, "init:" + name));
            for (double& v : t.data()) v = rng.normal() * stddev;
        }
        // biases stay zero
    }
    return p;
}

// --- forward ----------------------------------------------------------------

namespace {

struct EffectiveDropout {
    DropoutSite site = DropoutSite::None;
    double rate = 0.0;
    bool attn() const { return site == DropoutSite::Attention && rate > 0.0; }
    bool mlp() const { return site == DropoutSite::Mlp && rate > 0.0; }
};

EffectiveDropout resolve_dropout(const ModelConfig& cfg, const ForwardOptions& opt) {
    if (opt.dropout_override) {
        const DropoutSpec& d = *opt.dropout_override;
        if (d.rate < 0.0 || d.rate > 1.0)
            throw std::invalid_argument("dropout override rate must lie in [0,1]");
        return {d.site, d.effective_rate()};
    }
    if (opt.mode == RunMode::Train && cfg.dropout_site != DropoutSite::None)
        return {cfg.dropout_site, cfg.dropout_rate};
    return {};
}

}  // namespace

ForwardOutput forward(const ModelParams& params, std::span<const int> tokens,
                      const ForwardOptions& opt) {
    const ModelConfig& cfg = params.config();
    int n = static_cast<int>(tokens.size());
    if (n < 1) throw std::invalid_argument("forward: empty token sequence");
    if (n > cfg.max_seq_len) throw std::invalid_argument("forward: sequence exceeds max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("forward: token out of vocabulary");
    for (int tap : opt.taps)
        if (tap < 0 || tap >= n) throw std::out_of_range("forward: tap position out of range");
    for (auto [layer, pos] : opt.residual_taps)
        if (layer < 0 || layer >= cfg.n_layers || pos < 0 || pos >= n)
            throw std::out_of_range("forward: residual tap out of range");

    EffectiveDropout drop = resolve_dropout(cfg, opt);
    if ((drop.attn() || drop.mlp()) && opt.rng == nullptr)
        throw std::invalid_argument("forward: active dropout requires an rng");

    Tape* tape = opt.tape;
    auto P = [&](const std::string& name) -> const Tensor& { return params.at(name); };

    std::vector<int> ids(tokens.begin(), tokens.end());
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;

    Tensor x = add(tape, embedding(tape, P("embed.tokens"), ids),
                   embedding(tape, P("embed.pos"), positions));

    ForwardOutput out;
    out.mode = opt.mode;

    int dh = cfg.head_dim();
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
        std::string lp = "layers." + std::to_string(layer) + ".";
        Tensor h = layer_norm(tape, x, P(lp + "ln1.gain"), P(lp + "ln1.bias"));
        Tensor q = add_rowwise(tape, matmul(tape, h, P(lp + "attn.wq")), P(lp + "attn.bq"));
        Tensor k = add_rowwise(tape, matmul(tape, h, P(lp + "attn.wk")), P(lp + "attn.bk"));
        Tensor v = add_rowwise(tape, matmul(tape, h, P(lp + "attn.wv")), P(lp + "attn.bv"));

        std::vector<Tensor> heads;
        heads.reserve(cfg.n_heads);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            int c0 = hd * dh, c1 = (hd + 1) * dh;
            Tensor qi = slice_cols(tape, q, c0, c1);
            Tensor ki = slice_cols(tape, k, c0, c1);
            Tensor vi = slice_cols(tape, v, c0, c1);
            Tensor scores = scale(tape, matmul_nt(tape, qi, ki), att_scale);
            Tensor probs = softmax_rows(tape, causal_mask(tape, scores));
            if (drop.attn()) probs = dropout(tape, probs, drop.rate, *opt.rng);
            heads.push_back(matmul(tape, probs, vi));
        }
        Tensor ctx = concat_cols(tape, heads);
        if (drop.attn()) ctx = dropout(tape, ctx, drop.rate, *opt.rng);
        Tensor attn_out = add_rowwise(tape, matmul(tape, ctx, P(lp + "attn.wo")), P(lp + "attn.bo"));
        x = add(tape, x, attn_out);

        Tensor h2 = layer_norm(tape, x, P(lp + "ln2.gain"), P(lp + "ln2.bias"));
        Tensor act = relu(tape, add_rowwise(tape, matmul(tape, h2, P(lp + "mlp.w1")), P(lp + "mlp.b1")));
        if (drop.mlp()) act = dropout(tape, act, drop.rate, *opt.rng);
        Tensor mlp_out = add_rowwise(tape, matmul(tape, act, P(lp + "mlp.w2")), P(lp + "mlp.b2"));
        x = add(tape, x, mlp_out);

        for (auto [tl, pos] : opt.residual_taps)
            if (tl == layer) out.residual_taps[{tl, pos}] = slice_rows(tape, x, pos, pos + 1);
    }

    x = layer_norm(tape, x, P("final_ln.gain"), P("final_ln.bias"));
    for (int tap : opt.taps) out.tapped_hidden[tap] = slice_rows(tape, x, tap, tap + 1);
    out.logits = matmul(tape, x, P("head.w"));
    return out;
}

// --- training ---------------------------------------------------------------

TrainResult train_lm(ModelParams& params, const std::vector<TrainingSequence>& corpus,
                     const TrainHyper& hyper, AdamState* state) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    if (hyper.batch < 1) throw std::invalid_argument("train_lm: batch must be positive");
    TrainResult result;
    if (hyper.steps <= 0) return result;

    std::vector<Tensor> tensors = params.tensors();
    AdamState local;
    AdamState& opt_state = state ? *state : local;
    if (opt_state.m.empty()) opt_state = AdamState::init_for(tensors);

    Rng order_rng(mix_seed(hyper.seed, "train_order"));
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    size_t cursor = 0;

    for (int step = 0; step < hyper.steps; ++step) {
        Tape tape;
        params.zero_grads();
        Tensor total;
        for (int b = 0; b < hyper.batch; ++b) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const TrainingSequence& seq = corpus[order[cursor++]];
            // Next-token prediction: logits at i predict token i+1.
            std::span<const int> context(seq.tokens.data(), seq.tokens.size() - 1);
            ForwardOptions fo;
            fo.mode = RunMode::Train;
            fo.tape = &tape;
            ForwardOutput fwd = forward(params, context, fo);
            std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());
            std::vector<uint8_t> mask(seq.loss_mask.begin() + 1, seq.loss_mask.end());
            Tensor loss = masked_cross_entropy(&tape, fwd.logits, targets, mask);
            total = total.defined() ? add(&tape, total, loss) : loss;
        }
        Tensor batch_loss = scale(&tape, total, 1.0 / hyper.batch);
        double loss_value = batch_loss.item();
        if (!std::isfinite(loss_value))
            throw std::runtime_error("train_lm: non-finite loss at step " + std::to_string(step));
        tape.backward(batch_loss);
        adam_step(tensors, opt_state, hyper.lr);
        result.loss_trace.push_back(loss_value);
    }
    return result;
}

// --- question answering ------------------------------------------------------

McqAnswer answer_mcq(const ModelParams& params, const MCQExample& ex, const Vocab& vocab,
                     const std::optional<DropoutSpec>& dropout_override, Rng* rng) {
    if (ex.question_tokens.size() < 5 || ex.question_tokens.back() != Vocab::kEquals ||
        ex.options.size() != 4)
        throw std::invalid_argument("answer_mcq: example does not follow the canonical template");

    int qlen = ex.question_len();
    ForwardOptions fo;
    fo.mode = RunMode::Eval;
    fo.dropout_override = dropout_override;
    fo.rng = rng;
    fo.taps = {qlen - 1};
    ForwardOutput first = forward(params, ex.question_tokens, fo);

    McqAnswer ans;
    ans.hidden_pre = first.tapped_hidden.at(qlen - 1);
    const Tensor& logits = first.logits;
    int vcols = logits.cols();
    double best = -1e300;
    for (int idx = 0; idx < 4; ++idx) {
        double score = logits.data()[static_cast<size_t>(qlen - 1) * vcols + vocab.letter(idx)];
        if (score > best) {
            best = score;
            ans.chosen = idx;
        }
    }

    std::vector<int> extended = ex.question_tokens;
    extended.push_back(vocab.letter(ans.chosen));
    ForwardOptions fo2;
    fo2.mode = RunMode::Eval;
    fo2.dropout_override = dropout_override;
    fo2.rng = rng;
    fo2.taps = {qlen};
    ForwardOutput second = forward(params, extended, fo2);
    ans.hidden_post = second.tapped_hidden.at(qlen);
    return ans;
}

double mcq_accuracy(const ModelParams& params, const std::vector<MCQExample>& examples,
                    const Vocab& vocab, const std::optional<DropoutSpec>& dropout_override,
                    uint64_t seed) {
    if (examples.empty()) throw std::invalid_argument("mcq_accuracy: empty example set");
    double correct = 0.0;
    for (const MCQExample& ex : examples) {
        Rng rng(mix_seed(seed, "answer:" + ex.id));
        McqAnswer ans = answer_mcq(params, ex, vocab, dropout_override, &rng);
        correct += exact_match(ans.chosen, ex.gold_index);
    }
    return correct / static_cast<double>(examples.size());
}

double answer_span_loss(const ModelParams& params, const std::vector<MCQExample>& examples,
                        const Vocab& vocab, std::optional<int> last_k) {
    if (examples.empty()) throw std::invalid_argument("answer_span_loss: empty example set");
    double total = 0.0;
    for (const MCQExample& ex : examples) {
        TrainingSequence seq = to_training_sequence(ex, vocab);
        if (last_k) {
            int keep = std::max(0, std::min<int>(*last_k, static_cast<int>(seq.tokens.size())));
            std::vector<uint8_t> trimmed(seq.loss_mask.size(), 0);
            int kept = 0;
            for (int i = static_cast<int>(seq.loss_mask.size()) - 1; i >= 0 && kept < keep; --i)
                if (seq.loss_mask[i]) {
                    trimmed[i] = 1;
                    ++kept;
                }
            seq.loss_mask = std::move(trimmed);
        }
        std::span<const int> context(seq.tokens.data(), seq.tokens.size() - 1);
        ForwardOptions fo;
        ForwardOutput fwd = forward(params, context, fo);
        std::vector<int> targets(seq.tokens.begin() + 1, seq.tokens.end());
        std::vector<uint8_t> mask(seq.loss_mask.begin() + 1, seq.loss_mask.end());
        total += masked_cross_entropy(nullptr, fwd.logits, targets, mask).item();
    }
    return total / static_cast<double>(examples.size());
}

}  // namespace aulab
