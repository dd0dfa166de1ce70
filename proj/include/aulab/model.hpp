#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aulab/optim.hpp"
#include "aulab/taskgen.hpp"
#include "aulab/tensor.hpp"

namespace aulab {

enum class DropoutSite { None, Attention, Mlp };
const char* to_string(DropoutSite s);
DropoutSite dropout_site_from_string(const std::string& s);

// A dropout placement: which tensors get masked, at what rate. With site
// Attention the mask hits each head's attention probabilities and the input
// of the output projection; with Mlp it hits the hidden activation of the
// feed-forward block.
struct DropoutSpec {
    DropoutSite site = DropoutSite::Attention;
    double rate = 0.0;

    double effective_rate() const { return site == DropoutSite::None ? 0.0 : rate; }
};

struct ModelConfig {
    int vocab_size = 124;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 64;
    DropoutSite dropout_site = DropoutSite::None;
    double dropout_rate = 0.0;
    uint64_t seed = 1;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

nlohmann::ordered_json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

// The full parameter set, a fixed table of named tensors whose shapes are
// determined by the config. Iteration order is lexicographic by name
// everywhere (checkpoints, optimizer state, updates).
class ModelParams {
public:
    ModelParams() = default;

    const ModelConfig& config() const { return config_; }
    const std::vector<std::string>& names() const { return names_; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::vector<Tensor> tensors();  // handles in name order

    ModelParams deep_copy() const;
    void zero_grads();

    // Expected shape for a parameter name under a config; throws on unknown
    // names. Used by initialization and checkpoint validation.
    static std::vector<int> expected_shape(const ModelConfig& c, const std::string& name);
    static std::vector<std::string> parameter_names(const ModelConfig& c);

    static ModelParams zeros(const ModelConfig& c);

private:
    ModelConfig config_;
    std::vector<std::string> names_;
    std::map<std::string, Tensor> table_;
};

// Deterministic initialization: weight matrices drawn N(0, 1/sqrt(d_model))
// from a per-tensor substream of seed, biases zero, layer-norm gains one.
ModelParams init_model(const ModelConfig& config, uint64_t seed);

enum class RunMode { Train, Eval };

struct ForwardOptions {
    RunMode mode = RunMode::Eval;
    std::optional<DropoutSpec> dropout_override;
    std::vector<int> taps;                           // final-stream positions
    std::vector<std::pair<int, int>> residual_taps;  // (layer, position), post-block
    Rng* rng = nullptr;                              // required when dropout is active
    Tape* tape = nullptr;                            // record for backward when given
};

struct ForwardOutput {
    Tensor logits;                        // [seq x vocab], next-token logits per position
    std::map<int, Tensor> tapped_hidden;  // final residual stream after the last layer norm
    std::map<std::pair<int, int>, Tensor> residual_taps;
    RunMode mode = RunMode::Eval;
};

// Causal forward pass. Dropout is active in Train mode at the configured
// site, or in any mode when dropout_override is given; Eval mode without an
// override is a pure function of (params, tokens).
ForwardOutput forward(const ModelParams& params, std::span<const int> tokens,
                      const ForwardOptions& opt);

struct TrainHyper {
    double lr = 1e-3;
    int steps = 3000;
    int batch = 16;
    uint64_t seed = 1;
};

struct TrainResult {
    std::vector<double> loss_trace;  // masked cross-entropy per step
};

// Adam on masked next-token cross-entropy over seeded shuffled epochs.
// Passing an AdamState keeps optimizer moments across calls (checkpointable).
TrainResult train_lm(ModelParams& params, const std::vector<TrainingSequence>& corpus,
                     const TrainHyper& hyper, AdamState* state = nullptr);

struct McqAnswer {
    int chosen = -1;       // argmax over the four option-letter logits, greedy
    Tensor hidden_pre;     // final hidden state at the last question token
    Tensor hidden_post;    // final hidden state at the emitted answer letter
};

// Answers one rendered question. With a dropout override the caller's rng
// drives both passes (question pass, then question + chosen letter), so a
// fixed seed reproduces the full stochastic answer.
McqAnswer answer_mcq(const ModelParams& params, const MCQExample& ex, const Vocab& vocab,
                     const std::optional<DropoutSpec>& dropout_override = std::nullopt,
                     Rng* rng = nullptr);

// Mean exact-match accuracy of answer_mcq over a set; per-example rng
// substreams are derived from seed and the example id, so results do not
// depend on evaluation order.
double mcq_accuracy(const ModelParams& params, const std::vector<MCQExample>& examples,
                    const Vocab& vocab,
                    const std::optional<DropoutSpec>& dropout_override = std::nullopt,
                    uint64_t seed = 0);

// Mean masked cross-entropy (nats) of the gold answer spans, eval mode.
double answer_span_loss(const ModelParams& params, const std::vector<MCQExample>& examples,
                        const Vocab& vocab, std::optional<int> last_k = std::nullopt);

}  // namespace aulab
