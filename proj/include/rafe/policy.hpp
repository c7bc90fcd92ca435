#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rafe/autograd.hpp"
#include "rafe/common.hpp"

namespace rafe {

/// Word-level vocabulary with five reserved special ids.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kSep = 2;
    static constexpr int kPad = 3;
    static constexpr int kUnk = 4;
    static constexpr int kNumSpecials = 5;

    Vocabulary() = default;

    /// Most-frequent tokens up to max_size (specials included in the cap);
    /// frequency ties break lexicographically.
    static Vocabulary build(const std::vector<std::string>& corpus_texts, std::size_t max_size);
    static Vocabulary from_tokens(std::vector<std::string> id_to_token);

    int encode_token(const std::string& token) const;
    std::vector<int> encode_text(const std::string& text) const;  // tokenize + map
    const std::string& token(int id) const;
    std::string decode(const std::vector<int>& ids) const;  // skips specials, space-joined
    std::size_t size() const { return id_to_token_.size(); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

struct PolicyConfig {
    int embed_dim = 64;
    int n_layers = 2;
    int n_heads = 2;
    int context_len = 128;
    int vocab_size = 0;  // set from the vocabulary at init
    double init_std = 0.002;
    // Fixed multiplier on the tied-readout logits. Small weights plus a large
    // readout scale keep the softmax trainable at small learning rates.
    double logit_scale = 24.0;

    int head_dim() const { return embed_dim / n_heads; }
    int mlp_dim() const { return 2 * embed_dim; }
};

struct GenerationConfig {
    double temperature = 0.8;
    int max_new_tokens = 24;
    int num_samples = 1;
    std::uint64_t seed = 0;
};

struct LogProbResult {
    double total = 0.0;                   // <= 0
    std::vector<double> per_token;        // rewrite tokens then EOS
};

/// Scalar value estimator applied to final hidden states (PPO critic).
struct ValueHead {
    Tensor w;  // [d, 1]
    Tensor b;  // [1]

    static ValueHead init(int embed_dim, SplitMix64& rng, double stddev);
    double value(const std::vector<double>& hidden) const;
};

/// Named parameter leaves bound into one computation graph.
struct GraphParams {
    std::map<std::string, Value> leaves;

    const Value& at(const std::string& name) const;
};

struct Rollout {
    std::vector<int> tokens;               // generated tokens, terminal EOS included
    std::vector<double> log_probs;         // behavior log-probs per generated token
    std::vector<std::vector<double>> states;  // hidden state at each decision point
    std::string text;                      // decoded rewrite (specials stripped)
    bool truncated = false;                // hit max_new_tokens before EOS
};

/// Decoder-only causal transformer with tied input/output embeddings and
/// learned positional embeddings.
class PolicyModel {
public:
    PolicyModel() = default;

    static PolicyModel init(const PolicyConfig& config, Vocabulary vocab, std::uint64_t seed);

    const PolicyConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    std::map<std::string, Tensor>& mutable_params() { return params_; }
    std::size_t param_count() const;

    std::string render_prompt(const std::string& query) const;
    /// BOS + prompt tokens + SEP.
    std::vector<int> format_prompt(const std::string& query) const;

    LogProbResult log_prob(const std::string& query, const std::string& rewrite) const;

    std::vector<std::string> sample_rewrites(const std::string& query,
                                             const GenerationConfig& gen) const;
    Rollout rollout(const std::string& query, double temperature, int max_new_tokens,
                    SplitMix64& rng) const;

    /// Hidden states for an already-materialized sequence (no gradients).
    std::vector<std::vector<double>> hidden_states(const std::vector<int>& ids) const;

    // Graph construction for trainers.
    GraphParams bind(bool requires_grad) const;
    Value hidden_graph(const GraphParams& p, const std::vector<int>& ids) const;
    Value logits_graph(const GraphParams& p, const Value& hidden) const;
    /// Scalar total log-prob of `rewrite` given `query`; also exposes the
    /// per-token vector when `per_token` is non-null.
    Value log_prob_graph(const GraphParams& p, const std::string& query, const std::string& rewrite,
                         Value* per_token = nullptr) const;

    // Checkpoint I/O ("RAFECKPT" format, float32 tensors).
    void save(const std::string& path, const std::string& stage,
              std::uint64_t seed, const std::map<std::string, std::string>& metadata = {},
              const ValueHead* value_head = nullptr) const;

    std::vector<int> sequence_ids(const std::string& query, const std::string& rewrite) const;

private:
    friend struct CheckpointIo;

    PolicyConfig config_;
    Vocabulary vocab_;
    std::map<std::string, Tensor> params_;  // ordered: checkpoint order is the map order

    std::vector<double> last_row_logits(const std::vector<int>& ids) const;
};

struct LoadedCheckpoint {
    PolicyModel model;
    std::optional<ValueHead> value_head;
    std::map<std::string, std::string> metadata;
    std::uint64_t seed = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace rafe
