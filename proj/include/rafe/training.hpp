#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rafe/corpus.hpp"
#include "rafe/policy.hpp"
#include "rafe/reranker.hpp"

namespace rafe {

struct TrainConfig {
    // SFT
    int sft_epochs = 2;
    double sft_lr = 5e-5;
    int sft_batch = 1;
    // Offline feedback (DPO / KTO)
    int offline_epochs = 1;
    double offline_lr = 5e-6;
    int offline_batch = 8;
    double beta = 0.1;
    // Online feedback (PPO)
    int ppo_steps = 1000;
    int ppo_batch = 32;
    int ppo_epochs = 4;  // inner optimization passes per rollout batch
    double ppo_lr = 5e-5;
    double clip_eps = 0.2;
    double beta_kl = 0.2;
    double gae_lambda = 0.95;
    double lambda_good = 1.0;
    double lambda_bad = 1.0;
    // Rollout sampling
    double sample_temperature = 0.8;
    int max_new_tokens = 12;
    int score_k = 5;  // retrieval depth used by score_rewrite during training
    std::uint64_t seed = 42;

    void validate() const;
};

struct Trajectory {
    std::string query;
    std::vector<int> tokens;                   // generated tokens (terminal EOS included)
    std::vector<double> behavior_log_probs;
    std::vector<double> ref_log_probs;
    std::vector<double> values;
    std::vector<std::vector<double>> states;   // hidden state per decision point
    double ranking_score = 0.0;
    bool empty_retrieval = false;
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<double> value_targets;
};

struct StepLog {
    int step = 0;
    std::string phase;
    double loss = 0.0;
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double mean_score = 0.0;
    double mean_kl = 0.0;
    double wall_ms = 0.0;
};

std::string step_logs_to_jsonl(const std::vector<StepLog>& logs);

/// Adam over a named tensor map; decay constants 0.9/0.999, no weight decay.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr) : lr_(lr) {}

    void step(std::map<std::string, Tensor*>& params,
              const std::map<std::string, Tensor>& grads);

private:
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    int t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

/// Reads gradients back out of a bound graph after backward(); parameters the
/// loss never touched come back as zeros.
std::map<std::string, Tensor> collect_grads(const GraphParams& bound,
                                            const std::map<std::string, Tensor>& shapes);

// ---- Losses (graph builders; numeric wrappers evaluate with const leaves) ----

struct SftExample {
    std::string query;
    std::string rewrite;
};

/// Mean over the batch of per-token-normalized negative log-likelihood.
Value sft_loss_graph(const PolicyModel& model, const GraphParams& p,
                     const std::vector<SftExample>& batch);
double sft_loss(const PolicyModel& model, const std::vector<SftExample>& batch);

/// -log sigmoid(beta * (delta_good - delta_bad)); the per-pair DPO term.
Value preference_nll(const Value& delta_good, const Value& delta_bad, double beta);

Value dpo_loss_graph(const PolicyModel& policy, const GraphParams& p, const PolicyModel& ref,
                     const std::vector<PreferencePair>& pairs, double beta);
double dpo_loss(const PolicyModel& policy, const PolicyModel& ref,
                const std::vector<PreferencePair>& pairs, double beta);

/// Majority class keeps weight 1; the minority class weight restores balance,
/// keeping lambda_good*n_good/(lambda_bad*n_bad) inside [1, 4/3].
std::pair<double, double> compute_lambda_weights(std::size_t n_good, std::size_t n_bad);

/// Detached shared reference point: mean mismatched log-ratio over the batch
/// (cyclic shift), clamped at zero.
double kto_kl_estimate(const PolicyModel& policy, const PolicyModel& ref,
                       const std::vector<RewriteRecord>& batch);

Value kto_loss_graph(const PolicyModel& policy, const GraphParams& p, const PolicyModel& ref,
                     const std::vector<RewriteRecord>& examples, double beta, double lambda_good,
                     double lambda_bad, double kl_reference);
/// Computes the shared KL reference internally via kto_kl_estimate.
double kto_loss(const PolicyModel& policy, const PolicyModel& ref,
                const std::vector<RewriteRecord>& examples, double beta, double lambda_good,
                double lambda_bad);

/// Per-token reward: -beta_kl * (behavior - reference log-prob); the ranking
/// score lands on the final token only.
std::vector<double> ppo_rewards(const Trajectory& trajectory, double ranking_score,
                                double beta_kl);

struct GaeResult {
    std::vector<double> advantages;
    std::vector<double> value_targets;
};

/// Exact finite-horizon lambda-weighted sums with V(terminal) = 0 and no
/// separate discount factor.
GaeResult gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                         double gae_lambda);

/// Clipped-surrogate policy loss from per-token current log-probs vs the
/// behavior snapshot's; averaged over tokens, then over trajectories.
Value ppo_policy_loss_graph(const std::vector<Value>& current_log_probs_per_traj,
                            const std::vector<Trajectory>& trajectories, double clip_eps);
Value ppo_value_loss_graph(const Value& vh_w, const Value& vh_b,
                           const std::vector<Trajectory>& trajectories);

struct PpoLossValues {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double total = 0.0;
};

PpoLossValues ppo_losses(const PolicyModel& policy, const PolicyModel& behavior,
                         const ValueHead& value_head, const std::vector<Trajectory>& trajectories,
                         double clip_eps);

// ---- Training loops ----

struct TrainResult {
    PolicyModel model;
    std::vector<StepLog> logs;
    ValueHead value_head;  // meaningful after run_ppo
};

TrainResult run_sft(const TrainConfig& config, const std::vector<SftExample>& dataset,
                    const PolicyModel& start);

enum class OfflineMethod { dpo, kto };

TrainResult run_offline(const TrainConfig& config, const FeedbackDataset& dataset,
                        const PolicyModel& sft_checkpoint, OfflineMethod method);

struct PpoOptions {
    bool disable_clip = false;  // bandit sanity runs widen the clip to a no-op
};

TrainResult run_ppo(const TrainConfig& config, const std::vector<std::string>& queries,
                    const PolicyModel& sft_checkpoint, const SearchIndex& index,
                    const PairScorer& scorer, const PpoOptions& options = {});

}  // namespace rafe
