#include "rafe/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace rafe {

void TrainConfig::validate() const {
    if (sft_epochs < 1 || offline_epochs < 1 || ppo_steps < 1 || ppo_epochs < 1)
        raise(ErrorCode::invalid_argument, "train config: epoch/step counts must be positive");
    if (sft_lr <= 0 || offline_lr <= 0 || ppo_lr <= 0)
        raise(ErrorCode::invalid_argument, "train config: learning rates must be positive");
    if (sft_batch < 1 || offline_batch < 1 || ppo_batch < 1)
        raise(ErrorCode::invalid_argument, "train config: batch sizes must be positive");
    if (beta <= 0) raise(ErrorCode::invalid_argument, "train config: beta must be positive");
    if (clip_eps <= 0.0 || clip_eps >= 1.0)
        raise(ErrorCode::invalid_argument, "train config: clip_eps must lie in (0,1)");
    if (beta_kl < 0.0) raise(ErrorCode::invalid_argument, "train config: beta_kl must be >= 0");
    if (gae_lambda < 0.0 || gae_lambda > 1.0)
        raise(ErrorCode::invalid_argument, "train config: gae_lambda must lie in [0,1]");
    if (lambda_good <= 0.0 || lambda_bad <= 0.0)
        raise(ErrorCode::invalid_argument, "train config: lambda weights must be positive");
    if (sample_temperature < 0.0)
        raise(ErrorCode::invalid_argument, "train config: sample_temperature must be >= 0");
    if (max_new_tokens < 1 || score_k < 1)
        raise(ErrorCode::invalid_argument, "train config: max_new_tokens and score_k must be >= 1");
}

std::string step_logs_to_jsonl(const std::vector<StepLog>& logs) {
    std::ostringstream out;
    for (const auto& l : logs) {
        nlohmann::json j{{"step", l.step},           {"phase", l.phase},
                         {"loss", l.loss},           {"policy_loss", l.policy_loss},
                         {"value_loss", l.value_loss}, {"mean_score", l.mean_score},
                         {"mean_kl", l.mean_kl},     {"wall_ms", l.wall_ms}};
        out << j.dump() << "\n";
    }
    return out.str();
}

void AdamOptimizer::step(std::map<std::string, Tensor*>& params,
                         const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, tensor] : params) {
        auto git = grads.find(name);
        const Tensor* g = git == grads.end() ? nullptr : &git->second;
        Tensor& m = m_.try_emplace(name, Tensor(tensor->shape)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor(tensor->shape)).first->second;
        for (std::size_t i = 0; i < tensor->data.size(); ++i) {
            const double gi = (g != nullptr && i < g->data.size()) ? g->data[i] : 0.0;
            m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * gi;
            v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            tensor->data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

std::map<std::string, Tensor> collect_grads(const GraphParams& bound,
                                            const std::map<std::string, Tensor>& shapes) {
    std::map<std::string, Tensor> grads;
    for (const auto& [name, tensor] : shapes) {
        auto it = bound.leaves.find(name);
        if (it != bound.leaves.end() && it->second->grad.data.size() == tensor.data.size()) {
            if (!it->second->grad.all_finite())
                raise(ErrorCode::internal, "non-finite gradient for parameter " + name);
            grads[name] = it->second->grad;
        } else {
            grads[name] = Tensor(tensor.shape);
        }
    }
    return grads;
}

Value sft_loss_graph(const PolicyModel& model, const GraphParams& p,
                     const std::vector<SftExample>& batch) {
    if (batch.empty()) raise(ErrorCode::invalid_argument, "sft_loss: empty batch");
    std::vector<Value> per_example;
    for (const auto& ex : batch) {
        Value per_token;
        Value total = model.log_prob_graph(p, ex.query, ex.rewrite, &per_token);
        const double n_tokens = static_cast<double>(per_token->value.numel());
        per_example.push_back(scale(total, -1.0 / n_tokens));
    }
    return mean(stack_scalars(per_example));
}

double sft_loss(const PolicyModel& model, const std::vector<SftExample>& batch) {
    GraphParams p = model.bind(false);
    return sft_loss_graph(model, p, batch)->value.data[0];
}

Value preference_nll(const Value& delta_good, const Value& delta_bad, double beta) {
    return neg(log_sigmoid(scale(sub(delta_good, delta_bad), beta)));
}

Value dpo_loss_graph(const PolicyModel& policy, const GraphParams& p, const PolicyModel& ref,
                     const std::vector<PreferencePair>& pairs, double beta) {
    if (pairs.empty()) raise(ErrorCode::invalid_argument, "dpo_loss: no preference pairs");
    std::vector<Value> per_pair;
    for (const auto& pair : pairs) {
        Value lp_good = policy.log_prob_graph(p, pair.original_query, pair.good_rewrite);
        Value lp_bad = policy.log_prob_graph(p, pair.original_query, pair.bad_rewrite);
        // Reference log-probs carry no gradient.
        const double ref_good = ref.log_prob(pair.original_query, pair.good_rewrite).total;
        const double ref_bad = ref.log_prob(pair.original_query, pair.bad_rewrite).total;
        Value delta_good = add_scalar(lp_good, -ref_good);
        Value delta_bad = add_scalar(lp_bad, -ref_bad);
        per_pair.push_back(preference_nll(delta_good, delta_bad, beta));
    }
    return mean(stack_scalars(per_pair));
}

double dpo_loss(const PolicyModel& policy, const PolicyModel& ref,
                const std::vector<PreferencePair>& pairs, double beta) {
    GraphParams p = policy.bind(false);
    return dpo_loss_graph(policy, p, ref, pairs, beta)->value.data[0];
}

std::pair<double, double> compute_lambda_weights(std::size_t n_good, std::size_t n_bad) {
    if (n_good == 0 || n_bad == 0)
        raise(ErrorCode::invalid_argument,
              "compute_lambda_weights: one-sided data (n_good=" + std::to_string(n_good) +
                  ", n_bad=" + std::to_string(n_bad) + ")");
    double lambda_good = 1.0, lambda_bad = 1.0;
    if (n_good > n_bad) {
        lambda_bad = static_cast<double>(n_good) / static_cast<double>(n_bad);
    } else if (n_bad > n_good) {
        lambda_good = static_cast<double>(n_bad) / static_cast<double>(n_good);
    }
    // Round-off can leave the evaluated ratio one ulp under 1; nudge the
    // minority weight until the constraint holds as written.
    auto ratio = [&] {
        return (lambda_good * static_cast<double>(n_good)) /
               (lambda_bad * static_cast<double>(n_bad));
    };
    for (int i = 0; i < 4 && ratio() < 1.0; ++i) {
        if (n_good < n_bad)
            lambda_good = std::nextafter(lambda_good, 2.0 * lambda_good);
        else
            lambda_bad = std::nextafter(lambda_bad, 0.0);
    }
    return {lambda_good, lambda_bad};
}

double kto_kl_estimate(const PolicyModel& policy, const PolicyModel& ref,
                       const std::vector<RewriteRecord>& batch) {
    if (batch.size() < 2) {
        log_warn("kto_kl_estimate: batch of " + std::to_string(batch.size()) +
                 ", returning 0");
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& q = batch[i].original_query;
        const auto& rw = batch[(i + 1) % batch.size()].rewrite;
        sum += policy.log_prob(q, rw).total - ref.log_prob(q, rw).total;
    }
    return std::max(0.0, sum / static_cast<double>(batch.size()));
}

Value kto_loss_graph(const PolicyModel& policy, const GraphParams& p, const PolicyModel& ref,
                     const std::vector<RewriteRecord>& examples, double beta, double lambda_good,
                     double lambda_bad, double kl_reference) {
    if (examples.empty()) raise(ErrorCode::invalid_argument, "kto_loss: empty batch");
    if (lambda_good <= 0.0 || lambda_bad <= 0.0)
        raise(ErrorCode::invalid_argument, "kto_loss: lambda weights must be positive");
    std::vector<Value> terms;
    for (const auto& ex : examples) {
        if (ex.label == RewriteLabel::unset)
            raise(ErrorCode::invalid_argument, "kto_loss: unlabeled example for query " + ex.query_id);
        Value lp = policy.log_prob_graph(p, ex.original_query, ex.rewrite);
        const double lp_ref = ref.log_prob(ex.original_query, ex.rewrite).total;
        Value g = add_scalar(scale(add_scalar(lp, -lp_ref), beta), -beta * kl_reference);
        Value h = ex.label == RewriteLabel::good ? sigmoid(g) : sigmoid(neg(g));
        const double w = ex.label == RewriteLabel::good ? lambda_good : lambda_bad;
        terms.push_back(scale(add_scalar(neg(h), 1.0), w));
    }
    return mean(stack_scalars(terms));
}

double kto_loss(const PolicyModel& policy, const PolicyModel& ref,
                const std::vector<RewriteRecord>& examples, double beta, double lambda_good,
                double lambda_bad) {
    const double kl = kto_kl_estimate(policy, ref, examples);
    GraphParams p = policy.bind(false);
    return kto_loss_graph(policy, p, ref, examples, beta, lambda_good, lambda_bad, kl)
        ->value.data[0];
}

std::vector<double> ppo_rewards(const Trajectory& trajectory, double ranking_score,
                                double beta_kl) {
    const std::size_t n = trajectory.tokens.size();
    if (n == 0) raise(ErrorCode::invalid_argument, "ppo_rewards: empty trajectory");
    if (trajectory.behavior_log_probs.size() != n || trajectory.ref_log_probs.size() != n)
        raise(ErrorCode::invalid_argument, "ppo_rewards: log-prob lists misaligned");
    std::vector<double> rewards(n);
    for (std::size_t t = 0; t < n; ++t)
        rewards[t] = -beta_kl * (trajectory.behavior_log_probs[t] - trajectory.ref_log_probs[t]);
    rewards[n - 1] += ranking_score;
    return rewards;
}

GaeResult gae_advantages(const std::vector<double>& rewards, const std::vector<double>& values,
                         double gae_lambda) {
    const std::size_t n = rewards.size();
    if (n == 0) raise(ErrorCode::invalid_argument, "gae_advantages: empty inputs");
    if (values.size() != n)
        raise(ErrorCode::invalid_argument, "gae_advantages: rewards/values length mismatch");
    GaeResult out;
    out.advantages.assign(n, 0.0);
    out.value_targets.assign(n, 0.0);
    double running = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        const double next_value = (i + 1 < n) ? values[i + 1] : 0.0;  // V(terminal) = 0
        const double delta = rewards[i] + next_value - values[i];
        running = delta + gae_lambda * running;
        out.advantages[i] = running;
        out.value_targets[i] = running + values[i];
    }
    return out;
}

Value ppo_policy_loss_graph(const std::vector<Value>& current_log_probs_per_traj,
                            const std::vector<Trajectory>& trajectories, double clip_eps) {
    if (trajectories.empty()) raise(ErrorCode::invalid_argument, "ppo_losses: no trajectories");
    if (current_log_probs_per_traj.size() != trajectories.size())
        raise(ErrorCode::internal, "ppo_policy_loss_graph: per-trajectory list mismatch");
    std::vector<Value> per_traj;
    for (std::size_t ti = 0; ti < trajectories.size(); ++ti) {
        const Trajectory& traj = trajectories[ti];
        if (traj.advantages.size() != traj.tokens.size())
            raise(ErrorCode::invalid_argument,
                  "ppo_losses: trajectory " + std::to_string(ti) + " lacks advantages");
        Value ratio = exp_v(sub(current_log_probs_per_traj[ti],
                                make_const_vector(traj.behavior_log_probs)));
        if (!ratio->value.all_finite())
            raise(ErrorCode::invalid_argument,
                  "ppo_losses: non-finite ratio in trajectory " + std::to_string(ti));
        Value adv = make_const_vector(traj.advantages);
        Value unclipped = mul(ratio, adv);
        Value clipped = mul(clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv);
        per_traj.push_back(neg(mean(minimum(unclipped, clipped))));
    }
    return mean(stack_scalars(per_traj));
}

Value ppo_value_loss_graph(const Value& vh_w, const Value& vh_b,
                           const std::vector<Trajectory>& trajectories) {
    std::vector<Value> per_traj;
    for (const auto& traj : trajectories) {
        const std::size_t n = traj.states.size();
        if (n == 0 || traj.value_targets.size() != n)
            raise(ErrorCode::invalid_argument, "ppo_losses: trajectory lacks states/value targets");
        const std::size_t d = traj.states[0].size();
        Tensor states({n, d});
        Tensor targets({n, 1});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) states.at(i, j) = traj.states[i][j];
            targets.at(i, 0) = traj.value_targets[i];
        }
        Value v = add_rowvec(matmul(make_const(std::move(states)), vh_w), vh_b);
        Value diff = sub(v, make_const(std::move(targets)));
        per_traj.push_back(mean(mul(diff, diff)));
    }
    return mean(stack_scalars(per_traj));
}

namespace {

// Per-token log-probs of the generated tokens under the bound parameters.
Value trajectory_log_probs_graph(const PolicyModel& model, const GraphParams& p,
                                 const Trajectory& traj) {
    std::vector<int> seq = model.format_prompt(traj.query);
    const std::size_t prompt_len = seq.size();
    seq.insert(seq.end(), traj.tokens.begin(), traj.tokens.end());
    std::vector<int> inputs(seq.begin(), seq.end() - 1);
    Value hidden = model.hidden_graph(p, inputs);
    Value logp = log_softmax_rows(model.logits_graph(p, hidden));
    std::vector<std::pair<int, int>> coords;
    for (std::size_t t = 0; t < traj.tokens.size(); ++t)
        coords.emplace_back(static_cast<int>(prompt_len - 1 + t), traj.tokens[t]);
    return pick(logp, coords);
}

}  // namespace

PpoLossValues ppo_losses(const PolicyModel& policy, const PolicyModel& behavior,
                         const ValueHead& value_head, const std::vector<Trajectory>& trajectories,
                         double clip_eps) {
    GraphParams p = policy.bind(false);
    std::vector<Value> cur;
    std::vector<Trajectory> trajs = trajectories;
    for (auto& traj : trajs) {
        if (traj.behavior_log_probs.size() != traj.tokens.size()) {
            // Recompute under the snapshot when the caller did not store them.
            GraphParams bp = behavior.bind(false);
            Value lp = trajectory_log_probs_graph(behavior, bp, traj);
            traj.behavior_log_probs = lp->value.data;
        }
        cur.push_back(trajectory_log_probs_graph(policy, p, traj));
    }
    PpoLossValues out;
    out.policy_loss = ppo_policy_loss_graph(cur, trajs, clip_eps)->value.data[0];
    out.value_loss =
        ppo_value_loss_graph(make_const(value_head.w), make_const(value_head.b), trajs)
            ->value.data[0];
    out.total = out.policy_loss + out.value_loss;
    return out;
}

namespace {

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

std::map<std::string, Tensor*> param_view(PolicyModel& model) {
    std::map<std::string, Tensor*> view;
    for (auto& [name, t] : model.mutable_params()) view[name] = &t;
    return view;
}

}  // namespace

TrainResult run_sft(const TrainConfig& config, const std::vector<SftExample>& dataset,
                    const PolicyModel& start) {
    config.validate();
    if (dataset.empty()) raise(ErrorCode::invalid_argument, "run_sft: empty dataset");
    for (const auto& ex : dataset)
        if (tokenize_text(ex.rewrite).empty())
            raise(ErrorCode::invalid_argument, "run_sft: empty rewrite for query: " + ex.query);

    TrainResult result;
    result.model = start;
    AdamOptimizer opt(config.sft_lr);
    SplitMix64 rng(config.seed ^ 0x5f74ull);

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    int step = 0;
    for (int epoch = 0; epoch < config.sft_epochs; ++epoch) {
        shuffle_inplace(order, rng);
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(config.sft_batch)) {
            const double t0 = now_ms();
            std::vector<SftExample> batch;
            for (std::size_t i = pos;
                 i < std::min(order.size(), pos + static_cast<std::size_t>(config.sft_batch)); ++i)
                batch.push_back(dataset[order[i]]);

            GraphParams p = result.model.bind(true);
            Value loss = sft_loss_graph(result.model, p, batch);
            backward(loss);
            auto grads = collect_grads(p, result.model.params());
            auto view = param_view(result.model);
            opt.step(view, grads);

            StepLog log;
            log.step = ++step;
            log.phase = "sft";
            log.loss = loss->value.data[0];
            log.wall_ms = now_ms() - t0;
            result.logs.push_back(log);
        }
    }
    return result;
}

TrainResult run_offline(const TrainConfig& config, const FeedbackDataset& dataset,
                        const PolicyModel& sft_checkpoint, OfflineMethod method) {
    config.validate();
    std::ostringstream stats;
    stats << "pairs=" << dataset.pairs.size() << " n_good=" << dataset.n_good
          << " n_bad=" << dataset.n_bad << " mu=" << dataset.mu;
    if (method == OfflineMethod::dpo && dataset.pairs.empty())
        raise(ErrorCode::invalid_argument, "run_offline(dpo): zero preference pairs (" + stats.str() + ")");
    if (method == OfflineMethod::kto && (dataset.n_good == 0 || dataset.n_bad == 0))
        raise(ErrorCode::invalid_argument, "run_offline(kto): one-sided labels (" + stats.str() + ")");

    TrainResult result;
    result.model = sft_checkpoint;     // policy starts from the SFT weights
    const PolicyModel& ref = sft_checkpoint;  // frozen reference
    AdamOptimizer opt(config.offline_lr);
    SplitMix64 rng(config.seed ^ 0x0ff1ull);

    double lambda_good = config.lambda_good, lambda_bad = config.lambda_bad;
    if (method == OfflineMethod::kto)
        std::tie(lambda_good, lambda_bad) = compute_lambda_weights(dataset.n_good, dataset.n_bad);

    int step = 0;
    for (int epoch = 0; epoch < config.offline_epochs; ++epoch) {
        if (method == OfflineMethod::dpo) {
            std::vector<std::size_t> order(dataset.pairs.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_inplace(order, rng);
            for (std::size_t pos = 0; pos < order.size();
                 pos += static_cast<std::size_t>(config.offline_batch)) {
                const double t0 = now_ms();
                std::vector<PreferencePair> batch;
                for (std::size_t i = pos;
                     i < std::min(order.size(), pos + static_cast<std::size_t>(config.offline_batch));
                     ++i)
                    batch.push_back(dataset.pairs[order[i]]);
                GraphParams p = result.model.bind(true);
                Value loss = dpo_loss_graph(result.model, p, ref, batch, config.beta);
                backward(loss);
                auto grads = collect_grads(p, result.model.params());
                auto view = param_view(result.model);
                opt.step(view, grads);
                StepLog log;
                log.step = ++step;
                log.phase = "dpo";
                log.loss = loss->value.data[0];
                log.wall_ms = now_ms() - t0;
                result.logs.push_back(log);
            }
        } else {
            std::vector<std::size_t> order(dataset.kto_examples.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_inplace(order, rng);
            for (std::size_t pos = 0; pos < order.size();
                 pos += static_cast<std::size_t>(config.offline_batch)) {
                const double t0 = now_ms();
                std::vector<RewriteRecord> batch;
                for (std::size_t i = pos;
                     i < std::min(order.size(), pos + static_cast<std::size_t>(config.offline_batch));
                     ++i)
                    batch.push_back(dataset.kto_examples[order[i]]);
                const double kl = kto_kl_estimate(result.model, ref, batch);
                GraphParams p = result.model.bind(true);
                Value loss = kto_loss_graph(result.model, p, ref, batch, config.beta, lambda_good,
                                            lambda_bad, kl);
                backward(loss);
                auto grads = collect_grads(p, result.model.params());
                auto view = param_view(result.model);
                opt.step(view, grads);
                StepLog log;
                log.step = ++step;
                log.phase = "kto";
                log.loss = loss->value.data[0];
                log.mean_kl = kl;
                log.wall_ms = now_ms() - t0;
                result.logs.push_back(log);
            }
        }
    }
    return result;
}

TrainResult run_ppo(const TrainConfig& config, const std::vector<std::string>& queries,
                    const PolicyModel& sft_checkpoint, const SearchIndex& index,
                    const PairScorer& scorer, const PpoOptions& options) {
    config.validate();
    if (queries.empty()) raise(ErrorCode::invalid_argument, "run_ppo: no queries");

    TrainResult result;
    result.model = sft_checkpoint;
    const PolicyModel& ref = sft_checkpoint;  // KL reference stays frozen at the SFT weights
    SplitMix64 rng(config.seed ^ 0x99011ull);
    result.value_head = ValueHead::init(result.model.config().embed_dim, rng, 0.01);
    AdamOptimizer opt(config.ppo_lr);
    const double clip_eps = options.disable_clip ? 0.999 : config.clip_eps;

    std::vector<std::size_t> order(queries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_inplace(order, rng);
    std::size_t cursor = 0;

    for (int step = 1; step <= config.ppo_steps; ++step) {
        const double t0 = now_ms();

        // Rollout phase: the current policy is this batch's behavior snapshot.
        std::vector<Trajectory> trajs;
        std::size_t empty_count = 0;
        double score_sum = 0.0, kl_sum = 0.0;
        std::size_t kl_tokens = 0;
        for (int b = 0; b < config.ppo_batch; ++b) {
            if (cursor >= order.size()) {
                shuffle_inplace(order, rng);
                cursor = 0;
            }
            const std::string& q = queries[order[cursor++]];
            Rollout roll = result.model.rollout(q, config.sample_temperature,
                                                config.max_new_tokens, rng);
            if (roll.tokens.empty()) continue;

            Trajectory traj;
            traj.query = q;
            traj.tokens = roll.tokens;
            traj.behavior_log_probs = roll.log_probs;
            traj.states = roll.states;
            if (roll.text.empty()) {
                traj.ranking_score = 0.0;
                traj.empty_retrieval = true;
            } else {
                RewriteScore s = score_rewrite(q, roll.text, index, scorer, config.score_k);
                traj.ranking_score = s.value;
                traj.empty_retrieval = s.empty_retrieval;
            }
            if (traj.empty_retrieval) ++empty_count;

            // Reference log-probs for the KL penalty.
            GraphParams rp = ref.bind(false);
            traj.ref_log_probs = trajectory_log_probs_graph(ref, rp, traj)->value.data;

            traj.values.reserve(traj.states.size());
            for (const auto& h : traj.states) traj.values.push_back(result.value_head.value(h));

            traj.rewards = ppo_rewards(traj, traj.ranking_score, config.beta_kl);
            GaeResult gae = gae_advantages(traj.rewards, traj.values, config.gae_lambda);
            traj.advantages = std::move(gae.advantages);
            traj.value_targets = std::move(gae.value_targets);

            score_sum += traj.ranking_score;
            for (std::size_t t = 0; t < traj.tokens.size(); ++t)
                kl_sum += traj.behavior_log_probs[t] - traj.ref_log_probs[t];
            kl_tokens += traj.tokens.size();
            trajs.push_back(std::move(traj));
        }
        if (trajs.empty() || empty_count == trajs.size())
            raise(ErrorCode::invalid_state,
                  "run_ppo: step " + std::to_string(step) +
                      ": every rollout in the batch retrieved nothing");

        StepLog log;
        log.step = step;
        log.phase = "ppo";
        log.mean_score = score_sum / static_cast<double>(trajs.size());
        log.mean_kl = kl_tokens ? kl_sum / static_cast<double>(kl_tokens) : 0.0;

        // Optimization phase: several clipped-surrogate passes over the batch.
        for (int inner = 0; inner < config.ppo_epochs; ++inner) {
            GraphParams p = result.model.bind(true);
            std::vector<Value> cur;
            cur.reserve(trajs.size());
            for (const auto& traj : trajs)
                cur.push_back(trajectory_log_probs_graph(result.model, p, traj));
            Value policy_loss = ppo_policy_loss_graph(cur, trajs, clip_eps);
            Value vw = make_leaf(result.value_head.w);
            Value vb = make_leaf(result.value_head.b);
            Value value_loss = ppo_value_loss_graph(vw, vb, trajs);
            Value total = add(policy_loss, value_loss);
            backward(total);

            auto grads = collect_grads(p, result.model.params());
            grads["value_head.w"] = vw->grad.data.empty() ? Tensor(result.value_head.w.shape) : vw->grad;
            grads["value_head.b"] = vb->grad.data.empty() ? Tensor(result.value_head.b.shape) : vb->grad;
            auto view = param_view(result.model);
            view["value_head.w"] = &result.value_head.w;
            view["value_head.b"] = &result.value_head.b;
            opt.step(view, grads);

            log.policy_loss = policy_loss->value.data[0];
            log.value_loss = value_loss->value.data[0];
            log.loss = total->value.data[0];
        }
        log.wall_ms = now_ms() - t0;
        result.logs.push_back(log);
    }
    return result;
}

}  // namespace rafe
