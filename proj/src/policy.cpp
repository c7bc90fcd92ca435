#include "rafe/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rafe/corpus.hpp"

namespace rafe {

namespace {

const char* kSpecialNames[] = {"<bos>", "<eos>", "<sep>", "<pad>", "<unk>"};
constexpr char kCkptMagic[] = "RAFECKPT";

}  // namespace

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus_texts, std::size_t max_size) {
    if (corpus_texts.empty())
        raise(ErrorCode::invalid_argument, "build_vocabulary: empty corpus");
    if (max_size < 16)
        raise(ErrorCode::invalid_argument, "build_vocabulary: max_size must be >= 16");

    std::unordered_map<std::string, std::uint64_t> freq;
    for (const auto& text : corpus_texts)
        for (auto& tok : tokenize_text(text)) freq[tok]++;

    std::vector<std::pair<std::string, std::uint64_t>> sorted(freq.begin(), freq.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    std::vector<std::string> tokens(kSpecialNames, kSpecialNames + kNumSpecials);
    for (const auto& [tok, _] : sorted) {
        if (tokens.size() >= max_size) break;
        tokens.push_back(tok);
    }
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> id_to_token) {
    Vocabulary v;
    v.id_to_token_ = std::move(id_to_token);
    for (std::size_t i = 0; i < v.id_to_token_.size(); ++i)
        v.token_to_id_.emplace(v.id_to_token_[i], static_cast<int>(i));
    return v;
}

int Vocabulary::encode_token(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode_text(const std::string& text) const {
    std::vector<int> out;
    for (const auto& tok : tokenize_text(text)) out.push_back(encode_token(tok));
    return out;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
        raise(ErrorCode::invalid_argument, "vocabulary id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < kNumSpecials) continue;
        if (!out.empty()) out.push_back(' ');
        out += token(id);
    }
    return out;
}

ValueHead ValueHead::init(int embed_dim, SplitMix64& rng, double stddev) {
    ValueHead vh;
    vh.w = Tensor::randn({static_cast<std::size_t>(embed_dim), 1}, rng, stddev);
    vh.b = Tensor({1});
    return vh;
}

double ValueHead::value(const std::vector<double>& hidden) const {
    double v = b.data[0];
    for (std::size_t i = 0; i < hidden.size(); ++i) v += hidden[i] * w.data[i];
    return v;
}

const Value& GraphParams::at(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end()) raise(ErrorCode::internal, "unbound parameter: " + name);
    return it->second;
}

PolicyModel PolicyModel::init(const PolicyConfig& config, Vocabulary vocab, std::uint64_t seed) {
    if (config.embed_dim <= 0 || config.n_layers <= 0 || config.n_heads <= 0 ||
        config.context_len <= 0)
        raise(ErrorCode::invalid_argument, "policy config: all dimensions must be positive");
    if (config.embed_dim % config.n_heads != 0)
        raise(ErrorCode::invalid_argument, "policy config: embed_dim must divide by n_heads");

    PolicyModel m;
    m.config_ = config;
    m.config_.vocab_size = static_cast<int>(vocab.size());
    m.vocab_ = std::move(vocab);

    SplitMix64 rng(seed ^ 0x52414645ull);
    const auto V = static_cast<std::size_t>(m.config_.vocab_size);
    const auto d = static_cast<std::size_t>(config.embed_dim);
    const auto h = static_cast<std::size_t>(config.mlp_dim());
    const double s = config.init_std;

    m.params_["tok_emb"] = Tensor::randn({V, d}, rng, s);
    m.params_["pos_emb"] = Tensor::randn({static_cast<std::size_t>(config.context_len), d}, rng, s);
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "L" + std::to_string(l) + ".";
        m.params_[p + "ln1.g"] = Tensor({d}, 1.0);
        m.params_[p + "ln1.b"] = Tensor({d});
        // The value/output projections start near the identity: attending to a
        // position then reproduces its token embedding in the residual stream,
        // which the tied readout turns into an immediate copy signal.
        Tensor wqkv = Tensor::randn({d, 3 * d}, rng, s);
        for (std::size_t i = 0; i < d; ++i) wqkv.at(i, 2 * d + i) += 0.5;
        m.params_[p + "attn.wqkv"] = std::move(wqkv);
        m.params_[p + "attn.bqkv"] = Tensor({3 * d});
        Tensor wo = Tensor::randn({d, d}, rng, s);
        for (std::size_t i = 0; i < d; ++i) wo.at(i, i) += 0.5;
        m.params_[p + "attn.wo"] = std::move(wo);
        m.params_[p + "attn.bo"] = Tensor({d});
        m.params_[p + "ln2.g"] = Tensor({d}, 1.0);
        m.params_[p + "ln2.b"] = Tensor({d});
        m.params_[p + "mlp.w1"] = Tensor::randn({d, h}, rng, s);
        m.params_[p + "mlp.b1"] = Tensor({h});
        m.params_[p + "mlp.w2"] = Tensor::randn({h, d}, rng, s);
        m.params_[p + "mlp.b2"] = Tensor({d});
    }
    m.params_["lnf.g"] = Tensor({d}, 1.0);
    m.params_["lnf.b"] = Tensor({d});
    return m;
}

std::size_t PolicyModel::param_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

std::string PolicyModel::render_prompt(const std::string& query) const {
    return "Instruction: output the rewrite of input query\n\nQuery: " + query + "\n\nOutput:";
}

std::vector<int> PolicyModel::format_prompt(const std::string& query) const {
    std::vector<int> ids{Vocabulary::kBos};
    for (int id : vocab_.encode_text(render_prompt(query))) ids.push_back(id);
    ids.push_back(Vocabulary::kSep);
    return ids;
}

std::vector<int> PolicyModel::sequence_ids(const std::string& query, const std::string& rewrite) const {
    std::vector<int> ids = format_prompt(query);
    auto rw = vocab_.encode_text(rewrite);
    if (rw.empty()) raise(ErrorCode::invalid_argument, "log_prob: rewrite tokenizes to empty");
    ids.insert(ids.end(), rw.begin(), rw.end());
    ids.push_back(Vocabulary::kEos);
    if (ids.size() > static_cast<std::size_t>(config_.context_len))
        raise(ErrorCode::invalid_argument,
              "sequence length " + std::to_string(ids.size()) + " exceeds context length " +
                  std::to_string(config_.context_len));
    return ids;
}

GraphParams PolicyModel::bind(bool requires_grad) const {
    GraphParams g;
    for (const auto& [name, tensor] : params_)
        g.leaves[name] = requires_grad ? make_leaf(tensor) : make_const(tensor);
    return g;
}

Value PolicyModel::hidden_graph(const GraphParams& p, const std::vector<int>& ids) const {
    if (ids.empty()) raise(ErrorCode::internal, "hidden_graph: empty sequence");
    if (ids.size() > static_cast<std::size_t>(config_.context_len))
        raise(ErrorCode::invalid_argument,
              "sequence length " + std::to_string(ids.size()) + " exceeds context length " +
                  std::to_string(config_.context_len));

    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);

    Value x = add(rows(p.at("tok_emb"), ids), rows(p.at("pos_emb"), positions));
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));
    const std::size_t d = static_cast<std::size_t>(config_.embed_dim);
    const std::size_t hd = static_cast<std::size_t>(config_.head_dim());

    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string pre = "L" + std::to_string(l) + ".";
        Value ln1 = layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
        Value qkv = add_rowvec(matmul(ln1, p.at(pre + "attn.wqkv")), p.at(pre + "attn.bqkv"));
        std::vector<Value> heads;
        for (int head = 0; head < config_.n_heads; ++head) {
            const std::size_t off = static_cast<std::size_t>(head) * hd;
            Value q = col_slice(qkv, off, off + hd);
            Value k = col_slice(qkv, d + off, d + off + hd);
            Value v = col_slice(qkv, 2 * d + off, 2 * d + off + hd);
            Value att = softmax_rows(causal_mask(scale(matmul_nt(q, k), att_scale)));
            heads.push_back(matmul(att, v));
        }
        Value ctx = config_.n_heads == 1 ? heads[0] : concat_cols(heads);
        x = add(x, add_rowvec(matmul(ctx, p.at(pre + "attn.wo")), p.at(pre + "attn.bo")));

        Value ln2 = layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
        Value m1 = gelu(add_rowvec(matmul(ln2, p.at(pre + "mlp.w1")), p.at(pre + "mlp.b1")));
        x = add(x, add_rowvec(matmul(m1, p.at(pre + "mlp.w2")), p.at(pre + "mlp.b2")));
    }
    return layer_norm(x, p.at("lnf.g"), p.at("lnf.b"));
}

Value PolicyModel::logits_graph(const GraphParams& p, const Value& hidden) const {
    return scale(matmul_nt(hidden, p.at("tok_emb")), config_.logit_scale);  // tied embeddings
}

Value PolicyModel::log_prob_graph(const GraphParams& p, const std::string& query,
                                  const std::string& rewrite, Value* per_token) const {
    const std::vector<int> seq = sequence_ids(query, rewrite);
    const std::size_t prompt_len = format_prompt(query).size();

    std::vector<int> inputs(seq.begin(), seq.end() - 1);
    Value hidden = hidden_graph(p, inputs);
    Value logp = log_softmax_rows(logits_graph(p, hidden));

    std::vector<std::pair<int, int>> coords;
    for (std::size_t pos = prompt_len; pos < seq.size(); ++pos)
        coords.emplace_back(static_cast<int>(pos - 1), seq[pos]);
    Value tokens = pick(logp, coords);
    if (per_token != nullptr) *per_token = tokens;
    return sum(tokens);
}

LogProbResult PolicyModel::log_prob(const std::string& query, const std::string& rewrite) const {
    GraphParams p = bind(false);
    Value per_token;
    Value total = log_prob_graph(p, query, rewrite, &per_token);
    LogProbResult r;
    r.total = total->value.data[0];
    r.per_token = per_token->value.data;
    return r;
}

std::vector<std::vector<double>> PolicyModel::hidden_states(const std::vector<int>& ids) const {
    GraphParams p = bind(false);
    Value hidden = hidden_graph(p, ids);
    std::vector<std::vector<double>> out(ids.size());
    const std::size_t d = static_cast<std::size_t>(config_.embed_dim);
    for (std::size_t i = 0; i < ids.size(); ++i)
        out[i].assign(hidden->value.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                      hidden->value.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    return out;
}

std::vector<double> PolicyModel::last_row_logits(const std::vector<int>& ids) const {
    GraphParams p = bind(false);
    Value hidden = hidden_graph(p, ids);
    Value logits = logits_graph(p, hidden);
    const std::size_t V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t last = ids.size() - 1;
    return std::vector<double>(logits->value.data.begin() + static_cast<std::ptrdiff_t>(last * V),
                               logits->value.data.begin() + static_cast<std::ptrdiff_t>((last + 1) * V));
}

namespace {

// Sampling never emits structural tokens; EOS stays available to terminate.
bool banned_at_sampling(int id) {
    return id == Vocabulary::kBos || id == Vocabulary::kSep || id == Vocabulary::kPad ||
           id == Vocabulary::kUnk;
}

int sample_from_logits(const std::vector<double>& logits, double temperature, SplitMix64& rng) {
    if (temperature < 1e-9) {
        int best = -1;
        double best_v = -1e300;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            if (banned_at_sampling(static_cast<int>(i))) continue;
            if (logits[i] > best_v) {
                best_v = logits[i];
                best = static_cast<int>(i);
            }
        }
        return best;
    }
    double mx = -1e300;
    for (std::size_t i = 0; i < logits.size(); ++i)
        if (!banned_at_sampling(static_cast<int>(i))) mx = std::max(mx, logits[i] / temperature);
    std::vector<double> probs(logits.size(), 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (banned_at_sampling(static_cast<int>(i))) continue;
        probs[i] = std::exp(logits[i] / temperature - mx);
        z += probs[i];
    }
    double u = rng.uniform() * z;
    double acc = 0.0;
    int last_valid = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last_valid = static_cast<int>(i);
        if (u < acc) return last_valid;
    }
    return last_valid;  // round-off fell past the end
}

}  // namespace

Rollout PolicyModel::rollout(const std::string& query, double temperature, int max_new_tokens,
                             SplitMix64& rng) const {
    if (max_new_tokens < 1) raise(ErrorCode::invalid_argument, "rollout: max_new_tokens must be >= 1");
    std::vector<int> seq = format_prompt(query);
    const std::size_t prompt_len = seq.size();
    const std::size_t budget =
        std::min<std::size_t>(prompt_len + static_cast<std::size_t>(max_new_tokens),
                              static_cast<std::size_t>(config_.context_len));

    Rollout r;
    while (seq.size() < budget) {
        auto logits = last_row_logits(seq);
        const int next = sample_from_logits(logits, temperature, rng);
        seq.push_back(next);
        r.tokens.push_back(next);
        if (next == Vocabulary::kEos) break;
    }
    if (r.tokens.empty()) {
        r.truncated = true;
        return r;
    }
    if (r.tokens.back() != Vocabulary::kEos) r.truncated = true;

    // One full pass recovers per-step log-probs and decision-point states;
    // the final token never feeds another prediction.
    std::vector<int> inputs(seq.begin(), seq.end() - 1);
    GraphParams p = bind(false);
    Value hidden = hidden_graph(p, inputs);
    Value logp = log_softmax_rows(logits_graph(p, hidden));
    const std::size_t V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t d = static_cast<std::size_t>(config_.embed_dim);
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
        const std::size_t row = prompt_len - 1 + t;
        r.log_probs.push_back(logp->value.data[row * V + static_cast<std::size_t>(r.tokens[t])]);
        r.states.emplace_back(hidden->value.data.begin() + static_cast<std::ptrdiff_t>(row * d),
                              hidden->value.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
    }
    r.text = vocab_.decode(r.tokens);
    return r;
}

std::vector<std::string> PolicyModel::sample_rewrites(const std::string& query,
                                                      const GenerationConfig& gen) const {
    if (gen.num_samples < 1)
        raise(ErrorCode::invalid_argument, "sample_rewrites: num_samples must be >= 1");
    SplitMix64 rng(gen.seed);
    std::vector<std::string> out;
    int extra_attempts = 0;
    while (static_cast<int>(out.size()) < gen.num_samples) {
        Rollout r = rollout(query, gen.temperature, gen.max_new_tokens, rng);
        const bool duplicate = std::find(out.begin(), out.end(), r.text) != out.end();
        if (!duplicate && !r.text.empty()) {
            out.push_back(r.text);
        } else if (++extra_attempts > 3) {
            break;  // contract permits returning fewer than requested
        }
    }
    return out;
}

void PolicyModel::save(const std::string& path, const std::string& stage, std::uint64_t seed,
                       const std::map<std::string, std::string>& metadata,
                       const ValueHead* value_head) const {
    nlohmann::json header;
    header["config"] = {{"embed_dim", config_.embed_dim},   {"n_layers", config_.n_layers},
                        {"n_heads", config_.n_heads},       {"context_len", config_.context_len},
                        {"vocab_size", config_.vocab_size}, {"init_std", config_.init_std},
                        {"logit_scale", config_.logit_scale}};
    header["vocabulary"] = vocab_.tokens();
    nlohmann::json meta(metadata);
    meta["stage"] = stage;
    header["metadata"] = std::move(meta);
    header["seed"] = seed;

    nlohmann::json tensors = nlohmann::json::array();
    auto declare = [&tensors](const std::string& name, const Tensor& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape}});
    };
    for (const auto& [name, t] : params_) declare(name, t);
    if (value_head != nullptr) {
        declare("value_head.w", value_head->w);
        declare("value_head.b", value_head->b);
    }
    header["tensors"] = std::move(tensors);
    header["has_value_head"] = value_head != nullptr;

    std::string out(kCkptMagic, 8);
    out.push_back(static_cast<char>(1));  // version
    const std::string header_str = header.dump();
    const std::uint32_t hlen = static_cast<std::uint32_t>(header_str.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xFF));
    out += header_str;

    auto write_tensor = [&out](const Tensor& t) {
        for (double v : t.data) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
        }
    };
    for (const auto& [_, t] : params_) write_tensor(t);
    if (value_head != nullptr) {
        write_tensor(value_head->w);
        write_tensor(value_head->b);
    }
    write_text_file(path, out);
}

struct CheckpointIo {
    static LoadedCheckpoint load(const std::string& path);
};

LoadedCheckpoint CheckpointIo::load(const std::string& path) {
    const std::string bytes = read_text_file(path);
    if (bytes.size() < 13 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
        raise(ErrorCode::io_error, "not a RAFECKPT checkpoint: " + path);
    if (bytes[8] != 1) raise(ErrorCode::io_error, "unsupported checkpoint version");
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i)
        hlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[9 + i])) << (8 * i);
    if (13 + static_cast<std::size_t>(hlen) > bytes.size())
        raise(ErrorCode::io_error, "checkpoint truncated (header)");
    nlohmann::json header = nlohmann::json::parse(bytes.substr(13, hlen));

    LoadedCheckpoint loaded;
    PolicyModel& m = loaded.model;
    const auto& cj = header.at("config");
    m.config_.embed_dim = cj.at("embed_dim").get<int>();
    m.config_.n_layers = cj.at("n_layers").get<int>();
    m.config_.n_heads = cj.at("n_heads").get<int>();
    m.config_.context_len = cj.at("context_len").get<int>();
    m.config_.vocab_size = cj.at("vocab_size").get<int>();
    m.config_.init_std = cj.value("init_std", 0.002);
    m.config_.logit_scale = cj.value("logit_scale", 24.0);
    m.vocab_ = Vocabulary::from_tokens(header.at("vocabulary").get<std::vector<std::string>>());
    loaded.seed = header.value("seed", 0ull);
    for (auto& [k, v] : header.at("metadata").items())
        loaded.metadata[k] = v.get<std::string>();

    std::size_t offset = 13 + hlen;
    auto read_tensor = [&bytes, &offset](const std::vector<std::size_t>& shape) {
        Tensor t(shape);
        for (auto& v : t.data) {
            if (offset + 4 > bytes.size()) raise(ErrorCode::io_error, "checkpoint truncated (tensors)");
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i]))
                        << (8 * i);
            offset += 4;
            float f;
            std::memcpy(&f, &bits, 4);
            v = static_cast<double>(f);
        }
        return t;
    };

    std::optional<Tensor> vh_w, vh_b;
    for (const auto& tj : header.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        Tensor t = read_tensor(tj.at("shape").get<std::vector<std::size_t>>());
        if (name == "value_head.w") vh_w = std::move(t);
        else if (name == "value_head.b") vh_b = std::move(t);
        else m.params_[name] = std::move(t);
    }
    if (vh_w && vh_b) {
        ValueHead vh;
        vh.w = std::move(*vh_w);
        vh.b = std::move(*vh_b);
        loaded.value_head = std::move(vh);
    }
    if (m.vocab_.size() != static_cast<std::size_t>(m.config_.vocab_size))
        raise(ErrorCode::io_error, "checkpoint vocabulary size mismatch");
    return loaded;
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return CheckpointIo::load(path); }

}  // namespace rafe
