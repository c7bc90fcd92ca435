#include "rafe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace fs = std::filesystem;

namespace rafe {

namespace {

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

// Words every document shares; they carry almost no IDF weight by design.
const std::vector<std::string> kCommonWords = {"the", "of",  "is", "and", "about", "this", "it",
                                               "a",   "for", "with", "in", "on",  "what"};

const char* kTemplateStrings[] = {"instruction", "output", "rewrite", "input",
                                  "query",       "overview", "part",  "unknown"};

/// Pronounceable unique 6-letter words (CVCVCV), skipping anything that
/// collides with the fixed template vocabulary as a substring.
class WordGen {
public:
    explicit WordGen(SplitMix64& rng) : rng_(&rng) {}

    std::string next() {
        static const char consonants[] = "bdfgklmnprstvz";
        static const char vowels[] = "aeiou";
        for (int attempt = 0; attempt < 10000; ++attempt) {
            std::string w;
            for (int s = 0; s < 3; ++s) {
                w.push_back(consonants[rng_->below(sizeof(consonants) - 1)]);
                w.push_back(vowels[rng_->below(sizeof(vowels) - 1)]);
            }
            bool collides = false;
            for (const char* t : kTemplateStrings)
                if (std::string_view(t).find(w) != std::string_view::npos) collides = true;
            for (const auto& c : kCommonWords)
                if (c == w) collides = true;
            if (!collides && used_.insert(w).second) return w;
        }
        raise(ErrorCode::internal, "word generator exhausted");
    }

private:
    SplitMix64* rng_;
    std::unordered_set<std::string> used_;
};

std::string join(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

}  // namespace

SyntheticWorld gen_synthetic_world(const WorldSpec& spec) {
    if (spec.n_documents < 1 || spec.n_queries < 1 || spec.docs_per_entity < 2)
        raise(ErrorCode::invalid_argument, "world spec: sizes must be positive (docs_per_entity >= 2)");
    if (spec.n_attributes < 1 || spec.surface_per_attribute < 1)
        raise(ErrorCode::invalid_argument, "world spec: obfuscation map would be empty");
    if (spec.n_documents % spec.docs_per_entity != 0)
        raise(ErrorCode::invalid_argument, "world spec: n_documents must divide by docs_per_entity");
    if (spec.answer_planting_rate < 0.0 || spec.answer_planting_rate > 1.0)
        raise(ErrorCode::invalid_argument, "world spec: answer_planting_rate must lie in [0,1]");

    const int n_entities = spec.n_documents / spec.docs_per_entity;
    const int n_decoys = std::min(5, spec.docs_per_entity - 1);
    const int n_facts = spec.docs_per_entity - n_decoys;
    if (spec.n_attributes < n_facts)
        raise(ErrorCode::invalid_argument, "world spec: need at least as many attributes as fact docs");

    SyntheticWorld world;
    world.spec = spec;
    SplitMix64 rng(spec.seed ^ 0x77081dull);
    WordGen words(rng);

    for (int i = 0; i < n_entities; ++i) world.entities.push_back(words.next());
    for (int k = 0; k < spec.n_attributes; ++k) world.attributes.push_back(words.next());
    std::vector<std::vector<std::string>> surface(spec.n_attributes);
    for (int k = 0; k < spec.n_attributes; ++k) {
        for (int j = 0; j < spec.surface_per_attribute; ++j) {
            surface[k].push_back(words.next());
            world.obfuscation_map[surface[k].back()] = world.attributes[k];
        }
    }
    std::vector<std::string> junk_pool;
    for (int f = 0; f < spec.n_filler_terms; ++f) junk_pool.push_back(words.next());
    std::size_t junk_cursor = 0;
    auto next_junk = [&] {
        const std::string& w = junk_pool[junk_cursor % junk_pool.size()];
        ++junk_cursor;
        return w;
    };

    // Decoys are short, entity-heavy, and full of rare one-off terms: BM25
    // prefers them for bare entity queries while their inflated TF-IDF norm
    // keeps the reranker cosine low. Fact documents are long but padded with
    // common words only, so the cosine sees them as focused. Every document
    // carries the full common vocabulary, which drives those IDFs to zero.
    constexpr int kDecoyJunk = 14;
    constexpr int kFactLength = 60;

    // Per-entity fact attributes and the answer words planted in them.
    std::vector<std::vector<int>> entity_fact_attrs(n_entities);
    std::vector<std::map<int, std::string>> entity_answers(n_entities);
    std::vector<std::map<int, bool>> entity_planted(n_entities);

    int doc_counter = 0;
    char idbuf[16];
    for (int i = 0; i < n_entities; ++i) {
        const std::string& entity = world.entities[i];
        std::vector<int> attr_ids(spec.n_attributes);
        for (int k = 0; k < spec.n_attributes; ++k) attr_ids[k] = k;
        shuffle_inplace(attr_ids, rng);
        attr_ids.resize(static_cast<std::size_t>(n_facts));
        entity_fact_attrs[i] = attr_ids;

        // Decoy documents first: they take the low doc ids and win the
        // original query's tie-breaks, keeping answers out of its top-5.
        for (int dck = 0; dck < n_decoys; ++dck) {
            std::snprintf(idbuf, sizeof(idbuf), "d%04d", doc_counter++);
            std::vector<std::string> body{"this", "is", "about", entity, "and", "it"};
            for (int jx = 0; jx < kDecoyJunk; ++jx) body.push_back(next_junk());
            body.insert(body.end(), kCommonWords.begin(), kCommonWords.end());
            world.documents.push_back({idbuf,
                                       entity + " overview part p" + std::to_string(dck),
                                       join(body)});
        }
        for (int fk = 0; fk < n_facts; ++fk) {
            const int attr_id = attr_ids[static_cast<std::size_t>(fk)];
            const std::string& attr = world.attributes[attr_id];
            const std::string answer = words.next();
            const bool planted = rng.uniform() < spec.answer_planting_rate;
            entity_answers[i][attr_id] = answer;
            entity_planted[i][attr_id] = planted;

            std::snprintf(idbuf, sizeof(idbuf), "d%04d", doc_counter++);
            std::vector<std::string> body{"the", attr, "of", entity, "is",
                                          planted ? answer : "it"};
            std::size_t ci = 0;
            while (body.size() + 2 < kFactLength) {
                body.push_back(kCommonWords[ci % kCommonWords.size()]);
                ++ci;
            }
            world.documents.push_back({idbuf, entity + " " + attr, join(body)});
        }
    }

    // Queries cover each entity's fact attributes through their surface forms.
    const int base_per_entity = spec.n_queries / n_entities;
    int remainder = spec.n_queries % n_entities;
    int query_counter = 0;
    for (int i = 0; i < n_entities; ++i) {
        const std::string& entity = world.entities[i];
        std::vector<std::pair<int, int>> combos;  // (attr id, surface variant)
        for (int attr_id : entity_fact_attrs[i])
            for (int j = 0; j < spec.surface_per_attribute; ++j) combos.emplace_back(attr_id, j);
        shuffle_inplace(combos, rng);

        const int n_q = base_per_entity + (i < remainder ? 1 : 0);
        for (int qx = 0; qx < n_q; ++qx) {
            const auto [attr_id, variant] = combos[static_cast<std::size_t>(qx) % combos.size()];
            std::snprintf(idbuf, sizeof(idbuf), "q%04d", query_counter++);
            QueryRecord q;
            q.query_id = idbuf;
            q.question = "what is the " + surface[attr_id][static_cast<std::size_t>(variant)] +
                         " of " + entity;
            q.answers = {entity_answers[i][attr_id]};
            world.queries.push_back(q);

            RewriteRecord gold;
            gold.query_id = q.query_id;
            gold.original_query = q.question;
            gold.rewrite = "what is the " + world.attributes[attr_id] + " of " + entity;
            gold.provenance = Provenance::teacher;
            world.gold_rewrites.push_back(std::move(gold));
        }
    }

    // Self-check: gold rewrites must out-retrieve the raw queries.
    SearchIndex index = SearchIndex::build(world.documents);
    auto prec5 = [&](const std::string& text, const std::vector<std::string>& answers) {
        std::vector<Document> docs;
        for (const auto& e : index.search(text, 5).entries) docs.push_back(*index.find_doc(e.doc_id));
        return precision_at_k(docs, answers, 5);
    };
    std::size_t strict = 0;
    for (std::size_t qi = 0; qi < world.queries.size(); ++qi) {
        const double orig = prec5(world.queries[qi].question, world.queries[qi].answers);
        const double gold = prec5(world.gold_rewrites[qi].rewrite, world.queries[qi].answers);
        world.mean_original_prec5 += orig;
        world.mean_gold_prec5 += gold;
        if (gold > orig) ++strict;
    }
    const double nq = static_cast<double>(world.queries.size());
    world.mean_original_prec5 /= nq;
    world.mean_gold_prec5 /= nq;
    world.strict_improvement_fraction = static_cast<double>(strict) / nq;
    return world;
}

void write_world(const SyntheticWorld& world, const std::string& dir) {
    fs::create_directories(dir);
    write_documents_jsonl(dir + "/documents.jsonl", world.documents);
    write_queries_jsonl(dir + "/queries.jsonl", world.queries);
    write_rewrites_jsonl(dir + "/gold_rewrites.jsonl", world.gold_rewrites);

    nlohmann::json j;
    j["spec"] = {{"seed", world.spec.seed},
                 {"n_documents", world.spec.n_documents},
                 {"n_queries", world.spec.n_queries},
                 {"docs_per_entity", world.spec.docs_per_entity},
                 {"n_attributes", world.spec.n_attributes},
                 {"surface_per_attribute", world.spec.surface_per_attribute},
                 {"n_filler_terms", world.spec.n_filler_terms},
                 {"answer_planting_rate", world.spec.answer_planting_rate}};
    j["obfuscation_map"] = world.obfuscation_map;
    j["entities"] = world.entities;
    j["attributes"] = world.attributes;
    j["self_check"] = {{"mean_gold_prec5", world.mean_gold_prec5},
                       {"mean_original_prec5", world.mean_original_prec5},
                       {"strict_improvement_fraction", world.strict_improvement_fraction}};
    write_text_file(dir + "/world.json", j.dump(2) + "\n");
}

SyntheticWorld read_world(const std::string& dir) {
    SyntheticWorld world;
    world.documents = read_documents_jsonl(dir + "/documents.jsonl");
    world.queries = read_queries_jsonl(dir + "/queries.jsonl");
    world.gold_rewrites = read_rewrites_jsonl(dir + "/gold_rewrites.jsonl");
    nlohmann::json j = nlohmann::json::parse(read_text_file(dir + "/world.json"));
    const auto& s = j.at("spec");
    world.spec.seed = s.at("seed").get<std::uint64_t>();
    world.spec.n_documents = s.at("n_documents").get<int>();
    world.spec.n_queries = s.at("n_queries").get<int>();
    world.spec.docs_per_entity = s.at("docs_per_entity").get<int>();
    world.spec.n_attributes = s.at("n_attributes").get<int>();
    world.spec.surface_per_attribute = s.at("surface_per_attribute").get<int>();
    world.spec.n_filler_terms = s.at("n_filler_terms").get<int>();
    world.spec.answer_planting_rate = s.at("answer_planting_rate").get<double>();
    world.obfuscation_map =
        j.at("obfuscation_map").get<std::map<std::string, std::string>>();
    world.entities = j.at("entities").get<std::vector<std::string>>();
    world.attributes = j.at("attributes").get<std::vector<std::string>>();
    world.mean_gold_prec5 = j.at("self_check").at("mean_gold_prec5").get<double>();
    world.mean_original_prec5 = j.at("self_check").at("mean_original_prec5").get<double>();
    world.strict_improvement_fraction =
        j.at("self_check").at("strict_improvement_fraction").get<double>();
    return world;
}

namespace {

std::string apply_map(const std::string& text, const std::map<std::string, std::string>& map,
                      double apply_prob, SplitMix64& rng) {
    std::vector<std::string> tokens = tokenize_text(text);
    for (auto& t : tokens) {
        auto it = map.find(t);
        if (it == map.end()) continue;
        if (apply_prob >= 1.0 || rng.uniform() < apply_prob) t = it->second;
    }
    return join(tokens);
}

std::string corrupt_entity(const std::string& text, const std::vector<std::string>& entities,
                           SplitMix64& rng) {
    std::vector<std::string> tokens = tokenize_text(text);
    std::unordered_set<std::string> entity_set(entities.begin(), entities.end());
    std::vector<std::size_t> hits;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (entity_set.count(tokens[i])) hits.push_back(i);
    if (!hits.empty() && entities.size() > 1) {
        const std::size_t pos = hits[rng.below(hits.size())];
        std::string replacement = tokens[pos];
        while (replacement == tokens[pos])
            replacement = entities[rng.below(entities.size())];
        tokens[pos] = replacement;
    } else if (!tokens.empty()) {
        tokens[rng.below(tokens.size())] = entities.empty() ? "it" : entities[0];
    }
    return join(tokens);
}

}  // namespace

std::vector<RewriteRecord> teacher_rewrites(const std::vector<QueryRecord>& queries,
                                            const SyntheticWorld& world, TeacherMode mode,
                                            int n_per_query, std::uint64_t seed,
                                            TextCompletionAdapter* adapter) {
    if (n_per_query < 1)
        raise(ErrorCode::invalid_argument, "teacher_rewrites: n_per_query must be >= 1");
    if (mode == TeacherMode::external && adapter == nullptr)
        raise(ErrorCode::invalid_argument,
              "teacher_rewrites: no external completion adapter configured; "
              "use synthetic mode or plug in an adapter");
    if (mode == TeacherMode::synthetic && world.obfuscation_map.empty())
        raise(ErrorCode::invalid_argument, "teacher_rewrites: obfuscation map is empty");

    SplitMix64 rng(seed ^ 0x7eacull);
    std::vector<RewriteRecord> out;
    for (const auto& q : queries) {
        std::vector<std::string> candidates;
        if (mode == TeacherMode::synthetic) {
            // Full application, identity, partial applications, noised variants.
            candidates.push_back(apply_map(q.question, world.obfuscation_map, 1.0, rng));
            if (n_per_query >= 2) candidates.push_back(join(tokenize_text(q.question)));
            while (static_cast<int>(candidates.size()) < n_per_query) {
                if (candidates.size() % 2 == 0)
                    candidates.push_back(apply_map(q.question, world.obfuscation_map, 0.5, rng));
                else
                    candidates.push_back(corrupt_entity(
                        apply_map(q.question, world.obfuscation_map, 1.0, rng), world.entities, rng));
            }
        } else {
            const std::string prompt = "Instruction: output the rewrite of input query\n\nQuery: " +
                                       q.question + "\n\nOutput:";
            for (int n = 0; n < n_per_query; ++n) candidates.push_back(adapter->complete(prompt));
        }

        std::vector<std::string> kept;
        for (auto& c : candidates) {
            if (c.empty()) continue;
            if (std::find(kept.begin(), kept.end(), c) == kept.end()) kept.push_back(c);
        }
        for (auto& text : kept) {
            RewriteRecord r;
            r.query_id = q.query_id;
            r.original_query = q.question;
            r.rewrite = std::move(text);
            r.provenance = Provenance::teacher;
            out.push_back(std::move(r));
        }
    }
    return out;
}

SplitResult split_dataset(const std::vector<RewriteRecord>& records, double sft_fraction,
                          std::uint64_t seed) {
    if (sft_fraction <= 0.0 || sft_fraction >= 1.0)
        raise(ErrorCode::invalid_argument, "split_dataset: sft_fraction must lie in (0,1)");
    std::vector<std::string> query_ids;
    std::unordered_set<std::string> seen;
    for (const auto& r : records)
        if (seen.insert(r.query_id).second) query_ids.push_back(r.query_id);
    if (query_ids.size() < 2)
        raise(ErrorCode::invalid_argument,
              "split_dataset: need at least two queries for a non-empty split");

    SplitMix64 rng(seed ^ 0x5b117ull);
    shuffle_inplace(query_ids, rng);
    std::size_t n_sft = static_cast<std::size_t>(
        std::llround(sft_fraction * static_cast<double>(query_ids.size())));
    n_sft = std::max<std::size_t>(1, std::min(query_ids.size() - 1, n_sft));

    std::unordered_set<std::string> sft_ids(query_ids.begin(),
                                            query_ids.begin() + static_cast<std::ptrdiff_t>(n_sft));
    SplitResult out;
    for (const auto& r : records)
        (sft_ids.count(r.query_id) ? out.sft : out.feedback).push_back(r);
    return out;
}

ComparisonTable report_compare(const std::vector<EvalReport>& reports) {
    if (reports.size() < 2)
        raise(ErrorCode::invalid_argument, "report_compare: need at least two reports");
    std::set<std::string> base_ids;
    for (const auto& row : reports[0].rows) base_ids.insert(row.query_id);
    for (const auto& rep : reports) {
        std::set<std::string> ids;
        for (const auto& row : rep.rows) ids.insert(row.query_id);
        if (ids != base_ids)
            raise(ErrorCode::invalid_argument, "report_compare: reports cover different query sets");
    }
    const EvalReport* oqr = nullptr;
    for (const auto& rep : reports)
        if (rep.setting.mode == EvalMode::oqr) {
            oqr = &rep;
            break;
        }
    if (oqr == nullptr)
        raise(ErrorCode::invalid_argument, "report_compare: no OQR baseline report present");

    ComparisonTable table;
    for (const auto& rep : reports) {
        ComparisonRow row;
        row.label = (rep.checkpoint_name.empty() ? std::string{"-"} : rep.checkpoint_name) + "/" +
                    rep.setting.name();
        row.em = rep.em;
        row.rouge_l = rep.rouge_l;
        row.prec_at_k = rep.prec_at_k;
        row.prec_at_2k = rep.prec_at_2k;
        row.mrr = rep.mrr;
        row.d_em = rep.em - oqr->em;
        row.d_prec_at_k = rep.prec_at_k - oqr->prec_at_k;
        row.d_prec_at_2k = rep.prec_at_2k - oqr->prec_at_2k;
        row.d_mrr = rep.mrr - oqr->mrr;
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string ComparisonTable::to_csv() const {
    std::ostringstream out;
    out << "label,em,rouge_l,prec_at_k,prec_at_2k,mrr,d_em,d_prec_at_k,d_prec_at_2k,d_mrr\n";
    for (const auto& r : rows) {
        out << r.label << ',' << r.em << ',' << r.rouge_l << ',' << r.prec_at_k << ','
            << r.prec_at_2k << ',' << r.mrr << ',' << r.d_em << ',' << r.d_prec_at_k << ','
            << r.d_prec_at_2k << ',' << r.d_mrr << "\n";
    }
    return out.str();
}

std::string ComparisonTable::to_text() const {
    std::ostringstream out;
    out << std::left;
    out.width(34);
    out << "run";
    for (const char* h : {"em", "rougeL", "prec@k", "prec@2k", "mrr", "d(em)", "d(p@k)"}) {
        out.width(10);
        out << h;
    }
    out << "\n";
    for (const auto& r : rows) {
        out.width(34);
        out << r.label;
        char buf[32];
        for (double v : {r.em, r.rouge_l, r.prec_at_k, r.prec_at_2k, r.mrr, r.d_em, r.d_prec_at_k}) {
            std::snprintf(buf, sizeof(buf), "%-10.4f", v);
            out << buf;
        }
        out << "\n";
    }
    return out.str();
}

// ---- PipelineRun ----

PipelineRun::PipelineRun(Config config, std::string out_dir, std::int64_t seed_override)
    : config_(std::move(config)), out_dir_(std::move(out_dir)) {
    if (out_dir_.empty()) raise(ErrorCode::invalid_argument, "pipeline: empty output directory");
    seed_ = seed_override >= 0 ? static_cast<std::uint64_t>(seed_override)
                               : static_cast<std::uint64_t>(config_.get_int("run", "seed", 42));
    fs::create_directories(out_dir_);
    load_manifest();
}

std::string PipelineRun::path(const std::string& relative) const {
    return out_dir_ + "/" + relative;
}

WorldSpec PipelineRun::world_spec() const {
    WorldSpec w;
    w.seed = static_cast<std::uint64_t>(config_.get_int("world", "seed",
                                                        static_cast<std::int64_t>(seed_)));
    w.n_documents = static_cast<int>(config_.get_int("world", "n_documents", w.n_documents));
    w.n_queries = static_cast<int>(config_.get_int("world", "n_queries", w.n_queries));
    w.docs_per_entity = static_cast<int>(config_.get_int("world", "docs_per_entity", w.docs_per_entity));
    w.n_attributes = static_cast<int>(config_.get_int("world", "n_attributes", w.n_attributes));
    w.surface_per_attribute =
        static_cast<int>(config_.get_int("world", "surface_per_attribute", w.surface_per_attribute));
    w.n_filler_terms = static_cast<int>(config_.get_int("world", "n_filler_terms", w.n_filler_terms));
    w.answer_planting_rate = config_.get_double("world", "answer_planting_rate", w.answer_planting_rate);
    return w;
}

PolicyConfig PipelineRun::policy_config() const {
    PolicyConfig p;
    p.embed_dim = static_cast<int>(config_.get_int("policy", "embed_dim", p.embed_dim));
    p.n_layers = static_cast<int>(config_.get_int("policy", "n_layers", p.n_layers));
    p.n_heads = static_cast<int>(config_.get_int("policy", "n_heads", p.n_heads));
    p.context_len = static_cast<int>(config_.get_int("policy", "context_len", p.context_len));
    p.init_std = config_.get_double("policy", "init_std", p.init_std);
    p.logit_scale = config_.get_double("policy", "logit_scale", p.logit_scale);
    return p;
}

TrainConfig PipelineRun::train_config() const {
    TrainConfig t;
    t.sft_epochs = static_cast<int>(config_.get_int("training", "sft_epochs", t.sft_epochs));
    t.sft_lr = config_.get_double("training", "sft_lr", t.sft_lr);
    t.sft_batch = static_cast<int>(config_.get_int("training", "sft_batch", t.sft_batch));
    t.offline_epochs = static_cast<int>(config_.get_int("training", "offline_epochs", t.offline_epochs));
    t.offline_lr = config_.get_double("training", "offline_lr", t.offline_lr);
    t.offline_batch = static_cast<int>(config_.get_int("training", "offline_batch", t.offline_batch));
    t.beta = config_.get_double("training", "beta", t.beta);
    t.ppo_steps = static_cast<int>(config_.get_int("training", "ppo_steps", t.ppo_steps));
    t.ppo_batch = static_cast<int>(config_.get_int("training", "ppo_batch", t.ppo_batch));
    t.ppo_epochs = static_cast<int>(config_.get_int("training", "ppo_epochs", t.ppo_epochs));
    t.ppo_lr = config_.get_double("training", "ppo_lr", t.ppo_lr);
    t.clip_eps = config_.get_double("training", "clip_eps", t.clip_eps);
    t.beta_kl = config_.get_double("training", "beta_kl", t.beta_kl);
    t.gae_lambda = config_.get_double("training", "gae_lambda", t.gae_lambda);
    t.lambda_good = config_.get_double("training", "lambda_good", t.lambda_good);
    t.lambda_bad = config_.get_double("training", "lambda_bad", t.lambda_bad);
    t.sample_temperature = config_.get_double("training", "sample_temperature", t.sample_temperature);
    t.max_new_tokens = static_cast<int>(config_.get_int("training", "max_new_tokens", t.max_new_tokens));
    t.score_k = static_cast<int>(config_.get_int("training", "score_k", t.score_k));
    t.seed = static_cast<std::uint64_t>(config_.get_int("training", "seed",
                                                        static_cast<std::int64_t>(seed_)));
    return t;
}

EvalSetting PipelineRun::eval_setting(const std::map<std::string, std::string>& args) const {
    EvalSetting s;
    auto arg = [&](const std::string& key, const std::string& fallback) {
        auto it = args.find(key);
        if (it != args.end()) return it->second;
        return config_.get_string("eval", key, fallback);
    };
    s.mode = eval_mode_from_string(arg("mode", "expand"));
    s.order = context_order_from_string(arg("order", "raw"));
    s.k = std::stoi(arg("k", std::to_string(config_.get_int("eval", "k", 5))));
    s.num_rewrites = std::stoi(arg("num_rewrites", "2"));
    s.retrieval_depth = std::stoi(arg("retrieval_depth",
                                      std::to_string(config_.get_int("eval", "retrieval_depth", 10))));
    return s;
}

void PipelineRun::load_manifest() {
    const std::string mpath = path("manifest.json");
    manifest_stages_.clear();
    if (!fs::exists(mpath)) return;
    nlohmann::json j = nlohmann::json::parse(read_text_file(mpath));
    const nlohmann::json stages = j.value("stages", nlohmann::json::object());
    for (const auto& [stage, rec] : stages.items()) {
        StageRecord r;
        const nlohmann::json inputs = rec.value("inputs", nlohmann::json::object());
        for (const auto& [k, v] : inputs.items()) r.input_hashes[k] = v.get<std::uint64_t>();
        const nlohmann::json outputs = rec.value("outputs", nlohmann::json::object());
        for (const auto& [k, v] : outputs.items()) r.output_hashes[k] = v.get<std::uint64_t>();
        r.wall_ms = rec.value("wall_ms", 0.0);
        manifest_stages_[stage] = std::move(r);
    }
}

void PipelineRun::save_manifest() {
    nlohmann::json stages;
    for (const auto& [stage, rec] : manifest_stages_) {
        nlohmann::json r;
        r["inputs"] = rec.input_hashes;
        r["outputs"] = rec.output_hashes;
        r["wall_ms"] = rec.wall_ms;
        stages[stage] = std::move(r);
    }
    nlohmann::json j;
    j["seed"] = seed_;
    j["config_hash"] = fnv1a64(config_.raw_text());
    j["config_snapshot"] = config_.raw_text();
    j["stages"] = std::move(stages);
    write_text_file(path("manifest.json"), j.dump(2) + "\n");
}

bool PipelineRun::stage_fresh(const std::string& stage_key,
                              const std::map<std::string, std::string>& inputs,
                              const std::vector<std::string>& outputs) const {
    auto it = manifest_stages_.find(stage_key);
    if (it == manifest_stages_.end()) return false;
    const StageRecord& rec = it->second;
    std::map<std::string, std::uint64_t> current;
    for (const auto& [key, file] : inputs) {
        if (file.empty()) {
            current[key] = fnv1a64(config_.raw_text()) ^ seed_;
        } else {
            if (!fs::exists(file)) return false;
            current[key] = hash_file(file);
        }
    }
    if (current != rec.input_hashes) return false;
    for (const auto& out : outputs) {
        const std::string p = path(out);
        auto oit = rec.output_hashes.find(out);
        if (oit == rec.output_hashes.end() || !fs::exists(p) || hash_file(p) != oit->second)
            return false;
    }
    return true;
}

void PipelineRun::record_stage(const std::string& stage_key,
                               const std::map<std::string, std::string>& inputs,
                               const std::vector<std::string>& outputs, double wall_ms) {
    StageRecord rec;
    for (const auto& [key, file] : inputs)
        rec.input_hashes[key] = file.empty() ? (fnv1a64(config_.raw_text()) ^ seed_) : hash_file(file);
    for (const auto& out : outputs) rec.output_hashes[out] = hash_file(path(out));
    rec.wall_ms = wall_ms;
    manifest_stages_[stage_key] = std::move(rec);
    save_manifest();
}

namespace {

void require_artifact(const std::string& file, const std::string& stage_hint) {
    if (!fs::exists(file))
        raise(ErrorCode::invalid_state,
              "missing upstream artifact " + file + "; run stage '" + stage_hint + "' first");
}

}  // namespace

void PipelineRun::run_stage(const std::string& stage,
                            const std::map<std::string, std::string>& args) {
    if (stage == "world") stage_world();
    else if (stage == "index") stage_index();
    else if (stage == "teacher") stage_teacher();
    else if (stage == "split") stage_split();
    else if (stage == "sft") stage_sft();
    else if (stage == "score") stage_score();
    else if (stage == "feedback-dpo") stage_offline(OfflineMethod::dpo);
    else if (stage == "feedback-kto") stage_offline(OfflineMethod::kto);
    else if (stage == "feedback-ppo") stage_ppo();
    else if (stage == "eval") stage_eval(args);
    else if (stage == "sweep") stage_sweep(args);
    else raise(ErrorCode::invalid_argument, "unknown stage: " + stage);
}

void PipelineRun::stage_world() {
    const std::map<std::string, std::string> inputs{{"config", ""}};
    const std::vector<std::string> outputs{"world/documents.jsonl", "world/queries.jsonl",
                                           "world/gold_rewrites.jsonl", "world/world.json"};
    if (stage_fresh("world", inputs, outputs)) return;
    const double t0 = now_ms();
    SyntheticWorld world = gen_synthetic_world(world_spec());
    if (world.strict_improvement_fraction < 0.9)
        log_warn("world self-check: gold rewrites beat originals on only " +
                 std::to_string(world.strict_improvement_fraction * 100.0) + "% of queries");
    write_world(world, path("world"));
    record_stage("world", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_index() {
    require_artifact(path("world/documents.jsonl"), "world");
    const std::map<std::string, std::string> inputs{{"docs", path("world/documents.jsonl")}};
    const std::vector<std::string> outputs{"index/corpus.idx"};
    if (stage_fresh("index", inputs, outputs)) return;
    const double t0 = now_ms();
    fs::create_directories(path("index"));
    SearchIndex::build(read_documents_jsonl(path("world/documents.jsonl")))
        .save(path("index/corpus.idx"));
    record_stage("index", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_teacher() {
    require_artifact(path("world/queries.jsonl"), "world");
    require_artifact(path("world/world.json"), "world");
    const std::map<std::string, std::string> inputs{{"queries", path("world/queries.jsonl")},
                                                    {"world", path("world/world.json")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"data/teacher.jsonl"};
    if (stage_fresh("teacher", inputs, outputs)) return;
    const double t0 = now_ms();
    SyntheticWorld world = read_world(path("world"));
    const std::string mode_str = config_.get_string("data", "teacher_mode", "synthetic");
    const TeacherMode mode =
        mode_str == "external" ? TeacherMode::external : TeacherMode::synthetic;
    const int n_per_query = static_cast<int>(config_.get_int("data", "n_rewrites_per_query", 4));
    auto records = teacher_rewrites(world.queries, world, mode, n_per_query, seed_);
    fs::create_directories(path("data"));
    write_rewrites_jsonl(path("data/teacher.jsonl"), records);
    record_stage("teacher", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_split() {
    require_artifact(path("data/teacher.jsonl"), "teacher");
    const std::map<std::string, std::string> inputs{{"teacher", path("data/teacher.jsonl")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"data/sft_split.jsonl", "data/feedback_split.jsonl"};
    if (stage_fresh("split", inputs, outputs)) return;
    const double t0 = now_ms();
    auto records = read_rewrites_jsonl(path("data/teacher.jsonl"));
    const double fraction = config_.get_double("data", "sft_fraction", 0.5);
    SplitResult split = split_dataset(records, fraction, seed_);
    write_rewrites_jsonl(path("data/sft_split.jsonl"), split.sft);
    write_rewrites_jsonl(path("data/feedback_split.jsonl"), split.feedback);
    record_stage("split", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_sft() {
    require_artifact(path("data/sft_split.jsonl"), "split");
    const std::map<std::string, std::string> inputs{{"sft", path("data/sft_split.jsonl")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"ckpt/sft.ckpt", "logs/sft.jsonl"};
    if (stage_fresh("sft", inputs, outputs)) return;
    const double t0 = now_ms();

    auto records = read_rewrites_jsonl(path("data/sft_split.jsonl"));
    std::vector<std::string> corpus_texts;
    std::vector<SftExample> examples;
    for (const auto& r : records) {
        corpus_texts.push_back(r.original_query);
        corpus_texts.push_back(r.rewrite);
        examples.push_back({r.original_query, r.rewrite});
    }
    // Feedback-split text stays out of training but must be encodable later.
    if (fs::exists(path("data/feedback_split.jsonl"))) {
        for (const auto& r : read_rewrites_jsonl(path("data/feedback_split.jsonl"))) {
            corpus_texts.push_back(r.original_query);
            corpus_texts.push_back(r.rewrite);
        }
    }
    PolicyModel m = PolicyModel::init(
        policy_config(),
        Vocabulary::build(corpus_texts,
                          static_cast<std::size_t>(config_.get_int("policy", "vocab_max", 512))),
        seed_);

    TrainResult result = run_sft(train_config(), examples, m);
    fs::create_directories(path("ckpt"));
    fs::create_directories(path("logs"));
    result.model.save(path("ckpt/sft.ckpt"), "sft", seed_,
                      {{"loss_normalization", "per_token_mean"}});
    write_text_file(path("logs/sft.jsonl"), step_logs_to_jsonl(result.logs));
    record_stage("sft", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_score() {
    require_artifact(path("data/feedback_split.jsonl"), "split");
    require_artifact(path("index/corpus.idx"), "index");
    const std::map<std::string, std::string> inputs{{"feedback", path("data/feedback_split.jsonl")},
                                                    {"index", path("index/corpus.idx")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"data/pairs.jsonl", "data/kto.jsonl",
                                           "data/feedback_meta.json"};
    if (stage_fresh("score", inputs, outputs)) return;
    const double t0 = now_ms();

    auto records = read_rewrites_jsonl(path("data/feedback_split.jsonl"));
    SearchIndex index = SearchIndex::load(path("index/corpus.idx"));
    TfidfCosineScorer scorer(index);
    const int k = static_cast<int>(config_.get_int("score", "score_k", 5));

    const std::string labeling = config_.get_string("score", "labeling", "reranker");
    double mu = 0.0;
    if (labeling == "precision") {
        require_artifact(path("world/queries.jsonl"), "world");
        std::unordered_map<std::string, std::vector<std::string>> answers;
        for (const auto& q : read_queries_jsonl(path("world/queries.jsonl")))
            answers[q.query_id] = q.answers;
        precision_feedback_labels(records, index, answers, k);
        for (auto& r : records)
            if (!r.score.has_value()) r.score = 0.0;
        mu = compute_threshold(records);
    } else if (labeling == "reranker") {
        for (auto& r : records) {
            RewriteScore s = score_rewrite(r.original_query, r.rewrite, index, scorer, k);
            r.score = s.value;
        }
        mu = compute_threshold(records);
        label_rewrites(records, mu);
    } else {
        raise(ErrorCode::invalid_argument, "score: unknown labeling mode: " + labeling);
    }

    PairBuildOptions opts;
    opts.max_pairs_per_query =
        static_cast<std::size_t>(config_.get_int("score", "max_pairs_per_query", 4));
    FeedbackDataset ds = build_preference_pairs(records, mu, opts);
    write_feedback_dataset(ds, path("data/pairs.jsonl"), path("data/kto.jsonl"),
                           path("data/feedback_meta.json"));
    record_stage("score", inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_offline(OfflineMethod method) {
    const std::string name = method == OfflineMethod::dpo ? "dpo" : "kto";
    require_artifact(path("data/pairs.jsonl"), "score");
    require_artifact(path("ckpt/sft.ckpt"), "sft");
    const std::map<std::string, std::string> inputs{{"pairs", path("data/pairs.jsonl")},
                                                    {"kto", path("data/kto.jsonl")},
                                                    {"meta", path("data/feedback_meta.json")},
                                                    {"sft", path("ckpt/sft.ckpt")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"ckpt/" + name + ".ckpt", "logs/" + name + ".jsonl"};
    if (stage_fresh("feedback-" + name, inputs, outputs)) return;
    const double t0 = now_ms();

    FeedbackDataset ds = read_feedback_dataset(path("data/pairs.jsonl"), path("data/kto.jsonl"),
                                               path("data/feedback_meta.json"));
    PolicyModel sft = load_checkpoint("sft");
    TrainResult result = run_offline(train_config(), ds, sft, method);
    result.model.save(path("ckpt/" + name + ".ckpt"), name, seed_,
                      {{"reference", "ckpt/sft.ckpt"}});
    write_text_file(path("logs/" + name + ".jsonl"), step_logs_to_jsonl(result.logs));
    record_stage("feedback-" + name, inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_ppo() {
    require_artifact(path("data/feedback_split.jsonl"), "split");
    require_artifact(path("index/corpus.idx"), "index");
    require_artifact(path("ckpt/sft.ckpt"), "sft");
    const std::map<std::string, std::string> inputs{{"feedback", path("data/feedback_split.jsonl")},
                                                    {"index", path("index/corpus.idx")},
                                                    {"sft", path("ckpt/sft.ckpt")},
                                                    {"config", ""}};
    const std::vector<std::string> outputs{"ckpt/ppo.ckpt", "logs/ppo.jsonl"};
    if (stage_fresh("feedback-ppo", inputs, outputs)) return;
    const double t0 = now_ms();

    std::vector<std::string> queries;
    std::unordered_set<std::string> seen;
    for (const auto& r : read_rewrites_jsonl(path("data/feedback_split.jsonl")))
        if (seen.insert(r.query_id).second) queries.push_back(r.original_query);
    SearchIndex index = SearchIndex::load(path("index/corpus.idx"));
    TfidfCosineScorer scorer(index);
    PolicyModel sft = load_checkpoint("sft");

    TrainResult result = run_ppo(train_config(), queries, sft, index, scorer);
    result.model.save(path("ckpt/ppo.ckpt"), "ppo", seed_, {{"reference", "ckpt/sft.ckpt"}},
                      &result.value_head);
    write_text_file(path("logs/ppo.jsonl"), step_logs_to_jsonl(result.logs));
    record_stage("feedback-ppo", inputs, outputs, now_ms() - t0);
}

std::vector<QueryRecord> PipelineRun::eval_queries() const {
    require_artifact(path("world/queries.jsonl"), "world");
    auto all = read_queries_jsonl(path("world/queries.jsonl"));
    const std::string which = config_.get_string("eval", "split", "feedback");
    if (which == "all") return all;
    const std::string split_file =
        which == "sft" ? path("data/sft_split.jsonl") : path("data/feedback_split.jsonl");
    require_artifact(split_file, "split");
    std::unordered_set<std::string> wanted;
    for (const auto& r : read_rewrites_jsonl(split_file)) wanted.insert(r.query_id);
    std::vector<QueryRecord> out;
    for (auto& q : all)
        if (wanted.count(q.query_id)) out.push_back(std::move(q));
    return out;
}

PolicyModel PipelineRun::load_checkpoint(const std::string& name) const {
    const std::string file = path("ckpt/" + name + ".ckpt");
    require_artifact(file, name == "sft" ? "sft" : "feedback-" + name);
    return rafe::load_checkpoint(file).model;
}

void PipelineRun::stage_eval(const std::map<std::string, std::string>& args) {
    require_artifact(path("index/corpus.idx"), "index");
    auto arg = [&](const std::string& key, const std::string& fallback) {
        auto it = args.find(key);
        return it == args.end() ? fallback : it->second;
    };
    const std::string ckpt = arg("checkpoint", config_.get_string("eval", "checkpoint", "sft"));
    EvalSetting setting = eval_setting(args);
    if (ckpt == "oqr") setting.mode = EvalMode::oqr;

    const std::string tag = "eval_" + ckpt + "_" + setting.name();
    std::map<std::string, std::string> inputs{{"index", path("index/corpus.idx")}, {"config", ""}};
    if (ckpt != "oqr") inputs["ckpt"] = path("ckpt/" + ckpt + ".ckpt");
    const std::vector<std::string> outputs{"reports/" + tag + ".json", "reports/" + tag + ".csv"};
    if (stage_fresh(tag, inputs, outputs)) return;
    const double t0 = now_ms();

    SearchIndex index = SearchIndex::load(path("index/corpus.idx"));
    TfidfCosineScorer scorer(index);
    auto queries = eval_queries();

    EvalGenConfig gen;
    gen.temperature = config_.get_double("eval", "temperature", 0.8);
    gen.max_new_tokens = static_cast<int>(config_.get_int("eval", "max_new_tokens", 24));
    gen.seed = seed_;

    EvalReport report;
    if (ckpt == "oqr") {
        report = evaluate(nullptr, queries, index, scorer, setting, gen);
    } else {
        PolicyModel model = load_checkpoint(ckpt);
        report = evaluate(&model, queries, index, scorer, setting, gen);
    }
    report.checkpoint_name = ckpt;
    fs::create_directories(path("reports"));
    write_text_file(path("reports/" + tag + ".json"), report_to_json(report));
    write_text_file(path("reports/" + tag + ".csv"), report_rows_csv(report));
    record_stage(tag, inputs, outputs, now_ms() - t0);
}

void PipelineRun::stage_sweep(const std::map<std::string, std::string>& args) {
    require_artifact(path("index/corpus.idx"), "index");
    auto arg = [&](const std::string& key, const std::string& fallback) {
        auto it = args.find(key);
        return it == args.end() ? fallback : it->second;
    };
    const std::string ckpt = arg("checkpoint", config_.get_string("eval", "checkpoint", "sft"));
    const int max_rewrites = std::stoi(arg("max_rewrites", "5"));
    const std::string order_str = arg("order", "raw");

    SearchIndex index = SearchIndex::load(path("index/corpus.idx"));
    TfidfCosineScorer scorer(index);
    auto queries = eval_queries();
    PolicyModel model = load_checkpoint(ckpt);

    EvalGenConfig gen;
    gen.temperature = config_.get_double("eval", "temperature", 0.8);
    gen.max_new_tokens = static_cast<int>(config_.get_int("eval", "max_new_tokens", 24));
    gen.seed = seed_;

    std::ostringstream csv;
    csv << "num_rewrites,em,prec_at_k,prec_at_2k,mrr\n";
    for (int n = 0; n <= max_rewrites; ++n) {
        EvalSetting s = eval_setting(args);
        s.order = context_order_from_string(order_str);
        if (n == 0) {
            s.mode = EvalMode::oqr;
        } else {
            s.mode = EvalMode::expand;
            s.num_rewrites = n;
        }
        EvalReport rep = evaluate(n == 0 ? nullptr : &model, queries, index, scorer, s, gen);
        csv << n << ',' << rep.em << ',' << rep.prec_at_k << ',' << rep.prec_at_2k << ','
            << rep.mrr << "\n";
    }
    fs::create_directories(path("reports"));
    write_text_file(path("reports/sweep_" + ckpt + "_" + order_str + ".csv"), csv.str());
}

}  // namespace rafe
