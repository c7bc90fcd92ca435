#include "rafe/reranker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "rafe/evaluation.hpp"

namespace rafe {

std::string to_string(RewriteLabel label) {
    switch (label) {
        case RewriteLabel::good: return "good";
        case RewriteLabel::bad: return "bad";
        default: return "unset";
    }
}

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::teacher: return "teacher";
        case Provenance::sft_model: return "sft_model";
        default: return "feedback_model";
    }
}

RewriteLabel label_from_string(const std::string& s) {
    if (s == "good") return RewriteLabel::good;
    if (s == "bad") return RewriteLabel::bad;
    if (s == "unset") return RewriteLabel::unset;
    raise(ErrorCode::invalid_argument, "unknown label: " + s);
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "teacher") return Provenance::teacher;
    if (s == "sft_model") return Provenance::sft_model;
    if (s == "feedback_model") return Provenance::feedback_model;
    raise(ErrorCode::invalid_argument, "unknown provenance: " + s);
}

namespace {

// Sparse TF-IDF vector keyed by term string so out-of-vocabulary terms still
// carry weight (df 0 gives the maximal IDF).
std::map<std::string, double> tfidf_vector(const std::string& text, const SearchIndex& index) {
    std::map<std::string, double> vec;
    for (const auto& tok : tokenize_text(text)) vec[tok] += 1.0;
    for (auto& [term, w] : vec) w *= index.idf(term);
    return vec;
}

double norm(const std::map<std::string, double>& v) {
    double s = 0.0;
    for (const auto& [_, w] : v) s += w * w;
    return std::sqrt(s);
}

}  // namespace

double TfidfCosineScorer::score(const std::string& query, const Document& document) const {
    auto qv = tfidf_vector(query, *index_);
    auto dv = tfidf_vector(document.title + " " + document.body, *index_);
    if (qv.empty() || dv.empty()) {
        log_warn("score_pair: query or document tokenizes to empty, scoring 0");
        return 0.0;
    }
    double dot = 0.0;
    for (const auto& [term, w] : qv) {
        auto it = dv.find(term);
        if (it != dv.end()) dot += w * it->second;
    }
    double value = dot / (norm(qv) * norm(dv));
    // Guard against round-off drifting just past the bounds.
    return std::min(1.0, std::max(0.0, value));
}

RewriteScore score_rewrite(const std::string& original_query, const std::string& rewrite,
                           const SearchIndex& index, const PairScorer& scorer, int k) {
    if (k < 1) raise(ErrorCode::invalid_argument, "score_rewrite: k must be >= 1");
    RetrievedList retrieved = index.search(rewrite, k);
    if (retrieved.entries.empty()) return {0.0, true};
    double sum = 0.0;
    for (const auto& entry : retrieved.entries) {
        const Document* doc = index.find_doc(entry.doc_id);
        if (doc == nullptr) raise(ErrorCode::internal, "retrieved unknown doc_id: " + entry.doc_id);
        sum += scorer.score(original_query, *doc);
    }
    return {sum / static_cast<double>(retrieved.entries.size()), false};
}

double compute_threshold(const std::vector<RewriteRecord>& records) {
    if (records.empty()) raise(ErrorCode::invalid_argument, "compute_threshold: no records");
    double sum = 0.0;
    for (const auto& r : records) {
        if (!r.score.has_value())
            raise(ErrorCode::invalid_argument, "compute_threshold: unscored record for query " + r.query_id);
        sum += *r.score;
    }
    return sum / static_cast<double>(records.size());
}

void label_rewrites(std::vector<RewriteRecord>& records, double mu) {
    for (auto& r : records) {
        if (!r.score.has_value())
            raise(ErrorCode::invalid_argument, "label_rewrites: unscored record for query " + r.query_id);
        r.label = (*r.score > mu) ? RewriteLabel::good : RewriteLabel::bad;
    }
}

FeedbackDataset build_preference_pairs(const std::vector<RewriteRecord>& labeled, double mu,
                                       const PairBuildOptions& options) {
    FeedbackDataset ds;
    ds.mu = mu;
    ds.kto_examples = labeled;
    for (const auto& r : labeled) {
        if (r.label == RewriteLabel::unset)
            raise(ErrorCode::invalid_argument, "build_preference_pairs: unlabeled record for query " + r.query_id);
        if (r.label == RewriteLabel::good) ++ds.n_good; else ++ds.n_bad;
    }

    // Group by query, preserving first-seen query order.
    std::vector<std::string> query_order;
    std::unordered_map<std::string, std::vector<const RewriteRecord*>> by_query;
    for (const auto& r : labeled) {
        auto [it, inserted] = by_query.try_emplace(r.query_id);
        if (inserted) query_order.push_back(r.query_id);
        it->second.push_back(&r);
    }

    for (const auto& qid : query_order) {
        const auto& recs = by_query[qid];
        std::vector<const RewriteRecord*> goods, bads;
        for (const auto* r : recs)
            (r->label == RewriteLabel::good ? goods : bads).push_back(r);
        if (goods.empty() || bads.empty()) continue;

        struct Candidate {
            const RewriteRecord* good;
            const RewriteRecord* bad;
            double gap;
            std::size_t order;
        };
        std::vector<Candidate> cands;
        std::size_t order = 0;
        for (const auto* g : goods) {
            for (const auto* b : bads) {
                if (g->rewrite == b->rewrite) continue;
                cands.push_back({g, b, *g->score - *b->score, order++});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.gap != b.gap) return a.gap > b.gap;
            return a.order < b.order;
        });
        if (cands.size() > options.max_pairs_per_query) cands.resize(options.max_pairs_per_query);
        for (const auto& c : cands) {
            ds.pairs.push_back({qid, c.good->original_query, c.good->rewrite, c.bad->rewrite,
                                *c.good->score, *c.bad->score});
        }
    }
    return ds;
}

RetrievedList rank_documents(const std::string& original_query,
                             const std::vector<Document>& documents, const PairScorer& scorer) {
    RetrievedList result;
    result.query_text = original_query;

    std::vector<const Document*> unique_docs;
    {
        std::unordered_map<std::string, bool> seen;
        for (const auto& d : documents) {
            if (seen.emplace(d.doc_id, true).second) unique_docs.push_back(&d);
        }
    }

    struct Scored {
        const Document* doc;
        double score;
    };
    std::vector<Scored> scored;
    scored.reserve(unique_docs.size());
    for (const auto* d : unique_docs) scored.push_back({d, scorer.score(original_query, *d)});
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc->doc_id < b.doc->doc_id;
    });

    int rank = 1;
    for (const auto& s : scored)
        result.entries.push_back({s.doc->doc_id, s.score, rank++});
    return result;
}

void precision_feedback_labels(
    std::vector<RewriteRecord>& records, const SearchIndex& index,
    const std::unordered_map<std::string, std::vector<std::string>>& answers_by_query, int k) {
    // Original-query precision is shared by all rewrites of the query.
    std::unordered_map<std::string, double> original_prec;
    auto context_docs = [&](const std::string& text) {
        std::vector<Document> docs;
        for (const auto& e : index.search(text, k).entries) docs.push_back(*index.find_doc(e.doc_id));
        return docs;
    };
    for (auto& r : records) {
        auto ans_it = answers_by_query.find(r.query_id);
        if (ans_it == answers_by_query.end() || ans_it->second.empty())
            raise(ErrorCode::invalid_argument,
                  "precision_feedback_labels: missing answers for query " + r.query_id);
        auto prec_it = original_prec.find(r.query_id);
        if (prec_it == original_prec.end()) {
            double p = precision_at_k(context_docs(r.original_query), ans_it->second, k);
            prec_it = original_prec.emplace(r.query_id, p).first;
        }
        double rewrite_prec = precision_at_k(context_docs(r.rewrite), ans_it->second, k);
        r.label = rewrite_prec > prec_it->second ? RewriteLabel::good : RewriteLabel::bad;
        if (!r.score.has_value()) r.score = rewrite_prec;
    }
}

namespace {

nlohmann::json record_to_json(const RewriteRecord& r) {
    nlohmann::json j{{"query_id", r.query_id},
                     {"query", r.original_query},
                     {"rewrite", r.rewrite},
                     {"provenance", to_string(r.provenance)}};
    if (r.score.has_value()) j["score"] = *r.score;
    if (r.label != RewriteLabel::unset) j["label"] = to_string(r.label);
    return j;
}

RewriteRecord record_from_json(const nlohmann::json& j) {
    RewriteRecord r;
    r.query_id = j.at("query_id").get<std::string>();
    r.original_query = j.at("query").get<std::string>();
    r.rewrite = j.at("rewrite").get<std::string>();
    r.provenance = provenance_from_string(j.value("provenance", std::string{"teacher"}));
    if (j.contains("score")) r.score = j.at("score").get<double>();
    if (j.contains("label")) r.label = label_from_string(j.at("label").get<std::string>());
    return r;
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::io_error, "cannot open: " + path);
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            raise(ErrorCode::io_error, "malformed JSON at " + path + ":" + std::to_string(line_no));
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace

void write_feedback_dataset(const FeedbackDataset& ds, const std::string& pairs_path,
                            const std::string& kto_path, const std::string& meta_path) {
    std::ostringstream pairs_out;
    for (const auto& p : ds.pairs) {
        nlohmann::json j{{"query_id", p.query_id}, {"query", p.original_query},
                         {"good", p.good_rewrite},  {"bad", p.bad_rewrite},
                         {"good_score", p.good_score}, {"bad_score", p.bad_score}};
        pairs_out << j.dump() << "\n";
    }
    write_text_file(pairs_path, pairs_out.str());

    std::ostringstream kto_out;
    for (const auto& r : ds.kto_examples) {
        nlohmann::json j{{"query_id", r.query_id}, {"query", r.original_query},
                         {"rewrite", r.rewrite},   {"score", r.score.value_or(0.0)},
                         {"label", to_string(r.label)}};
        kto_out << j.dump() << "\n";
    }
    write_text_file(kto_path, kto_out.str());

    nlohmann::json meta{{"mu", ds.mu},
                        {"n_good", ds.n_good},
                        {"n_bad", ds.n_bad},
                        {"n_pairs", ds.pairs.size()}};
    write_text_file(meta_path, meta.dump(2) + "\n");
}

FeedbackDataset read_feedback_dataset(const std::string& pairs_path, const std::string& kto_path,
                                      const std::string& meta_path) {
    FeedbackDataset ds;
    nlohmann::json meta = nlohmann::json::parse(read_text_file(meta_path));
    ds.mu = meta.at("mu").get<double>();
    ds.n_good = meta.at("n_good").get<std::size_t>();
    ds.n_bad = meta.at("n_bad").get<std::size_t>();
    for (const auto& j : read_jsonl(pairs_path)) {
        ds.pairs.push_back({j.at("query_id").get<std::string>(), j.at("query").get<std::string>(),
                            j.at("good").get<std::string>(), j.at("bad").get<std::string>(),
                            j.at("good_score").get<double>(), j.at("bad_score").get<double>()});
    }
    for (const auto& j : read_jsonl(kto_path)) {
        RewriteRecord r;
        r.query_id = j.at("query_id").get<std::string>();
        r.original_query = j.at("query").get<std::string>();
        r.rewrite = j.at("rewrite").get<std::string>();
        r.score = j.at("score").get<double>();
        r.label = label_from_string(j.at("label").get<std::string>());
        ds.kto_examples.push_back(std::move(r));
    }
    return ds;
}

std::vector<RewriteRecord> read_rewrites_jsonl(const std::string& path) {
    std::vector<RewriteRecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(record_from_json(j));
    return out;
}

void write_rewrites_jsonl(const std::string& path, const std::vector<RewriteRecord>& records) {
    std::ostringstream out;
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
    write_text_file(path, out.str());
}

}  // namespace rafe
