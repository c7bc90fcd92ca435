#include "rafe/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "rafe/policy.hpp"

namespace rafe {

std::string to_string(EvalMode m) {
    switch (m) {
        case EvalMode::substitute: return "substitute";
        case EvalMode::expand: return "expand";
        default: return "oqr";
    }
}

std::string to_string(ContextOrder o) {
    return o == ContextOrder::raw ? "raw" : "ranked";
}

EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "substitute") return EvalMode::substitute;
    if (s == "expand") return EvalMode::expand;
    if (s == "oqr") return EvalMode::oqr;
    raise(ErrorCode::invalid_argument, "unknown eval mode: " + s);
}

ContextOrder context_order_from_string(const std::string& s) {
    if (s == "raw") return ContextOrder::raw;
    if (s == "ranked") return ContextOrder::ranked;
    raise(ErrorCode::invalid_argument, "unknown context order: " + s);
}

std::string EvalSetting::name() const {
    if (mode == EvalMode::oqr) return "oqr-" + to_string(order);
    return to_string(mode) + "-" + to_string(order);
}

AssembledContext assemble_context(const EvalSetting& setting, const RetrievedList& original,
                                  const std::vector<RetrievedList>& rewrite_lists,
                                  const PairScorer& scorer, const std::string& original_query,
                                  const SearchIndex& index, int limit) {
    if (setting.mode == EvalMode::substitute && rewrite_lists.size() != 1)
        raise(ErrorCode::invalid_argument, "substitute mode requires exactly one rewrite list");
    if (setting.mode == EvalMode::oqr && !rewrite_lists.empty())
        raise(ErrorCode::invalid_argument, "oqr mode takes no rewrite lists");

    // The lists participating, in cyclic order for expand-raw.
    std::vector<const RetrievedList*> lists;
    if (setting.mode == EvalMode::substitute) {
        lists.push_back(&rewrite_lists[0]);
    } else if (setting.mode == EvalMode::oqr) {
        lists.push_back(&original);
    } else {
        lists.push_back(&original);
        for (const auto& rl : rewrite_lists) lists.push_back(&rl);
    }

    AssembledContext result;
    bool any_entries = false;
    for (const auto* l : lists) any_entries = any_entries || !l->entries.empty();
    if (!any_entries) {
        result.empty_inputs = true;
        return result;
    }

    auto doc_by_id = [&](const std::string& id) -> const Document& {
        const Document* d = index.find_doc(id);
        if (d == nullptr) raise(ErrorCode::internal, "context references unknown doc_id: " + id);
        return *d;
    };

    if (setting.order == ContextOrder::raw) {
        std::unordered_set<std::string> seen;
        std::vector<std::size_t> cursor(lists.size(), 0);
        bool progressed = true;
        while (static_cast<int>(result.docs.size()) < limit && progressed) {
            progressed = false;
            for (std::size_t li = 0; li < lists.size() && static_cast<int>(result.docs.size()) < limit; ++li) {
                auto& cur = cursor[li];
                const auto& entries = lists[li]->entries;
                // Advance past duplicates so each pass takes one fresh doc per list.
                while (cur < entries.size() && seen.count(entries[cur].doc_id)) ++cur;
                if (cur >= entries.size()) continue;
                seen.insert(entries[cur].doc_id);
                result.docs.push_back(doc_by_id(entries[cur].doc_id));
                ++cur;
                progressed = true;
            }
        }
    } else {
        std::vector<Document> pool;
        for (const auto* l : lists)
            for (const auto& e : l->entries) pool.push_back(doc_by_id(e.doc_id));
        RetrievedList ranked = rank_documents(original_query, pool, scorer);
        for (const auto& e : ranked.entries) {
            if (static_cast<int>(result.docs.size()) >= limit) break;
            result.docs.push_back(doc_by_id(e.doc_id));
        }
    }
    return result;
}

std::string normalize_answer(const std::string& text) {
    auto tokens = tokenize_text(text);
    if (!tokens.empty() && (tokens[0] == "a" || tokens[0] == "an" || tokens[0] == "the"))
        tokens.erase(tokens.begin());
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

double exact_match(const std::string& prediction, const std::vector<std::string>& answers) {
    const std::string norm_pred = normalize_answer(prediction);
    for (const auto& a : answers)
        if (norm_pred == normalize_answer(a)) return 1.0;
    return 0.0;
}

double rouge_l(const std::string& prediction, const std::string& reference) {
    auto p = tokenize_text(prediction);
    auto r = tokenize_text(reference);
    if (p.empty() || r.empty()) return 0.0;
    // Classic O(|p|*|r|) LCS table.
    std::vector<std::vector<int>> lcs(p.size() + 1, std::vector<int>(r.size() + 1, 0));
    for (std::size_t i = 1; i <= p.size(); ++i) {
        for (std::size_t j = 1; j <= r.size(); ++j) {
            lcs[i][j] = (p[i - 1] == r[j - 1]) ? lcs[i - 1][j - 1] + 1
                                               : std::max(lcs[i - 1][j], lcs[i][j - 1]);
        }
    }
    const double l = lcs[p.size()][r.size()];
    if (l == 0.0) return 0.0;
    const double precision = l / static_cast<double>(p.size());
    const double recall = l / static_cast<double>(r.size());
    return 2.0 * precision * recall / (precision + recall);
}

double rouge_l(const std::string& prediction, const std::vector<std::string>& references) {
    double best = 0.0;
    for (const auto& r : references) best = std::max(best, rouge_l(prediction, r));
    return best;
}

bool doc_contains_answer(const Document& doc, const std::vector<std::string>& answers) {
    const std::string text = normalize_answer(doc.title + " " + doc.body);
    for (const auto& a : answers) {
        const std::string na = normalize_answer(a);
        if (!na.empty() && text.find(na) != std::string::npos) return true;
    }
    return false;
}

double precision_at_k(const std::vector<Document>& context, const std::vector<std::string>& answers,
                      int k) {
    if (k < 1) raise(ErrorCode::invalid_argument, "precision_at_k: k must be >= 1");
    const std::size_t n = std::min<std::size_t>(context.size(), static_cast<std::size_t>(k));
    double hits = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (doc_contains_answer(context[i], answers)) hits += 1.0;
    return hits / static_cast<double>(k);
}

double mrr(const std::vector<Document>& context, const std::vector<std::string>& answers) {
    for (std::size_t i = 0; i < context.size(); ++i)
        if (doc_contains_answer(context[i], answers)) return 1.0 / static_cast<double>(i + 1);
    return 0.0;
}

std::string oracle_answer(const std::vector<Document>& context,
                          const std::vector<std::string>& answers) {
    for (const auto& doc : context) {
        const std::string text = normalize_answer(doc.title + " " + doc.body);
        for (const auto& a : answers) {
            const std::string na = normalize_answer(a);
            if (!na.empty() && text.find(na) != std::string::npos) return a;
        }
    }
    return "unknown";
}

EvalReport evaluate(const PolicyModel* policy, const std::vector<QueryRecord>& queries,
                    const SearchIndex& index, const PairScorer& scorer, const EvalSetting& setting,
                    const EvalGenConfig& gen) {
    if (setting.mode != EvalMode::oqr && policy == nullptr)
        raise(ErrorCode::invalid_argument, "evaluate: this setting requires a policy checkpoint");
    if (setting.k < 1) raise(ErrorCode::invalid_argument, "evaluate: k must be >= 1");

    EvalReport report;
    report.setting = setting;

    const int n_rewrites = setting.mode == EvalMode::oqr ? 0
                         : setting.mode == EvalMode::substitute ? 1
                                                                : setting.num_rewrites;
    double sum_em = 0.0, sum_rouge = 0.0, sum_pk = 0.0, sum_p2k = 0.0, sum_mrr = 0.0;
    std::size_t n_em_rows = 0, n_rouge_rows = 0;

    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const auto& q = queries[qi];
        QueryRow row;
        row.query_id = q.query_id;
        row.question = q.question;
        row.is_false_premise = q.is_false_premise;

        if (n_rewrites > 0) {
            GenerationConfig gc;
            gc.temperature = gen.temperature;
            gc.max_new_tokens = gen.max_new_tokens;
            gc.num_samples = n_rewrites;
            // Per-query stream keyed on the query id keeps runs order-independent.
            gc.seed = gen.seed ^ fnv1a64(q.query_id);
            row.rewrites_used = policy->sample_rewrites(q.question, gc);
        }

        RetrievedList original = index.search(q.question, setting.retrieval_depth);
        std::vector<RetrievedList> rewrite_lists;
        for (const auto& rw : row.rewrites_used)
            rewrite_lists.push_back(index.search(rw, setting.retrieval_depth));
        if (setting.mode == EvalMode::substitute && rewrite_lists.empty())
            rewrite_lists.push_back(RetrievedList{});  // policy produced nothing usable

        // Assemble to 2k depth so Prec@2K and MRR see past the QA context.
        AssembledContext wide = assemble_context(setting, original, rewrite_lists, scorer,
                                                 q.question, index, 2 * setting.k);
        std::vector<Document> context(wide.docs.begin(),
                                      wide.docs.begin() + std::min<std::size_t>(wide.docs.size(),
                                                          static_cast<std::size_t>(setting.k)));
        for (const auto& d : context) row.top_doc_ids.push_back(d.doc_id);

        row.prediction = oracle_answer(context, q.answers);
        row.em = exact_match(row.prediction, q.answers);
        row.rouge_l = rouge_l(row.prediction, q.answers);
        row.prec_at_k = precision_at_k(context, q.answers, setting.k);
        row.prec_at_2k = precision_at_k(wide.docs, q.answers, 2 * setting.k);
        row.mrr = mrr(wide.docs, q.answers);

        if (q.is_false_premise) {
            sum_rouge += row.rouge_l;
            ++n_rouge_rows;
        } else {
            sum_em += row.em;
            ++n_em_rows;
        }
        sum_pk += row.prec_at_k;
        sum_p2k += row.prec_at_2k;
        sum_mrr += row.mrr;
        report.rows.push_back(std::move(row));
    }

    const double n = static_cast<double>(queries.size());
    report.em = n_em_rows ? sum_em / static_cast<double>(n_em_rows) : 0.0;
    report.rouge_l = n_rouge_rows ? sum_rouge / static_cast<double>(n_rouge_rows) : 0.0;
    report.prec_at_k = n > 0 ? sum_pk / n : 0.0;
    report.prec_at_2k = n > 0 ? sum_p2k / n : 0.0;
    report.mrr = n > 0 ? sum_mrr / n : 0.0;
    return report;
}

std::vector<QueryRecord> read_queries_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::io_error, "cannot open queries file: " + path);
    std::vector<QueryRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            raise(ErrorCode::io_error, "malformed JSON at " + path + ":" + std::to_string(line_no));
        QueryRecord q;
        q.query_id = j.at("query_id").get<std::string>();
        q.question = j.at("question").get<std::string>();
        q.answers = j.value("answers", std::vector<std::string>{});
        q.is_false_premise = j.value("is_false_premise", false);
        if (q.answers.empty() && !q.is_false_premise)
            raise(ErrorCode::invalid_argument,
                  "query " + q.query_id + " has no answers and is not false-premise");
        out.push_back(std::move(q));
    }
    return out;
}

void write_queries_jsonl(const std::string& path, const std::vector<QueryRecord>& queries) {
    std::ostringstream out;
    for (const auto& q : queries) {
        nlohmann::json j{{"query_id", q.query_id},
                         {"question", q.question},
                         {"answers", q.answers},
                         {"is_false_premise", q.is_false_premise}};
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["setting"] = {{"mode", to_string(report.setting.mode)},
                    {"order", to_string(report.setting.order)},
                    {"k", report.setting.k},
                    {"num_rewrites", report.setting.num_rewrites},
                    {"retrieval_depth", report.setting.retrieval_depth}};
    j["checkpoint"] = report.checkpoint_name;
    j["metrics"] = {{"em", report.em},
                    {"rouge_l", report.rouge_l},
                    {"prec_at_k", report.prec_at_k},
                    {"prec_at_2k", report.prec_at_2k},
                    {"mrr", report.mrr}};
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"query_id", r.query_id},
                        {"question", r.question},
                        {"rewrites", r.rewrites_used},
                        {"top_doc_ids", r.top_doc_ids},
                        {"prediction", r.prediction},
                        {"is_false_premise", r.is_false_premise},
                        {"em", r.em},
                        {"rouge_l", r.rouge_l},
                        {"prec_at_k", r.prec_at_k},
                        {"prec_at_2k", r.prec_at_2k},
                        {"mrr", r.mrr}});
    }
    j["rows"] = std::move(rows);
    return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    EvalReport report;
    report.setting.mode = eval_mode_from_string(j.at("setting").at("mode").get<std::string>());
    report.setting.order = context_order_from_string(j.at("setting").at("order").get<std::string>());
    report.setting.k = j.at("setting").at("k").get<int>();
    report.setting.num_rewrites = j.at("setting").at("num_rewrites").get<int>();
    report.setting.retrieval_depth = j.at("setting").value("retrieval_depth", 10);
    report.checkpoint_name = j.value("checkpoint", std::string{});
    report.em = j.at("metrics").at("em").get<double>();
    report.rouge_l = j.at("metrics").at("rouge_l").get<double>();
    report.prec_at_k = j.at("metrics").at("prec_at_k").get<double>();
    report.prec_at_2k = j.at("metrics").at("prec_at_2k").get<double>();
    report.mrr = j.at("metrics").at("mrr").get<double>();
    for (const auto& rj : j.at("rows")) {
        QueryRow r;
        r.query_id = rj.at("query_id").get<std::string>();
        r.question = rj.at("question").get<std::string>();
        r.rewrites_used = rj.at("rewrites").get<std::vector<std::string>>();
        r.top_doc_ids = rj.at("top_doc_ids").get<std::vector<std::string>>();
        r.prediction = rj.at("prediction").get<std::string>();
        r.is_false_premise = rj.at("is_false_premise").get<bool>();
        r.em = rj.at("em").get<double>();
        r.rouge_l = rj.at("rouge_l").get<double>();
        r.prec_at_k = rj.at("prec_at_k").get<double>();
        r.prec_at_2k = rj.at("prec_at_2k").get<double>();
        r.mrr = rj.at("mrr").get<double>();
        report.rows.push_back(std::move(r));
    }
    return report;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

}  // namespace

std::string report_rows_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "query_id,question,rewrites,top_doc_ids,prediction,is_false_premise,em,rouge_l,"
           "prec_at_k,prec_at_2k,mrr\n";
    for (const auto& r : report.rows) {
        std::string rewrites, docids;
        for (std::size_t i = 0; i < r.rewrites_used.size(); ++i)
            rewrites += (i ? "|" : "") + r.rewrites_used[i];
        for (std::size_t i = 0; i < r.top_doc_ids.size(); ++i)
            docids += (i ? "|" : "") + r.top_doc_ids[i];
        out << csv_escape(r.query_id) << ',' << csv_escape(r.question) << ','
            << csv_escape(rewrites) << ',' << csv_escape(docids) << ','
            << csv_escape(r.prediction) << ',' << (r.is_false_premise ? 1 : 0) << ',' << r.em << ','
            << r.rouge_l << ',' << r.prec_at_k << ',' << r.prec_at_2k << ',' << r.mrr << "\n";
    }
    return out.str();
}

}  // namespace rafe
