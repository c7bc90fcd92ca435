#pragma once

#include <string>
#include <vector>

#include "rafe/corpus.hpp"
#include "rafe/reranker.hpp"

namespace rafe {

enum class EvalMode { substitute, expand, oqr };
enum class ContextOrder { raw, ranked };

std::string to_string(EvalMode m);
std::string to_string(ContextOrder o);
EvalMode eval_mode_from_string(const std::string& s);
ContextOrder context_order_from_string(const std::string& s);

struct EvalSetting {
    EvalMode mode = EvalMode::expand;
    ContextOrder order = ContextOrder::raw;
    int k = 5;             // context size and Prec@K cut
    int num_rewrites = 2;  // expand only
    int retrieval_depth = 10;

    std::string name() const;
};

struct QueryRecord {
    std::string query_id;
    std::string question;
    std::vector<std::string> answers;
    bool is_false_premise = false;
};

struct QueryRow {
    std::string query_id;
    std::string question;
    std::vector<std::string> rewrites_used;
    std::vector<std::string> top_doc_ids;
    std::string prediction;
    bool is_false_premise = false;
    double em = 0.0;
    double rouge_l = 0.0;
    double prec_at_k = 0.0;
    double prec_at_2k = 0.0;
    double mrr = 0.0;
};

struct EvalReport {
    EvalSetting setting;
    std::string checkpoint_name;
    double em = 0.0;       // over non-false-premise rows
    double rouge_l = 0.0;  // over false-premise rows
    double prec_at_k = 0.0;
    double prec_at_2k = 0.0;
    double mrr = 0.0;
    std::vector<QueryRow> rows;
};

struct AssembledContext {
    std::vector<Document> docs;
    bool empty_inputs = false;
};

/// Orders retrieved lists into a context of at most `limit` documents.
/// Raw keeps engine order (round-robin across lists for expand); ranked
/// merges, dedups, and sorts by the scorer against the original query.
AssembledContext assemble_context(const EvalSetting& setting, const RetrievedList& original,
                                  const std::vector<RetrievedList>& rewrite_lists,
                                  const PairScorer& scorer, const std::string& original_query,
                                  const SearchIndex& index, int limit);

/// QA answer normalization: lowercase, punctuation stripped, whitespace
/// collapsed, one leading English article removed.
std::string normalize_answer(const std::string& text);

double exact_match(const std::string& prediction, const std::vector<std::string>& answers);

/// Token-level LCS F1. Multiple references take the maximum.
double rouge_l(const std::string& prediction, const std::string& reference);
double rouge_l(const std::string& prediction, const std::vector<std::string>& references);

bool doc_contains_answer(const Document& doc, const std::vector<std::string>& answers);

/// Fraction of the top-min(k,|docs|) documents containing an answer, with
/// denominator k (missing documents count as misses).
double precision_at_k(const std::vector<Document>& context, const std::vector<std::string>& answers,
                      int k);

double mrr(const std::vector<Document>& context, const std::vector<std::string>& answers);

/// Deterministic extractive answerer: first answer string contained in any
/// context document, else "unknown".
std::string oracle_answer(const std::vector<Document>& context,
                          const std::vector<std::string>& answers);

class PolicyModel;  // policy.hpp

struct EvalGenConfig {
    double temperature = 0.8;
    int max_new_tokens = 24;
    std::uint64_t seed = 0;
};

EvalReport evaluate(const PolicyModel* policy, const std::vector<QueryRecord>& queries,
                    const SearchIndex& index, const PairScorer& scorer, const EvalSetting& setting,
                    const EvalGenConfig& gen);

std::vector<QueryRecord> read_queries_jsonl(const std::string& path);
void write_queries_jsonl(const std::string& path, const std::vector<QueryRecord>& queries);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& json_text);
std::string report_rows_csv(const EvalReport& report);

}  // namespace rafe
