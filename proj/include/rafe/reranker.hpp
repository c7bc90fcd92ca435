#pragma once

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rafe/corpus.hpp"

namespace rafe {

enum class RewriteLabel { unset, good, bad };
enum class Provenance { teacher, sft_model, feedback_model };

std::string to_string(RewriteLabel label);
std::string to_string(Provenance p);
RewriteLabel label_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

struct RewriteRecord {
    std::string query_id;
    std::string original_query;
    std::string rewrite;
    Provenance provenance = Provenance::teacher;
    std::optional<double> score;  // in [0,1] once set
    RewriteLabel label = RewriteLabel::unset;
};

struct PreferencePair {
    std::string query_id;
    std::string original_query;
    std::string good_rewrite;
    std::string bad_rewrite;
    double good_score = 0.0;
    double bad_score = 0.0;
};

struct FeedbackDataset {
    double mu = 0.0;
    std::vector<PreferencePair> pairs;
    std::vector<RewriteRecord> kto_examples;  // all labeled
    std::size_t n_good = 0;
    std::size_t n_bad = 0;
};

/// Scores a (query, document) pair in [0,1]. Implementations must be pure.
class PairScorer {
public:
    virtual ~PairScorer() = default;
    virtual double score(const std::string& query, const Document& document) const = 0;
};

/// Reference scorer: cosine similarity between TF-IDF term vectors, with
/// IDF taken from the corpus index. Bounded, deterministic, closed-form.
class TfidfCosineScorer : public PairScorer {
public:
    explicit TfidfCosineScorer(const SearchIndex& index) : index_(&index) {}
    double score(const std::string& query, const Document& document) const override;

private:
    const SearchIndex* index_;
};

struct RewriteScore {
    double value = 0.0;
    bool empty_retrieval = false;
};

/// Mean scorer output of the original query against the documents retrieved
/// by the rewrite. An empty retrieval yields 0 with the flag set.
RewriteScore score_rewrite(const std::string& original_query, const std::string& rewrite,
                           const SearchIndex& index, const PairScorer& scorer, int k);

/// Global mean of rewrite scores; the good/bad threshold.
double compute_threshold(const std::vector<RewriteRecord>& records);

/// good iff score > mu, strictly.
void label_rewrites(std::vector<RewriteRecord>& records, double mu);

struct PairBuildOptions {
    std::size_t max_pairs_per_query = 4;  // largest score-gap first
};

FeedbackDataset build_preference_pairs(const std::vector<RewriteRecord>& labeled, double mu,
                                       const PairBuildOptions& options = {});

/// Documents sorted by scorer output descending; ties by doc_id ascending;
/// duplicate doc_ids collapsed keeping the first instance.
RetrievedList rank_documents(const std::string& original_query,
                             const std::vector<Document>& documents,
                             const PairScorer& scorer);

/// Alternative labeling from retrieval precision: good iff the rewrite's
/// Prec@k beats the original query's own Prec@k.
void precision_feedback_labels(
    std::vector<RewriteRecord>& records, const SearchIndex& index,
    const std::unordered_map<std::string, std::vector<std::string>>& answers_by_query, int k);

// FeedbackDataset persistence (JSON Lines + sidecar metadata).
void write_feedback_dataset(const FeedbackDataset& ds, const std::string& pairs_path,
                            const std::string& kto_path, const std::string& meta_path);
FeedbackDataset read_feedback_dataset(const std::string& pairs_path, const std::string& kto_path,
                                      const std::string& meta_path);

std::vector<RewriteRecord> read_rewrites_jsonl(const std::string& path);
void write_rewrites_jsonl(const std::string& path, const std::vector<RewriteRecord>& records);

}  // namespace rafe
