#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "rafe/common.hpp"

namespace rafe {

/// One retrievable text unit.
struct Document {
    std::string doc_id;
    std::string title;
    std::string body;
};

struct RetrievedEntry {
    std::string doc_id;
    double score = 0.0;
    int rank = 0;  // 1-based
};

struct RetrievedList {
    std::string query_text;
    std::vector<RetrievedEntry> entries;
};

/// Normalizes and splits raw text into tokens: fullwidth forms are folded to
/// their ASCII counterparts, letters are lowercased, punctuation acts as a
/// separator, and runs of CJK ideographs are emitted one character per token.
std::vector<std::string> tokenize_text(std::string_view text);

/// Inverted index with BM25 scoring over an immutable document store.
/// Building is single-threaded; searches on a built index are read-only.
class SearchIndex {
public:
    struct Posting {
        std::uint32_t doc_index = 0;  // position in docs()
        std::uint32_t term_freq = 0;
    };

    static constexpr double kBm25K1 = 1.2;
    static constexpr double kBm25B = 0.75;

    SearchIndex() = default;

    static SearchIndex build(const std::vector<Document>& documents);

    RetrievedList search(const std::string& query_text, int k) const;

    /// BM25 score of a single document for the query, 0 when nothing matches.
    double score_document(const std::vector<std::string>& query_tokens,
                          std::uint32_t doc_index) const;

    /// IDF with the +1 shift that keeps every term's weight positive.
    double idf(const std::string& term) const;
    double idf_for_doc_freq(std::size_t doc_freq) const;

    std::size_t doc_count() const { return docs_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }
    const std::vector<Document>& docs() const { return docs_; }
    const Document* find_doc(const std::string& doc_id) const;

    /// Term frequency vector of a document, by term id.
    const std::vector<std::pair<std::uint32_t, std::uint32_t>>& doc_terms(std::uint32_t doc_index) const {
        return doc_terms_[doc_index];
    }
    std::int64_t term_id(const std::string& term) const;
    std::size_t doc_freq(std::uint32_t term_id) const { return postings_[term_id].size(); }

    void save(const std::string& path) const;
    std::string serialize() const;
    static SearchIndex load(const std::string& path);
    static SearchIndex deserialize(std::string_view bytes);

private:
    std::vector<Document> docs_;
    std::unordered_map<std::string, std::uint32_t> doc_id_to_index_;
    std::vector<std::string> terms_;                       // term id -> term
    std::unordered_map<std::string, std::uint32_t> term_to_id_;
    std::vector<std::vector<Posting>> postings_;           // term id -> postings, doc_index ascending
    std::vector<std::uint32_t> doc_lengths_;               // token count per doc
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> doc_terms_;  // doc -> (term id, tf)
    double avg_doc_length_ = 0.0;
};

/// JSON Lines ingestion; each line holds {"doc_id","title","text"}.
std::vector<Document> read_documents_jsonl(const std::string& path);
void write_documents_jsonl(const std::string& path, const std::vector<Document>& docs);

}  // namespace rafe
