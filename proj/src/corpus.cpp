#include "rafe/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace rafe {

namespace {

bool is_cjk(char32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) ||   // unified ideographs
           (cp >= 0x3400 && cp <= 0x4DBF) ||   // extension A
           (cp >= 0xF900 && cp <= 0xFAFF);     // compatibility ideographs
}

bool is_cjk_punct(char32_t cp) {
    return cp == 0x3001 || cp == 0x3002 || cp == 0x300A || cp == 0x300B ||
           cp == 0x300C || cp == 0x300D || cp == 0x2018 || cp == 0x2019 ||
           cp == 0x201C || cp == 0x201D || cp == 0x2013 || cp == 0x2014 ||
           cp == 0x2026;
}

// Decodes one UTF-8 codepoint; malformed bytes decode as U+FFFD one byte at a time.
char32_t decode_utf8(std::string_view s, std::size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
        ++i;
        return c;
    }
    int extra = 0;
    char32_t cp = 0;
    if ((c & 0xE0) == 0xC0) { cp = c & 0x1F; extra = 1; }
    else if ((c & 0xF0) == 0xE0) { cp = c & 0x0F; extra = 2; }
    else if ((c & 0xF8) == 0xF0) { cp = c & 0x07; extra = 3; }
    else { ++i; return 0xFFFD; }
    if (i + static_cast<std::size_t>(extra) >= s.size()) {
        ++i;
        return 0xFFFD;
    }
    for (int k = 1; k <= extra; ++k) {
        unsigned char cc = static_cast<unsigned char>(s[i + k]);
        if ((cc & 0xC0) != 0x80) { ++i; return 0xFFFD; }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += static_cast<std::size_t>(extra) + 1;
    return cp;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

void put_le32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

std::uint32_t get_le32(std::string_view s, std::size_t offset) {
    if (offset + 4 > s.size()) raise(ErrorCode::io_error, "index file truncated");
    return static_cast<std::uint32_t>(static_cast<unsigned char>(s[offset])) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(s[offset + 1])) << 8) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(s[offset + 2])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(s[offset + 3])) << 24);
}

constexpr char kIndexMagic[] = "RAFEIDX1";

}  // namespace

std::vector<std::string> tokenize_text(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    };
    std::size_t i = 0;
    while (i < text.size()) {
        char32_t cp = decode_utf8(text, i);
        // Compatibility fold: fullwidth ASCII block and ideographic space.
        if (cp >= 0xFF01 && cp <= 0xFF5E) cp = cp - 0xFF01 + 0x21;
        if (cp == 0x3000) cp = 0x20;

        if (cp <= 0x7F) {
            char c = static_cast<char>(cp);
            if (std::isalnum(static_cast<unsigned char>(c))) {
                current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            } else {
                flush();  // whitespace and punctuation both separate
            }
        } else if (is_cjk(cp)) {
            flush();
            std::string one;
            append_utf8(one, cp);
            tokens.push_back(std::move(one));
        } else if (is_cjk_punct(cp) || cp == 0xFFFD) {
            flush();
        } else {
            // Other non-ASCII letters pass through unchanged.
            append_utf8(current, cp);
        }
    }
    flush();
    return tokens;
}

SearchIndex SearchIndex::build(const std::vector<Document>& documents) {
    SearchIndex index;
    index.docs_ = documents;
    index.doc_lengths_.resize(documents.size(), 0);
    index.doc_terms_.resize(documents.size());

    for (std::uint32_t d = 0; d < documents.size(); ++d) {
        const Document& doc = documents[d];
        if (doc.doc_id.empty()) raise(ErrorCode::invalid_argument, "document has empty doc_id");
        auto [it, inserted] = index.doc_id_to_index_.emplace(doc.doc_id, d);
        if (!inserted) raise(ErrorCode::invalid_argument, "duplicate doc_id: " + doc.doc_id);
        if (doc.title.empty() && doc.body.empty())
            raise(ErrorCode::invalid_argument, "document " + doc.doc_id + " has empty title and body");

        auto tokens = tokenize_text(doc.title + " " + doc.body);
        index.doc_lengths_[d] = static_cast<std::uint32_t>(tokens.size());

        std::map<std::string, std::uint32_t> counts;  // ordered for deterministic term-id assignment
        for (auto& t : tokens) counts[t]++;
        for (auto& [term, tf] : counts) {
            auto tit = index.term_to_id_.find(term);
            std::uint32_t tid;
            if (tit == index.term_to_id_.end()) {
                tid = static_cast<std::uint32_t>(index.terms_.size());
                index.term_to_id_.emplace(term, tid);
                index.terms_.push_back(term);
                index.postings_.emplace_back();
            } else {
                tid = tit->second;
            }
            index.postings_[tid].push_back({d, tf});  // doc indexes arrive ascending
            index.doc_terms_[d].emplace_back(tid, tf);
        }
    }

    // Canonical per-document term order, matching what deserialization produces.
    for (auto& terms : index.doc_terms_)
        std::sort(terms.begin(), terms.end());

    std::uint64_t total = 0;
    for (auto len : index.doc_lengths_) total += len;
    index.avg_doc_length_ = index.docs_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(index.docs_.size());
    return index;
}

double SearchIndex::idf_for_doc_freq(std::size_t doc_freq) const {
    const double n = static_cast<double>(docs_.size());
    const double df = static_cast<double>(doc_freq);
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

double SearchIndex::idf(const std::string& term) const {
    auto it = term_to_id_.find(term);
    return idf_for_doc_freq(it == term_to_id_.end() ? 0 : postings_[it->second].size());
}

std::int64_t SearchIndex::term_id(const std::string& term) const {
    auto it = term_to_id_.find(term);
    return it == term_to_id_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

double SearchIndex::score_document(const std::vector<std::string>& query_tokens,
                                   std::uint32_t doc_index) const {
    // Distinct query terms contribute once each (Robertson formulation).
    std::vector<std::string> distinct = query_tokens;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    double score = 0.0;
    const double len_norm = kBm25K1 * (1.0 - kBm25B + kBm25B * doc_lengths_[doc_index] / avg_doc_length_);
    for (const auto& term : distinct) {
        auto it = term_to_id_.find(term);
        if (it == term_to_id_.end()) continue;
        const auto& plist = postings_[it->second];
        auto pit = std::lower_bound(plist.begin(), plist.end(), doc_index,
                                    [](const Posting& p, std::uint32_t d) { return p.doc_index < d; });
        if (pit == plist.end() || pit->doc_index != doc_index) continue;
        const double tf = pit->term_freq;
        score += idf_for_doc_freq(plist.size()) * tf * (kBm25K1 + 1.0) / (tf + len_norm);
    }
    return score;
}

RetrievedList SearchIndex::search(const std::string& query_text, int k) const {
    if (k < 1) raise(ErrorCode::invalid_argument, "search: k must be >= 1");
    RetrievedList result;
    result.query_text = query_text;
    auto tokens = tokenize_text(query_text);
    if (tokens.empty()) {
        log_warn("search: query tokenizes to empty, returning no results");
        return result;
    }
    if (docs_.empty()) return result;

    std::vector<std::string> distinct = tokens;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    // Accumulate BM25 contributions over the union of posting lists.
    std::vector<double> scores(docs_.size(), 0.0);
    std::vector<char> touched(docs_.size(), 0);
    for (const auto& term : distinct) {
        auto it = term_to_id_.find(term);
        if (it == term_to_id_.end()) continue;
        const auto& plist = postings_[it->second];
        const double idf = idf_for_doc_freq(plist.size());
        for (const auto& p : plist) {
            const double len_norm =
                kBm25K1 * (1.0 - kBm25B + kBm25B * doc_lengths_[p.doc_index] / avg_doc_length_);
            scores[p.doc_index] += idf * p.term_freq * (kBm25K1 + 1.0) / (p.term_freq + len_norm);
            touched[p.doc_index] = 1;
        }
    }

    std::vector<std::uint32_t> candidates;
    for (std::uint32_t d = 0; d < docs_.size(); ++d)
        if (touched[d]) candidates.push_back(d);

    std::sort(candidates.begin(), candidates.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return docs_[a].doc_id < docs_[b].doc_id;
    });
    if (candidates.size() > static_cast<std::size_t>(k)) candidates.resize(static_cast<std::size_t>(k));

    int rank = 1;
    for (auto d : candidates)
        result.entries.push_back({docs_[d].doc_id, scores[d], rank++});
    return result;
}

const Document* SearchIndex::find_doc(const std::string& doc_id) const {
    auto it = doc_id_to_index_.find(doc_id);
    return it == doc_id_to_index_.end() ? nullptr : &docs_[it->second];
}

std::string SearchIndex::serialize() const {
    nlohmann::json header;
    header["version"] = 1;
    header["k1"] = kBm25K1;
    header["b"] = kBm25B;
    header["doc_count"] = docs_.size();
    header["avg_doc_length"] = avg_doc_length_;
    nlohmann::json docs = nlohmann::json::array();
    for (std::size_t d = 0; d < docs_.size(); ++d) {
        docs.push_back({{"doc_id", docs_[d].doc_id},
                        {"title", docs_[d].title},
                        {"text", docs_[d].body},
                        {"length", doc_lengths_[d]}});
    }
    header["docs"] = std::move(docs);
    header["vocabulary"] = terms_;
    std::vector<std::size_t> counts;
    counts.reserve(postings_.size());
    for (const auto& p : postings_) counts.push_back(p.size());
    header["posting_counts"] = counts;

    std::string out(kIndexMagic, 8);
    const std::string header_str = header.dump();
    put_le32(out, static_cast<std::uint32_t>(header_str.size()));
    out += header_str;
    // Postings follow in vocabulary order: (doc_index, term_freq) pairs.
    for (const auto& plist : postings_) {
        for (const auto& p : plist) {
            put_le32(out, p.doc_index);
            put_le32(out, p.term_freq);
        }
    }
    return out;
}

void SearchIndex::save(const std::string& path) const {
    write_text_file(path, serialize());
}

SearchIndex SearchIndex::deserialize(std::string_view bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kIndexMagic, 8) != 0)
        raise(ErrorCode::io_error, "not a RAFEIDX1 index file");
    const std::uint32_t header_len = get_le32(bytes, 8);
    if (12 + static_cast<std::size_t>(header_len) > bytes.size())
        raise(ErrorCode::io_error, "index file truncated (header)");
    nlohmann::json header = nlohmann::json::parse(bytes.substr(12, header_len));

    SearchIndex index;
    index.avg_doc_length_ = header.at("avg_doc_length").get<double>();
    for (const auto& d : header.at("docs")) {
        Document doc{d.at("doc_id").get<std::string>(), d.at("title").get<std::string>(),
                     d.at("text").get<std::string>()};
        index.doc_id_to_index_.emplace(doc.doc_id, static_cast<std::uint32_t>(index.docs_.size()));
        index.docs_.push_back(std::move(doc));
        index.doc_lengths_.push_back(d.at("length").get<std::uint32_t>());
    }
    index.terms_ = header.at("vocabulary").get<std::vector<std::string>>();
    for (std::uint32_t t = 0; t < index.terms_.size(); ++t)
        index.term_to_id_.emplace(index.terms_[t], t);
    auto counts = header.at("posting_counts").get<std::vector<std::size_t>>();
    if (counts.size() != index.terms_.size())
        raise(ErrorCode::io_error, "index header: posting_counts/vocabulary size mismatch");

    index.doc_terms_.resize(index.docs_.size());
    index.postings_.resize(index.terms_.size());
    std::size_t offset = 12 + header_len;
    for (std::uint32_t t = 0; t < counts.size(); ++t) {
        index.postings_[t].reserve(counts[t]);
        for (std::size_t i = 0; i < counts[t]; ++i) {
            Posting p;
            p.doc_index = get_le32(bytes, offset);
            p.term_freq = get_le32(bytes, offset + 4);
            offset += 8;
            if (p.doc_index >= index.docs_.size())
                raise(ErrorCode::io_error, "index postings reference unknown document");
            index.postings_[t].push_back(p);
            index.doc_terms_[p.doc_index].emplace_back(t, p.term_freq);
        }
    }
    return index;
}

SearchIndex SearchIndex::load(const std::string& path) {
    return deserialize(read_text_file(path));
}

std::vector<Document> read_documents_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::io_error, "cannot open documents file: " + path);
    std::vector<Document> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            raise(ErrorCode::io_error, "malformed JSON at " + path + ":" + std::to_string(line_no));
        docs.push_back({j.at("doc_id").get<std::string>(), j.value("title", std::string{}),
                        j.value("text", std::string{})});
    }
    return docs;
}

void write_documents_jsonl(const std::string& path, const std::vector<Document>& docs) {
    std::ostringstream out;
    for (const auto& d : docs) {
        nlohmann::json j{{"doc_id", d.doc_id}, {"title", d.title}, {"text", d.body}};
        out << j.dump() << "\n";
    }
    write_text_file(path, out.str());
}

}  // namespace rafe
