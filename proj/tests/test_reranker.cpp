#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rafe/evaluation.hpp"
#include "rafe/reranker.hpp"

using namespace rafe;

namespace {

// Scorer stub keyed on document id; used where tests need exact scores.
class TableScorer : public PairScorer {
public:
    explicit TableScorer(std::unordered_map<std::string, double> table, double fallback = 0.0)
        : table_(std::move(table)), fallback_(fallback) {}
    double score(const std::string&, const Document& d) const override {
        auto it = table_.find(d.doc_id);
        return it == table_.end() ? fallback_ : it->second;
    }

private:
    std::unordered_map<std::string, double> table_;
    double fallback_;
};

class ScaledScorer : public PairScorer {
public:
    ScaledScorer(const PairScorer& inner, double factor) : inner_(&inner), factor_(factor) {}
    double score(const std::string& q, const Document& d) const override {
        return factor_ * inner_->score(q, d);
    }

private:
    const PairScorer* inner_;
    double factor_;
};

RewriteRecord rec(const std::string& qid, const std::string& query, const std::string& rewrite,
                  double score) {
    RewriteRecord r;
    r.query_id = qid;
    r.original_query = query;
    r.rewrite = rewrite;
    r.score = score;
    return r;
}

SearchIndex small_index() {
    return SearchIndex::build({{"d1", "tall", "tall building"},
                               {"d2", "river", "river delta water"},
                               {"d3", "tower", "tall tower stands"},
                               {"d4", "plains", "flat plains grass"}});
}

}  // namespace

TEST_CASE("score_pair on identical and disjoint texts") {
    SearchIndex idx = small_index();
    TfidfCosineScorer scorer(idx);
    Document same{"dx", "", "tall building"};
    CHECK(scorer.score("tall building", same) == doctest::Approx(1.0).epsilon(1e-12));
    Document other{"dy", "", "river delta"};
    CHECK(scorer.score("tall building", other) == doctest::Approx(0.0));
    Document empty_doc{"dz", "", "..."};
    CHECK(scorer.score("tall", empty_doc) == 0.0);  // doc tokenizes to nothing
}

TEST_CASE("score_pair matches the hand-computed cosine") {
    SearchIndex idx = small_index();
    TfidfCosineScorer scorer(idx);
    // query {tall, tower} vs doc {tall, building}; shared term: tall.
    const double i_tall = idx.idf("tall");
    const double i_tower = idx.idf("tower");
    const double i_building = idx.idf("building");
    const double expected =
        (i_tall * i_tall) /
        (std::sqrt(i_tall * i_tall + i_tower * i_tower) *
         std::sqrt(i_tall * i_tall + i_building * i_building));
    Document doc{"dq", "", "tall building"};
    CHECK(scorer.score("tall tower", doc) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("score_rewrite averages retrieved pair scores") {
    SearchIndex idx = small_index();

    TableScorer constant({{"d1", 0.7}, {"d2", 0.7}, {"d3", 0.7}, {"d4", 0.7}});
    RewriteScore s = score_rewrite("anything", "tall", idx, constant, 5);
    CHECK_FALSE(s.empty_retrieval);
    CHECK(s.value == doctest::Approx(0.7));

    // "tall river grass" retrieves d1, d3 (tall), d2 (river), d4 (grass).
    TableScorer mixed({{"d1", 0.2}, {"d3", 0.4}, {"d2", 0.6}, {"d4", 0.8}});
    RewriteScore m = score_rewrite("q", "tall river", idx, mixed, 5);
    CHECK(m.value == doctest::Approx((0.2 + 0.4 + 0.6) / 3.0));

    RewriteScore e = score_rewrite("q", "zeppelin", idx, mixed, 5);
    CHECK(e.empty_retrieval);
    CHECK(e.value == 0.0);
}

TEST_CASE("score_rewrite only depends on the retrieved set, not its order") {
    SearchIndex idx = small_index();
    TfidfCosineScorer scorer(idx);
    RewriteScore s = score_rewrite("tall tower", "tall river grass", idx, scorer, 4);
    // Independent mean over the same retrieved set, summed in reverse order.
    auto entries = idx.search("tall river grass", 4).entries;
    REQUIRE(!entries.empty());
    double sum = 0.0;
    for (auto it = entries.rbegin(); it != entries.rend(); ++it)
        sum += scorer.score("tall tower", *idx.find_doc(it->doc_id));
    CHECK(s.value == doctest::Approx(sum / entries.size()).epsilon(1e-12));
}

TEST_CASE("compute_threshold is the flat mean") {
    std::vector<RewriteRecord> rs = {rec("a", "q", "r1", 0.1), rec("a", "q", "r2", 0.3),
                                     rec("b", "q", "r3", 0.5), rec("b", "q", "r4", 0.7)};
    CHECK(compute_threshold(rs) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(compute_threshold({rec("a", "q", "r", 0.9)}) == doctest::Approx(0.9));
    CHECK_THROWS_AS(compute_threshold({}), Error);

    SplitMix64 rng(3);
    std::vector<RewriteRecord> many;
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) {
        const double v = rng.uniform();
        sum += v;
        many.push_back(rec("q" + std::to_string(i), "q", "r", v));
    }
    CHECK(std::abs(compute_threshold(many) - sum / 10.0) < 1e-12);
}

TEST_CASE("label_rewrites uses a strict threshold") {
    std::vector<RewriteRecord> rs = {rec("a", "q", "r1", 0.41), rec("a", "q", "r2", 0.4)};
    label_rewrites(rs, 0.4);
    CHECK(rs[0].label == RewriteLabel::good);
    CHECK(rs[1].label == RewriteLabel::bad);

    std::vector<RewriteRecord> uniform = {rec("a", "q", "r1", 0.5), rec("b", "q", "r2", 0.5),
                                          rec("c", "q", "r3", 0.5)};
    label_rewrites(uniform, compute_threshold(uniform));
    for (const auto& r : uniform) CHECK(r.label == RewriteLabel::bad);
}

TEST_CASE("build_preference_pairs crosses goods with bads") {
    std::vector<RewriteRecord> rs = {rec("a", "q", "g1", 0.8), rec("a", "q", "b1", 0.2),
                                     rec("a", "q", "b2", 0.1)};
    label_rewrites(rs, 0.5);
    FeedbackDataset ds = build_preference_pairs(rs, 0.5);
    REQUIRE(ds.pairs.size() == 2);
    CHECK(ds.pairs[0].good_rewrite == "g1");
    CHECK(ds.n_good == 1);
    CHECK(ds.n_bad == 2);
    CHECK(ds.kto_examples.size() == 3);
}

TEST_CASE("all-good queries contribute KTO examples but no pairs") {
    std::vector<RewriteRecord> rs = {rec("a", "q", "g1", 0.9), rec("a", "q", "g2", 0.8),
                                     rec("a", "q", "g3", 0.7)};
    label_rewrites(rs, 0.5);
    FeedbackDataset ds = build_preference_pairs(rs, 0.5);
    CHECK(ds.pairs.empty());
    CHECK(ds.kto_examples.size() == 3);
    CHECK(ds.n_good == 3);
}

TEST_CASE("pair cap keeps the largest score gaps") {
    std::vector<RewriteRecord> rs;
    const double goods[] = {0.9, 0.8, 0.7};
    const double bads[] = {0.3, 0.2, 0.1};
    for (int i = 0; i < 3; ++i) rs.push_back(rec("a", "q", "g" + std::to_string(i), goods[i]));
    for (int i = 0; i < 3; ++i) rs.push_back(rec("a", "q", "b" + std::to_string(i), bads[i]));
    label_rewrites(rs, 0.5);
    FeedbackDataset ds = build_preference_pairs(rs, 0.5);
    REQUIRE(ds.pairs.size() == 4);

    // Brute-force enumeration of all nine gaps.
    std::vector<double> gaps;
    for (double g : goods)
        for (double b : bads) gaps.push_back(g - b);
    std::sort(gaps.rbegin(), gaps.rend());
    std::vector<double> kept;
    for (const auto& p : ds.pairs) kept.push_back(p.good_score - p.bad_score);
    std::sort(kept.rbegin(), kept.rend());
    for (int i = 0; i < 4; ++i) CHECK(kept[i] == doctest::Approx(gaps[i]));
}

TEST_CASE("every pair respects the dataset threshold") {
    SplitMix64 rng(9);
    std::vector<RewriteRecord> rs;
    for (int q = 0; q < 12; ++q)
        for (int r = 0; r < 5; ++r)
            rs.push_back(rec("q" + std::to_string(q), "orig", "rw" + std::to_string(r),
                             rng.uniform()));
    const double mu = compute_threshold(rs);
    label_rewrites(rs, mu);
    FeedbackDataset ds = build_preference_pairs(rs, mu);
    CHECK(!ds.pairs.empty());
    for (const auto& p : ds.pairs) {
        CHECK(p.good_score > ds.mu);
        CHECK(p.bad_score <= ds.mu);
        CHECK(p.good_rewrite != p.bad_rewrite);
    }
    CHECK(ds.n_good + ds.n_bad == ds.kto_examples.size());
}

TEST_CASE("labels are invariant to a positive scorer rescaling") {
    SearchIndex idx = small_index();
    TfidfCosineScorer base(idx);
    ScaledScorer scaled(base, 3.5);

    std::vector<std::string> rewrites = {"tall", "river water", "tall tower", "flat grass plains"};
    std::vector<RewriteRecord> a, b;
    for (std::size_t i = 0; i < rewrites.size(); ++i) {
        a.push_back(rec("q" + std::to_string(i), "tall tower", rewrites[i],
                        score_rewrite("tall tower", rewrites[i], idx, base, 3).value));
        b.push_back(rec("q" + std::to_string(i), "tall tower", rewrites[i],
                        score_rewrite("tall tower", rewrites[i], idx, scaled, 3).value));
    }
    const double mu_a = compute_threshold(a);
    const double mu_b = compute_threshold(b);
    CHECK(mu_b == doctest::Approx(3.5 * mu_a).epsilon(1e-12));
    label_rewrites(a, mu_a);
    label_rewrites(b, mu_b);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].label == b[i].label);
}

TEST_CASE("rank_documents sorts, dedups, and breaks ties by id") {
    TableScorer scorer({{"da", 0.9}, {"db", 0.1}, {"dc", 0.5}});
    std::vector<Document> docs = {{"da", "", "x"}, {"db", "", "y"}, {"dc", "", "z"}};
    RetrievedList r = rank_documents("q", docs, scorer);
    REQUIRE(r.entries.size() == 3);
    CHECK(r.entries[0].doc_id == "da");
    CHECK(r.entries[1].doc_id == "dc");
    CHECK(r.entries[2].doc_id == "db");
    for (std::size_t i = 1; i < r.entries.size(); ++i)
        CHECK(r.entries[i].score <= r.entries[i - 1].score);

    std::vector<Document> dup = {{"da", "", "x"}, {"da", "", "x"}, {"db", "", "y"}};
    CHECK(rank_documents("q", dup, scorer).entries.size() == 2);

    TableScorer equal({{"da", 0.5}, {"db", 0.5}, {"dc", 0.5}});
    RetrievedList tie = rank_documents("q", docs, equal);
    CHECK(tie.entries[0].doc_id == "da");
    CHECK(tie.entries[1].doc_id == "db");
    CHECK(tie.entries[2].doc_id == "dc");
}

TEST_CASE("precision feedback labels compare against the original query") {
    SearchIndex idx = SearchIndex::build({{"d1", "", "lamp bright lumen42"},
                                          {"d2", "", "lamp dim shade"},
                                          {"d3", "", "candle wax"}});
    std::unordered_map<std::string, std::vector<std::string>> answers{{"q1", {"lumen42"}}};
    std::vector<RewriteRecord> rs = {rec("q1", "glow thing", "lamp", 0.0),
                                     rec("q1", "glow thing", "candle", 0.0)};
    rs[0].score.reset();
    rs[1].score.reset();
    precision_feedback_labels(rs, idx, answers, 5);
    CHECK(rs[0].label == RewriteLabel::good);  // beats the original query's zero
    CHECK(rs[1].label == RewriteLabel::bad);   // equal precision is not enough

    std::vector<RewriteRecord> missing = {rec("qx", "glow", "lamp", 0.0)};
    CHECK_THROWS_AS(precision_feedback_labels(missing, idx, answers, 5), Error);
}

TEST_CASE("precision feedback labels match an independent recomputation") {
    SplitMix64 rng(17);
    const std::vector<std::string> vocab = {"sun", "moon", "rock", "tree", "fish", "bird",
                                            "sand", "wave", "hill", "leaf"};
    std::vector<Document> docs;
    for (int d = 0; d < 30; ++d) {
        std::string body;
        for (int t = 0; t < 6; ++t) body += vocab[rng.below(vocab.size())] + " ";
        if (rng.uniform() < 0.4) body += "goldenanswer" + std::to_string(d % 5);
        docs.push_back({"d" + std::to_string(d), "", body});
    }
    SearchIndex idx = SearchIndex::build(docs);

    std::vector<RewriteRecord> rs;
    std::unordered_map<std::string, std::vector<std::string>> answers;
    for (int q = 0; q < 20; ++q) {
        const std::string qid = "q" + std::to_string(q);
        answers[qid] = {"goldenanswer" + std::to_string(q % 5)};
        std::string orig = vocab[rng.below(vocab.size())] + " " + vocab[rng.below(vocab.size())];
        for (int r = 0; r < 2; ++r) {
            std::string rw = vocab[rng.below(vocab.size())] + " " + vocab[rng.below(vocab.size())];
            RewriteRecord record = rec(qid, orig, rw, 0.0);
            record.score.reset();
            rs.push_back(record);
        }
    }
    auto labeled = rs;
    precision_feedback_labels(labeled, idx, answers, 5);

    auto prec = [&](const std::string& text, const std::vector<std::string>& ans) {
        std::vector<Document> ctx;
        for (const auto& e : idx.search(text, 5).entries) ctx.push_back(*idx.find_doc(e.doc_id));
        return precision_at_k(ctx, ans, 5);
    };
    for (std::size_t i = 0; i < rs.size(); ++i) {
        const bool expect_good = prec(rs[i].rewrite, answers[rs[i].query_id]) >
                                 prec(rs[i].original_query, answers[rs[i].query_id]);
        CHECK(labeled[i].label == (expect_good ? RewriteLabel::good : RewriteLabel::bad));
    }
}

TEST_CASE("feedback dataset round-trips through JSONL") {
    std::vector<RewriteRecord> rs = {rec("a", "q", "g1", 0.8), rec("a", "q", "b1", 0.2),
                                     rec("b", "q2", "g2", 0.9), rec("b", "q2", "b2", 0.3)};
    const double mu = compute_threshold(rs);
    label_rewrites(rs, mu);
    FeedbackDataset ds = build_preference_pairs(rs, mu);

    const std::string base = "/tmp/rafe_fbds_test";
    write_feedback_dataset(ds, base + "_pairs.jsonl", base + "_kto.jsonl", base + "_meta.json");
    FeedbackDataset back =
        read_feedback_dataset(base + "_pairs.jsonl", base + "_kto.jsonl", base + "_meta.json");
    CHECK(back.mu == doctest::Approx(ds.mu));
    CHECK(back.pairs.size() == ds.pairs.size());
    CHECK(back.kto_examples.size() == ds.kto_examples.size());
    CHECK(back.n_good == ds.n_good);
    CHECK(back.n_bad == ds.n_bad);
    CHECK(back.kto_examples[1].label == RewriteLabel::bad);
}
