#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rafe/config.hpp"
#include "rafe/corpus.hpp"
#include "rafe/evaluation.hpp"
#include "rafe/policy.hpp"
#include "rafe/reranker.hpp"
#include "rafe/training.hpp"

namespace rafe {

struct WorldSpec {
    std::uint64_t seed = 42;
    int n_documents = 200;
    int n_queries = 200;
    int docs_per_entity = 8;
    int n_attributes = 8;          // canonical attribute terms
    int surface_per_attribute = 3; // surface variants per canonical term
    int n_filler_terms = 1800;     // document-only vocabulary; sized so junk terms stay rare
    double answer_planting_rate = 1.0;
};

struct SyntheticWorld {
    WorldSpec spec;
    std::vector<Document> documents;
    std::vector<QueryRecord> queries;
    std::vector<RewriteRecord> gold_rewrites;  // one per query, fully canonicalized
    std::map<std::string, std::string> obfuscation_map;  // surface -> canonical
    std::vector<std::string> entities;
    std::vector<std::string> attributes;
    // Self-check, measured once at generation time.
    double mean_gold_prec5 = 0.0;
    double mean_original_prec5 = 0.0;
    double strict_improvement_fraction = 0.0;
};

/// Documents in the canonical register; queries in the obfuscated register;
/// gold rewrites map queries back to canonical terms.
SyntheticWorld gen_synthetic_world(const WorldSpec& spec);

void write_world(const SyntheticWorld& world, const std::string& dir);
SyntheticWorld read_world(const std::string& dir);

enum class TeacherMode { synthetic, external };

/// External completion backends plug in here; tests ship a canned mock.
class TextCompletionAdapter {
public:
    virtual ~TextCompletionAdapter() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

/// Per query: full obfuscation-map application (the gold rewrite), the
/// identity, partial applications, and entity-noised variants, deduplicated.
std::vector<RewriteRecord> teacher_rewrites(const std::vector<QueryRecord>& queries,
                                            const SyntheticWorld& world, TeacherMode mode,
                                            int n_per_query, std::uint64_t seed,
                                            TextCompletionAdapter* adapter = nullptr);

struct SplitResult {
    std::vector<RewriteRecord> sft;
    std::vector<RewriteRecord> feedback;
};

/// Splits by query after a seeded shuffle; all rewrites of a query share a side.
SplitResult split_dataset(const std::vector<RewriteRecord>& records, double sft_fraction,
                          std::uint64_t seed);

struct ComparisonRow {
    std::string label;
    double em = 0.0, rouge_l = 0.0, prec_at_k = 0.0, prec_at_2k = 0.0, mrr = 0.0;
    double d_em = 0.0, d_prec_at_k = 0.0, d_prec_at_2k = 0.0, d_mrr = 0.0;  // vs the OQR row
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;
    std::string to_csv() const;
    std::string to_text() const;
};

ComparisonTable report_compare(const std::vector<EvalReport>& reports);

/// Orchestrates the staged workflow under one output directory, recording
/// inputs/outputs in manifest.json; reruns with unchanged inputs are no-ops.
class PipelineRun {
public:
    PipelineRun(Config config, std::string out_dir, std::int64_t seed_override = -1);

    /// Stages: world, index, teacher, split, sft, score, feedback-dpo,
    /// feedback-kto, feedback-ppo, eval, sweep.
    void run_stage(const std::string& stage, const std::map<std::string, std::string>& args = {});

    const Config& config() const { return config_; }
    const std::string& out_dir() const { return out_dir_; }
    std::uint64_t seed() const { return seed_; }

    std::string path(const std::string& relative) const;

    TrainConfig train_config() const;
    WorldSpec world_spec() const;
    PolicyConfig policy_config() const;
    EvalSetting eval_setting(const std::map<std::string, std::string>& args) const;

    struct StageRecord {
        std::map<std::string, std::uint64_t> input_hashes;
        std::map<std::string, std::uint64_t> output_hashes;
        double wall_ms = 0.0;
    };

private:
    Config config_;
    std::string out_dir_;
    std::uint64_t seed_;
    std::map<std::string, StageRecord> manifest_stages_;

    void load_manifest();
    void save_manifest();
    bool stage_fresh(const std::string& stage_key, const std::map<std::string, std::string>& inputs,
                     const std::vector<std::string>& outputs) const;
    void record_stage(const std::string& stage_key, const std::map<std::string, std::string>& inputs,
                      const std::vector<std::string>& outputs, double wall_ms);

    void stage_world();
    void stage_index();
    void stage_teacher();
    void stage_split();
    void stage_sft();
    void stage_score();
    void stage_offline(OfflineMethod method);
    void stage_ppo();
    void stage_eval(const std::map<std::string, std::string>& args);
    void stage_sweep(const std::map<std::string, std::string>& args);

    std::vector<QueryRecord> eval_queries() const;
    PolicyModel load_checkpoint(const std::string& name) const;
};

}  // namespace rafe
