// rafe command-line interface. Talks to the core exclusively through the
// C API in rafe/rafe_c.h; the shared library does all the work.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rafe/rafe_c.h"

namespace {

struct GlobalOpts {
    std::string config;
    std::string out = "runs/default";
    std::int64_t seed = -1;
};

int fail(rafe_status status) {
    std::fprintf(stderr, "error (%d): %s\n", status, rafe_last_error());
    return 1;
}

int run_stage(const GlobalOpts& g, const std::string& stage, const std::string& args = {}) {
    rafe_run* run = nullptr;
    rafe_status st = rafe_run_open(g.config.empty() ? nullptr : g.config.c_str(), g.out.c_str(),
                                   g.seed, &run);
    if (st != RAFE_OK) return fail(st);
    st = rafe_run_stage(run, stage.c_str(), args.empty() ? nullptr : args.c_str());
    rafe_run_close(run);
    if (st != RAFE_OK) return fail(st);
    std::printf("stage %s done (out: %s)\n", stage.c_str(), g.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rafe: query-rewriting feedback laboratory"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config, "Config file (key = value sections)");
    app.add_option("--out", g.out, "Run output directory");
    app.add_option("--seed", g.seed, "Seed override (>= 0)");

    int rc = 0;

    auto* world = app.add_subcommand("world", "Synthetic world operations")->require_subcommand(1);
    world->add_subcommand("gen", "Generate documents, queries, and gold rewrites")
        ->callback([&] { rc = run_stage(g, "world"); });

    auto* index = app.add_subcommand("index", "Retrieval index operations")->require_subcommand(1);
    {
        auto* build = index->add_subcommand("build", "Build the BM25 index");
        static std::string docs, out_path;
        build->add_option("--docs", docs, "Documents JSONL (outside a run directory)");
        build->add_option("--out-index", out_path, "Index output path (with --docs)");
        build->callback([&] {
            if (!docs.empty()) {
                rafe_status st = rafe_index_build_file(docs.c_str(), out_path.c_str());
                rc = st == RAFE_OK ? 0 : fail(st);
            } else {
                rc = run_stage(g, "index");
            }
        });

        auto* search = index->add_subcommand("search", "Query an index file");
        static std::string index_path, query;
        static int k = 10;
        search->add_option("--index", index_path, "Index file")->required();
        search->add_option("--query", query, "Query text")->required();
        search->add_option("-k", k, "Results to return");
        search->callback([&] {
            rafe_index* idx = nullptr;
            rafe_status st = rafe_index_open(index_path.c_str(), &idx);
            if (st != RAFE_OK) {
                rc = fail(st);
                return;
            }
            char* json = nullptr;
            st = rafe_index_search(idx, query.c_str(), k, &json);
            if (st == RAFE_OK) {
                std::printf("%s\n", json);
                rafe_string_free(json);
            } else {
                rc = fail(st);
            }
            rafe_index_close(idx);
        });
    }

    auto* teacher = app.add_subcommand("teacher", "Teacher rewrite generation")->require_subcommand(1);
    teacher->add_subcommand("gen", "Produce teacher rewrites for every query")
        ->callback([&] { rc = run_stage(g, "teacher"); });

    auto* data = app.add_subcommand("data", "Dataset operations")->require_subcommand(1);
    data->add_subcommand("split", "Split teacher rewrites into SFT and feedback sets by query")
        ->callback([&] { rc = run_stage(g, "split"); });

    auto* train = app.add_subcommand("train", "Training stages")->require_subcommand(1);
    train->add_subcommand("sft", "Supervised fine-tuning on the SFT split")
        ->callback([&] { rc = run_stage(g, "sft"); });
    train->add_subcommand("dpo", "Offline preference optimization")
        ->callback([&] { rc = run_stage(g, "feedback-dpo"); });
    train->add_subcommand("kto", "Offline good/bad optimization")
        ->callback([&] { rc = run_stage(g, "feedback-kto"); });
    train->add_subcommand("ppo", "Online feedback training")
        ->callback([&] { rc = run_stage(g, "feedback-ppo"); });

    auto* score = app.add_subcommand("score", "Reranker scoring")->require_subcommand(1);
    score->add_subcommand("feedback", "Score the feedback split and build preference data")
        ->callback([&] { rc = run_stage(g, "score"); });

    auto* eval = app.add_subcommand("eval", "Evaluation")->require_subcommand(1);
    {
        auto* run = eval->add_subcommand("run", "Evaluate a checkpoint under one setting");
        static std::string checkpoint = "sft", mode = "expand", order = "raw";
        static int k = 5, num_rewrites = 2;
        run->add_option("--checkpoint", checkpoint, "sft|dpo|kto|ppo|oqr");
        run->add_option("--mode", mode, "substitute|expand|oqr");
        run->add_option("--order", order, "raw|ranked");
        run->add_option("-k", k, "Context size");
        run->add_option("--num-rewrites", num_rewrites, "Rewrites for the expand mode");
        run->callback([&] {
            std::string args = "checkpoint=" + checkpoint + ";mode=" + mode + ";order=" + order +
                               ";k=" + std::to_string(k) +
                               ";num_rewrites=" + std::to_string(num_rewrites);
            rc = run_stage(g, "eval", args);
        });
    }

    auto* report = app.add_subcommand("report", "Report utilities")->require_subcommand(1);
    {
        auto* compare = report->add_subcommand("compare", "Side-by-side metric table vs OQR");
        static std::vector<std::string> files;
        static std::string csv_out, text_out;
        compare->add_option("reports", files, "Eval report JSON files")->required();
        compare->add_option("--csv", csv_out, "Write CSV here");
        compare->add_option("--txt", text_out, "Write the plain-text table here");
        compare->callback([&] {
            std::vector<const char*> ptrs;
            for (const auto& f : files) ptrs.push_back(f.c_str());
            char* table = nullptr;
            rafe_status st = rafe_report_compare(ptrs.data(), ptrs.size(),
                                                 csv_out.empty() ? nullptr : csv_out.c_str(),
                                                 text_out.empty() ? nullptr : text_out.c_str(),
                                                 &table);
            if (st != RAFE_OK) {
                rc = fail(st);
                return;
            }
            std::printf("%s", table);
            rafe_string_free(table);
        });
    }

    auto* sweep = app.add_subcommand("sweep", "Parameter sweeps")->require_subcommand(1);
    {
        auto* rewrites = sweep->add_subcommand("rewrites", "Metrics across 0..N expand rewrites");
        static std::string checkpoint = "sft", order = "raw";
        static int max_rewrites = 5;
        rewrites->add_option("--checkpoint", checkpoint, "sft|dpo|kto|ppo");
        rewrites->add_option("--order", order, "raw|ranked");
        rewrites->add_option("--max", max_rewrites, "Largest rewrite count");
        rewrites->callback([&] {
            std::string args = "checkpoint=" + checkpoint + ";order=" + order +
                               ";max_rewrites=" + std::to_string(max_rewrites);
            rc = run_stage(g, "sweep", args);
        });
    }

    auto* version = app.add_subcommand("version", "Print the library version");
    version->callback([&] { std::printf("rafe %s\n", rafe_version()); });

    CLI11_PARSE(app, argc, argv);
    return rc;
}
