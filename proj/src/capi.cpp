#include "rafe/rafe_c.h"

#include <cstdlib>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rafe/common.hpp"
#include "rafe/config.hpp"
#include "rafe/corpus.hpp"
#include "rafe/pipeline.hpp"

namespace {

thread_local std::string g_last_error;

rafe_status status_from(const rafe::Error& e) {
    g_last_error = e.what();
    switch (e.code()) {
        case rafe::ErrorCode::invalid_argument: return RAFE_ERR_INVALID_ARGUMENT;
        case rafe::ErrorCode::invalid_state: return RAFE_ERR_INVALID_STATE;
        case rafe::ErrorCode::io_error: return RAFE_ERR_IO;
        case rafe::ErrorCode::not_found: return RAFE_ERR_NOT_FOUND;
        default: return RAFE_ERR_INTERNAL;
    }
}

template <typename F>
rafe_status guarded(F&& f) {
    try {
        f();
        return RAFE_OK;
    } catch (const rafe::Error& e) {
        return status_from(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return RAFE_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return RAFE_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

std::map<std::string, std::string> parse_args(const char* args) {
    std::map<std::string, std::string> out;
    if (args == nullptr) return out;
    std::istringstream in(args);
    std::string item;
    while (std::getline(in, item, ';')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            rafe::raise(rafe::ErrorCode::invalid_argument, "stage args: expected key=value: " + item);
        out[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return out;
}

}  // namespace

struct rafe_run {
    rafe::PipelineRun impl;
};

struct rafe_index {
    rafe::SearchIndex impl;
};

extern "C" {

const char* rafe_version(void) { return "0.1.0"; }

const char* rafe_last_error(void) { return g_last_error.c_str(); }

void rafe_string_free(char* s) { std::free(s); }

rafe_status rafe_run_open(const char* config_path, const char* out_dir, int64_t seed,
                          rafe_run** out) {
    return guarded([&] {
        if (out == nullptr || out_dir == nullptr)
            rafe::raise(rafe::ErrorCode::invalid_argument, "rafe_run_open: null argument");
        rafe::Config config =
            config_path == nullptr ? rafe::Config{} : rafe::Config::load(config_path);
        *out = new rafe_run{rafe::PipelineRun(std::move(config), out_dir, seed)};
    });
}

void rafe_run_close(rafe_run* run) { delete run; }

rafe_status rafe_run_stage(rafe_run* run, const char* stage, const char* args) {
    return guarded([&] {
        if (run == nullptr || stage == nullptr)
            rafe::raise(rafe::ErrorCode::invalid_argument, "rafe_run_stage: null argument");
        run->impl.run_stage(stage, parse_args(args));
    });
}

rafe_status rafe_index_build_file(const char* documents_jsonl, const char* out_index_path) {
    return guarded([&] {
        if (documents_jsonl == nullptr || out_index_path == nullptr)
            rafe::raise(rafe::ErrorCode::invalid_argument, "rafe_index_build_file: null argument");
        rafe::SearchIndex::build(rafe::read_documents_jsonl(documents_jsonl)).save(out_index_path);
    });
}

rafe_status rafe_index_open(const char* index_path, rafe_index** out) {
    return guarded([&] {
        if (index_path == nullptr || out == nullptr)
            rafe::raise(rafe::ErrorCode::invalid_argument, "rafe_index_open: null argument");
        *out = new rafe_index{rafe::SearchIndex::load(index_path)};
    });
}

void rafe_index_close(rafe_index* index) { delete index; }

rafe_status rafe_index_search(const rafe_index* index, const char* query, int k, char** json_out) {
    return guarded([&] {
        if (index == nullptr || query == nullptr || json_out == nullptr)
            rafe::raise(rafe::ErrorCode::invalid_argument, "rafe_index_search: null argument");
        rafe::RetrievedList result = index->impl.search(query, k);
        nlohmann::json j = nlohmann::json::array();
        for (const auto& e : result.entries)
            j.push_back({{"doc_id", e.doc_id}, {"score", e.score}, {"rank", e.rank}});
        *json_out = dup_string(j.dump());
        if (*json_out == nullptr) rafe::raise(rafe::ErrorCode::internal, "out of memory");
    });
}

rafe_status rafe_report_compare(const char* const* report_paths, size_t n_reports,
                                const char* csv_out_path, const char* text_out_path,
                                char** table_out) {
    return guarded([&] {
        if (report_paths == nullptr || n_reports < 2)
            rafe::raise(rafe::ErrorCode::invalid_argument,
                        "rafe_report_compare: need at least two report paths");
        std::vector<rafe::EvalReport> reports;
        for (size_t i = 0; i < n_reports; ++i)
            reports.push_back(rafe::report_from_json(rafe::read_text_file(report_paths[i])));
        rafe::ComparisonTable table = rafe::report_compare(reports);
        if (csv_out_path != nullptr) rafe::write_text_file(csv_out_path, table.to_csv());
        if (text_out_path != nullptr) rafe::write_text_file(text_out_path, table.to_text());
        if (table_out != nullptr) {
            *table_out = dup_string(table.to_text());
            if (*table_out == nullptr) rafe::raise(rafe::ErrorCode::internal, "out of memory");
        }
    });
}

}  // extern "C"
