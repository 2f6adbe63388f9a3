// nlecal command-line front end.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nlecal/pipeline.hpp"

namespace {

using namespace nlecal;

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string method, pairs, run_file, output_dir, seeds;
    bool quiet = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
    sub->add_option("-c,--config", a.config_file, "key = value configuration file");
    sub->add_option("-s,--set", a.overrides, "override one key: key=value (repeatable)");
    sub->add_option("--method", a.method, "nc | pc | fc | pr | pl | nle_literal | nle_conditional");
    sub->add_option("--pairs", a.pairs, "collection JSON Lines file");
    sub->add_option("--run-file", a.run_file, "precomputed TREC run for nc/pc");
    sub->add_option("-o,--output-dir", a.output_dir, "artifact directory");
    sub->add_option("--seeds", a.seeds, "comma-separated seeds");
    sub->add_flag("-q,--quiet", a.quiet, "no stage log on stderr");
}

ExperimentConfig load_config(const CommonArgs& a) {
    ConfigValues file;
    if (!a.config_file.empty()) file = parse_config_text(util::read_file(a.config_file), a.config_file);
    ConfigValues over;
    for (const auto& kv : a.overrides) over.insert_or_assign(parse_override(kv).first, parse_override(kv).second);
    // Dedicated flags win over --set.
    auto flag = [&](const char* key, const std::string& v) {
        if (!v.empty()) over[key] = v;
    };
    flag("method", a.method);
    flag("pairs", a.pairs);
    flag("run_file", a.run_file);
    flag("output_dir", a.output_dir);
    flag("seeds", a.seeds);
    return resolve_config(file, over);
}

int run_stage_command(const std::string& stage, const CommonArgs& a) {
    auto config = load_config(a);
    PipelineOptions opt;
    if (!a.quiet) opt.log = [](const std::string& line) { std::cerr << line << '\n'; };
    if (stage != "report" && stage != "run") opt.stop_after = stage;
    auto res = run_pipeline(config, opt);
    if (res.complete) {
        for (const auto& row : summary_rows(res))
            std::cout << row.name << ": nDCG=" << util::format_double(row.ndcg) << " nDCG@10=" << util::format_double(row.ndcg_at_k)
                      << " CB-ECE=" << util::format_double(row.cb_ece) << " ECE=" << util::format_double(row.ece)
                      << " MSE=" << util::format_double(row.mse) << '\n';
    }
    return 0;
}

struct StandaloneArgs {
    std::string run, qrels;
    int scale_max = -1;
    int bins = 10;
    std::size_t k = 10;
    std::string gain = "exponential";
};

Scale scale_of(const StandaloneArgs& s, const std::map<PairKey, int>& qrels) {
    if (s.scale_max >= 0) return Scale{s.scale_max};
    int mx = 0;
    for (const auto& [k, g] : qrels) mx = std::max(mx, g);
    return Scale{mx};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scale-calibrated ranking from LLM explanations"};
    app.require_subcommand(1);

    CommonArgs common;
    StandaloneArgs standalone;
    std::string chosen;
    for (const auto& stage : stage_names()) {
        auto* sub = app.add_subcommand(stage, "run the pipeline through the " + stage + " stage");
        add_common(sub, common);
        if (stage == "evaluate" || stage == "qpp") {
            sub->add_option("--run", standalone.run, "score a TREC run file directly (skips the pipeline)");
            sub->add_option("--qrels", standalone.qrels, "TREC qrels for --run");
            sub->add_option("--scale-max", standalone.scale_max, "top grade; inferred from qrels when omitted");
            sub->add_option("--bins", standalone.bins, "ECE bucket count");
            sub->add_option("-k", standalone.k, "cutoff for nDCG@k or the QPP top-k");
            sub->add_option("--gain", standalone.gain, "exponential | linear");
        }
        sub->callback([&chosen, stage] { chosen = stage; });
    }
    auto* run = app.add_subcommand("run", "run the full pipeline");
    add_common(run, common);
    run->callback([&chosen] { chosen = "run"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::usage);
    }

    try {
        if ((chosen == "evaluate" || chosen == "qpp") && !standalone.run.empty()) {
            if (standalone.qrels.empty()) throw UsageError("--run needs --qrels");
            auto gain = parse_gain(standalone.gain);
            if (!gain) throw UsageError("--gain must be exponential or linear");
            auto qrels = load_qrels(standalone.qrels).judgments;
            auto run_records = load_run(standalone.run);
            auto scale = scale_of(standalone, qrels);
            EvalParams params{standalone.bins, standalone.k, *gain};
            if (chosen == "evaluate")
                std::cout << to_json(evaluate(run_records, qrels, scale, params)).dump(2) << '\n';
            else
                std::cout << to_json(evaluate_qpp(run_records, qrels, scale, standalone.k, params)).dump(2) << '\n';
            return 0;
        }
        return run_stage_command(chosen, common);
    } catch (const Error& e) {
        std::cerr << "nlecal: " << e.what() << '\n';
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "nlecal: " << e.what() << '\n';
        return static_cast<int>(ExitCode::data);
    }
}
