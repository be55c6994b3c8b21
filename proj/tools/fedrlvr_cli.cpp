// Command-line runner: run / eval / partition.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "fedrlvr/fedrlvr.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;

using namespace fedrlvr;

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides,
            std::optional<std::uint64_t> seed, const std::string& out, bool wall_time) {
    RunConfig cfg = load_config(config_path, overrides);
    if (seed) cfg.global_seed = *seed;
    if (!out.empty()) cfg.output_dir = out;
    RunOptions opts;
    opts.record_wall_time = wall_time;
    const RunOutcome res = run_experiment(cfg, opts);
    write_outputs(cfg.output_dir, cfg, res);
    if (res.exit_code != 0) {
        std::cerr << "run diverged: " << res.error << '\n';
        return kDiverged;
    }
    if (res.final_pass_at_1) std::cout << fmt::format("final pass@1 {}\n", *res.final_pass_at_1);
    return kOk;
}

int cmd_eval(const std::string& factors_path, const std::string& config_path, const std::vector<std::string>& overrides) {
    const RunConfig cfg = load_config(config_path, overrides);
    PolicyParams params = build_initial_policy(cfg);
    params.set_factors(read_factors(factors_path, params.factors()));
    const FederatedSplit split = build_split(cfg);
    const double p = evaluate_round(params, split.test_set, cfg, cfg.rounds() - 1);
    std::cout << fmt::format("{}\n", p);
    return kOk;
}

int cmd_partition(const std::string& config_path, const std::string& out, const std::vector<std::string>& overrides) {
    const RunConfig cfg = load_config(config_path, overrides);
    const FederatedSplit split = build_split(cfg);
    const std::filesystem::path dir(out);
    std::filesystem::create_directories(dir);
    auto dump = [&](const std::string& name, const std::vector<TaskInstance>& items) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
        write_instances(f, items);
    };
    for (std::size_t i = 0; i < split.shards.size(); ++i) dump(fmt::format("shard_{}.tsv", i), split.shards[i]);
    dump("public.tsv", split.public_set);
    dump("test.tsv", split.test_set);
    std::ofstream props(dir / "topic_proportions.csv", std::ios::binary);
    for (std::size_t i = 0; i < split.topic_proportions.size(); ++i) {
        props << i;
        for (double f : split.topic_proportions[i]) props << ',' << fmt::format("{}", f);
        props << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated RLVR simulator: LoRA-GRPO clients with optional public-data response swapping"};
    app.require_subcommand(1);

    std::string config_path, out, factors_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool wall_time = false;

    auto* run = app.add_subcommand("run", "Train and write metrics.csv, final_factors.bin, config_resolved.json");
    run->add_option("--config", config_path, "JSON config file")->required();
    run->add_option("--seed", seed, "Override global_seed");
    run->add_option("--out", out, "Override output_dir");
    run->add_option("--override", overrides, "Dotted key=value override, applied after loading");
    run->add_flag("--wall-time", wall_time, "Fill wall_time_ms (makes metrics.csv non-reproducible)");

    auto* eval = app.add_subcommand("eval", "Evaluate pass@1 of a factor file on the config's test split");
    eval->add_option("--factors", factors_path, "final_factors.bin")->required();
    eval->add_option("--config", config_path, "JSON config file")->required();
    eval->add_option("--override", overrides, "Dotted key=value override");

    auto* part = app.add_subcommand("partition", "Write the federated split as line-delimited task files");
    part->add_option("--config", config_path, "JSON config file")->required();
    part->add_option("--out", out, "Output directory")->required();
    part->add_option("--override", overrides, "Dotted key=value override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        if (app.get_subcommands().empty()) std::cerr << app.help();
        return kUsage;
    }

    try {
        if (*run) return cmd_run(config_path, overrides, seed, out, wall_time);
        if (*eval) return cmd_eval(factors_path, config_path, overrides);
        if (*part) return cmd_partition(config_path, out, overrides);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
    std::cerr << app.help();
    return kUsage;
}
