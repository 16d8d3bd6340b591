#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stace/workspace.hpp"

namespace {

int run(const std::string& command, stace::WorkspaceConfig config) {
    std::vector<std::string> stages;
    if (command == "all")
        stages.assign(stace::kStages.begin(), stace::kStages.end());
    else
        stages.push_back(command);
    for (const auto& stage : stages) {
        const auto outcome = stace::run_stage(stage, config);
        std::cout << stage << ": " << (outcome.skipped ? "up to date" : "done") << '\n';
        for (const auto& line : outcome.log) std::cerr << "  " << stage << ": " << line << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatial-temporal concept discovery and importance scoring for 3D video ConvNets"};
    std::string command, config_path, negatives;
    std::size_t score_k = 0;

    std::vector<std::string> commands(stace::kStages.begin(), stace::kStages.end());
    commands.push_back("all");
    app.add_option("command", command, "Stage to run, or 'all'")->required()->check(CLI::IsMember(commands));
    app.add_option("--config", config_path, "Workspace config file (key = value lines)")->required();
    auto* k_opt = app.add_option("--score-k", score_k, "Videos per class used for scoring (0: whole test split)");
    auto* neg_opt = app.add_option("--negatives", negatives, "CAV negatives: random segments or whole videos")
                        ->check(CLI::IsMember({"whole", "segments"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        auto config = stace::load_config(config_path);
        if (*k_opt) config.pipeline.score_k = score_k;
        if (*neg_opt) config.pipeline.negatives = stace::negative_source_from_string(negatives);
        return run(command, std::move(config));
    } catch (const stace::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const stace::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
