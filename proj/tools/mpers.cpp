// Command-line harness: gen-data | caption | train | eval | ablate | time,
// all driven by a JSON config file.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "mpers/harness.hpp"

namespace {

mpers::RunConfig load(const std::string& config_path, bool has_seed, uint64_t seed) {
    mpers::RunConfig c = mpers::load_config(config_path);
    if (has_seed) {
        std::ifstream f(config_path);
        nlohmann::json j;
        f >> j;
        j["seed"] = seed;
        c = mpers::parse_config(j);
    }
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-guided remote-sensing segmentation harness"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    uint64_t seed = 0;
    bool has_seed = false;
    app.add_option("--config", config_path, "path to JSON config")->required();
    app.add_flag("--force", force, "overwrite existing outputs");
    app.add_option("--seed", seed, "override the config seed")->each([&](const std::string&) { has_seed = true; });

    // let "mpers gen-data --config ..." reach the global options above
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset")->fallthrough();
    auto* caption = app.add_subcommand("caption", "run the multi-expert caption pipeline")->fallthrough();
    auto* train = app.add_subcommand("train", "train and write a checkpoint")->fallthrough();
    auto* eval = app.add_subcommand("eval", "evaluate the checkpoint on the eval split")->fallthrough();
    std::string eval_split = "eval";
    eval->add_option("--split", eval_split, "split to evaluate (train|eval)");
    auto* ablate = app.add_subcommand("ablate", "run the four-row component ablation ladder")->fallthrough();
    auto* time_cmd = app.add_subcommand("time", "measure per-image inference time")->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        mpers::RunConfig cfg = load(config_path, has_seed, seed);

        if (gen->parsed()) {
            auto entries = mpers::cmd_gen_data(cfg, force);
            int n_train = 0;
            for (const auto& e : entries) n_train += e.split == "train" ? 1 : 0;
            std::cout << "wrote " << entries.size() << " scenes (" << n_train << " train / "
                      << entries.size() - n_train << " eval) to " << mpers::manifest_path(cfg) << "\n";
        } else if (caption->parsed()) {
            if (!cfg.mllm_endpoint.empty())
                throw mpers::ValidationError("real MLLM endpoints are not wired in this build; "
                                             "leave captions.endpoint empty to use the offline stub");
            auto summary = mpers::cmd_caption(cfg, force);
            std::cout << "wrote " << summary.records << " caption records, acceptance rate "
                      << summary.acceptance_rate << "\n";
        } else if (train->parsed()) {
            mpers::Model model(cfg.model);
            auto result = mpers::cmd_train(cfg, model);
            std::cout << "trained " << result.loss_log.size() << " steps, final loss " << result.final_loss
                      << ", checkpoint at " << mpers::checkpoint_path(cfg) << "\n";
        } else if (eval->parsed()) {
            mpers::Model model(cfg.model);
            mpers::load_checkpoint(mpers::checkpoint_path(cfg), model);
            auto report = mpers::cmd_eval(cfg, model, eval_split);
            std::cout << mpers::report_to_table(report, mpers::default_vocabulary(cfg.model.num_classes));
        } else if (ablate->parsed()) {
            auto rows = mpers::cmd_ablate(cfg);
            const std::string table = mpers::ablation_table(rows);
            std::ofstream out(cfg.run_dir + "/ablation.txt", std::ios::trunc);
            out << table;
            std::cout << table;
        } else if (time_cmd->parsed()) {
            mpers::Model model(cfg.model);
            mpers::load_checkpoint(mpers::checkpoint_path(cfg), model);
            const double ms = mpers::cmd_time(cfg, model);
            std::cout << "median inference time at " << cfg.timing_image_size << "x" << cfg.timing_image_size
                      << ": " << ms << " ms/image\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
