#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sparsemem/pipeline.hpp"

using namespace smem;

namespace {

std::string number_str(double v) { return nlohmann::json(v).dump(); }

int cmd_run(const std::string& config_path, const std::string& stages, bool kl_div) {
    RunConfig cfg = load_run_config(config_path);
    if (const char* env = std::getenv("SPARSEMEM_OUT_DIR")) cfg.out_dir = env;
    if (kl_div) cfg.score.mode = ScoreMode::kl;
    const std::vector<std::string> order = resolve_stage_list(stages);

    Pipeline pipeline(cfg, &std::cerr);
    for (const std::string& stage : order) {
        std::cerr << "=== stage " << stage << " ===\n";
        pipeline.run_stage(stage);
    }
    std::cerr << "done: " << pipeline.out_dir().string() << "\n";
    return 0;
}

struct ArmSummary {
    std::string report;
    std::string arm;
    std::string accuracy = "-";
    std::string forgetting = "-";
};

int cmd_compare(const std::vector<std::string>& paths) {
    std::vector<std::pair<std::string, EvalReport>> reports;
    for (const std::string& path : paths) {
        reports.emplace_back(path, load_report(path));
    }

    std::cout << "report,arm,metric,step,value\n";
    std::vector<ArmSummary> summary;
    for (const auto& [path, rep] : reports) {
        for (const std::string& arm : rep.arms) {
            ArmSummary row{path, arm, "-", "-"};
            const auto& metrics = rep.series.at(arm);
            for (const auto& [metric, points] : metrics) {
                for (const MetricPoint& p : points) {
                    std::cout << path << "," << arm << "," << metric << "," << p.step << ","
                              << number_str(p.value) << "\n";
                }
                if (points.empty()) continue;
                if (metric == kMetricTargetAccuracy) row.accuracy = number_str(points.back().value);
                if (metric == kMetricForgetting) row.forgetting = number_str(points.back().value);
            }
            summary.push_back(std::move(row));
        }
    }

    std::size_t report_w = 6, arm_w = 3;
    for (const ArmSummary& row : summary) {
        report_w = std::max(report_w, row.report.size());
        arm_w = std::max(arm_w, row.arm.size());
    }
    std::cout << "\n"
              << std::left << std::setw(static_cast<int>(report_w) + 2) << "report"
              << std::setw(static_cast<int>(arm_w) + 2) << "arm" << std::setw(22)
              << "final_target_accuracy"
              << "final_forgetting_delta\n";
    for (const ArmSummary& row : summary) {
        std::cout << std::left << std::setw(static_cast<int>(report_w) + 2) << row.report
                  << std::setw(static_cast<int>(arm_w) + 2) << row.arm << std::setw(22)
                  << row.accuracy << row.forgetting << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-memory finetuning pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string stages = "all";
    bool kl_div = false;
    CLI::App* run = app.add_subcommand("run", "execute pipeline stages from a config file");
    run->add_option("--config", config_path, "run configuration (json)")->required();
    run->add_option("--stages", stages,
                    "\"all\" or a comma-separated subset of: pretrain, retrofit, recover, "
                    "background-df, finetune, eval, report");
    run->add_flag("--kl-div", kl_div, "score slots with KL divergence instead of TF-IDF");

    std::vector<std::string> report_paths;
    CLI::App* compare = app.add_subcommand("compare", "merge reports into one CSV plus a summary");
    compare->add_option("reports", report_paths, "report.json files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (run->parsed()) return cmd_run(config_path, stages, kl_div);
        return cmd_compare(report_paths);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingDivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
