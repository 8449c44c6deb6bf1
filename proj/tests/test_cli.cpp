#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "smem_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    static int invocation = 0;
    const fs::path dir = fresh_dir("io" + std::to_string(invocation++));
    const fs::path out = dir / "out.txt";
    const fs::path err = dir / "err.txt";
    const std::string cmd = env_prefix + " \"" + SPARSEMEM_CLI_PATH + "\" " + args + " > \"" +
                            out.string() + "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult result;
    result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    result.out = slurp(out);
    result.err = slurp(err);
    return result;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& overrides) {
    nlohmann::json cfg = {
        {"seed", 0},
        {"out_dir", (dir / "out").string()},
        {"model",
         {{"d_model", 16},
          {"d_ff", 24},
          {"d_key", 8},
          {"layers", 2},
          {"heads", 2},
          {"context", 16},
          {"memory_slots", 24},
          {"retrieve_k", 4},
          {"memory_layers", {1}}}},
        {"data",
         {{"facts_a", 12},
          {"facts_b", 6},
          {"facts_h", 6},
          {"corpus_sequences", 64},
          {"heldout_sequences", 8},
          {"max_seq_len", 12}}},
        {"pretrain",
         {{"steps", 4}, {"batch_size", 4}, {"eval_every", 2}, {"plateau_patience", 50}}},
        {"recovery", {{"steps", 2}, {"batch_size", 4}, {"eval_every", 2}}},
        {"finetune", {{"steps", 2}, {"batch_size", 4}, {"eval_every", 2}}},
        {"score", {{"top_t", 4}}},
        {"background_batches", 4},
    };
    for (const auto& [key, value] : overrides.items()) cfg[key] = value;
    const fs::path file = dir / "run.json";
    std::ofstream(file) << cfg.dump(2);
    return file;
}

}  // namespace

TEST_CASE("usage errors exit 2 and help exits 0") {
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
    CHECK(run_cli("run").code == 2);

    const CliResult help = run_cli("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("run") != std::string::npos);
    CHECK(help.out.find("compare") != std::string::npos);
}

TEST_CASE("config problems exit 2 with a line-precise message") {
    const fs::path dir = fresh_dir("badcfg");
    CHECK(run_cli("run --config " + (dir / "absent.json").string()).code == 2);

    const fs::path bad = dir / "bad.json";
    std::ofstream(bad) << "{\n  \"sed\": 1\n}";
    const CliResult result = run_cli("run --config " + bad.string());
    CHECK(result.code == 2);
    CHECK(result.err.find("config line 2") != std::string::npos);

    const fs::path cfg = write_config(dir, {});
    CHECK(run_cli("run --config " + cfg.string() + " --stages bogus").code == 2);
}

TEST_CASE("stage order violations exit 3") {
    const fs::path dir = fresh_dir("order");
    const fs::path cfg = write_config(dir, {});
    const CliResult result = run_cli("run --config " + cfg.string() + " --stages finetune");
    CHECK(result.code == 3);
    CHECK(result.err.find("recovered") != std::string::npos);
}

TEST_CASE("divergent training exits 4") {
    const fs::path dir = fresh_dir("diverge");
    const fs::path cfg = write_config(dir, {{"pretrain",
                                             {{"steps", 5},
                                              {"batch_size", 4},
                                              {"lr", 1e160},
                                              {"eval_every", 5},
                                              {"plateau_patience", 50}}}});
    CHECK(run_cli("run --config " + cfg.string() + " --stages pretrain").code == 4);
}

TEST_CASE("a full run produces the report and compare reads it back") {
    const fs::path dir = fresh_dir("full");
    const fs::path cfg = write_config(dir, {});
    const CliResult run = run_cli("run --config " + cfg.string() + " --stages all");
    CHECK(run.code == 0);
    CHECK(run.err.find("=== stage report ===") != std::string::npos);

    const fs::path report = dir / "out" / "report" / "report.json";
    REQUIRE(fs::exists(report));
    CHECK(fs::exists(dir / "out" / "checkpoints" / "finetuned-sparse-kl" / "manifest.json"));

    const CliResult cmp = run_cli("compare " + report.string());
    CHECK(cmp.code == 0);
    CHECK(cmp.out.find("report,arm,metric,step,value") == 0);
    CHECK(cmp.out.find("final_target_accuracy") != std::string::npos);
    for (const std::string arm : {"dense", "sparse-tfidf", "sparse-kl"}) {
        CHECK(cmp.out.find("," + arm + ",") != std::string::npos);
    }

    const CliResult both = run_cli("compare " + report.string() + " " + report.string());
    CHECK(both.code == 0);

    const fs::path bogus = dir / "bogus.json";
    std::ofstream(bogus) << R"({"schema_version": 99, "kind": "report"})";
    CHECK(run_cli("compare " + bogus.string()).code == 5);
}

TEST_CASE("the environment variable redirects only the output directory") {
    const fs::path dir = fresh_dir("envdir");
    const fs::path cfg = write_config(dir, {});
    const fs::path moved = dir / "moved";
    const CliResult result = run_cli("run --config " + cfg.string() + " --stages pretrain",
                                     "SPARSEMEM_OUT_DIR=" + moved.string());
    CHECK(result.code == 0);
    CHECK(fs::exists(moved / "checkpoints" / "pretrained" / "manifest.json"));
    CHECK(!fs::exists(dir / "out"));
}

TEST_CASE("the kl flag overrides the configured score mode") {
    const fs::path dir = fresh_dir("klflag");
    const fs::path cfg = write_config(
        dir, {{"finetune",
               {{"steps", 2}, {"batch_size", 4}, {"eval_every", 2}, {"arms", {"sparse"}}}}});
    const std::string stages = " --stages pretrain,retrofit,recover,background-df,finetune";
    CHECK(run_cli("run --config " + cfg.string() + stages + " --kl-div").code == 0);
    CHECK(fs::exists(dir / "out" / "checkpoints" / "finetuned-sparse-kl"));
    CHECK(!fs::exists(dir / "out" / "checkpoints" / "finetuned-sparse-tfidf"));
}
