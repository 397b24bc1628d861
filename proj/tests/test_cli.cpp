#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "clom/cli.hpp"
#include "clom/config.hpp"

using namespace clom;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

size_t count_lines(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

// small, fast experiment: 6 classes, tiny MLP, a couple of epochs
json tiny_config(const std::string& out) {
    return json{
        {"dataset",
         {{"synthetic",
           {{"n_groups", 3},
            {"classes_per_group", 2},
            {"dim", 16},
            {"within_group_angle", 0.5},
            {"between_group_angle", 0.1},
            {"noise_sigma", 0.15},
            {"train_per_class", 12},
            {"test_per_class", 6},
            {"seed", 5}}}}},
        {"split",
         {{"base_count", 4}, {"sessions", 1}, {"classes_per_session", 2}, {"shots", 5}}},
        {"model", {{"hidden", {12}}, {"d", 8}, {"d_pm", 6}}},
        {"train",
         {{"loss_mode", "nm_pm_relation"},
          {"epochs", 3},
          {"batch_size", 16},
          {"lr", 0.1},
          {"momentum", 0.9},
          {"weight_decay", 0.0005},
          {"tau", 16.0},
          {"lambda", 1.0},
          {"nm", {{"m_ave", -0.2}, {"m_upper", -0.5}}},
          {"pm", {{"m_ave", 0.1}, {"m_upper", 0.2}}}}},
        {"output", out},
        {"seeds", {1}}};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& stem) {
        path = fs::temp_directory_path() / ("clom_test_" + stem);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const {
        return (path / leaf).string();
    }
};

std::string write_config(const TempDir& dir, const json& j,
                         const std::string& name = "cfg.json") {
    std::string p = dir / name;
    std::ofstream os(p);
    os << j.dump(2);
    return p;
}

}  // namespace

TEST_CASE("config parsing and validation") {
    TempDir dir("config");
    json base = tiny_config(dir / "out");

    SECTION("valid config parses") {
        ExperimentConfig cfg = parse_config(base);
        CHECK(cfg.has_synthetic);
        CHECK(cfg.split.base_count == 4);
        CHECK(cfg.train.loss_mode == LossMode::NmPmRelation);
        CHECK(cfg.train.nm.m_upper == -0.5);
        CHECK(cfg.train.pm.lambda_pm == 1.0);
        CHECK(cfg.seeds == std::vector<uint64_t>{1});
    }
    SECTION("unknown top-level key rejected") {
        json bad = base;
        bad["extra_knob"] = 1;
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
    }
    SECTION("unknown nested key rejected") {
        json bad = base;
        bad["train"]["nm"]["m_max"] = 0.5;
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
        json bad2 = base;
        bad2["dataset"]["synthetic"]["sigma"] = 0.1;
        CHECK_THROWS_AS(parse_config(bad2), ConfigError);
    }
    SECTION("physically meaningless values rejected") {
        json bad = base;
        bad["train"]["tau"] = 0.0;
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
        json bad2 = base;
        bad2["split"]["shots"] = 0;
        CHECK_THROWS_AS(parse_config(bad2), ConfigError);
        json bad3 = base;
        bad3["model"]["d_pm"] = 0;
        CHECK_THROWS_AS(parse_config(bad3), ConfigError);
        json bad4 = base;
        bad4["dataset"]["synthetic"]["noise_sigma"] = 0.0;
        CHECK_THROWS_AS(parse_config(bad4), ConfigError);
    }
    SECTION("loss-mode-required margin specs enforced") {
        json bad = base;
        bad["train"].erase("pm");
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
        json bad2 = base;
        bad2["train"]["loss_mode"] = "fixed_margin";
        bad2["train"].erase("nm");
        bad2["train"].erase("pm");
        CHECK_THROWS_AS(parse_config(bad2), ConfigError);
        json ok = base;
        ok["train"]["loss_mode"] = "baseline";
        ok["train"].erase("nm");
        ok["train"].erase("pm");
        CHECK_NOTHROW(parse_config(ok));
    }
    SECTION("dataset needs exactly one source") {
        json bad = base;
        bad["dataset"]["path"] = "somewhere";
        CHECK_THROWS_AS(parse_config(bad), ConfigError);
        json bad2 = base;
        bad2["dataset"].erase("synthetic");
        CHECK_THROWS_AS(parse_config(bad2), ConfigError);
    }
}

TEST_CASE("cmd_gen writes a loadable dataset") {
    TempDir dir("gen");
    ExperimentConfig cfg = parse_config(tiny_config(dir / "data"));
    CHECK(cmd_gen(cfg) == 0);
    Dataset ds = load_dataset(dir / "data");
    CHECK(ds.dim == 16);
    CHECK(ds.train_x.rows() == 6 * 12);
    CHECK(ds.has_means);
}

TEST_CASE("cmd_protocol emits deterministic sessions.csv") {
    TempDir dir("protocol");
    ExperimentConfig cfg = parse_config(tiny_config(dir / "out"));
    CHECK(cmd_protocol(cfg) == 0);
    std::string first = slurp(dir / "out/sessions.csv");
    CHECK(cmd_protocol(cfg) == 0);
    std::string second = slurp(dir / "out/sessions.csv");
    CHECK(first == second);
    // comment + header + K+1 report rows
    CHECK(count_lines(first) == 2 + 2);
    CHECK(first.rfind("# config_hash=", 0) == 0);
}

TEST_CASE("cmd_train then cmd_analyze") {
    TempDir dir("train");
    json j = tiny_config(dir / "out");
    ExperimentConfig cfg = parse_config(j);
    CHECK(cmd_train(cfg) == 0);
    CHECK(fs::exists(dir / "out/model.ckpt"));
    CHECK(fs::exists(dir / "out/loss.csv"));

    SECTION("analysis of the trained checkpoint") {
        CHECK(cmd_analyze(cfg) == 0);
        std::string csv = slurp(dir / "out/analysis.csv");
        CHECK(csv.find("l1_sparsity,nm,") != std::string::npos);
        CHECK(csv.find("mta,nm,") != std::string::npos);
        CHECK(csv.find("transferability,pm,") != std::string::npos);
        CHECK(csv.find("a_ave,nm_weights,") != std::string::npos);
        CHECK(csv.find("a_ave,pm_data,") != std::string::npos);
        CHECK(csv.find("cka_first_hidden,self,") != std::string::npos);
    }
    SECTION("analysis with a reference checkpoint emits relation deltas") {
        json j2 = j;
        j2["analysis"] = {{"reference_checkpoint", dir / "out/model.ckpt"},
                          {"tag", "m_test"}};
        ExperimentConfig cfg2 = parse_config(j2);
        CHECK(cmd_analyze(cfg2) == 0);
        std::string rel = slurp(dir / "out/relations_m_test.csv");
        // header comment + "r0,delta" + 4*3/2 base-class pairs
        CHECK(count_lines(rel) == 2 + 6);
        // reference == self, so every delta is zero
        CHECK(rel.find(",0.000000") != std::string::npos);
        CHECK(rel.find("cka") == std::string::npos);
    }
}

TEST_CASE("cmd_analyze works on a fresh untrained checkpoint") {
    TempDir dir("fresh");
    json j = tiny_config(dir / "out");
    ExperimentConfig cfg = parse_config(j);
    fs::create_directories(dir / "out");

    Rng rng(3);
    ModelConfig mc = cfg.model;
    mc.input_dim = 16;
    mc.use_head = true;
    ModelState fresh = make_model(mc, {0, 1, 2, 3}, rng);
    save_checkpoint(fresh, dir / "out/model.ckpt");

    CHECK(cmd_analyze(cfg) == 0);
    std::string csv = slurp(dir / "out/analysis.csv");
    CHECK(csv.find("l1_sparsity,nm,") != std::string::npos);
    CHECK(csv.find("mta,pm,") != std::string::npos);
}

TEST_CASE("cmd_sweep") {
    SECTION("fixed-margin sweep: one row per margin per seed") {
        TempDir dir("sweepf");
        json j = tiny_config(dir / "out");
        j["train"]["epochs"] = 2;
        j["seeds"] = {1, 2};
        j["sweep"] = {{"mode", "fixed"}, {"nm_margins", {-0.2, 0.0, 0.2}}};
        ExperimentConfig cfg = parse_config(j);
        CHECK(cmd_sweep(cfg) == 0);
        std::string csv = slurp(dir / "out/sweep.csv");
        CHECK(count_lines(csv) == 2 + 3 * 2);
        CHECK(csv.find("fixed,0,0,-0.200000,,1,") != std::string::npos);
    }
    SECTION("10x10 margin grid gives 100 rows") {
        TempDir dir("sweepg");
        json j = tiny_config(dir / "out");
        j["train"]["epochs"] = 1;
        j["split"]["sessions"] = 0;
        json grid = json::array();
        for (int i = 0; i < 10; ++i) grid.push_back(-0.5 + 0.1 * i);
        j["sweep"] = {{"mode", "nm_pm"}, {"nm_margins", grid}, {"pm_margins", grid}};
        ExperimentConfig cfg = parse_config(j);
        CHECK(cmd_sweep(cfg) == 0);
        std::string csv = slurp(dir / "out/sweep.csv");
        CHECK(count_lines(csv) == 2 + 100);
    }
}

#ifdef CLOM_CLI_PATH
TEST_CASE("clom binary end to end") {
    TempDir dir("bin");
    json j = tiny_config(dir / "data");
    std::string cfg_path = write_config(dir, j);

    SECTION("gen then protocol from files") {
        std::string cmd = std::string(CLOM_CLI_PATH) + " gen --config " + cfg_path +
                          " > /dev/null 2>&1";
        REQUIRE(std::system(cmd.c_str()) == 0);

        json j2 = j;
        j2["dataset"] = {{"path", dir / "data"}};
        j2["output"] = dir / "out";
        std::string cfg2 = write_config(dir, j2, "cfg2.json");
        std::string cmd2 = std::string(CLOM_CLI_PATH) + " protocol --config " +
                           cfg2 + " > /dev/null 2>&1";
        REQUIRE(std::system(cmd2.c_str()) == 0);
        CHECK(fs::exists(dir / "out/sessions.csv"));
    }
    SECTION("--seed overrides the seed list") {
        std::string cmd = std::string(CLOM_CLI_PATH) + " protocol --config " +
                          cfg_path + " --out " + (dir / "seeded") +
                          " --seed 42 > /dev/null 2>&1";
        REQUIRE(std::system(cmd.c_str()) == 0);
        std::string csv = slurp(dir / "seeded/sessions.csv");
        CHECK(csv.find("seed=42") != std::string::npos);
    }
    SECTION("invalid config exits nonzero with a single-line error") {
        json bad = j;
        bad["train"]["tau"] = -1.0;
        std::string bad_path = write_config(dir, bad, "bad.json");
        std::string err_file = dir / "stderr.txt";
        std::string cmd = std::string(CLOM_CLI_PATH) + " protocol --config " +
                          bad_path + " 2> " + err_file + " > /dev/null";
        int rc = std::system(cmd.c_str());
        CHECK(rc != 0);
        std::string err = slurp(err_file);
        CHECK(count_lines(err) == 1);
        CHECK(err.rfind("error: ", 0) == 0);
    }
    SECTION("missing dataset path is an io error") {
        json bad = j;
        bad["dataset"] = {{"path", dir / "nope"}};
        std::string bad_path = write_config(dir, bad, "bad2.json");
        std::string err_file = dir / "stderr2.txt";
        std::string cmd = std::string(CLOM_CLI_PATH) + " analyze --config " +
                          bad_path + " 2> " + err_file + " > /dev/null";
        CHECK(std::system(cmd.c_str()) != 0);
        CHECK(slurp(err_file).rfind("error: io:", 0) == 0);
    }
}
#endif
