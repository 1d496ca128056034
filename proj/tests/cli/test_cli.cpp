#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "steerkit/mock_runner.hpp"
#include "steerkit/search_eval.hpp"
#include "support.hpp"

using namespace steerkit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string write_dataset(const fs::path& dir, std::size_t n) {
    std::ostringstream s;
    write_dataset_jsonl(test::make_items(n), s);
    const auto p = dir / "data.jsonl";
    test::write_file(p, s.str());
    return p.string();
}

std::string write_concepts(const fs::path& dir, std::size_t k) {
    static const char* words[] = {"three", "two", "five", "four", "seven", "six", "nine", "eight", "ten", "one"};
    std::ostringstream doc;
    doc << "taxonomy: counting\ndefinition: the number of objects of a kind in the image\n";
    for (std::size_t i = 0; i < k; ++i) doc << "I see " << words[i % 10] << " birds on wire " << i << ".\t" << words[i % 10] << "\n";
    const auto p = dir / "counting.tsv";
    test::write_file(p, doc.str());
    return p.string();
}

MockScript grid_script() {
    MockScript s;
    s.n_layers = 12;
    s.d_model = 8;
    s.default_accuracy = 0.4;
    MockRule r;
    r.layer = 4;
    r.alpha = 2.0;
    r.accuracy = 0.9;
    s.rules.push_back(r);
    MockRule weaker;
    weaker.layer = 3;
    weaker.accuracy = 0.6;
    s.rules.push_back(weaker);
    return s;
}

std::string write_script(const fs::path& dir, const MockScript& s, const std::string& name = "script.json") {
    const auto p = dir / name;
    test::write_file(p, s.to_json().dump(2));
    return p.string();
}

std::string write_vectors(const fs::path& dir, std::uint32_t d, std::vector<std::uint32_t> layers) {
    const auto vdir = dir / "vectors";
    fs::create_directories(vdir);
    for (auto l : layers) {
        SteeringVector v;
        v.taxonomy = "counting";
        v.layer = l;
        v.values.assign(d, 0.1 * (l + 1));
        save_svec(v, (vdir / ("layer_" + std::to_string(l) + ".svec")).string());
    }
    return vdir.string();
}

}  // namespace

TEST_CASE("extract meanshift and probe vectors through a mock runner") {
    const auto dir = test::temp_dir("cli_extract");
    MockScript script;
    script.d_model = 16;
    script.n_layers = 10;
    const auto runner = "mock:" + write_script(dir, script);
    const auto concepts = write_concepts(dir, 20);

    auto r = run({"--runner", runner, "--out", (dir / "out").string(), "extract", "--method", "meanshift", "--concepts",
                  concepts, "--layers", "2-4"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    for (int l = 2; l <= 4; ++l) {
        const auto v = load_svec((dir / "out/counting/meanshift" / ("layer_" + std::to_string(l) + ".svec")).string());
        CHECK(v.layer == static_cast<std::uint32_t>(l));
        CHECK(v.values.size() == 16);
        // The mock plants a direction on anchor tokens; the mean shift should find it.
        const auto planted = MockRunner::planted_direction("counting", 16, 0);
        double dotp = 0.0;
        for (std::size_t i = 0; i < 16; ++i) dotp += v.values[i] * planted[i];
        CHECK(dotp / v.norm() > 0.8);
    }

    r = run({"--runner", runner, "--out", (dir / "out").string(), "extract", "--method", "probe", "--concepts", concepts,
             "--layers", "3"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto m = json::parse(test::read_file(dir / "out/counting/probe/manifest.json"));
    CHECK(m["probe_dim"] == 10);
    CHECK(m["n_anchor_tokens"] == 20);
    CHECK(m["outputs"][0]["probe"]["d"] == 10);
    CHECK(load_svec((dir / "out/counting/probe/layer_3.svec").string()).normalized);
}

TEST_CASE("sae extraction without weights fails before doing any work") {
    const auto dir = test::temp_dir("cli_sae_missing");
    const auto concepts = write_concepts(dir, 4);
    const auto r = run({"--out", (dir / "out").string(), "extract", "--method", "sae", "--concepts", concepts, "--layers",
                        "5,6", "--sae", "5=" + (dir / "nope.saew").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("SAE weights for layer 5") != std::string::npos);
    CHECK(r.err.find("SAE weights for layer 6") != std::string::npos);
    // All missing inputs are listed together, the runner included.
    CHECK(r.err.find("runner") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out"));
}

TEST_CASE("unknown flags and missing subcommands are usage errors") {
    CHECK(run({"grid", "--bogus", "1"}).code == 2);
    CHECK(run({}).code == 2);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("grid output is deterministic and matches the golden table") {
    const auto dir = test::temp_dir("cli_grid");
    const auto data = write_dataset(dir, 40);
    const auto runner = "mock:" + write_script(dir, grid_script());
    const auto vectors = write_vectors(dir, 8, {3, 4, 5});
    auto grid = [&](const std::string& out) {
        return run({"--runner", runner, "--out", (dir / out).string(), "grid", "--vectors", vectors, "--dataset", data,
                    "--alphas", "0.5,1,2"});
    };
    auto a = grid("a");
    INFO(a.err);
    REQUIRE(a.code == 0);
    CHECK(a.out.find("best layer=4 alpha=2") != std::string::npos);
    REQUIRE(grid("b").code == 0);
    const auto csv = test::read_file(dir / "a/grid.csv");
    CHECK(csv == test::read_file(dir / "b/grid.csv"));
    CHECK(test::read_file(dir / "a/grid_manifest.json") != "");
    CHECK(csv == test::read_file(test::data_dir() / "golden/grid_mock.csv"));

    const auto m = json::parse(test::read_file(dir / "a/grid_manifest.json"));
    CHECK(m["complete"] == true);
    CHECK(m["split"]["train"] == 32);
    CHECK(m["split"]["test"] == 8);
    CHECK(m["best"]["layer"] == 4);
}

TEST_CASE("an interrupted grid leaves a partial table and resume completes it") {
    const auto dir = test::temp_dir("cli_grid_resume");
    const auto data = write_dataset(dir, 30);
    auto script = grid_script();
    const auto good = "mock:" + write_script(dir, script);
    script.fail_on_request = 4;
    const auto failing = "mock:" + write_script(dir, script, "failing.json");
    const auto vectors = write_vectors(dir, 8, {3, 4, 5});
    auto grid = [&](const std::string& runner, const std::string& out, bool resume) {
        std::vector<std::string> args{"--runner", runner, "--out", (dir / out).string(), "grid", "--vectors", vectors,
                                      "--dataset", data, "--alphas", "1,2"};
        if (resume) args.push_back("--resume");
        return run(args);
    };

    const auto broken = grid(failing, "partial", false);
    CHECK(broken.code == 3);
    CHECK(broken.err.find("partial grid table") != std::string::npos);
    std::ifstream partial_in(dir / "partial/grid.csv");
    const auto partial = read_grid_csv(partial_in);
    CHECK(partial.size() == 4);
    const auto pm = json::parse(test::read_file(dir / "partial/grid_manifest.json"));
    CHECK(pm["complete"] == false);

    const auto resumed = grid(good, "partial", true);
    INFO(resumed.err);
    REQUIRE(resumed.code == 0);
    CHECK(resumed.err.find("4 cell(s) already complete") != std::string::npos);
    REQUIRE(grid(good, "fresh", false).code == 0);
    CHECK(test::read_file(dir / "partial/grid.csv") == test::read_file(dir / "fresh/grid.csv"));
}

TEST_CASE("rerunning from a manifest reproduces the outputs byte for byte") {
    const auto dir = test::temp_dir("cli_manifest");
    const auto data = write_dataset(dir, 30);
    const auto runner = "mock:" + write_script(dir, grid_script());
    const auto vectors = write_vectors(dir, 8, {3, 4});
    REQUIRE(run({"--runner", runner, "--seed", "7", "--out", (dir / "one").string(), "grid", "--vectors", vectors,
                 "--dataset", data, "--n-train", "20", "--token-classes", "image"})
                .code == 0);
    const auto replay = run({"--from-manifest", (dir / "one/grid_manifest.json").string(), "--out", (dir / "two").string()});
    INFO(replay.err);
    REQUIRE(replay.code == 0);
    CHECK(test::read_file(dir / "one/grid.csv") == test::read_file(dir / "two/grid.csv"));
    auto a = json::parse(test::read_file(dir / "one/grid_manifest.json"));
    auto b = json::parse(test::read_file(dir / "two/grid_manifest.json"));
    CHECK(b["split"] == a["split"]);
    CHECK(b["token_classes"] == "image");
    a["config"].erase("out");
    b["config"].erase("out");
    CHECK(a == b);

    // A manifest for one command cannot drive another.
    CHECK(run({"--from-manifest", (dir / "one/grid_manifest.json").string(), "eval"}).code == 2);
}

TEST_CASE("config file layering: flags beat the file") {
    const auto dir = test::temp_dir("cli_config");
    const auto data = write_dataset(dir, 20);
    const auto script = write_script(dir, grid_script());
    test::write_file(dir / "steerkit.toml", "seed = 3\n[runner]\naddress = \"mock:" + script + "\"\n[eval]\nname = \"from_file\"\nsplit = \"test\"\n");
    auto r = run({"--config", (dir / "steerkit.toml").string(), "--out", dir.string(), "eval", "--dataset", data});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto m = json::parse(test::read_file(dir / "from_file.json"));
    CHECK(m["records"].size() == 4);
    CHECK(m["config"]["seed"] == 3);

    r = run({"--config", (dir / "steerkit.toml").string(), "--out", dir.string(), "eval", "--dataset", data, "--name",
             "flag", "--split", "all"});
    REQUIRE(r.code == 0);
    CHECK(json::parse(test::read_file(dir / "flag.json"))["records"].size() == 20);

    CHECK(run({"--config", (dir / "missing.toml").string(), "eval", "--dataset", data}).code == 2);
    test::write_file(dir / "bad.toml", "seed = = 1\n");
    const auto bad = run({"--config", (dir / "bad.toml").string(), "eval", "--dataset", data});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("line 1") != std::string::npos);
}

TEST_CASE("ood with frozen hyperparameters from the grid") {
    const auto dir = test::temp_dir("cli_ood");
    const auto data = write_dataset(dir, 30);
    const auto runner = "mock:" + write_script(dir, grid_script());
    const auto vectors = write_vectors(dir, 8, {3, 4});
    REQUIRE(run({"--runner", runner, "--out", (dir / "grid").string(), "grid", "--vectors", vectors, "--dataset", data,
                 "--alphas", "1,2"})
                .code == 0);

    auto ood_script = grid_script();
    ood_script.rules.clear();
    MockRule image;
    image.layer = 4;
    image.classes = "image";
    image.accuracy = 0.8;
    ood_script.rules.push_back(image);
    const auto ood_runner = "mock:" + write_script(dir, ood_script, "ood.json");
    const auto ood_data = write_dataset(dir / "ood", 60);
    const auto r = run({"--runner", ood_runner, "--out", (dir / "ood_out").string(), "ood", "--dataset", ood_data,
                        "--from-grid", (dir / "grid/grid_manifest.json").string(), "--validation-size", "20"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto m = json::parse(test::read_file(dir / "ood_out/ood_manifest.json"));
    CHECK(m["token_classes"] == "image");
    CHECK(m["config"]["layer"] == 4);
    CHECK(m["config"]["alpha"] == 2.0);
    CHECK(m["n_validation"] == 20);
    CHECK(m["n_test"] == 40);
    CHECK(m["test_accuracy"].get<double>() == doctest::Approx(0.8));

    // The steered and baseline runs pair up for stats.
    const auto st = run({"stats", "--base", (dir / "ood_out/ood_baseline.json").string(), "--treated",
                         (dir / "ood_out/ood_steered.json").string(), "--samples", "2000"});
    INFO(st.err);
    REQUIRE(st.code == 0);
    CHECK(st.out.rfind("n,base_accuracy,treated_accuracy,improvement,ci_lo,ci_hi,p_value,test,b,c,significant\n40,", 0) == 0);
}

TEST_CASE("ood refuses an incomplete grid and missing hyperparameters") {
    const auto dir = test::temp_dir("cli_ood_bad");
    const auto data = write_dataset(dir, 10);
    const auto runner = "mock:" + write_script(dir, grid_script());
    test::write_file(dir / "gm.json", R"({"command":"grid","config":{},"complete":false})");
    CHECK(run({"--runner", runner, "ood", "--dataset", data, "--from-grid", (dir / "gm.json").string()}).code == 2);
    CHECK(run({"--runner", runner, "ood", "--dataset", data, "--layer", "3"}).code == 2);
}

TEST_CASE("stats on identical runs and on mismatched runs") {
    const auto dir = test::temp_dir("cli_stats");
    const auto data = write_dataset(dir, 50);
    const auto runner = "mock:" + write_script(dir, grid_script());
    REQUIRE(run({"--runner", runner, "--out", dir.string(), "eval", "--dataset", data, "--name", "a"}).code == 0);
    REQUIRE(run({"--runner", runner, "--out", dir.string(), "eval", "--dataset", data, "--name", "b"}).code == 0);
    auto r = run({"stats", "--base", (dir / "a.json").string(), "--treated", (dir / "b.json").string(), "--samples", "1000",
                  "--table", (dir / "table.csv").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("\n50,0.4,0.4,0,0,0,1,exact,0,0,false\n") != std::string::npos);
    CHECK(test::read_file(dir / "table.csv") == r.out);

    REQUIRE(run({"--runner", runner, "--out", dir.string(), "eval", "--dataset", data, "--split", "test", "--name", "c"})
                .code == 0);
    r = run({"stats", "--base", (dir / "a.json").string(), "--treated", (dir / "c.json").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("only in base") != std::string::npos);
    CHECK(run({"stats", "--base", (dir / "a.json").string(), "--treated", (dir / "zz.json").string()}).code == 2);
}

TEST_CASE("runner errors and incomplete results map to exit codes") {
    const auto dir = test::temp_dir("cli_exit");
    const auto data = write_dataset(dir, 10);
    auto s = grid_script();
    s.fail_on_request = 0;
    const auto failing = "mock:" + write_script(dir, s, "fail.json");
    auto r = run({"--runner", failing, "--out", dir.string(), "eval", "--dataset", data});
    CHECK(r.code == 3);
    CHECK(r.err.find("q0000") != std::string::npos);

    s.fail_on_request.reset();
    s.drop_results = 2;
    const auto dropping = "mock:" + write_script(dir, s, "drop.json");
    r = run({"--runner", dropping, "--out", dir.string(), "eval", "--dataset", data});
    CHECK(r.code == 4);
    CHECK(r.err.find("q0008") != std::string::npos);
    CHECK(r.err.find("q0009") != std::string::npos);

    CHECK(run({"--runner", "127.0.0.1:1", "--timeout", "2", "--out", dir.string(), "eval", "--dataset", data}).code == 3);
}

TEST_CASE("runner command spawns a mock-runner process") {
    const auto dir = test::temp_dir("cli_spawn");
    const auto data = write_dataset(dir, 20);
    const auto script = write_script(dir, grid_script());
    const auto cmd = std::string(STEERKIT_BINARY) + " mock-runner --script " + script + " --dataset " + data;
    auto spawned = run({"--runner-cmd", cmd, "--out", dir.string(), "eval", "--dataset", data, "--name", "spawned"});
    INFO(spawned.err);
    REQUIRE(spawned.code == 0);
    REQUIRE(run({"--runner", "mock:" + script, "--out", dir.string(), "eval", "--dataset", data, "--name", "local"}).code == 0);
    const auto a = json::parse(test::read_file(dir / "spawned.json"));
    const auto b = json::parse(test::read_file(dir / "local.json"));
    CHECK(a["records"] == b["records"]);
}

TEST_CASE("prompt and ablate commands") {
    const auto dir = test::temp_dir("cli_prompt");
    const auto data = write_dataset(dir, 20);
    auto s = grid_script();
    MockRule p;
    p.prompt = "Count slowly.";
    p.accuracy = 0.9;
    s.rules.push_back(p);
    s.ablation_curve = {{0, 0.1}, {1, 0.1}, {2, 0.2}, {3, 0.6}, {4, 0.7}};
    const auto runner = "mock:" + write_script(dir, s);
    test::write_file(dir / "prompts.txt", "Look closely.\nCount slowly.\nAnswer.\n");
    auto r = run({"--runner", runner, "--out", dir.string(), "prompt", "--dataset", data, "--prompts",
                  (dir / "prompts.txt").string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(r.out == "best prompt: Count slowly.\n");
    CHECK(fs::exists(dir / "prompt_test.json"));

    r = run({"--runner", runner, "--out", dir.string(), "ablate", "--dataset", data, "--layers", "0-4", "--width", "2"});
    REQUIRE(r.code == 0);
    CHECK(r.out == "layer range 2..3\n");
    CHECK(test::read_file(dir / "ablation.csv").rfind("layer,accuracy\n0,0.1\n", 0) == 0);
}

TEST_CASE("toy-sim sweep writes the crossover table") {
    const auto dir = test::temp_dir("cli_toy");
    const auto r = run({"--out", dir.string(), "toy-sim", "--sweep", "--seeds", "5"});
    INFO(r.err);
    CHECK(r.code == 0);
    const auto csv = test::read_file(dir / "toy_crossover.csv");
    CHECK(csv.rfind("alpha,yelloworange,red,green,blue,orange,argmax\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 102);
    CHECK(r.out.find("seed 4: ok (yelloworange -> orange -> red") != std::string::npos);
    CHECK(run({"--out", dir.string(), "toy-sim", "--source", "red"}).code == 2);
}
