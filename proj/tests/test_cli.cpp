#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "tnseg/config.hpp"

using namespace tnseg;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "tnseg");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::size_t count_files(const fs::path& dir) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
    return n;
}

std::string bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    for (std::string c; std::getline(in, c, ',');) out.push_back(c);
    return out;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinySynth = "height = 64\nwidth = 64\nn_source = 2\nn_target_train = 2\nn_target_test = 2\n";

std::vector<std::string> tiny_train_args(const fs::path& data, const fs::path& out) {
    return {"train", "--data", data.string(), "--out", out.string(), "--iters", "6", "--quiet",
            "--batch-src", "2", "--batch-tgt", "2",
            "--set", "depth=1", "--set", "base_channels=4", "--set", "patch=32", "--set", "patches_per_image=4",
            "--set", "checkpoint_interval=0"};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"train", "--data", "/nonexistent", "--out", "x"}).code == 2);
    const Run help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("synth") != std::string::npos);
}

TEST_CASE("synth layout, seeding and overwrite protection") {
    test::TempDir dir("cli_synth");
    const Run r = run({"synth", "--out-dir", (dir / "a").string()});
    REQUIRE(r.code == 0);
    CHECK(count_files(dir / "a" / "source") == 20 * 3 + 1);
    CHECK(count_files(dir / "a" / "target" / "train") == 10 * 2 + 1);
    CHECK(count_files(dir / "a" / "target" / "test") == 5 * 2 + 1);
    CHECK(count_files(dir / "a" / "target" / "eval_only" / "train") == 10);
    CHECK(count_files(dir / "a" / "target" / "eval_only" / "test") == 5);
    for (const auto& e : fs::directory_iterator(dir / "a" / "target" / "train"))
        CHECK(e.path().filename().string().find("label") == std::string::npos);

    write(dir / "tiny.txt", kTinySynth);
    const std::string cfg = (dir / "tiny.txt").string();
    REQUIRE(run({"synth", "--config", cfg, "--out-dir", (dir / "b").string(), "--seed", "4"}).code == 0);
    REQUIRE(run({"synth", "--config", cfg, "--out-dir", (dir / "c").string(), "--seed", "4"}).code == 0);
    REQUIRE(run({"synth", "--config", cfg, "--out-dir", (dir / "d").string(), "--seed", "5"}).code == 0);
    CHECK(bytes(dir / "b" / "source" / "src_000.pgm") == bytes(dir / "c" / "source" / "src_000.pgm"));
    CHECK(bytes(dir / "b" / "target" / "test" / "tgt_test_001.pgm") ==
          bytes(dir / "c" / "target" / "test" / "tgt_test_001.pgm"));
    CHECK(bytes(dir / "b" / "source" / "src_000.pgm") != bytes(dir / "d" / "source" / "src_000.pgm"));

    CHECK(run({"synth", "--config", cfg, "--out-dir", (dir / "b").string()}).code == 2);
    CHECK(run({"synth", "--config", cfg, "--out-dir", (dir / "b").string(), "--seed", "5", "--force"}).code == 0);
    CHECK(bytes(dir / "b" / "source" / "src_000.pgm") == bytes(dir / "d" / "source" / "src_000.pgm"));

    write(dir / "bad.txt", "height = 64\nvessel_colour = 3\n");
    const Run bad = run({"synth", "--config", (dir / "bad.txt").string(), "--out-dir", (dir / "e").string()});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("vessel_colour") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "e"));
}

TEST_CASE("train, eval, predict and inspect on a tiny dataset") {
    test::TempDir dir("cli_flow");
    write(dir / "tiny.txt", kTinySynth);
    const fs::path data = dir / "data", run_dir = dir / "run";
    REQUIRE(run({"synth", "--config", (dir / "tiny.txt").string(), "--out-dir", data.string()}).code == 0);

    SUBCASE("malformed overrides") {
        auto args = tiny_train_args(data, run_dir);
        args.insert(args.end(), {"--set", "warmup=3"});
        const Run r = run(args);
        CHECK(r.code == 2);
        CHECK(r.err.find("warmup") != std::string::npos);
        CHECK_FALSE(fs::exists(run_dir));
        auto neg = tiny_train_args(data, run_dir);
        neg.insert(neg.end(), {"--lambda-d", "-1"});
        CHECK(run(neg).code == 2);
        auto norm = tiny_train_args(data, run_dir);
        norm.insert(norm.end(), {"--norm", "group"});
        CHECK(run(norm).code == 2);
    }

    SUBCASE("full flow") {
        REQUIRE(run(tiny_train_args(data, run_dir)).code == 0);
        CHECK(fs::exists(run_dir / "final"));
        CHECK(run(tiny_train_args(data, run_dir)).code == 2);
        auto forced = tiny_train_args(data, run_dir);
        forced.push_back("--force");
        CHECK(run(forced).code == 0);

        const std::string ckpt = (run_dir / "final").string();
        const Run ev = run({"eval", "--checkpoint", ckpt, "--data", data.string()});
        REQUIRE(ev.code == 0);
        const auto rows = lines(ev.out);
        REQUIRE(rows.size() == 4);
        CHECK(rows[0] == "image,auc,aupr,f1,se,sp,acc");
        CHECK(split(rows[1]).size() == 7);
        CHECK(rows[3].rfind("mean,", 0) == 0);
        for (std::size_t c = 1; c < 7; ++c) {
            const double v = std::stod(split(rows[3])[c]);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        CHECK(ev.err.find("mean over 2 images") != std::string::npos);

        const fs::path csv = dir / "metrics.csv";
        const Run ev2 = run({"eval", "--checkpoint", ckpt, "--data", data.string(), "--out", csv.string(),
                             "--dump-entropy", (dir / "maps").string()});
        REQUIRE(ev2.code == 0);
        CHECK(bytes(csv) == ev.out);
        CHECK(count_files(dir / "maps") == 4);
        CHECK(run({"eval", "--checkpoint", ckpt, "--data", data.string(), "--out", csv.string()}).code == 2);
        // Target train labels are sealed; the source split has labels next to the images.
        CHECK(run({"eval", "--checkpoint", ckpt, "--data", data.string(), "--domain", "source", "--split", "train"})
                  .code == 0);

        const Run pr = run({"predict", "--checkpoint", ckpt, "--image",
                            (data / "target" / "test" / "tgt_test_000.pgm").string(), "--mask",
                            (data / "target" / "test" / "tgt_test_000_mask.pgm").string(), "--out",
                            (dir / "pred").string()});
        REQUIRE(pr.code == 0);
        const Tensor prob = load_tensor(dir / "pred");
        CHECK(prob.shape() == Shape{64, 64});
        for (double v : prob.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        CHECK(fs::exists(dir / "pred.pgm"));

        const Run in = run({"inspect-channels", "--checkpoint", ckpt, "--layer", "seg.enc0.norm1"});
        REQUIRE(in.code == 0);
        const auto table = lines(in.out);
        REQUIRE(table.size() == 1 + 4);
        CHECK(table[0] == "channel,d,eta");
        double sum = 0, prev_eta = 1e300, min_d = 1e300;
        for (std::size_t i = 1; i < table.size(); ++i) {
            const auto cells = split(table[i]);
            const double eta = std::stod(cells[2]);
            CHECK(eta <= prev_eta);
            prev_eta = eta;
            sum += eta;
            min_d = std::min(min_d, std::stod(cells[1]));
        }
        CHECK(std::abs(sum - 4.0) < 1e-6);
        CHECK(std::stod(split(table[1])[1]) == min_d);
        CHECK(in.err.find("sum of eta") != std::string::npos);

        const Run probe = run({"inspect-channels", "--checkpoint", ckpt, "--layer", "seg.enc0.norm1", "--probe",
                               (data / "target" / "test" / "tgt_test_000.pgm").string(), "--maps-dir",
                               (dir / "chan").string()});
        CHECK(probe.code == 0);
        CHECK(count_files(dir / "chan") == 4);

        const Run bad = run({"inspect-channels", "--checkpoint", ckpt, "--layer", "seg.nope"});
        CHECK(bad.code == 2);
        CHECK(bad.err.find("seg.enc0.norm1") != std::string::npos);
    }
}

TEST_CASE("gradcheck command and fault injection") {
    const Run ok = run({"gradcheck"});
    CHECK(ok.code == 0);
    CHECK(ok.out.find("gradcheck passed") != std::string::npos);
    CHECK(ok.out.find("max relative error") != std::string::npos);
    const Run bad = run({"gradcheck", "--inject-fault", "flip-leaky-relu-grad"});
    CHECK(bad.code == 1);
    CHECK(bad.out.find("FAIL") != std::string::npos);
    CHECK(run({"gradcheck"}).code == 0);
    CHECK(run({"gradcheck", "--inject-fault", "everything"}).code == 2);
}

}  // TEST_SUITE
