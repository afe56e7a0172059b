#include "doctest.h"

#include "cli.hpp"
#include "dreg/data_io.hpp"
#include "dreg/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unistd.h>

using namespace dreg;
namespace fs = std::filesystem;

namespace {

struct Scratch {
    fs::path dir;
    Scratch() : dir(fs::temp_directory_path() / ("dreg_cli_" + std::to_string(::getpid()))) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

int call(std::vector<std::string> args, std::string* captured = nullptr) {
    args.insert(args.begin(), "dreg");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (captured) *captured = out.str() + err.str();
    return code;
}

std::string bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kToyConfig = "lr0=1e-4\nepochs=2\nhalve_after=1\nsteps_per_epoch=2\nseed=3\n"
                         "encoder_widths=4,8,8,8\naffine_widths=4,4,4,4,4\n";

} // namespace

TEST_CASE("synth: pairs on disk, deterministic, bad shapes rejected") {
    Scratch s;
    REQUIRE(call({"synth", "--shape", "16", "--n", "2", "--noise", "0.01", "--seed", "4", "--out-dir", s / "a"}) == cli::ok);
    REQUIRE(call({"synth", "--shape", "16", "--n", "2", "--noise", "0.01", "--seed", "4", "--out-dir", s / "b"}) == cli::ok);
    const auto pairs = list_pairs(s / "a");
    REQUIRE(pairs.size() == 2);
    const SyntheticPair p = read_pair(pairs[1]);
    CHECK(p.moving.shape() == Shape{1, 16, 16, 16});
    for (const char* f : {"moving.dvol", "fixed.dvol", "masks_moving.dvol", "masks_fixed.dvol", "gt_field.dvol"}) {
        CHECK(bytes(fs::path(s / "a") / "pair_0001" / f) == bytes(fs::path(s / "b") / "pair_0001" / f));
    }
    std::string msg;
    CHECK(call({"synth", "--shape", "20", "--n", "1", "--seed", "1", "--out-dir", s / "c"}, &msg) == cli::usage);
    CHECK(msg.find("multiple of 8") != std::string::npos);
    CHECK(call({"synth", "--shape", "16,16", "--n", "1", "--seed", "1", "--out-dir", s / "c"}) == cli::usage);
    CHECK(call({"synth", "--shape", "16", "--n", "1", "--seed", "1", "--out-dir", s / "c", "--frobnicate"}) == cli::usage);
    CHECK(call({"nonsense"}) == cli::usage);
}

TEST_CASE("train, register and evaluate end to end") {
    Scratch s;
    REQUIRE(call({"synth", "--shape", "16", "--n", "2", "--seed", "5", "--out-dir", s / "data"}) == cli::ok);
    write(s / "cfg.txt", kToyConfig);

    SUBCASE("missing data and bad config") {
        CHECK(call({"train", "--config", s / "cfg.txt", "--data-dir", s / "nothing", "--out-ckpt", s / "m.ckpt"}) == cli::data);
        write(s / "bad.txt", "lr0=1e-4\nwidths=3\n");
        CHECK(call({"train", "--config", s / "bad.txt", "--data-dir", s / "data", "--out-ckpt", s / "m.ckpt"}) == cli::data);
        CHECK_FALSE(fs::exists(s / "m.ckpt"));
    }

    REQUIRE(call({"train", "--config", s / "cfg.txt", "--data-dir", s / "data", "--out-ckpt", s / "m.ckpt"}) == cli::ok);
    CHECK(load_checkpoint(s / "m.ckpt").step == 4);
    {
        std::istringstream log(bytes(s / "m.ckpt.log"));
        int lines = 0;
        for (std::string line; std::getline(log, line); ++lines) CHECK(StepRecord::parse(line).step == lines + 1);
        CHECK(lines == 4);
    }

    SUBCASE("resume continues the step count") {
        write(s / "cfg3.txt", std::string(kToyConfig).replace(std::string(kToyConfig).find("epochs=2"), 8, "epochs=3"));
        REQUIRE(call({"train", "--config", s / "cfg3.txt", "--data-dir", s / "data", "--out-ckpt", s / "m.ckpt", "--resume"}) ==
                cli::ok);
        CHECK(load_checkpoint(s / "m.ckpt").step == 6);
    }

    SUBCASE("unsupervised runs log no segmentation term") {
        REQUIRE(call({"train", "--config", s / "cfg.txt", "--data-dir", s / "data", "--out-ckpt", s / "u.ckpt",
                      "--unsupervised"}) == cli::ok);
        CHECK(bytes(s / "u.ckpt.log").find("L_seg") == std::string::npos);
    }

    SUBCASE("register, cascades and evaluate") {
        const std::string m = s / "data/pair_0000/moving.dvol", f = s / "data/pair_0000/fixed.dvol";
        const std::string mm = s / "data/pair_0000/masks_moving.dvol", mf = s / "data/pair_0000/masks_fixed.dvol";
        auto reg = [&](const std::string& tag, const std::string& cascades) {
            return call({"register", "--ckpt", s / "m.ckpt", "--moving", m, "--fixed", f, "--out-moved", s / (tag + "_moved.dvol"),
                         "--out-field", s / (tag + "_field.dvol"), "--cascades", cascades, "--masks", mm, "--out-masks",
                         s / (tag + "_masks.dvol")});
        };
        REQUIRE(reg("one", "1") == cli::ok);
        REQUIRE(reg("two", "2") == cli::ok);
        REQUIRE(reg("again", "1") == cli::ok);
        CHECK(read_volume(s / "one_field.dvol").shape() == Shape{3, 16, 16, 16});
        CHECK(bytes(s / "one_moved.dvol") == bytes(s / "again_moved.dvol"));
        CHECK(bytes(s / "one_field.dvol") != bytes(s / "two_field.dvol"));
        CHECK(reg("bad", "0") == cli::usage);

        std::string report;
        REQUIRE(call({"evaluate", "--moved", s / "one_moved.dvol", "--fixed", f, "--masks-moved", s / "one_masks.dvol",
                      "--masks-fixed", mf, "--field", s / "one_field.dvol", "--out", s / "rep.txt"},
                     &report) == cli::ok);
        std::ifstream in(s / "rep.txt");
        const MetricReport r = MetricReport::read(in);
        CHECK(r.dice.has_value());
        CHECK(r.jacobian_std.has_value());
        CHECK(r.folding_fraction.has_value());

        REQUIRE(call({"evaluate", "--moved", f, "--fixed", f, "--masks-moved", mf, "--masks-fixed", mf, "--out", s / "same.txt"}) ==
                cli::ok);
        std::ifstream same_in(s / "same.txt");
        const MetricReport same = MetricReport::read(same_in);
        CHECK(*same.dice == 1.0);
        CHECK(same.mse == 0.0);
        CHECK_FALSE(same.jacobian_std.has_value());

        // Masks on another grid.
        REQUIRE(call({"synth", "--shape", "8", "--n", "1", "--seed", "5", "--out-dir", s / "small"}) == cli::ok);
        CHECK(call({"evaluate", "--moved", f, "--fixed", f, "--masks-moved", mf, "--masks-fixed",
                    s / "small/pair_0000/masks_fixed.dvol", "--out", s / "x.txt"}) == cli::data);
        CHECK(call({"evaluate", "--moved", f, "--fixed", f, "--masks-moved", mf, "--out", s / "x.txt"}) == cli::usage);
        CHECK(call({"register", "--ckpt", s / "m.ckpt", "--moving", s / "small/pair_0000/moving.dvol", "--fixed", f,
                    "--out-moved", s / "x.dvol", "--out-field", s / "y.dvol"}) == cli::data);
    }

    SUBCASE("a checkpoint whose parameters do not fit its config") {
        Checkpoint ck = load_checkpoint(s / "m.ckpt");
        ck.config = NetConfig{}.to_text();
        save_checkpoint(s / "wrong.ckpt", ck);
        CHECK(call({"register", "--ckpt", s / "wrong.ckpt", "--moving", s / "data/pair_0000/moving.dvol", "--fixed",
                    s / "data/pair_0000/fixed.dvol", "--out-moved", s / "x.dvol", "--out-field", s / "y.dvol"}) == cli::data);
        CHECK_FALSE(fs::exists(s / "x.dvol"));
    }
}

TEST_CASE("gradcheck subcommand exit codes") {
    std::string out;
    CHECK(call({"gradcheck", "--seed", "3", "--inject-fault", "sigmoid"}, &out) == cli::numerical);
    CHECK(out.find("sigmoid") != std::string::npos);
    CHECK(out.find("FAIL") != std::string::npos);
    CHECK(call({"gradcheck", "--inject-fault", "not_an_op"}) == cli::usage);
}
