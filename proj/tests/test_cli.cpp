#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "otrec/cli.hpp"
#include "otrec/dataio.hpp"
#include "otrec/eval.hpp"

using namespace otrec;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

int run_cli(std::vector<std::string> args) {
    std::vector<const char*> argv{"otrec"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("unknown subcommands and flags are usage errors") {
    CHECK(run_cli({"frobnicate"}) == 1);
    CHECK(run_cli({"gen-data", "--no-such-flag"}) == 1);
    CHECK(run_cli({}) == 1);
}

TEST_CASE("gen-data writes the expected record count") {
    const std::string out = temp_path("otrec_cli_gen.jsonl");
    CHECK(run_cli({"gen-data", "--out", out, "--categories", "8", "--samples", "32", "--strokes",
                   "3", "6", "--seed", "7"}) == 0);
    CHECK(read_ink(out).size() == 256);
}

TEST_CASE("missing input files are runtime errors") {
    CHECK(run_cli({"prepare", "--in", temp_path("otrec_does_not_exist.jsonl"), "--out",
                   temp_path("otrec_cli_na.bin")}) == 2);
}

TEST_CASE("fuse computes Eq-style combined scores") {
    const std::string off = temp_path("otrec_cli_off.jsonl");
    const std::string on = temp_path("otrec_cli_on.jsonl");
    const std::string fused = temp_path("otrec_cli_fused.jsonl");
    write_scores({{"s", {{"a", 0.8}, {"b", 0.2}}}}, off);
    write_scores({{"s", {{"a", 0.3}, {"b", 0.7}}}}, on);
    CHECK(run_cli({"fuse", "--off", off, "--on", on, "--gamma", "0.5", "--out", fused}) == 0);
    std::ifstream in(fused);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line.find("\"prediction\":\"a\"") != std::string::npos);
}

TEST_CASE("config files supply defaults that flags override") {
    const std::string cfg = temp_path("otrec_cli_cfg.json");
    {
        std::ofstream out(cfg);
        out << R"({"categories": 2, "samples": 5, "seed": 3})";
    }
    const std::string out1 = temp_path("otrec_cli_cfg_out1.jsonl");
    CHECK(run_cli({"gen-data", "--out", out1, "--config", cfg}) == 0);
    CHECK(read_ink(out1).size() == 10);

    const std::string out2 = temp_path("otrec_cli_cfg_out2.jsonl");
    CHECK(run_cli({"gen-data", "--out", out2, "--config", cfg, "--samples", "2"}) == 0);
    CHECK(read_ink(out2).size() == 4);
}

TEST_CASE("identical gen-data invocations are byte-identical") {
    const std::string a = temp_path("otrec_cli_det_a.jsonl");
    const std::string b = temp_path("otrec_cli_det_b.jsonl");
    CHECK(run_cli({"gen-data", "--out", a, "--categories", "3", "--samples", "4", "--jitter",
                   "2.5", "--seed", "11"}) == 0);
    CHECK(run_cli({"gen-data", "--out", b, "--categories", "3", "--samples", "4", "--jitter",
                   "2.5", "--seed", "11"}) == 0);
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    const std::string sa{std::istreambuf_iterator<char>(fa), std::istreambuf_iterator<char>()};
    const std::string sb{std::istreambuf_iterator<char>(fb), std::istreambuf_iterator<char>()};
    CHECK(sa == sb);
}

TEST_SUITE_END();
