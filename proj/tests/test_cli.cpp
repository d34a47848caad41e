#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <regex>

#include "qis/image_io.hpp"
#include "qis/service.hpp"
#include "qis/synthetic.hpp"

using namespace qis;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("qis_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Result qis(const std::string& args) const {
    const std::string cmd =
        std::string(QIS_CLI_PATH) + " " + args + " >" + path("stdout.txt") + " 2>" + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(path("stdout.txt"));
    r.err = read_file(path("stderr.txt"));
    return r;
  }

  // Writes a scenario through the synth subcommand into dir/name.
  std::string synth(const std::string& scenario, int size) const {
    const std::string d = path(scenario);
    EXPECT_EQ(qis("synth --scenario " + scenario + " --size " + std::to_string(size) + " --dir " + d).code, 0);
    return d;
  }

  fs::path dir_;
};

double final_dice(const std::string& metrics_path) {
  const json j = json::parse(read_file(metrics_path));
  return j.back()["dice"].get<double>();
}

}  // namespace

TEST_F(Cli, MissingImageIsAnError) {
  const Result r = qis("run --template t.png --out m.png");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing required flag"), std::string::npos) << r.err;
}

TEST_F(Cli, UnreadableInputIsAnError) {
  const Result r = qis("run --image " + path("nope.png") + " --template t.png --out " + path("m.png"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("io_error"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(path("m.png")));
}

TEST_F(Cli, UnknownSubcommandOrSuite) {
  EXPECT_EQ(qis("frobnicate").code, 1);
  EXPECT_EQ(qis("").code, 1);
  const Result r = qis("verify --suite astrology");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown suite"), std::string::npos);
}

TEST_F(Cli, CircleWithoutClicks) {
  const std::string d = synth("circle", 96);
  const Result r = qis("run --image " + d + "/image.png --template " + d + "/template.png --truth " + d +
                       "/truth.png --out " + path("m.png") + " --metrics " + path("m.json") + " --trace " +
                       path("t.jsonl") + " --deform-out " + path("grid.png"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GE(final_dice(path("m.json")), 0.95);
  EXPECT_EQ(json::parse(read_file(path("m.json"))).size(), 1u);
  EXPECT_EQ(decode_mask(read_file(path("m.png"))).height(), 96);
  EXPECT_TRUE(detail::looks_like_png(read_file(path("grid.png"))));
  EXPECT_FALSE(read_file(path("t.jsonl")).empty());
}

TEST_F(Cli, TacoScript) {
  const std::string d = synth("taco_plate", 256);
  const Result r = qis("run --image " + d + "/image.png --template " + d + "/template.png --clicks " + d +
                       "/clicks.json --truth " + d + "/truth.png --out " + path("m.png") + " --metrics " +
                       path("m.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GE(final_dice(path("m.json")), 0.95);
}

TEST_F(Cli, PolygonTemplateAndParameters) {
  const std::string d = synth("circle", 64);
  write_file(path("poly.json"), R"({"polygon": [[20, 20], [44, 20], [44, 44], [20, 44]]})");
  const Result r = qis("run --image " + d + "/image.png --template " + path("poly.json") + " --truth " + d +
                       "/truth.png --out " + path("m.png") + " --metrics " + path("m.json") +
                       " --alpha1 0.002 --alpha2 50 --kmeans-k 3 --levels 2 --seed 9");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GE(final_dice(path("m.json")), 0.9);
  EXPECT_EQ(qis("run --image " + d + "/image.png --template " + path("poly.json") + " --out " + path("x.png") +
                " --alpha1 -3")
                .code,
            1);
}

TEST_F(Cli, IneffectiveClickExitsTwo) {
  const std::string d = synth("circle", 64);
  write_file(path("clicks.json"), R"([{"step": 1, "polarity": "pos", "points": [{"x": 32, "y": 32}]}])");
  const Result r = qis("run --image " + d + "/image.png --template " + d + "/template.png --clicks " +
                       path("clicks.json") + " --out " + path("m.png"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ineffective_click"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("m.png")));
}

TEST_F(Cli, MalformedScriptIsAnError) {
  const std::string d = synth("circle", 32);
  write_file(path("clicks.json"), R"([{"step": 1, "polarity": "pos", "points": [{"x": 99, "y": 3}]}])");
  const Result r = qis("run --image " + d + "/image.png --template " + d + "/template.png --clicks " +
                       path("clicks.json") + " --out " + path("m.png"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("out_of_bounds"), std::string::npos);
}

TEST_F(Cli, ReplayIsByteIdenticalAndMatchesService) {
  const std::string d = synth("taco_plate", 96);
  const std::string args = "run --image " + d + "/image.png --template " + d + "/template.png --clicks " + d +
                           "/clicks.json --out ";
  ASSERT_EQ(qis(args + path("a.png")).code, 0);
  ASSERT_EQ(qis(args + path("b.png")).code, 0);
  const std::string a = read_file(path("a.png"));
  EXPECT_EQ(a, read_file(path("b.png")));

  service::Store store(service::Config{});
  const json created = store.create(load_image(d + "/image.png"), load_mask(d + "/template.png"), SessionParams{});
  const std::string id = created["session_id"];
  const json script = json::parse(read_file(d + "/clicks.json"));
  for (const auto& step : script) store.post_clicks(id, step.dump());
  EXPECT_EQ(store.mask_png(id, std::nullopt), a);
}

TEST_F(Cli, VerifyTheorems) {
  const Result r = qis("verify --suite theorems --trials 500 --seed 3");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("minimizer selector: 500/500 pass"), std::string::npos) << r.out;
  // 500 tuples per polarity.
  EXPECT_NE(r.out.find("click-weight soundness: 1000/1000 pass"), std::string::npos) << r.out;
}

TEST_F(Cli, VerifyGradients) {
  const Result r = qis("verify --suite gradients --trials 3");
  ASSERT_EQ(r.code, 0) << r.out;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex("3/3 pass, worst ([0-9.e+-]+)"))) << r.out;
  EXPECT_LT(std::stod(m[1]), 1e-5);
}

TEST_F(Cli, VerifyTopology) {
  const Result r = qis("verify --suite topology --trials 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("3/3 pass"), std::string::npos) << r.out;
}

TEST_F(Cli, SynthWritesAllFiles) {
  const std::string d = synth("knife_plate", 64);
  for (const char* f : {"image.png", "template.png", "truth.png", "clicks.json"}) EXPECT_TRUE(fs::exists(d + "/" + f));
  EXPECT_EQ(json::parse(read_file(d + "/clicks.json")).size(), 2u);
  EXPECT_EQ(qis("synth --scenario teapot --dir " + path("x")).code, 1);
}
