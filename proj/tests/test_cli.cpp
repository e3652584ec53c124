#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cli.hpp"
#include "kvq/serialize.hpp"
#include "test_util.hpp"

using kvq::testing::read_bytes;
using kvq::testing::TempDir;
using kvq::testing::write_bytes;
using Json = nlohmann::json;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult kvq_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = kvq::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string llama_config(const TempDir& dir) {
  const auto p = dir / "llama.json";
  write_bytes(p, R"({"n_layers": 32, "n_heads": 32, "head_dim": 128, "seq_len": [4096, 131072],
                     "schemes": ["fp16", "nuq3-1%"]})");
  return p.string();
}

}  // namespace

TEST(Cli, SimulateDumpThenCalibrate) {
  TempDir dir;
  const auto dump = (dir / "calib").string();
  const CliResult sim = kvq_run({"simulate", "--seed", "2", "--layers", "2", "--heads", "2", "--head-dim", "4", "--tokens",
                           "16", "--calib-samples", "3", "--steps", "4", "--dump-calib", dump});
  ASSERT_EQ(sim.code, 0) << sim.err;
  const Json rep = Json::parse(sim.out);
  EXPECT_EQ(rep.at("step_errors").size(), 4u);

  const std::vector<std::string> cal = {"calibrate", "--keys", dump + "/keys", "--values", dump + "/values",
                                        "--grads", dump + "/grads", "--bits", "3", "--outlier-frac", "0.05",
                                        "--head-dim", "4", "--out"};
  auto a = cal, b = cal;
  a.push_back((dir / "a.json").string());
  b.push_back((dir / "b.json").string());
  const CliResult ra = kvq_run(a), rb = kvq_run(b);
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(read_bytes(dir / "a.json"), read_bytes(dir / "b.json"));

  const auto bundle = kvq::load_bundle(dir / "a.json");
  ASSERT_EQ(bundle.layers.size(), 2u);
  EXPECT_EQ(bundle.bits, 3);
  EXPECT_EQ(bundle.layers[1].layer_id, 1);
  EXPECT_EQ(bundle.layers[0].key.channels(), 8u);
  EXPECT_EQ(bundle.layers[0].key.rope.head_dim, 4u);
}

TEST(Cli, CalibrateRejectsUnsupportedBits) {
  TempDir dir;
  const CliResult r = kvq_run({"calibrate", "--keys", dir.path().string(), "--values", dir.path().string(), "--bits", "5",
                         "--out", (dir / "q.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: invalid_argument:", 0), 0u) << r.err;
}

TEST(Cli, CalibrateEmptyDirectoryFails) {
  TempDir dir;
  const CliResult r = kvq_run({"calibrate", "--keys", dir.path().string(), "--values", dir.path().string(), "--out",
                         (dir / "q.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: io:", 0), 0u) << r.err;
}

TEST(Cli, PlanJsonAndTableAgree) {
  TempDir dir;
  const auto cfg = llama_config(dir);
  const CliResult js = kvq_run({"plan", "--config", cfg, "--format", "json"});
  ASSERT_EQ(js.code, 0) << js.err;
  const Json rows = Json::parse(js.out).at("rows");
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    const double ratio = r.at("compression_ratio").get<double>();
    if (r.at("scheme") == "fp16") {
      EXPECT_EQ(ratio, 1.0);
    } else if (r.at("seq_len") == 131072) {
      EXPECT_NEAR(ratio, 4.8, 0.1);
    }
  }
  EXPECT_EQ(rows[1].at("fp16_bytes").get<std::uint64_t>(), std::uint64_t{1} << 36);

  const CliResult table = kvq_run({"plan", "--config", cfg});
  ASSERT_EQ(table.code, 0) << table.err;
  std::istringstream lines(table.out);
  std::string line;
  std::getline(lines, line);
  for (const auto& r : rows) {
    ASSERT_TRUE(std::getline(lines, line));
    std::istringstream f(line);
    std::string scheme;
    unsigned long long seq = 0;
    double fp16_gb = 0, quant_gb = 0, bits = 0, ratio = 0;
    f >> scheme >> seq >> fp16_gb >> quant_gb >> bits >> ratio;
    EXPECT_EQ(scheme, r.at("scheme").get<std::string>());
    EXPECT_EQ(seq, r.at("seq_len").get<unsigned long long>());
    EXPECT_NEAR(fp16_gb, r.at("fp16_bytes").get<double>() / 1e9, 0.005);
    EXPECT_NEAR(quant_gb, r.at("quant_bytes").get<double>() / 1e9, 0.005);
    EXPECT_NEAR(bits, r.at("avg_bits").get<double>(), 0.0005);
    EXPECT_NEAR(ratio, r.at("compression_ratio").get<double>(), 0.005);
  }
}

TEST(Cli, PlanMalformedConfig) {
  TempDir dir;
  write_bytes(dir / "bad.json", R"({"n_layers": 2})");
  const CliResult r = kvq_run({"plan", "--config", (dir / "bad.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: malformed:", 0), 0u) << r.err;
}

TEST(Cli, BenchRejectsZeroRepeats) {
  const CliResult r = kvq_run({"bench", "--repeats", "0"});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, BenchReportsEveryKernel) {
  const CliResult r = kvq_run({"bench", "--seq-lens", "64,128", "--repeats", "2", "--head-dim", "16", "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::set<std::pair<std::uint64_t, std::string>> seen;
  const Json rep = Json::parse(r.out);
  for (const auto& row : rep.at("rows")) {
    seen.emplace(row.at("seq_len").get<std::uint64_t>(), row.at("kernel").get<std::string>());
    EXPECT_GE(row.at("mean_ns").get<double>(), 0.0);
  }
  for (std::uint64_t l : {64, 128})
    for (const char* k : {"pack", "sparse_append", "qk_scores", "av_matvec", "Total"})
      EXPECT_EQ(seen.count(std::make_pair(l, std::string(k))), 1u) << l << " " << k;
}

TEST(Cli, HelpExitsZero) {
  const CliResult r = kvq_run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("calibrate"), std::string::npos);
}
