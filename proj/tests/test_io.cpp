#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "fedgmm/io.hpp"
#include "test_util.hpp"

using namespace fedgmm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("fedgmm_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_CASE("config parsing: values, comments, lists", "[io]") {
  ConfigMap cfg = ConfigMap::parse_string(
      "# a comment\n"
      "m = 20\n"
      "eta_mu = 1e-2   # trailing comment\n"
      "weights = 0.2, 0.5, 0.8\n"
      "name = run-a\n"
      "flag = true\n");
  CHECK(cfg.get_u64("m") == 20);
  CHECK(cfg.get_double("eta_mu") == 0.01);
  CHECK(cfg.get_double_list("weights") == std::vector<double>{0.2, 0.5, 0.8});
  CHECK(cfg.get_string("name") == "run-a");
  CHECK(cfg.get_bool("flag", false));
  cfg.finalize();  // everything consumed
}

TEST_CASE("config parsing rejects malformed input", "[io]") {
  CHECK_THROWS_AS(ConfigMap::parse_string("novalue\n"), ConfigError);
  CHECK_THROWS_AS(ConfigMap::parse_string("a = 1\na = 2\n"), ConfigError);
  ConfigMap cfg = ConfigMap::parse_string("m = twenty\n");
  CHECK_THROWS_AS(cfg.get_u64("m"), ConfigError);
  ConfigMap cfg2 = ConfigMap::parse_string("x = 1\n");
  CHECK_THROWS_AS(cfg2.get_string("missing"), ConfigError);
}

TEST_CASE("unknown keys are rejected at finalize", "[io]") {
  ConfigMap cfg = ConfigMap::parse_string("m = 3\ntypo_key = 7\n");
  CHECK(cfg.get_u64("m") == 3);
  CHECK_THROWS_WITH(cfg.finalize(),
                    Catch::Matchers::ContainsSubstring("typo_key"));
}

TEST_CASE("hex double encoding is bitwise exact", "[io]") {
  RngStream rng(70);
  for (int i = 0; i < 200; ++i) {
    const double v = std::exp(rng.uniform(-300.0, 300.0)) *
                     (rng.uniform() < 0.5 ? -1.0 : 1.0);
    CHECK(std::bit_cast<std::uint64_t>(hex_to_double(double_to_hex(v))) ==
          std::bit_cast<std::uint64_t>(v));
  }
  for (const double v : {0.0, -0.0, 5e-324, 1.7976931348623157e308}) {
    CHECK(std::bit_cast<std::uint64_t>(hex_to_double(double_to_hex(v))) ==
          std::bit_cast<std::uint64_t>(v));
  }
  CHECK_THROWS_AS(hex_to_double("xyz"), std::invalid_argument);
}

TEST_CASE("fmt_double round-trips doubles through text", "[io]") {
  RngStream rng(71);
  for (int i = 0; i < 500; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-12.0, 12.0));
    CHECK(std::stod(fmt_double(v)) == v);
  }
}

TEST_CASE("samples CSV writes and reads back exactly", "[io]") {
  TempDir tmp;
  Matrix x(5, 3);
  RngStream rng(72);
  for (double& v : x.a) v = rng.normal();
  std::vector<int> labels{1, -1, 1, 1, -1};
  const fs::path file = tmp.path / "data.csv";
  write_samples_csv(file, x, &labels);

  std::vector<int> labels_in;
  const Matrix x_in = read_samples_csv(file, &labels_in);
  CHECK(x_in.a == x.a);
  CHECK(labels_in == labels);

  // header is part of the interface
  std::ifstream in(file);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x0,x1,x2,label");
}

TEST_CASE("metrics CSV has the frozen schema", "[io]") {
  TempDir tmp;
  std::vector<RunRecord> records(2);
  records[0].round = 0;
  records[1].round = 1;
  records[1].mean_error = 0.5;
  records[1].weight_mse = 0.01;
  records[1].train_loss = 3.25;
  const fs::path file = tmp.path / "metrics.csv";
  write_metrics_csv(file, records);
  std::ifstream in(file);
  std::string header, row0, row1;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  CHECK(header == "round,mean_error,weight_mse,train_loss,score_error");
  CHECK(row0 == "0,0,0,nan,nan");
  CHECK(row1 == "1,0.5,0.01,3.25,nan");
}

TEST_CASE("manifest echoes the config", "[io]") {
  ConfigMap cfg = ConfigMap::parse_string("m = 2\nweights = 0.7\n");
  (void)cfg.get_u64("m");
  (void)cfg.get_string("weights");
  const json manifest = make_manifest("gen-data", 99, 2, cfg);
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("seed") == 99);
  CHECK(manifest.at("config").at("m") == "2");
  CHECK(manifest.at("config").at("weights") == "0.7");
  CHECK(manifest.at("format_version") == kFormatVersion);
}

TEST_CASE("engine checkpoint JSON restores bitwise", "[io]") {
  FedConfig cfg;
  cfg.m = 3;
  cfg.n = 48;
  cfg.K = 60;
  cfg.tau_sync = 20;
  cfg.batch = 12;
  cfg.seed = 2024;
  cfg.optimizer = OptimizerKind::adam;
  cfg.weights = WeightsSpec::uniform(0.3, 0.7);
  const std::vector<double> mu{1.25, -0.75};

  FedEngine straight(cfg, mu);
  straight.run();
  const RunResult full = straight.result();

  FedEngine split(cfg, mu);
  split.run_rounds(1);
  const json ckpt = checkpoint_to_json(split);

  // through a file, as the CLI does
  TempDir tmp;
  write_json_file(tmp.path / "params.json", ckpt);
  FedEngine resumed =
      engine_from_checkpoint(read_json_file(tmp.path / "params.json"));
  resumed.run();
  const RunResult tail = resumed.result();

  CHECK(tail.backbone == full.backbone);
  for (std::size_t j = 0; j < cfg.m; ++j)
    CHECK(tail.clients[j].params.logit_hat == full.clients[j].params.logit_hat);
  // the resumed trace must equal the tail of the straight trace
  REQUIRE(full.records.size() == 4);  // init + 3 rounds
  REQUIRE(tail.records.size() == 3);  // restore point + 2 rounds
  for (std::size_t i = 1; i < tail.records.size(); ++i) {
    CHECK(tail.records[i].mean_error == full.records[i + 1].mean_error);
    CHECK(tail.records[i].weight_mse == full.records[i + 1].weight_mse);
    CHECK(tail.records[i].train_loss == full.records[i + 1].train_loss);
  }
}

TEST_CASE("CSV reader surfaces missing columns", "[io]") {
  TempDir tmp;
  const fs::path file = tmp.path / "t.csv";
  {
    CsvWriter csv(file, {"a", "b"});
    csv.write_row(std::vector<double>{1.0, 2.0});
  }
  const CsvTable table = read_csv(file);
  CHECK(table.column_index("b") == 1);
  CHECK_THROWS_AS(table.column_index("zz"), std::invalid_argument);
}
