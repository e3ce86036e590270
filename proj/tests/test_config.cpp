#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "mobo/config.hpp"

using mobo::Config;
using mobo::ConfigError;

namespace {

std::string write_temp(const std::string& body) {
  std::string path = "test_config_tmp.cfg";
  std::ofstream out(path);
  out << body;
  return path;
}

}  // namespace

TEST_CASE("config parses keys, comments and blank lines") {
  auto path = write_temp(
      "# leading comment\n"
      "task.suite = rbf-gp\n"
      "\n"
      "task.grid_n = 512   # trailing comment\n"
      "gp.noise_variance = 0.01\n"
      "eval.weights = 0.25, 0.5,0.25\n");
  Config cfg = Config::from_file(path);
  CHECK(cfg.get_str("task.suite", "?") == "rbf-gp");
  CHECK(cfg.get_int("task.grid_n", 0) == 512);
  CHECK(cfg.get_double("gp.noise_variance", 0.0) == doctest::Approx(0.01));
  auto w = cfg.get_list("eval.weights", {});
  REQUIRE(w.size() == 3);
  CHECK(w[1] == doctest::Approx(0.5));
  std::remove(path.c_str());
}

TEST_CASE("config missing keys fall back to defaults") {
  Config cfg;
  CHECK(cfg.get_int("absent", 7) == 7);
  CHECK(cfg.get_str("absent", "x") == "x");
  CHECK(cfg.get_double("absent", 1.5) == doctest::Approx(1.5));
  CHECK(cfg.get_u64("absent", 99u) == 99u);
}

TEST_CASE("config overrides replace file values") {
  auto path = write_temp("train.episodes = 300\n");
  Config cfg = Config::from_file(path);
  cfg.set("train.episodes", "25");
  CHECK(cfg.get_int("train.episodes", 0) == 25);
  std::remove(path.c_str());
}

TEST_CASE("config rejects malformed input") {
  auto bad_line = write_temp("no equals sign here\n");
  CHECK_THROWS_AS(Config::from_file(bad_line), ConfigError);
  std::remove(bad_line.c_str());

  auto bad_num = write_temp("gp.noise_variance = lots\n");
  Config cfg = Config::from_file(bad_num);
  CHECK_THROWS_AS(cfg.get_double("gp.noise_variance", 0.0), ConfigError);
  CHECK_THROWS_AS(cfg.get_int("gp.noise_variance", 0), ConfigError);
  std::remove(bad_num.c_str());

  CHECK_THROWS_AS(Config::from_file("definitely_missing_file.cfg"), ConfigError);
}
