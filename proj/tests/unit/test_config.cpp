#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mmi/config.hpp"

using namespace mmi;

TEST_CASE("defaults produce a valid model") {
  RunConfig config;
  CHECK(config.get_int("d_model") == 32);
  CHECK(config.get("optimizer") == "adam");
  CHECK_NOTHROW(config.model().validate());
  CHECK_NOTHROW(config.train().validate());
  CHECK(config.model().decoder.mmfs_feature_dim == 32);
}

TEST_CASE("unknown keys and bad values name the key") {
  RunConfig config;
  try {
    config.set("d_modle", "8");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("d_modle") != std::string::npos);
  }
  try {
    config.set("layers", "two");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("layers") != std::string::npos);
  }
  CHECK_THROWS_AS(config.set("llm_mmfs", "maybe"), ConfigError);
  CHECK_THROWS_AS(config.set("task", "poetry"), ConfigError);
  CHECK_THROWS_AS(config.set_assignment("no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(config.set("lr", "nan"), ConfigError);
}

TEST_CASE("text merging reports the line") {
  RunConfig config;
  config.merge_text("# comment\n\nd_model = 16\nheads=4\n  llm_mmfs = false  \n", "cfg");
  CHECK(config.get_int("d_model") == 16);
  CHECK(config.get_int("heads") == 4);
  CHECK_FALSE(config.get_bool("llm_mmfs"));
  CHECK_FALSE(config.model().llm.use_mmfs);
  try {
    config.merge_text("seed=1\nbogus=3\n", "cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("cfg:2") != std::string::npos);
    CHECK(what.find("bogus") != std::string::npos);
  }
}

TEST_CASE("files round-trip through to_text") {
  RunConfig config;
  config.set("seed", "17");
  config.set("guidance", "2.5");
  const auto path = (std::filesystem::temp_directory_path() / "mmi_test_config.cfg").string();
  {
    std::ofstream out(path);
    out << config.to_text();
  }
  const auto loaded = RunConfig::from_file(path);
  CHECK(loaded.values() == config.values());
  std::remove(path.c_str());
  CHECK_THROWS_AS(RunConfig::from_file(path), IoError);
}
