#include <gtest/gtest.h>

#include "cmri/error.hpp"
#include "pipeline_common.hpp"

using namespace cmri;
using namespace cmri::testing;

namespace {

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = load_config(fs::path(CMRI_TEST_CONFIG_DIR) / "tiny.json");
  c.out = out.string();
  c.validate();
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmri_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Pipeline, RunsEndToEndAndRepeatsExactly) {
  const fs::path a = scratch("a"), b = scratch("b");
  run_pipeline(tiny(a), {});
  run_pipeline(tiny(b), {});
  std::string why;
  EXPECT_TRUE(runs_match(RunLayout{a}, RunLayout{b}, 1e-5, why)) << why;

  const RunLayout L{a};
  int samples = 0, decoded = 0;
  for (const auto& e : fs::directory_iterator(L.samples())) samples += e.path().extension() == ".lat";
  for (const auto& e : fs::directory_iterator(L.decoded())) {
    if (e.path().extension() != ".pat") continue;
    ++decoded;
    const Container c = read_container(e.path(), kPatchMagic);
    ASSERT_FALSE(c.arrays.empty());
    EXPECT_EQ(c.arrays.front().shape, (std::vector<std::int64_t>{2, 96, 96}));
  }
  EXPECT_EQ(samples, 8);
  EXPECT_EQ(decoded, 8);
  for (const char* f : {"results.tsv", "substitution.svg", "additive.svg", "summary.md"}) {
    EXPECT_TRUE(fs::exists(L.report() / f)) << f;
  }
  EXPECT_TRUE(fs::exists(L.dataset() / "counts.tsv"));
  fs::remove_all(b);
  fs::remove_all(a);
}

TEST(Pipeline, ExistingOutputNeedsForce) {
  const fs::path a = scratch("force");
  const ExperimentConfig c = tiny(a);
  cmd_prepare(c, {});
  EXPECT_THROW(cmd_prepare(c, {}), ValidationError);
  RunOptions force;
  force.force = true;
  EXPECT_NO_THROW(cmd_prepare(c, force));
  fs::remove_all(a);
}

TEST(Pipeline, MissingInputsAreReported) {
  const fs::path a = scratch("missing");
  const ExperimentConfig c = tiny(a);
  EXPECT_THROW(cmd_train_ae(c, {}), MissingArtifactError);
  EXPECT_THROW(cmd_finetune_fm(c, {}), MissingArtifactError);
  EXPECT_THROW(cmd_report(c, {}), MissingArtifactError);
  fs::remove_all(a);
}
