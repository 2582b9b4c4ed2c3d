#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "vton/cli.hpp"
#include "vton/dataset.hpp"
#include "vton/diffusion.hpp"

using namespace vton;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "vton");
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

// Small but complete: every stage runs, just on a tiny encoder.
const std::vector<std::string> kToy = {"--set", "vit.depth=1",       "--set", "vit.embed_dim=32",
                                       "--set", "vit.num_heads=2",   "--set", "vit.proj_dim=32",
                                       "--set", "vit.condition_dim=16", "--set", "ssl.local_crops=2",
                                       "--set", "ssl.epochs=1",      "--set", "ssl.batch_size=4",
                                       "--set", "denoiser.base_channels=8", "--set", "inpaint.epochs=1"};

std::vector<std::string> with_toy(std::vector<std::string> args) {
  args.insert(args.end(), kToy.begin(), kToy.end());
  return args;
}

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().string().ends_with(suffix);
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  const Result none = run({});
  CHECK(none.code == 2);
  CHECK(none.err.find("gen-data") != std::string::npos);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"train-ssl", "--crop-mode", "grid"}).code == 2);
  CHECK(run({"infer", "--steps", "x"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("configuration errors exit with 1 and name the key") {
  const Result bad = run({"gen-data", "--set", "gen.pairs=0", "--out", "/tmp/never"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("gen.pairs") != std::string::npos);
  const Result missing = run({"train-ssl", "--data", "/nonexistent/root"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("data.root") != std::string::npos);
  CHECK(run({"gen-data", "--set", "no_equals_sign"}).code == 1);
}

TEST_CASE("synthetic data generation") {
  const fs::path root = vton::testing::scratch_dir("cli_gen");
  REQUIRE(run({"gen-data", "--out", (root / "a").string(), "--seed", "4", "--set", "gen.pairs=10"}).code == 0);
  REQUIRE(run({"gen-data", "--out", (root / "b").string(), "--seed", "4", "--set", "gen.pairs=10"}).code == 0);
  for (const char* sub : {"person", "garment", "mask", "agnostic"}) CHECK(count_files(root / "a" / sub, ".png") == 10);
  CHECK(count_files(root / "a" / "annotation", ".json") == 10);
  CHECK(count_files(root / "a" / "flow", ".flo") == 10);
  for (const auto& e : fs::directory_iterator(root / "a" / "mask")) {
    const Image m = read_image(e.path());
    for (double v : m.data()) REQUIRE((v == 0.0 || v == 1.0));
    // identical bytes on regeneration
    CHECK(git_blob_hash_file(e.path()) == git_blob_hash_file(root / "b" / "mask" / e.path().filename()));
  }
  for (const auto& e : fs::directory_iterator(root / "a" / "person"))
    CHECK(git_blob_hash_file(e.path()) == git_blob_hash_file(root / "b" / "person" / e.path().filename()));
  const nlohmann::json manifest = read_json(root / "a" / "manifest.json");
  CHECK(manifest.at("seed") == 4);
  CHECK(manifest.at("config").at("gen.pairs") == "10");
}

TEST_CASE("pipeline end to end on a toy encoder") {
  const fs::path root = vton::testing::scratch_dir("cli_pipeline");
  const std::string data = (root / "data").string();
  REQUIRE(run({"gen-data", "--out", data, "--set", "gen.pairs=12", "--set", "gen.test_fraction=0.25"}).code == 0);

  // Blank the mask of the first test record: inference must return the kept pixels untouched.
  const PairedDatasetIndex index = PairedDatasetIndex::load(data);
  const std::vector<PairRecord> test = index.select("test");
  REQUIRE(test.size() == 3);
  write_png(Image(64, 48, 1), index.path(test[0].mask));

  const Result ssl = run(with_toy({"train-ssl", "--data", data, "--out", (root / "ssl").string()}));
  REQUIRE_MESSAGE(ssl.code == 0, ssl.err);
  CHECK(fs::exists(root / "ssl" / "teacher.vtw"));
  CHECK(fs::exists(root / "ssl" / "checkpoints" / "epoch_000_teacher.vtw"));
  CHECK(fs::exists(root / "ssl" / "train_log.jsonl"));
  const std::string encoder = (root / "ssl" / "teacher.vtw").string();

  const Result vis = run(with_toy({"visualize-attention", "--data", data, "--encoder", encoder, "--out", (root / "vis").string()}));
  REQUIRE_MESSAGE(vis.code == 0, vis.err);
  CHECK(count_files(root / "vis" / "attention", ".png") == 3 * (2 + 1));

  const Result kp = run(with_toy({"extract-keypoints", "--data", data, "--encoder", encoder, "--out", (root / "kp").string()}));
  REQUIRE_MESSAGE(kp.code == 0, kp.err);
  const nlohmann::json keys = read_json(root / "kp" / "keypoints" / (test[1].id + ".json"));
  CHECK(keys.at("crop_rects").size() == 2);

  const Result inp = run(with_toy({"train-inpaint", "--data", data, "--encoder", encoder, "--out", (root / "inp").string()}));
  REQUIRE_MESSAGE(inp.code == 0, inp.err);
  const std::string denoiser = (root / "inp" / "denoiser.vtw").string();

  const std::vector<std::string> infer = with_toy({"infer", "--data", data, "--encoder", encoder, "--denoiser", denoiser,
                                                   "--out", (root / "run").string(), "--steps", "5", "--method", "plms"});
  REQUIRE_MESSAGE(run(infer).code == 0, "infer failed");
  const fs::path out_png = root / "run" / "infer" / (test[0].id + ".png");
  CHECK(read_image(out_png) == read_image(index.path(test[0].agnostic)));
  const nlohmann::json side = read_json(root / "run" / "infer" / (test[1].id + ".json"));
  CHECK(side.at("steps") == 5);
  CHECK(side.at("method") == "plms");
  CHECK(side.at("schedule_hash").get<std::string>().size() == 40);

  // Rerunning with the same manifest reproduces every output byte.
  const std::string first = git_blob_hash_file(root / "run" / "infer" / (test[1].id + ".png"));
  REQUIRE(run(infer).code == 0);
  CHECK(git_blob_hash_file(root / "run" / "infer" / (test[1].id + ".png")) == first);

  const Result ev = run(with_toy({"eval", "--data", data, "--encoder", encoder, "--out", (root / "run").string()}));
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  const nlohmann::json report = read_json(root / "run" / "report.json");
  CHECK(report.at("pairs").size() == 3);
  CHECK(std::isfinite(report.at("ssim_mean").get<double>()));
  CHECK(std::isfinite(report.at("frechet_embed_distance").get<double>()));
  CHECK(report.at("generated_count") == 3);

  for (const char* dir : {"ssl", "vis", "kp", "inp", "run"}) {
    const nlohmann::json m = read_json(root / dir / "manifest.json");
    CHECK(m.contains("config"));
    CHECK(m.contains("seed"));
    CHECK(!m.at("inputs").empty());
    CHECK(fs::exists(root / dir / "config.txt"));
  }
}

TEST_CASE("overlays upscale the input") {
  Rng rng(1);
  const Image img = vton::testing::random_image(64, 48, rng);
  RowVec att = RowVec::Constant(12, 1.0 / 12.0);
  const Image o = attention_overlay(img, att, 4, 3);
  CHECK(o.height() == 256);
  CHECK(o.width() == 192);
}
