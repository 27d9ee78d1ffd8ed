#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iterator>

#include "vitmae/checkpoint.hpp"
#include "vitmae/errors.hpp"
#include "vitmae/log.hpp"
#include "vitmae/training.hpp"

using namespace vitmae;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::named("ti");
  c.layers = 2;
  c.width = 24;
  c.heads = 3;
  c.head_hidden = 32;
  c.decoder_layers = 1;
  c.decoder_width = 12;
  c.decoder_heads = 2;
  return c;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vitmae_test_checkpoint_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CheckpointError::Kind decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return CheckpointError::Kind::kIo;
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.metadata["kind"] = "test";
  ck.metadata["note"] = "ΔB_max µ";
  ck.put(StoredTensor::from("a", Tensor<float>({2, 3}, {1.f, -2.f, 3.5f, 0.f, -0.f, 1e-30f})));
  ck.put(StoredTensor::from("b", Tensor<double>({4}, {1.0 / 3.0, -1e300, 5e-324, 2.0})));
  return ck;
}

}  // namespace

TEST_CASE("binary layout") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MAEC");
  CHECK(bytes[4] == kCheckpointVersion);
  CHECK(bytes[5] == 0);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.metadata == sample_checkpoint().metadata);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors == sample_checkpoint().tensors);
  CHECK(back.at("a").dtype == DType::kF32);
  CHECK(back.at("b").dtype == DType::kF64);
  CHECK(back.at("b").values<double>()[2] == 5e-324);
  CHECK(back.at("a").values<double>()[2] == 3.5);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK_THROWS_AS(back.at("missing"), CheckpointError);
}

TEST_CASE("save, load and save again is byte-identical") {
  set_log_level(LogLevel::kWarning);
  const auto dir = scratch_dir("roundtrip");
  const auto corpus = synth_generate(5, 2);
  std::vector<Tensor<float>> images;
  for (const auto& s : corpus.samples) images.push_back(s.image);
  auto tc = TrainConfig::defaults(Phase::kPretrain);
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 8;
  const auto run = pretrain<float>(images, small_config(), tc);
  save_checkpoint(run.checkpoint, dir / "a.maec");
  const auto loaded = load_checkpoint(dir / "a.maec");
  save_checkpoint(loaded, dir / "sub" / "b.maec");
  const auto first = read_bytes(dir / "a.maec");
  CHECK(!first.empty());
  CHECK(first == read_bytes(dir / "sub" / "b.maec"));
  CHECK(loaded.metadata == run.checkpoint.metadata);

  const auto model = load_mae<float>(loaded);
  const auto original = run.model.parameters();
  const auto restored = model.parameters();
  REQUIRE(original.entries().size() == restored.entries().size());
  for (std::size_t i = 0; i < original.entries().size(); ++i) {
    const auto a = original.entries()[i].tensor.data();
    const auto b = restored.entries()[i].tensor.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  fs::remove_all(dir);
}

TEST_CASE("corrupt files are rejected with distinct errors") {
  const auto good = encode_checkpoint(sample_checkpoint());

  auto magic = good;
  magic[0] ^= 0x20;
  CHECK(decode_error(magic) == CheckpointError::Kind::kMagic);

  auto version = good;
  version[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  CHECK(decode_error(version) == CheckpointError::Kind::kVersion);

  for (std::size_t cut : {std::size_t{2}, std::size_t{7}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    const auto kind = decode_error(truncated);
    if (cut < 4) CHECK(kind == CheckpointError::Kind::kMagic);
    else CHECK(kind == CheckpointError::Kind::kTruncated);
  }

  auto trailing = good;
  trailing.push_back(0);
  CHECK(decode_error(trailing) == CheckpointError::Kind::kContent);

  try {
    load_checkpoint("/nonexistent/dir/x.maec");
    FAIL("load succeeded");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::kIo);
  }
}

TEST_CASE("parameter restore checks names and shapes") {
  const auto cfg = small_config();
  const auto reg = VitRegressor<float>::init(cfg, 1);
  Checkpoint ck;
  store_parameters(ck, reg.parameters());
  auto other = VitRegressor<float>::init(cfg, 2);
  auto params = other.parameters();
  CHECK(restore_parameters(ck, params) == params.entries().size());
  CHECK(other.head.out.weight.data()[0] == reg.head.out.weight.data()[0]);

  auto wider = cfg;
  wider.head_hidden = 48;
  auto mismatched = VitRegressor<float>::init(wider, 1).parameters();
  CHECK_THROWS_AS(restore_parameters(ck, mismatched), CheckpointError);

  auto mae = MaeModel<float>::init(cfg, 1).parameters();
  CHECK_THROWS_AS(restore_parameters(ck, mae), CheckpointError);
  CHECK(restore_parameters(ck, mae, "", true) > 0);

  Checkpoint regressor_ck = ck;
  regressor_ck.metadata["kind"] = "regressor";
  regressor_ck.metadata["model"] = model_config_to_json(cfg);
  CHECK_THROWS_AS(load_mae<float>(regressor_ck), ContractError);
  CHECK_NOTHROW(load_regressor<float>(regressor_ck));

  const auto back = model_config_from_json(model_config_to_json(cfg));
  CHECK(back.width == cfg.width);
  CHECK(back.head_hidden == cfg.head_hidden);
  CHECK(back.mask_ratio == cfg.mask_ratio);
}

TEST_CASE("reloaded regressor reproduces validation MSE exactly") {
  set_log_level(LogLevel::kWarning);
  const auto dir = scratch_dir("reload");
  const auto corpus = synth_generate(5, 9);
  const auto split = split_dataset(corpus.samples, 9);
  std::vector<LabeledSample> train, val;
  for (auto i : split.train) train.push_back(corpus.samples[i]);
  for (auto i : split.val) val.push_back(corpus.samples[i]);
  auto tc = TrainConfig::defaults(Phase::kFinetune);
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  const auto run = finetune<float>(train, val, small_config(), tc);
  const double before = evaluate(run.model, val, "val").mse;
  CHECK(before == run.best_val_mse);
  save_checkpoint(run.checkpoint, dir / "reg.maec");
  const auto model = load_regressor<float>(load_checkpoint(dir / "reg.maec"));
  CHECK(evaluate(model, val, "val").mse == before);
  fs::remove_all(dir);
}
