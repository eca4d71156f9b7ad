#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "splitmeanflow/checkpoint.hpp"
#include "splitmeanflow/error.hpp"

using namespace splitmeanflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

VelocityNet random_net(Rng& rng) {
  NetConfig c;
  c.data_dim = 1 + static_cast<Index>(uniform01(rng) * 3);
  c.hidden_dim = 2 + static_cast<Index>(uniform01(rng) * 10);
  c.hidden_layers = 1 + static_cast<int>(uniform01(rng) * 3);
  c.time_embed_dim = 2 * (1 + static_cast<Index>(uniform01(rng) * 4));
  c.time_max_frequency = 1.0 + 50.0 * uniform01(rng);
  c.num_classes = uniform01(rng) < 0.5 ? 0 : 1 + static_cast<int>(uniform01(rng) * 8);
  c.cond_embed_dim = 1 + static_cast<Index>(uniform01(rng) * 4);
  VelocityNet net(c);
  for (auto& p : net.parameters())
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = standard_normal(rng) * std::exp(10 * standard_normal(rng));
  return net;
}

TrainPlan random_plan(Rng& rng) {
  TrainPlan p;
  p.flow_ratio_p = uniform01(rng);
  p.cfg_scale_w = 4 * uniform01(rng);
  p.cfg_dropout_pretrain = uniform01(rng);
  p.batch_size = 1 + static_cast<Index>(uniform01(rng) * 1000);
  p.steps = static_cast<long>(uniform01(rng) * 1e6);
  p.lr = uniform01(rng) * 1e-2;
  p.ema_decay = uniform01(rng);
  p.use_ema = uniform01(rng) < 0.5;
  p.time_dist.kind = uniform01(rng) < 0.5 ? TimeDistribution::Kind::lognormal : TimeDistribution::Kind::sorted_uniform;
  p.time_dist.mu = standard_normal(rng);
  p.time_dist.sigma = uniform01(rng);
  p.seed = rng();
  p.mode = uniform01(rng) < 0.5 ? TrainMode::distill : TrainMode::from_scratch;
  p.objective = uniform01(rng) < 0.5 ? Objective::meanflow : Objective::splitmeanflow;
  p.loss_norm = uniform01(rng) < 0.5 ? LossNorm::unsquared : LossNorm::squared;
  return p;
}

void check_same_plan(const TrainPlan& a, const TrainPlan& b) {
  CHECK(a.flow_ratio_p == b.flow_ratio_p);
  CHECK(a.cfg_scale_w == b.cfg_scale_w);
  CHECK(a.cfg_dropout_pretrain == b.cfg_dropout_pretrain);
  CHECK(a.batch_size == b.batch_size);
  CHECK(a.steps == b.steps);
  CHECK(a.lr == b.lr);
  CHECK(a.ema_decay == b.ema_decay);
  CHECK(a.use_ema == b.use_ema);
  CHECK(a.time_dist.kind == b.time_dist.kind);
  CHECK(a.time_dist.mu == b.time_dist.mu);
  CHECK(a.time_dist.sigma == b.time_dist.sigma);
  CHECK(a.seed == b.seed);
  CHECK(a.mode == b.mode);
  CHECK(a.objective == b.objective);
  CHECK(a.loss_norm == b.loss_norm);
}

std::string read_all(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

ErrorCategory load_error(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const Error& e) {
    return e.category();
  }
  FAIL("expected load to fail");
  return ErrorCategory::io;
}

}  // namespace

TEST_CASE("save then load is bitwise exact over random networks") {
  TempDir dir("smf_test_ckpt_roundtrip");
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const VelocityNet net = random_net(rng);
    VelocityNet ema = net;
    for (auto& p : ema.parameters()) p *= 0.5;
    const TrainPlan plan = random_plan(rng);
    const bool with_ema = trial % 2 == 0;
    const ToyDataset ds{static_cast<ToyDataset::Kind>(trial % 4), trial % 3 == 0, uniform01(rng)};
    const auto path = dir.path / "net.ckpt";
    save_checkpoint(path, net, with_ema ? &ema : nullptr, plan, trial % 5 == 0 ? nullptr : &ds);
    const Checkpoint back = load_checkpoint(path);

    CHECK(back.net.config() == net.config());
    for (std::size_t k = 0; k < net.parameters().size(); ++k) {
      CHECK(bitwise_equal(back.net.parameters()[k], net.parameters()[k]));
    }
    REQUIRE(back.ema.has_value() == with_ema);
    if (with_ema) {
      for (std::size_t k = 0; k < ema.parameters().size(); ++k) {
        CHECK(bitwise_equal(back.ema->parameters()[k], ema.parameters()[k]));
      }
    }
    check_same_plan(back.plan, plan);
    REQUIRE(back.dataset.has_value() == (trial % 5 != 0));
    if (back.dataset) {
      CHECK(back.dataset->kind == ds.kind);
      CHECK(back.dataset->labeled == ds.labeled);
      CHECK(back.dataset->noise == ds.noise);
    }
  }
}

TEST_CASE("saving leaves no temporary file behind and overwrites in place") {
  TempDir dir("smf_test_ckpt_tmp");
  Rng rng(2);
  const auto path = dir.path / "a.ckpt";
  save_checkpoint(path, random_net(rng), nullptr, TrainPlan{});
  save_checkpoint(path, random_net(rng), nullptr, TrainPlan{});
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
  CHECK(files == 1);
  CHECK_FALSE(fs::exists(dir.path / "a.ckpt.tmp"));
}

TEST_CASE("damaged checkpoints fail with a specific category") {
  TempDir dir("smf_test_ckpt_errors");
  Rng rng(3);
  const VelocityNet net = random_net(rng);
  const auto good = dir.path / "good.ckpt";
  save_checkpoint(good, net, &net, TrainPlan{});
  const std::string bytes = read_all(good);
  const auto newline = bytes.find('\n');
  const std::string header = bytes.substr(0, newline);
  const auto bad = dir.path / "bad.ckpt";

  SUBCASE("missing file") { CHECK(load_error(dir.path / "absent.ckpt") == ErrorCategory::io); }
  SUBCASE("truncated block") {
    write_all(bad, bytes.substr(0, bytes.size() - 9));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_truncated);
  }
  SUBCASE("trailing bytes") {
    write_all(bad, bytes + "xxxxxxxx");
    CHECK(load_error(bad) == ErrorCategory::checkpoint_dimension);
  }
  SUBCASE("future version") {
    std::string h = header;
    h.replace(h.find("\"version\":1"), 11, "\"version\":7");
    write_all(bad, h + bytes.substr(newline));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_version);
  }
  SUBCASE("architecture disagrees with the parameter count") {
    std::string h = header;
    const auto at = h.find("\"hidden_dim\":");
    const auto end = h.find(',', at);
    h.replace(at, end - at, "\"hidden_dim\":999");
    write_all(bad, h + bytes.substr(newline));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_dimension);
  }
  SUBCASE("header is not json") {
    write_all(bad, "{not json\n" + bytes.substr(newline + 1));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_malformed);
  }
  SUBCASE("no header line") {
    write_all(bad, "abc");
    CHECK(load_error(bad) == ErrorCategory::checkpoint_malformed);
  }
  SUBCASE("wrong format tag") {
    std::string h = header;
    h.replace(h.find(checkpoint_format), std::strlen(checkpoint_format), "other");
    write_all(bad, h + bytes.substr(newline));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_malformed);
  }
  SUBCASE("missing field") {
    std::string h = header;
    h.replace(h.find("\"arch\""), 6, "\"arcx\"");
    write_all(bad, h + bytes.substr(newline));
    CHECK(load_error(bad) == ErrorCategory::checkpoint_malformed);
  }
}

TEST_CASE("an EMA shadow with another architecture is rejected on save") {
  TempDir dir("smf_test_ckpt_ema");
  Rng rng(4);
  const VelocityNet a = random_net(rng);
  NetConfig other = a.config();
  other.hidden_dim += 1;
  const VelocityNet b(other);
  try {
    save_checkpoint(dir.path / "x.ckpt", a, &b, TrainPlan{});
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::checkpoint_dimension);
  }
}
