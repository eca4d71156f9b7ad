#include "splitmeanflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {
namespace {

using nlohmann::ordered_json;

ordered_json arch_json(const NetConfig& c) {
  return {{"data_dim", c.data_dim},
          {"hidden_dim", c.hidden_dim},
          {"hidden_layers", c.hidden_layers},
          {"time_embed_dim", c.time_embed_dim},
          {"time_max_frequency", c.time_max_frequency},
          {"num_classes", c.num_classes},
          {"cond_embed_dim", c.cond_embed_dim}};
}

NetConfig arch_from_json(const ordered_json& j) {
  NetConfig c;
  c.data_dim = j.at("data_dim").get<Index>();
  c.hidden_dim = j.at("hidden_dim").get<Index>();
  c.hidden_layers = j.at("hidden_layers").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<Index>();
  c.time_max_frequency = j.at("time_max_frequency").get<double>();
  c.num_classes = j.at("num_classes").get<int>();
  c.cond_embed_dim = j.at("cond_embed_dim").get<Index>();
  return c;
}

ordered_json plan_json(const TrainPlan& p) {
  return {{"flow_ratio_p", p.flow_ratio_p},
          {"cfg_scale_w", p.cfg_scale_w},
          {"cfg_dropout_pretrain", p.cfg_dropout_pretrain},
          {"cfg_dropout_distill", p.cfg_dropout_distill},
          {"batch_size", p.batch_size},
          {"steps", p.steps},
          {"lr", p.lr},
          {"warmup_steps", p.warmup_steps},
          {"ema_decay", p.ema_decay},
          {"use_ema", p.use_ema},
          {"time_dist", p.time_dist.kind == TimeDistribution::Kind::lognormal ? "lognormal" : "sorted_uniform"},
          {"time_mu", p.time_dist.mu},
          {"time_sigma", p.time_dist.sigma},
          {"lambda_min", p.time_dist.lambda_min},
          {"lambda_max", p.time_dist.lambda_max},
          {"seed", p.seed},
          {"mode", p.mode == TrainMode::distill ? "distill" : "from_scratch"},
          {"objective", std::string(objective_name(p.objective))},
          {"loss_norm", p.loss_norm == LossNorm::unsquared ? "unsquared" : "squared"},
          {"log_every", p.log_every},
          {"probe_count", p.probe_count},
          {"divergence_threshold", p.divergence_threshold},
          {"divergence_patience", p.divergence_patience}};
}

TrainPlan plan_from_json(const ordered_json& j) {
  TrainPlan p;
  p.flow_ratio_p = j.at("flow_ratio_p").get<double>();
  p.cfg_scale_w = j.at("cfg_scale_w").get<double>();
  p.cfg_dropout_pretrain = j.at("cfg_dropout_pretrain").get<double>();
  p.cfg_dropout_distill = j.at("cfg_dropout_distill").get<double>();
  p.batch_size = j.at("batch_size").get<Index>();
  p.steps = j.at("steps").get<long>();
  p.lr = j.at("lr").get<double>();
  p.warmup_steps = j.at("warmup_steps").get<long>();
  p.ema_decay = j.at("ema_decay").get<double>();
  p.use_ema = j.at("use_ema").get<bool>();
  p.time_dist.kind = j.at("time_dist").get<std::string>() == "lognormal" ? TimeDistribution::Kind::lognormal
                                                                        : TimeDistribution::Kind::sorted_uniform;
  p.time_dist.mu = j.at("time_mu").get<double>();
  p.time_dist.sigma = j.at("time_sigma").get<double>();
  p.time_dist.lambda_min = j.at("lambda_min").get<double>();
  p.time_dist.lambda_max = j.at("lambda_max").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.mode = j.at("mode").get<std::string>() == "distill" ? TrainMode::distill : TrainMode::from_scratch;
  p.objective = j.at("objective").get<std::string>() == "meanflow" ? Objective::meanflow : Objective::splitmeanflow;
  p.loss_norm = j.at("loss_norm").get<std::string>() == "unsquared" ? LossNorm::unsquared : LossNorm::squared;
  p.log_every = j.at("log_every").get<long>();
  p.probe_count = j.at("probe_count").get<Index>();
  p.divergence_threshold = j.at("divergence_threshold").get<double>();
  p.divergence_patience = j.at("divergence_patience").get<int>();
  return p;
}

void append_le(std::string& out, const std::vector<Matrix>& params) {
  for (const auto& m : params) {
    for (Index i = 0; i < m.size(); ++i) {
      auto bits = std::bit_cast<std::uint64_t>(m.data()[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      out.append(bytes, 8);
    }
  }
}

void read_le(const char* block, std::vector<Matrix>& params) {
  std::size_t offset = 0;
  for (auto& m : params) {
    for (Index i = 0; i < m.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, block + offset, 8);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      m.data()[i] = std::bit_cast<double>(bits);
      offset += 8;
    }
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VelocityNet& net, const VelocityNet* ema,
                     const TrainPlan& plan, const ToyDataset* dataset) {
  if (ema != nullptr && !(ema->config() == net.config())) {
    throw Error(ErrorCategory::checkpoint_dimension, "EMA shadow architecture differs from the network");
  }
  const Index count = net.parameter_count();
  ordered_json header;
  header["format"] = checkpoint_format;
  header["version"] = checkpoint_version;
  header["arch"] = arch_json(net.config());
  header["schedule"] = "linear";
  header["plan"] = plan_json(plan);
  if (dataset != nullptr) {
    header["dataset"] = {{"kind", std::string(dataset_kind_name(dataset->kind))},
                         {"labeled", dataset->labeled},
                         {"noise", dataset->noise}};
  }
  header["param_count"] = count;
  header["param_bytes"] = count * 8;
  header["has_ema"] = ema != nullptr;

  std::string payload = header.dump() + '\n';
  append_le(payload, net.parameters());
  if (ema != nullptr) append_le(payload, ema->parameters());

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCategory::io, "cannot write " + tmp.string());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw Error(ErrorCategory::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCategory::io, "cannot open checkpoint " + path.string());
  std::string contents((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto newline = contents.find('\n');
  if (newline == std::string::npos) throw Error(ErrorCategory::checkpoint_malformed, "checkpoint header line missing");

  ordered_json header;
  try {
    header = ordered_json::parse(contents.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::checkpoint_malformed, std::string("checkpoint header is not JSON: ") + e.what());
  }

  try {
    if (header.at("format").get<std::string>() != checkpoint_format) {
      throw Error(ErrorCategory::checkpoint_malformed, "not a splitmeanflow checkpoint");
    }
    const int version = header.at("version").get<int>();
    if (version != checkpoint_version) {
      throw Error(ErrorCategory::checkpoint_version, "checkpoint version " + std::to_string(version) +
                                                         " is not supported (expected " +
                                                         std::to_string(checkpoint_version) + ")");
    }
    Checkpoint out{VelocityNet(arch_from_json(header.at("arch"))), std::nullopt, plan_from_json(header.at("plan")),
                   std::nullopt};
    if (header.contains("dataset")) {
      const auto& d = header.at("dataset");
      ToyDataset ds;
      ds.kind = parse_dataset_kind(d.at("kind").get<std::string>());
      ds.labeled = d.at("labeled").get<bool>();
      ds.noise = d.at("noise").get<double>();
      out.dataset = ds;
    }

    const auto count = header.at("param_count").get<Index>();
    const auto bytes = header.at("param_bytes").get<Index>();
    const bool has_ema = header.at("has_ema").get<bool>();
    if (count != out.net.parameter_count() || bytes != 8 * count) {
      throw Error(ErrorCategory::checkpoint_dimension,
                  "header declares " + std::to_string(count) + " parameters / " + std::to_string(bytes) +
                      " bytes but the architecture needs " + std::to_string(out.net.parameter_count()));
    }
    const std::size_t block = static_cast<std::size_t>(bytes) * (has_ema ? 2 : 1);
    const std::size_t available = contents.size() - newline - 1;
    if (available < block) {
      throw Error(ErrorCategory::checkpoint_truncated, "parameter block has " + std::to_string(available) +
                                                           " bytes, header declares " + std::to_string(block));
    }
    if (available > block) {
      throw Error(ErrorCategory::checkpoint_dimension, "parameter block has " + std::to_string(available - block) +
                                                           " trailing bytes");
    }
    const char* data = contents.data() + newline + 1;
    read_le(data, out.net.parameters());
    if (has_ema) {
      VelocityNet shadow(out.net.config());
      read_le(data + bytes, shadow.parameters());
      out.ema = std::move(shadow);
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::checkpoint_malformed, std::string("checkpoint header field: ") + e.what());
  }
}

}  // namespace splitmeanflow
