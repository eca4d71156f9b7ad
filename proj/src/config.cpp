#include "splitmeanflow/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw Error(ErrorCategory::config, "config key '" + std::string(key) + "': cannot use '" + std::string(value) +
                                         "' (expected " + std::string(expected) + ")");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

template <typename Int>
Int to_int(std::string_view key, std::string_view v) {
  Int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<double> to_list(std::string_view key, std::string_view v) {
  std::vector<double> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(to_double(key, trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"run_id", [](auto& c, auto, auto v) { c.run_id = std::string(v); }},
      {"out", [](auto& c, auto, auto v) { c.out = std::string(v); }},
      {"dataset", [](auto& c, auto, auto v) { c.dataset.kind = parse_dataset_kind(v); }},
      {"labeled", [](auto& c, auto k, auto v) { c.dataset.labeled = to_bool(k, v); }},
      {"noise", [](auto& c, auto k, auto v) { c.dataset.noise = to_double(k, v); }},
      {"hidden_dim", [](auto& c, auto k, auto v) { c.net.hidden_dim = to_int<Index>(k, v); }},
      {"hidden_layers", [](auto& c, auto k, auto v) { c.net.hidden_layers = to_int<int>(k, v); }},
      {"time_embed_dim", [](auto& c, auto k, auto v) { c.net.time_embed_dim = to_int<Index>(k, v); }},
      {"time_max_frequency", [](auto& c, auto k, auto v) { c.net.time_max_frequency = to_double(k, v); }},
      {"cond_embed_dim", [](auto& c, auto k, auto v) { c.net.cond_embed_dim = to_int<Index>(k, v); }},
      {"flow_ratio_p", [](auto& c, auto k, auto v) { c.plan.flow_ratio_p = to_double(k, v); }},
      {"cfg_scale", [](auto& c, auto k, auto v) { c.plan.cfg_scale_w = to_double(k, v); }},
      {"cfg_dropout_pretrain", [](auto& c, auto k, auto v) { c.plan.cfg_dropout_pretrain = to_double(k, v); }},
      {"batch_size", [](auto& c, auto k, auto v) { c.plan.batch_size = to_int<Index>(k, v); }},
      {"steps", [](auto& c, auto k, auto v) { c.plan.steps = to_int<long>(k, v); }},
      {"lr", [](auto& c, auto k, auto v) { c.plan.lr = to_double(k, v); }},
      {"warmup_steps", [](auto& c, auto k, auto v) { c.plan.warmup_steps = to_int<long>(k, v); }},
      {"ema_decay", [](auto& c, auto k, auto v) { c.plan.ema_decay = to_double(k, v); }},
      {"use_ema", [](auto& c, auto k, auto v) { c.plan.use_ema = to_bool(k, v); }},
      {"time_dist",
       [](auto& c, auto k, auto v) {
         if (v == "sorted_uniform") {
           c.plan.time_dist.kind = TimeDistribution::Kind::sorted_uniform;
         } else if (v == "lognormal") {
           c.plan.time_dist.kind = TimeDistribution::Kind::lognormal;
         } else {
           bad_value(k, v, "sorted_uniform or lognormal");
         }
       }},
      {"time_mu", [](auto& c, auto k, auto v) { c.plan.time_dist.mu = to_double(k, v); }},
      {"time_sigma", [](auto& c, auto k, auto v) { c.plan.time_dist.sigma = to_double(k, v); }},
      {"lambda_min", [](auto& c, auto k, auto v) { c.plan.time_dist.lambda_min = to_double(k, v); }},
      {"lambda_max", [](auto& c, auto k, auto v) { c.plan.time_dist.lambda_max = to_double(k, v); }},
      {"seed", [](auto& c, auto k, auto v) { c.plan.seed = to_int<std::uint64_t>(k, v); }},
      {"loss_norm",
       [](auto& c, auto k, auto v) {
         if (v == "squared") {
           c.plan.loss_norm = LossNorm::squared;
         } else if (v == "unsquared") {
           c.plan.loss_norm = LossNorm::unsquared;
         } else {
           bad_value(k, v, "squared or unsquared");
         }
       }},
      {"log_every", [](auto& c, auto k, auto v) { c.plan.log_every = to_int<long>(k, v); }},
      {"probe_count", [](auto& c, auto k, auto v) { c.plan.probe_count = to_int<Index>(k, v); }},
      {"teacher", [](auto& c, auto, auto v) { c.teacher = std::string(v); }},
      {"checkpoint", [](auto& c, auto, auto v) { c.checkpoint = std::string(v); }},
      {"sample_count", [](auto& c, auto k, auto v) { c.sample_count = to_int<Index>(k, v); }},
      {"k", [](auto& c, auto k, auto v) { c.k = to_int<int>(k, v); }},
      {"euler_steps", [](auto& c, auto k, auto v) { c.euler_steps = to_int<int>(k, v); }},
      {"sample_method",
       [](auto& c, auto k, auto v) {
         if (v != "few_step" && v != "euler") bad_value(k, v, "few_step or euler");
         c.sample_method = std::string(v);
       }},
      {"time_grid", [](auto& c, auto k, auto v) { c.time_grid = to_list(k, v); }},
      {"eval_count", [](auto& c, auto k, auto v) { c.eval_count = to_int<Index>(k, v); }},
      {"mmd_bandwidth", [](auto& c, auto k, auto v) { c.mmd_bandwidth = to_double(k, v); }},
  };
  return table;
}

}  // namespace

NetConfig ExperimentConfig::resolved_net() const {
  NetConfig c = net;
  c.data_dim = dataset.dim();
  c.num_classes = dataset.num_classes();
  return c;
}

void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw Error(ErrorCategory::config, "unknown config key '" + std::string(key) + "'");
  it->second(config, key, value);
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig config;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCategory::config, "config line " + std::to_string(number) + ": expected key = value");
    }
    apply_setting(config, trim(view.substr(0, eq)), trim(view.substr(eq + 1)));
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot read config " + path.string());
  return parse_config(in);
}

std::string render_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& p = c.plan;
  os << "run_id = " << c.run_id << '\n'
     << "out = " << c.out.string() << '\n'
     << "dataset = " << dataset_kind_name(c.dataset.kind) << '\n'
     << "labeled = " << (c.dataset.labeled ? "true" : "false") << '\n'
     << "noise = " << c.dataset.noise << '\n'
     << "hidden_dim = " << c.net.hidden_dim << '\n'
     << "hidden_layers = " << c.net.hidden_layers << '\n'
     << "time_embed_dim = " << c.net.time_embed_dim << '\n'
     << "time_max_frequency = " << c.net.time_max_frequency << '\n'
     << "cond_embed_dim = " << c.net.cond_embed_dim << '\n'
     << "flow_ratio_p = " << p.flow_ratio_p << '\n'
     << "cfg_scale = " << p.cfg_scale_w << '\n'
     << "cfg_dropout_pretrain = " << p.cfg_dropout_pretrain << '\n'
     << "batch_size = " << p.batch_size << '\n'
     << "steps = " << p.steps << '\n'
     << "lr = " << p.lr << '\n'
     << "warmup_steps = " << p.warmup_steps << '\n'
     << "ema_decay = " << p.ema_decay << '\n'
     << "use_ema = " << (p.use_ema ? "true" : "false") << '\n'
     << "time_dist = " << (p.time_dist.kind == TimeDistribution::Kind::lognormal ? "lognormal" : "sorted_uniform")
     << '\n'
     << "time_mu = " << p.time_dist.mu << '\n'
     << "time_sigma = " << p.time_dist.sigma << '\n'
     << "lambda_min = " << p.time_dist.lambda_min << '\n'
     << "lambda_max = " << p.time_dist.lambda_max << '\n'
     << "seed = " << p.seed << '\n'
     << "loss_norm = " << (p.loss_norm == LossNorm::unsquared ? "unsquared" : "squared") << '\n'
     << "log_every = " << p.log_every << '\n'
     << "probe_count = " << p.probe_count << '\n';
  if (!c.teacher.empty()) os << "teacher = " << c.teacher.string() << '\n';
  if (!c.checkpoint.empty()) os << "checkpoint = " << c.checkpoint.string() << '\n';
  os << "sample_count = " << c.sample_count << '\n'
     << "k = " << c.k << '\n'
     << "euler_steps = " << c.euler_steps << '\n'
     << "sample_method = " << c.sample_method << '\n';
  if (!c.time_grid.empty()) {
    os << "time_grid = ";
    for (std::size_t i = 0; i < c.time_grid.size(); ++i) os << (i ? "," : "") << c.time_grid[i];
    os << '\n';
  }
  os << "eval_count = " << c.eval_count << '\n' << "mmd_bandwidth = " << c.mmd_bandwidth << '\n';
  return os.str();
}

}  // namespace splitmeanflow
