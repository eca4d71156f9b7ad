#include "splitmeanflow/experiment.hpp"

#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "splitmeanflow/checkpoint.hpp"
#include "splitmeanflow/meanflow.hpp"
#include "splitmeanflow/sampler.hpp"

namespace splitmeanflow {
namespace fs = std::filesystem;

RunPaths RunPaths::of(const ExperimentConfig& config) {
  RunPaths p;
  p.root = config.out / config.run_id;
  p.config = p.root / "config";
  p.checkpoints = p.root / "checkpoints";
  p.final_checkpoint = p.checkpoints / "final.ckpt";
  p.metrics_csv = p.root / "metrics.csv";
  p.samples_csv = p.root / "samples.csv";
  p.summary_json = p.root / "summary.json";
  p.eval_csv = p.root / "eval.csv";
  return p;
}

void RunPaths::create() const {
  std::error_code ec;
  fs::create_directories(checkpoints, ec);
  if (ec) throw Error(ErrorCategory::io, "cannot create " + checkpoints.string() + ": " + ec.message());
}

void write_training_log(const std::vector<LogRow>& log, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCategory::io, "cannot write " + path.string());
  os << "step,objective,branch_mix,loss,isc_residual\n" << std::setprecision(17);
  for (const auto& row : log) {
    os << row.step << ',' << row.objective << ',' << row.branch_mix << ',' << row.loss << ',' << row.isc_residual
       << '\n';
  }
  if (!os) throw Error(ErrorCategory::io, "short write to " + path.string());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCategory::io, "cannot write " + path.string());
  os << text;
}

std::vector<int> uniform_labels(Index n, int num_classes, Rng& rng) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::uniform_int_distribution<int> pick(0, num_classes - 1);
  for (auto& l : labels) l = pick(rng);
  return labels;
}

Matrix student_samples(const VelocityNet& net, const ExperimentConfig& config, std::span<const int> cond,
                       const Matrix& prior) {
  NetField field{net, std::vector<int>(cond.begin(), cond.end())};
  if (!config.time_grid.empty()) return few_step_sample(field, std::span<const double>(config.time_grid), prior);
  return few_step_sample(field, config.k, prior);
}

IscProbes eval_probes(const ExperimentConfig& config) {
  Rng rng = substream(config.plan.seed, "eval-probes");
  return make_isc_probes(config.dataset, config.plan.probe_count, rng, config.plan.time_dist);
}

const VelocityNet& weights(const Checkpoint& ckpt) { return ckpt.ema ? *ckpt.ema : ckpt.net; }

void print_report(const MetricReport& report, std::ostream& out) {
  out << std::setprecision(6);
  for (const auto& [name, value] : report.scalars) out << name << ' ' << value << '\n';
}

void finish_report(MetricReport& report, const RunPaths& paths) {
  append_csv(report, paths.eval_csv);
  write_summary_json(report, paths.summary_json);
}

}  // namespace

EvalSet make_eval_set(const ExperimentConfig& config) {
  EvalSet set;
  Rng data_rng = substream(config.plan.seed, "heldout");
  set.data = sample_batch(config.dataset, config.eval_count, data_rng);
  Rng prior_rng = substream(config.plan.seed, "eval-prior");
  set.prior = sample_prior(config.eval_count, config.dataset.dim(), prior_rng);
  if (set.data.labels) set.cond = *set.data.labels;
  set.bandwidth = config.mmd_bandwidth > 0.0 ? config.mmd_bandwidth
                                             : median_pairwise_distance(set.data.points, set.data.points);
  return set;
}

double few_step_mmd(const VelocityNet& net, const EvalSet& eval, int k) {
  const Matrix samples = few_step_sample(NetField{net, eval.cond}, k, eval.prior);
  return mmd_rbf(samples, eval.data.points, eval.bandwidth);
}

double euler_mmd(const VelocityNet& net, const EvalSet& eval, int n_steps, double w) {
  const Matrix samples = euler_sample(GuidedField{net, eval.cond, w}, n_steps, eval.prior);
  return mmd_rbf(samples, eval.data.points, eval.bandwidth);
}

MetricReport evaluate_student(const VelocityNet& net, const ExperimentConfig& config, const TeacherHandle* teacher) {
  MetricReport report;
  report.run_id = config.run_id;
  report.step = config.plan.steps;
  const EvalSet eval = make_eval_set(config);
  report.set("mmd_bandwidth", eval.bandwidth);
  report.set("mmd_k1", few_step_mmd(net, eval, 1));
  report.set("mmd_k2", few_step_mmd(net, eval, 2));
  if (config.k > 2) report.set("mmd_k" + std::to_string(config.k), few_step_mmd(net, eval, config.k));
  if (config.dataset.dim() == 1) {
    const Matrix one = few_step_sample(NetField{net, eval.cond}, 1, eval.prior);
    report.set("w2_k1", w2_1d(std::span<const double>(one.data(), static_cast<std::size_t>(one.size())),
                              std::span<const double>(eval.data.points.data(),
                                                      static_cast<std::size_t>(eval.data.points.size()))));
  }

  const IscProbes probes = eval_probes(config);
  const ResidualStats isc = isc_residual(NetField{net, probes.cond}, probes);
  report.set("isc_residual_mean", isc.mean);
  report.set("isc_residual_max", isc.max);

  if (teacher != nullptr) {
    report.set("teacher_mmd_euler", euler_mmd(teacher->net(), eval, config.euler_steps, teacher->cfg_scale()));
    const Matrix v = teacher->velocity(probes.z_t, probes.t, probes.cond);
    const Matrix u = forward(net, probes.z_t, probes.t, probes.t, probes.cond);
    report.set("boundary_gap", (u - v).squaredNorm() / std::max(v.squaredNorm(), 1e-300));
  }
  return report;
}

MetricReport evaluate_teacher(const VelocityNet& net, const ExperimentConfig& config) {
  MetricReport report;
  report.run_id = config.run_id;
  report.step = config.plan.steps;
  const EvalSet eval = make_eval_set(config);
  report.set("mmd_bandwidth", eval.bandwidth);
  report.set("mmd_euler", euler_mmd(net, eval, config.euler_steps, config.plan.cfg_scale_w));
  report.set("mmd_k1", few_step_mmd(net, eval, 1));
  const IscProbes probes = eval_probes(config);
  report.set("isc_residual_mean", isc_residual(NetField{net, probes.cond}, probes).mean);
  return report;
}

bool VerifyReport::passed() const {
  const bool slope_ok = limit.exact || (limit.slope >= 0.9 && limit.slope <= 1.1);
  return isc_displacement.max < 1e-10 && meanflow_residual < 1e-8 && slope_ok;
}

VerifyReport verify_field(const AnalyticField& field, std::string_view name, Index probes, std::uint64_t seed) {
  VerifyReport report;
  report.field = std::string(name);
  const Index dim = field.kind() == AnalyticField::Kind::constant ? field.dim() : 2;
  Rng rng = substream(seed, "verify");
  const TimeDistribution dist{TimeDistribution::Kind::sorted_uniform, -0.4, 1.0, 0.0, 1.0};
  const IscProbes p = make_isc_probes(probes, dim, rng, dist);
  report.isc_displacement = isc_residual(field, p, IscForm::displacement);
  report.isc_averaged = isc_residual(field, p, IscForm::averaged);

  const Matrix u = field.average_velocity(p.z_t, p.r, p.t);
  const Matrix v = field.instantaneous_velocity(p.z_t, p.t);
  report.meanflow_residual = (u - meanflow_target(field, p.z_t, p.r, p.t, v)).rowwise().norm().maxCoeff();

  // Keep t - delta above r for every delta on the grid.
  Vector r = 0.5 * p.r;
  Vector t = (0.2 + 0.8 * p.t.array()).matrix();
  const auto deltas = default_limit_deltas();
  report.limit = limit_theorem_check(field, p.z_t, r, t, deltas);
  return report;
}

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::invalid_argument: return 2;
    case ErrorCategory::shape_mismatch: return 3;
    case ErrorCategory::poisoned_state: return 4;
    case ErrorCategory::divergence: return 5;
    case ErrorCategory::missing_teacher: return 6;
    case ErrorCategory::config: return 7;
    case ErrorCategory::checkpoint_version: return 8;
    case ErrorCategory::checkpoint_truncated: return 9;
    case ErrorCategory::checkpoint_dimension: return 10;
    case ErrorCategory::checkpoint_malformed: return 11;
    case ErrorCategory::io: return 12;
  }
  return unexpected_error_code;
}

namespace {

struct Overrides {
  std::string config_path;
  std::vector<std::string> settings;
  std::uint64_t seed = 0;
  long steps = 0;
  double p = 0.0;
  double cfg_scale = 0.0;
  int k = 0;
  std::string out, run_id, teacher, checkpoint;
  std::string field = "all";
};

struct Options {
  CLI::Option* seed = nullptr;
  CLI::Option* steps = nullptr;
  CLI::Option* p = nullptr;
  CLI::Option* cfg_scale = nullptr;
  CLI::Option* k = nullptr;
};

Options add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.settings, "extra key=value setting (repeatable)");
  cmd->add_option("--out", o.out, "output root");
  cmd->add_option("--run-id", o.run_id, "run directory name");
  Options opts;
  opts.seed = cmd->add_option("--seed", o.seed, "master seed");
  opts.steps = cmd->add_option("--steps", o.steps, "optimizer steps");
  opts.p = cmd->add_option("--p", o.p, "flow ratio");
  opts.cfg_scale = cmd->add_option("--cfg-scale", o.cfg_scale, "teacher guidance scale");
  opts.k = cmd->add_option("--k", o.k, "sampling steps");
  cmd->add_option("--teacher", o.teacher, "teacher checkpoint");
  cmd->add_option("--checkpoint", o.checkpoint, "checkpoint to sample or evaluate");
  return opts;
}

ExperimentConfig resolve(const Overrides& o, const Options& opts) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  for (const auto& s : o.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error(ErrorCategory::config, "--set expects key=value, got '" + s + "'");
    std::string_view key(s.data(), eq), value(s.data() + eq + 1, s.size() - eq - 1);
    while (!key.empty() && key.back() == ' ') key.remove_suffix(1);
    while (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    apply_setting(c, key, value);
  }
  if (opts.seed->count()) c.plan.seed = o.seed;
  if (opts.steps->count()) c.plan.steps = o.steps;
  if (opts.p->count()) c.plan.flow_ratio_p = o.p;
  if (opts.cfg_scale->count()) c.plan.cfg_scale_w = o.cfg_scale;
  if (opts.k->count()) c.k = o.k;
  if (!o.out.empty()) c.out = o.out;
  if (!o.run_id.empty()) c.run_id = o.run_id;
  if (!o.teacher.empty()) c.teacher = o.teacher;
  if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
  return c;
}

TrainHooks progress_hooks(std::ostream& out) {
  return {[&out](const LogRow& row) {
    out << "step " << row.step << " loss " << std::setprecision(6) << row.loss << " isc " << row.isc_residual
        << '\n';
  }};
}

void write_samples(const Matrix& points, std::vector<int> labels, const fs::path& path) {
  DataBatch batch{points, std::nullopt};
  if (!labels.empty()) batch.labels = std::move(labels);
  export_csv(batch, path);
}

int cmd_pretrain(ExperimentConfig config, std::ostream& out) {
  config.plan.mode = TrainMode::from_scratch;
  config.plan.objective = Objective::splitmeanflow;
  config.plan.flow_ratio_p = 1.0;
  const RunPaths paths = RunPaths::of(config);
  paths.create();
  write_text(paths.config, render_config(config));

  const TrainResult result = train(config.plan, config.dataset, config.resolved_net(), nullptr, nullptr,
                                   progress_hooks(out));
  write_training_log(result.log, paths.metrics_csv);
  save_checkpoint(paths.final_checkpoint, result.net, result.ema ? &*result.ema : nullptr, config.plan,
                  &config.dataset);

  const VelocityNet& net = result.sampling_net();
  Rng prior_rng = substream(config.plan.seed, "sample-prior");
  const Matrix prior = sample_prior(config.sample_count, config.dataset.dim(), prior_rng);
  std::vector<int> labels;
  if (net.conditional()) {
    Rng label_rng = substream(config.plan.seed, "sample-labels");
    labels = uniform_labels(config.sample_count, net.config().num_classes, label_rng);
  }
  write_samples(euler_sample(GuidedField{net, labels, config.plan.cfg_scale_w}, config.euler_steps, prior), labels,
                paths.samples_csv);

  MetricReport report = evaluate_teacher(net, config);
  report.wall_ms = result.wall_ms;
  finish_report(report, paths);
  print_report(report, out);
  out << "checkpoint " << paths.final_checkpoint.string() << '\n';
  return 0;
}

int cmd_distill(ExperimentConfig config, Objective objective, std::ostream& out) {
  if (config.teacher.empty()) {
    throw Error(ErrorCategory::missing_teacher, "distillation needs a teacher checkpoint (--teacher or teacher =)");
  }
  const Checkpoint teacher_ckpt = load_checkpoint(config.teacher);
  auto teacher_net = std::make_shared<const VelocityNet>(weights(teacher_ckpt));
  const TeacherHandle teacher(teacher_net, config.plan.cfg_scale_w);

  config.plan.mode = TrainMode::distill;
  config.plan.objective = objective;
  config.net = teacher_net->config();
  const RunPaths paths = RunPaths::of(config);
  paths.create();
  write_text(paths.config, render_config(config));

  const TrainResult result = train(config.plan, config.dataset, teacher_net->config(), &teacher, nullptr,
                                   progress_hooks(out));
  write_training_log(result.log, paths.metrics_csv);
  save_checkpoint(paths.final_checkpoint, result.net, result.ema ? &*result.ema : nullptr, config.plan,
                  &config.dataset);

  const VelocityNet& net = result.sampling_net();
  Rng prior_rng = substream(config.plan.seed, "sample-prior");
  const Matrix prior = sample_prior(config.sample_count, config.dataset.dim(), prior_rng);
  std::vector<int> labels;
  if (net.conditional()) {
    Rng label_rng = substream(config.plan.seed, "sample-labels");
    labels = uniform_labels(config.sample_count, net.config().num_classes, label_rng);
  }
  write_samples(student_samples(net, config, labels, prior), labels, paths.samples_csv);

  MetricReport report = evaluate_student(net, config, &teacher);
  const IscProbes probes = eval_probes(config);
  report.set("isc_residual_init_mean", isc_residual(NetField{*teacher_net, probes.cond}, probes).mean);
  report.wall_ms = result.wall_ms;
  finish_report(report, paths);
  print_report(report, out);
  out << "checkpoint " << paths.final_checkpoint.string() << '\n';
  return 0;
}

void require_checkpoint(const ExperimentConfig& config) {
  if (config.checkpoint.empty()) {
    throw Error(ErrorCategory::config, "missing checkpoint (--checkpoint or checkpoint =)");
  }
}

int cmd_sample(ExperimentConfig config, std::ostream& out) {
  require_checkpoint(config);
  const Checkpoint ckpt = load_checkpoint(config.checkpoint);
  if (ckpt.dataset) config.dataset = *ckpt.dataset;
  const VelocityNet& net = weights(ckpt);
  if (net.config().data_dim != config.dataset.dim()) {
    throw Error(ErrorCategory::checkpoint_dimension, "checkpoint data_dim does not match the dataset");
  }
  const RunPaths paths = RunPaths::of(config);
  paths.create();
  write_text(paths.config, render_config(config));

  Rng prior_rng = substream(config.plan.seed, "sample-prior");
  const Matrix prior = sample_prior(config.sample_count, config.dataset.dim(), prior_rng);
  std::vector<int> labels;
  if (net.conditional()) {
    Rng label_rng = substream(config.plan.seed, "sample-labels");
    labels = uniform_labels(config.sample_count, net.config().num_classes, label_rng);
  }
  const Matrix samples = config.sample_method == "euler"
                             ? euler_sample(GuidedField{net, labels, config.plan.cfg_scale_w}, config.euler_steps, prior)
                             : student_samples(net, config, labels, prior);
  write_samples(samples, labels, paths.samples_csv);
  out << "wrote " << samples.rows() << " samples to " << paths.samples_csv.string() << '\n';
  return 0;
}

int cmd_eval(ExperimentConfig config, std::ostream& out) {
  require_checkpoint(config);
  const Checkpoint ckpt = load_checkpoint(config.checkpoint);
  if (ckpt.dataset) config.dataset = *ckpt.dataset;
  const RunPaths paths = RunPaths::of(config);
  paths.create();
  write_text(paths.config, render_config(config));

  const VelocityNet& net = weights(ckpt);
  MetricReport report;
  if (ckpt.plan.mode == TrainMode::from_scratch && ckpt.plan.flow_ratio_p == 1.0) {
    report = evaluate_teacher(net, config);
  } else {
    std::optional<TeacherHandle> teacher;
    if (!config.teacher.empty()) {
      auto t = std::make_shared<const VelocityNet>(weights(load_checkpoint(config.teacher)));
      teacher.emplace(t, config.plan.cfg_scale_w);
    }
    report = evaluate_student(net, config, teacher ? &*teacher : nullptr);
  }
  report.step = ckpt.plan.steps;
  finish_report(report, paths);
  print_report(report, out);
  return 0;
}

void print_verify(const VerifyReport& r, std::ostream& out) {
  out << "field " << r.field << '\n' << std::scientific << std::setprecision(3);
  out << "isc_residual displacement mean " << r.isc_displacement.mean << " max " << r.isc_displacement.max << '\n';
  out << "isc_residual averaged mean " << r.isc_averaged.mean << " max " << r.isc_averaged.max << '\n';
  out << "meanflow_identity max " << r.meanflow_residual << '\n';
  out << "delta error roundoff\n";
  for (const auto& row : r.limit.rows) out << row.delta << ' ' << row.error << ' ' << row.roundoff << '\n';
  out << std::defaultfloat << std::setprecision(4);
  if (r.limit.exact) {
    out << "limit_slope exact\n";
  } else {
    out << "limit_slope " << r.limit.slope << '\n';
  }
  out << (r.passed() ? "PASS" : "FAIL") << '\n';
}

int cmd_verify(const std::string& field, Index probes, std::uint64_t seed, std::ostream& out) {
  std::vector<std::pair<std::string, AnalyticField>> fields;
  if (field == "constant" || field == "all") {
    Vector c(2);
    c << 0.7, -1.3;
    fields.emplace_back("constant", AnalyticField::constant(c));
  }
  if (field == "time_poly" || field == "all") fields.emplace_back("time_poly", AnalyticField::time_poly());
  if (field == "linear_state" || field == "all") fields.emplace_back("linear_state", AnalyticField::linear_state());
  if (fields.empty()) {
    throw Error(ErrorCategory::config, "unknown field '" + field + "' (constant, time_poly, linear_state, all)");
  }
  bool ok = true;
  for (const auto& [name, f] : fields) {
    const VerifyReport report = verify_field(f, name, probes, seed);
    print_verify(report, out);
    ok = ok && report.passed();
  }
  return ok ? 0 : verification_failed_code;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Average-velocity flow models on toy distributions"};
  app.require_subcommand(1);
  Overrides o;
  auto* pretrain = app.add_subcommand("pretrain", "train a flow-matching teacher");
  auto* distill = app.add_subcommand("distill", "distill a teacher with the interval-splitting objective");
  auto* meanflow = app.add_subcommand("meanflow-distill", "distill a teacher with the differential objective");
  auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  auto* eval = app.add_subcommand("eval", "score a checkpoint against held-out data");
  auto* verify = app.add_subcommand("verify", "check the identities on closed-form fields");

  Options pretrain_opts = add_common(pretrain, o);
  Options distill_opts = add_common(distill, o);
  Options meanflow_opts = add_common(meanflow, o);
  Options sample_opts = add_common(sample, o);
  Options eval_opts = add_common(eval, o);
  Index probes = 1000;
  verify->add_option("--field", o.field, "constant | time_poly | linear_state | all");
  verify->add_option("--probes", probes, "random (r, s, t) probes");
  verify->add_option("--seed", o.seed, "probe seed");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
      throw Error(ErrorCategory::config, e.what());
    }
    if (*pretrain) return cmd_pretrain(resolve(o, pretrain_opts), out);
    if (*distill) return cmd_distill(resolve(o, distill_opts), Objective::splitmeanflow, out);
    if (*meanflow) return cmd_distill(resolve(o, meanflow_opts), Objective::meanflow, out);
    if (*sample) return cmd_sample(resolve(o, sample_opts), out);
    if (*eval) return cmd_eval(resolve(o, eval_opts), out);
    if (*verify) {
      const int code = cmd_verify(o.field, probes, o.seed, out);
      if (code != 0) err << "error[verification]: identity check failed\n";
      return code;
    }
    return 0;
  } catch (const Error& e) {
    err << "error[" << category_name(e.category()) << "]: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error[unexpected]: " << e.what() << '\n';
    return unexpected_error_code;
  }
}

}  // namespace splitmeanflow
