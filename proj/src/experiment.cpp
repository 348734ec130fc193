#include "xferlab/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "xferlab/io.hpp"
#include "xferlab/ntk.hpp"
#include "xferlab/probe.hpp"
#include "xferlab/shallow.hpp"
#include "xferlab/stats.hpp"

namespace xferlab::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string> kKinds = {
    "gram",          "pretrain",       "transfer",       "verify-thm1",
    "verify-thm2",   "verify-convergence", "probe-landscape", "probe-hessian",
    "probe-gradvar", "probe-svdproj",  "probe-distmat",  "sweep-epochs",
    "sweep-similarity"};

// ----- config access with JSON-path diagnostics ------------------------------

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string path_join(const std::string& base, const std::string& key) {
  return base + "." + key;
}

const json& require_field(const json& j, const std::string& key,
                          const std::string& path) {
  if (!j.is_object() || !j.contains(key))
    throw ConfigError(path_join(path, key) + ": missing");
  return j.at(key);
}

std::int64_t require_positive_int(const json& j, const std::string& key,
                                  const std::string& path) {
  const json& v = require_field(j, key, path);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1)
    throw ConfigError(path_join(path, key) + ": must be a positive integer");
  return v.get<std::int64_t>();
}

double require_number(const json& j, const std::string& key,
                      const std::string& path) {
  const json& v = require_field(j, key, path);
  if (!v.is_number())
    throw ConfigError(path_join(path, key) + ": must be a number");
  return v.get<double>();
}

// ----- pieces of the schema ----------------------------------------------------

tasks::LabelFnSpec parse_label_fn(const json& j, Eigen::Index d,
                                  const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": must be an object");
  const std::string kind_name =
      require_field(j, "kind", path).get<std::string>();
  tasks::LabelKind kind;
  try {
    kind = tasks::label_kind_from_name(kind_name);
  } catch (const std::invalid_argument&) {
    throw ConfigError(path_join(path, "kind") + ": unknown label kind '" +
                      kind_name + "'");
  }
  tasks::LabelFnSpec fn;
  fn.kind = kind;
  fn.clip = j.value("clip", true);
  switch (kind) {
    case tasks::LabelKind::kLinearTeacher:
    case tasks::LabelKind::kReluTeacher: {
      if (j.contains("params")) {
        const auto& params = j.at("params");
        if (!params.is_array())
          throw ConfigError(path_join(path, "params") + ": must be an array");
        fn.params.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
          fn.params[i] = params[i].get<double>();
      } else if (j.contains("teacher_seed")) {
        fn.params =
            SplitRng(j.at("teacher_seed").get<std::uint64_t>()).unit_vector(d);
      } else {
        throw ConfigError(path + ": teacher needs 'params' or 'teacher_seed'");
      }
      break;
    }
    case tasks::LabelKind::kConstant: {
      tasks::LabelFnSpec c = tasks::LabelFnSpec::constant(
          require_number(j, "value", path));
      c.clip = fn.clip;
      return c;
    }
    case tasks::LabelKind::kRandomSigns:
      fn = tasks::LabelFnSpec::random_signs();
      break;
  }
  return fn;
}

tasks::TaskPairSpec parse_pair(const json& config) {
  const json& j = require_field(config, "pair", "$");
  const std::string path = "$.pair";
  tasks::TaskPairSpec spec;
  spec.n_source = require_positive_int(j, "n_source", path);
  spec.n_target = require_positive_int(j, "n_target", path);
  spec.d = require_positive_int(j, "d", path);
  if (spec.d < 2) throw ConfigError(path + ".d: must be >= 2");
  spec.input_overlap = j.value("input_overlap", 1.0);
  if (!(spec.input_overlap >= 0.0 && spec.input_overlap <= 1.0))
    throw ConfigError(path + ".input_overlap: must lie in [0,1]");
  spec.seed = require_field(j, "seed", path).get<std::uint64_t>();
  spec.source_labels = parse_label_fn(require_field(j, "source_labels", path),
                                      spec.d, path + ".source_labels");
  spec.target_labels = parse_label_fn(require_field(j, "target_labels", path),
                                      spec.d, path + ".target_labels");
  return spec;
}

// Builds the task pair; "target_equals_source": true replaces the target
// with the source dataset itself (the identical-task control).
std::pair<tasks::TaskDataset, tasks::TaskDataset> build_pair(const json& config) {
  auto pair = tasks::make_task_pair(parse_pair(config));
  if (config.at("pair").value("target_equals_source", false)) {
    pair.second = pair.first;
    pair.second.name = "target";
  }
  return pair;
}

// kappa is optional; when omitted it falls back to the
// min(0.1, lambda^2 delta / (n_P^2 sqrt(n_Q))) scale rule at run time.
shallow::NetConfig parse_net(const json& config, std::uint64_t seed) {
  const json& j = require_field(config, "net", "$");
  shallow::NetConfig net;
  net.m = require_positive_int(j, "m", "$.net");
  net.kappa = j.value("kappa", 0.0);
  if (j.contains("kappa") && !(net.kappa > 0.0))
    throw ConfigError("$.net.kappa: must be > 0");
  net.seed = seed;
  return net;
}

shallow::NetConfig resolve_net(const json& config, std::uint64_t seed,
                               const tasks::TaskDataset& source,
                               const tasks::TaskDataset& target) {
  shallow::NetConfig net = parse_net(config, seed);
  if (net.kappa == 0.0) {
    double delta = 0.1;
    if (config.contains("train")) delta = config.at("train").value("delta", delta);
    if (config.contains("sweep")) delta = config.at("sweep").value("delta", delta);
    const double lambda =
        ntk::min_eigenvalue(ntk::gram_exact(source.inputs));
    net.kappa = shallow::default_kappa(lambda, delta, source.n(), target.n());
  }
  return net;
}

// eta may be a number, "auto-stable" (1/lambda_max of the training kernel) or
// "auto-conservative" (lambda_min / 2n^2).
TrainConfig parse_train(const json& config, const std::string& key,
                        const tasks::TaskDataset& on) {
  const json& j = require_field(config, key, "$");
  const std::string path = "$." + key;
  TrainConfig cfg;
  cfg.steps = static_cast<int>(require_positive_int(j, "steps", path));
  cfg.stop_residual = j.value("stop_residual", 0.0);
  cfg.record_every = j.value("record_every", 1);
  if (cfg.record_every < 1)
    throw ConfigError(path + ".record_every: must be >= 1");
  cfg.delta = j.value("delta", 0.1);
  const json& eta = require_field(j, "eta", path);
  if (eta.is_number()) {
    cfg.eta = eta.get<double>();
    if (!(cfg.eta >= 0.0)) throw ConfigError(path + ".eta: must be >= 0");
  } else if (eta.is_string()) {
    const ntk::GramMatrix gram = ntk::gram_exact(on.inputs);
    if (eta.get<std::string>() == "auto-stable") {
      cfg.eta = shallow::stable_eta(gram);
    } else if (eta.get<std::string>() == "auto-conservative") {
      cfg.eta = shallow::conservative_eta(ntk::min_eigenvalue(gram), on.n());
    } else {
      throw ConfigError(path + ".eta: expected a number, 'auto-stable' or "
                        "'auto-conservative'");
    }
  } else {
    throw ConfigError(path + ".eta: expected a number or a rule name");
  }
  return cfg;
}

std::vector<std::uint64_t> parse_seeds(const json& config,
                                       const RunOverrides& overrides) {
  if (overrides.seed_override) return {*overrides.seed_override};
  const json& seeds = require_field(config, "seeds", "$");
  if (!seeds.is_array() || seeds.empty())
    throw ConfigError("$.seeds: must be a non-empty array of integers");
  std::vector<std::uint64_t> out;
  for (const auto& s : seeds) {
    if (!s.is_number_integer())
      throw ConfigError("$.seeds: must be a non-empty array of integers");
    out.push_back(s.get<std::uint64_t>());
  }
  return out;
}

std::vector<Eigen::Index> parse_m_list(const json& config) {
  const json& sweep = require_field(config, "sweep", "$");
  const json& m_list = require_field(sweep, "m_list", "$.sweep");
  if (!m_list.is_array() || m_list.empty())
    throw ConfigError("$.sweep.m_list: must be a non-empty array");
  std::vector<Eigen::Index> out;
  for (const auto& m : m_list) {
    if (!m.is_number_integer() || m.get<std::int64_t>() < 1)
      throw ConfigError("$.sweep.m_list: entries must be positive integers");
    out.push_back(m.get<Eigen::Index>());
  }
  return out;
}

// ----- artifact bookkeeping -----------------------------------------------------

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

class RunContext {
 public:
  RunContext(fs::path dir, json config_echo)
      : dir_(std::move(dir)), config_echo_(std::move(config_echo)) {
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }

  void write(const std::string& rel_path, std::string_view contents) {
    io::write_file(dir_ / rel_path, contents);
    artifacts_.push_back(json{{"path", rel_path},
                              {"bytes", contents.size()},
                              {"fnv1a64", io::fnv1a64_hex(contents)}});
  }

  // For files produced directly on disk (checkpoints); hashes the bytes back.
  void track(const std::string& rel_path) {
    const std::string contents = io::read_file(dir_ / rel_path);
    artifacts_.push_back(json{{"path", rel_path},
                              {"bytes", contents.size()},
                              {"fnv1a64", io::fnv1a64_hex(contents)}});
  }

  void add_verdict(const std::string& name, bool pass,
                   const std::string& detail) {
    verdicts_.push_back({name, pass, detail});
  }

  bool all_verdicts_pass() const {
    for (const auto& v : verdicts_) {
      if (!v.pass) return false;
    }
    return true;
  }

  void finish(const std::string& kind, const std::string& started,
              const std::string& finished) {
    json verdicts = json::array();
    for (const auto& v : verdicts_)
      verdicts.push_back(
          json{{"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
    const std::string echo = config_echo_.dump(2);
    json manifest{{"format", "xferlab-manifest"},
                  {"version", 1},
                  {"kind", kind},
                  {"tool_version", kToolVersion},
                  {"config_hash", io::fnv1a64_hex(echo)},
                  {"started_utc", started},
                  {"finished_utc", finished},
                  {"artifacts", artifacts_},
                  {"verdicts", verdicts}};
    io::write_file_atomic(dir_ / "manifest.json", manifest.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  json config_echo_;
  json artifacts_ = json::array();
  std::vector<Verdict> verdicts_;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string seed_tag(std::uint64_t seed) {
  return "_s" + std::to_string(seed);
}

// ----- experiment bodies ----------------------------------------------------------

void run_gram(const json& config, RunContext& ctx) {
  auto [source, target] = build_pair(config);
  const ntk::GramBundle bundle = ntk::make_bundle(source, target);
  ctx.write("source.json", io::task_to_json(source).dump(2) + "\n");
  ctx.write("target.json", io::task_to_json(target).dump(2) + "\n");
  ctx.write("source.csv", io::task_csv(source));
  ctx.write("target.csv", io::task_csv(target));
  ctx.write("gram_bundle.json", io::bundle_to_json(bundle).dump(2) + "\n");
  ctx.write("gram_summary.csv", io::bundle_summary_csv_header() +
                                    io::bundle_summary_csv_row("pair", bundle));
}

void run_pretrain(const json& config, RunContext& ctx,
                  const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  ctx.write("source.json", io::task_to_json(source).dump(2) + "\n");
  const TrainConfig cfg = parse_train(config, "train", source);
  for (std::uint64_t seed : seeds) {
    const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
    shallow::ShallowNet net =
        shallow::init_net(source.d(), net_cfg.m, net_cfg.kappa, seed);
    auto [trained, trace] =
        shallow::train_gd(net, source, cfg, DeviationRef::kInit);
    ctx.write("pretrain_trace" + seed_tag(seed) + ".csv", io::trace_csv(trace));
    const std::string ckpt = "pretrained" + seed_tag(seed) + ".ckpt";
    io::save_shallow_checkpoint(ctx.dir() / ckpt, trained, seed,
                                trace.step.back());
    ctx.track(ckpt);
  }
}

void run_transfer(const json& config, RunContext& ctx,
                  const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  ctx.write("source.json", io::task_to_json(source).dump(2) + "\n");
  ctx.write("target.json", io::task_to_json(target).dump(2) + "\n");
  const TrainConfig pre_cfg = parse_train(config, "train", source);
  const TrainConfig fine_cfg = parse_train(config, "fine", target);
  json per_seed = json::array();
  std::string summary = io::bundle_summary_csv_header();
  for (std::uint64_t seed : seeds) {
    const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
    const shallow::TransferReport report = shallow::pretrain_then_transfer(
        source, target, net_cfg, pre_cfg, fine_cfg);
    ctx.write("pretrain_trace" + seed_tag(seed) + ".csv",
              io::trace_csv(report.pretrain_trace));
    ctx.write("finetune_trace" + seed_tag(seed) + ".csv",
              io::trace_csv(report.finetune_trace));
    const std::string pre_ckpt = "pretrained" + seed_tag(seed) + ".ckpt";
    const std::string fine_ckpt = "finetuned" + seed_tag(seed) + ".ckpt";
    io::save_shallow_checkpoint(ctx.dir() / pre_ckpt, report.net_pretrained,
                                seed, report.pretrain_trace.step.back());
    io::save_shallow_checkpoint(ctx.dir() / fine_ckpt, report.net_finetuned,
                                seed, report.finetune_trace.step.back());
    ctx.track(pre_ckpt);
    ctx.track(fine_ckpt);
    per_seed.push_back(
        json{{"seed", seed},
             {"weight_movement", report.weight_movement},
             {"theorem2_bound", ntk::theorem2_bound(report.bundle)},
             {"scratch_bound", ntk::scratch_bound(report.bundle)},
             {"similarity_l2", report.bundle.similarity_l2},
             {"final_target_residual", report.finetune_trace.residual_norm.back()}});
    summary += io::bundle_summary_csv_row("seed" + std::to_string(seed),
                                          report.bundle);
  }
  ctx.write("transfer_report.json", per_seed.dump(2) + "\n");
  ctx.write("gram_summary.csv", summary);
}

void run_verify_thm1(const json& config, RunContext& ctx,
                     const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const std::vector<Eigen::Index> m_list = parse_m_list(config);
  const double kappa = resolve_net(config, seeds.front(), source, target).kappa;
  const double delta = config.at("sweep").value("delta", 0.1);
  const shallow::Theorem1Report report =
      shallow::verify_theorem1(source, target, m_list, kappa, delta, seeds);

  std::ostringstream csv;
  csv << "m,seed,measured,predicted,gap\n";
  json medians = json::array();
  for (std::size_t i = 0; i < report.m_values.size(); ++i) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      csv << report.m_values[i] << "," << seeds[s] << ","
          << io::format_double(report.measured[i][s]) << ","
          << io::format_double(report.predicted[i][s]) << ","
          << io::format_double(report.gap[i][s]) << "\n";
    }
    medians.push_back(json{{"m", report.m_values[i]},
                           {"median_gap", report.median_gap[i]}});
  }
  ctx.write("thm1_gaps.csv", csv.str());
  ctx.write("thm1_report.json",
            json{{"median_gaps", medians},
                 {"gap_non_increasing", report.gap_non_increasing}}
                    .dump(2) +
                "\n");
  std::ostringstream detail;
  for (std::size_t i = 0; i < report.median_gap.size(); ++i)
    detail << (i ? " -> " : "") << report.median_gap[i];
  ctx.add_verdict("thm1-gap-non-increasing", report.gap_non_increasing,
                  detail.str());
}

void run_verify_thm2(const json& config, RunContext& ctx,
                     const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const std::vector<Eigen::Index> m_list = parse_m_list(config);
  const double kappa = resolve_net(config, seeds.front(), source, target).kappa;
  const json& sweep = config.at("sweep");
  const double delta = sweep.value("delta", 0.1);
  const int family_size = sweep.value("family_size", 5);
  const shallow::Theorem2Report report = shallow::verify_theorem2(
      source, target, m_list, kappa, delta, seeds, family_size);

  std::ostringstream csv;
  csv << "m,seed,family_index,measured,bound,spearman\n";
  for (std::size_t i = 0; i < report.m_values.size(); ++i)
    for (std::size_t s = 0; s < seeds.size(); ++s)
      for (std::size_t t = 0; t < report.bounds.size(); ++t)
        csv << report.m_values[i] << "," << seeds[s] << "," << t << ","
            << io::format_double(report.measured[i][s][t]) << ","
            << io::format_double(report.bounds[t]) << ","
            << io::format_double(report.spearman[i][s]) << "\n";
  ctx.write("thm2_table.csv", csv.str());
  ctx.write(
      "thm2_report.json",
      json{{"bounds", report.bounds},
           {"median_slack", report.median_slack},
           {"slack_non_increasing", report.slack_non_increasing},
           {"seeds_with_rank_correlation", report.seeds_with_rank_correlation},
           {"seed_count", report.seed_count},
           {"control_bound", report.control_bound},
           {"control_movement", report.control_movement},
           {"scratch_movement", report.scratch_movement},
           {"verdict", report.verdict}}
              .dump(2) +
          "\n");
  std::ostringstream detail;
  detail << report.seeds_with_rank_correlation << "/" << report.seed_count
         << " seeds with spearman >= 0.9; control movement "
         << report.control_movement << " vs scratch " << report.scratch_movement;
  ctx.add_verdict("thm2-ordering", report.verdict, detail.str());
}

void run_verify_convergence(const json& config, RunContext& ctx,
                            const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const json& sweep = require_field(config, "sweep", "$");
  const int pretrain_steps =
      static_cast<int>(require_positive_int(sweep, "pretrain_steps", "$.sweep"));
  const int finetune_steps =
      static_cast<int>(require_positive_int(sweep, "finetune_steps", "$.sweep"));
  const double tolerance = sweep.value("tolerance", 1e-6);
  const shallow::NetConfig net_cfg =
      resolve_net(config, seeds.front(), source, target);
  const shallow::ConvergenceReport report = shallow::verify_convergence(
      source, target, net_cfg, pretrain_steps, finetune_steps, seeds, tolerance);

  std::ostringstream csv;
  csv << "seed,passed,worst_margin\n";
  for (std::size_t s = 0; s < seeds.size(); ++s)
    csv << seeds[s] << "," << (report.seed_passed[s] ? 1 : 0) << ","
        << io::format_double(report.worst_margin[s]) << "\n";
  ctx.write("convergence_margins.csv", csv.str());

  const int min_passing = sweep.value(
      "min_passing", static_cast<int>((seeds.size() * 9 + 9) / 10));
  const bool pass = report.passing_count >= min_passing;
  ctx.write("convergence_report.json",
            json{{"eta", report.eta},
                 {"lambda_target", report.lambda_target},
                 {"passing_count", report.passing_count},
                 {"seed_count", seeds.size()},
                 {"min_passing", min_passing},
                 {"pass", pass}}
                    .dump(2) +
                "\n");
  std::ostringstream detail;
  detail << report.passing_count << "/" << seeds.size()
         << " seeds satisfy the contraction (need " << min_passing << ")";
  ctx.add_verdict("convergence-contraction", pass, detail.str());
}

// Briefly trained shallow net used by the probe experiments.
shallow::ShallowNet trained_net(const json& config,
                                const tasks::TaskDataset& on,
                                std::uint64_t seed) {
  const shallow::NetConfig net_cfg = resolve_net(config, seed, on, on);
  const TrainConfig cfg = parse_train(config, "train", on);
  shallow::ShallowNet net =
      shallow::init_net(on.d(), net_cfg.m, net_cfg.kappa, seed);
  auto [trained, trace] = shallow::train_gd(net, on, cfg, DeviationRef::kInit);
  return std::move(trained);
}

// Deep counterpart; configured by "deep": {layer_dims, scale}.
deepnet::DeepNet trained_deep_net(const json& config,
                                  const tasks::TaskDataset& on,
                                  std::uint64_t seed) {
  const json& deep = require_field(config, "deep", "$");
  const json& dims_json = require_field(deep, "layer_dims", "$.deep");
  if (!dims_json.is_array() || dims_json.size() < 3)
    throw ConfigError("$.deep.layer_dims: need at least [d_in, hidden, 1]");
  std::vector<Eigen::Index> dims;
  for (const auto& d : dims_json) dims.push_back(d.get<Eigen::Index>());
  if (dims.front() != on.d())
    throw ConfigError("$.deep.layer_dims: first entry must match the task d");
  const double scale = require_number(deep, "scale", "$.deep");
  const TrainConfig cfg = parse_train(config, "train", on);
  deepnet::DeepNet net = deepnet::init_deep(dims, scale, seed);
  auto [trained, trace] = deepnet::train_deep(net, on, cfg, DeviationRef::kInit);
  return std::move(trained);
}

bool wants_deep_model(const json& config) {
  return config.value("model", "shallow") == "deep";
}

// Probe batches are capped at 256 fixed samples.
Eigen::Index probe_batch_rows(const tasks::TaskDataset& task) {
  return std::min<Eigen::Index>(task.n(), 256);
}

void run_probe_landscape(const json& config, RunContext& ctx,
                         const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const json probe_cfg = config.value("probe", json::object());
  const int grid_size = probe_cfg.value("grid_size", 200);
  const double step_scale = probe_cfg.value("step_scale", 0.1);
  const auto layer = probe_cfg.value("layer", Eigen::Index{0});
  if (grid_size < 1) throw ConfigError("$.probe.grid_size: must be >= 1");
  const Eigen::Index rows = probe_batch_rows(source);
  const Eigen::MatrixXd batch_x = source.inputs.topRows(rows);
  const Eigen::VectorXd batch_y = source.labels.head(rows);
  const std::string batch_id = "source n=" + std::to_string(rows);
  for (std::uint64_t seed : seeds) {
    probe::LandscapeGrid grid;
    if (wants_deep_model(config)) {
      deepnet::DeepNet net = trained_deep_net(config, source, seed);
      probe::DeepModel model(net);
      grid = probe::landscape_grid(model, layer, grid_size, step_scale,
                                   batch_x, batch_y, seed, batch_id);
    } else {
      shallow::ShallowNet net = trained_net(config, source, seed);
      probe::ShallowModel model(net);
      grid = probe::landscape_grid(model, layer, grid_size, step_scale,
                                   batch_x, batch_y, seed, batch_id);
    }
    ctx.write("landscape" + seed_tag(seed) + ".csv", io::landscape_csv(grid));
    ctx.write("landscape_meta" + seed_tag(seed) + ".json",
              io::landscape_meta_json(grid).dump(2) + "\n");
  }
}

void run_probe_hessian(const json& config, RunContext& ctx,
                       const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const json probe_cfg = config.value("probe", json::object());
  const int k = probe_cfg.value("k", 20);
  const double tol = probe_cfg.value("tol", 1e-6);
  const int max_iter = probe_cfg.value("max_iter", 10000);
  if (k < 1) throw ConfigError("$.probe.k: must be >= 1");
  const Eigen::Index rows = probe_batch_rows(source);
  const Eigen::MatrixXd batch_x = source.inputs.topRows(rows);
  const Eigen::VectorXd batch_y = source.labels.head(rows);
  const std::string batch_id = "source n=" + std::to_string(rows);
  for (std::uint64_t seed : seeds) {
    probe::HessianSpectrum spectrum;
    if (wants_deep_model(config)) {
      deepnet::DeepNet net = trained_deep_net(config, source, seed);
      probe::DeepModel model(net);
      spectrum = probe::hessian_topk(model, batch_x, batch_y, k, tol, max_iter,
                                     seed, batch_id);
    } else {
      shallow::ShallowNet net = trained_net(config, source, seed);
      probe::ShallowModel model(net);
      spectrum = probe::hessian_topk(model, batch_x, batch_y, k, tol, max_iter,
                                     seed, batch_id);
    }
    ctx.write("hessian" + seed_tag(seed) + ".json",
              io::hessian_to_json(spectrum).dump(2) + "\n");
  }
}

void run_probe_gradvar(const json& config, RunContext& ctx,
                       const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const json probe_cfg = config.value("probe", json::object());
  const int probe_steps = probe_cfg.value("probe_steps", 10);
  if (probe_steps < 1) throw ConfigError("$.probe.probe_steps: must be >= 1");
  const TrainConfig fine_cfg = parse_train(config, "fine", target);
  json summary = json::array();
  for (std::uint64_t seed : seeds) {
    shallow::ShallowNet pretrained = trained_net(config, source, seed);
    const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
    shallow::ShallowNet scratch =
        shallow::init_net(target.d(), net_cfg.m, net_cfg.kappa, seed);
    const probe::GradVariationSeries pre_series =
        probe::loss_variation_along_gradient(pretrained, target, fine_cfg,
                                             probe_steps);
    const probe::GradVariationSeries scratch_series =
        probe::loss_variation_along_gradient(scratch, target, fine_cfg,
                                             probe_steps);
    ctx.write("gradvar_pretrained" + seed_tag(seed) + ".csv",
              io::grad_variation_csv(pre_series));
    ctx.write("gradvar_scratch" + seed_tag(seed) + ".csv",
              io::grad_variation_csv(scratch_series));
    summary.push_back(
        json{{"seed", seed},
             {"median_pretrained", stats::median(pre_series.variation)},
             {"median_scratch", stats::median(scratch_series.variation)}});
  }
  ctx.write("gradvar_summary.json", summary.dump(2) + "\n");
}

void run_probe_svdproj(const json& config, RunContext& ctx,
                       const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const auto layer = config.contains("probe")
                         ? config.at("probe").value("layer", Eigen::Index{0})
                         : Eigen::Index{0};
  for (std::uint64_t seed : seeds) {
    if (wants_deep_model(config)) {
      deepnet::DeepNet pretrained = trained_deep_net(config, source, seed);
      const json& deep = config.at("deep");
      std::vector<Eigen::Index> dims;
      for (const auto& d : deep.at("layer_dims")) dims.push_back(d.get<Eigen::Index>());
      deepnet::DeepNet random =
          deepnet::init_deep(dims, deep.at("scale").get<double>(), seed);
      probe::DeepModel pre_model(pretrained);
      probe::DeepModel random_model(random);
      ctx.write("svdproj_pretrained" + seed_tag(seed) + ".csv",
                io::svd_projection_csv(probe::grad_svd_projection(
                    pre_model, layer, target.inputs, target.labels)));
      ctx.write("svdproj_random" + seed_tag(seed) + ".csv",
                io::svd_projection_csv(probe::grad_svd_projection(
                    random_model, layer, target.inputs, target.labels)));
    } else {
      shallow::ShallowNet pretrained = trained_net(config, source, seed);
      const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
      shallow::ShallowNet random =
          shallow::init_net(target.d(), net_cfg.m, net_cfg.kappa, seed);
      probe::ShallowModel pre_model(pretrained);
      probe::ShallowModel random_model(random);
      ctx.write("svdproj_pretrained" + seed_tag(seed) + ".csv",
                io::svd_projection_csv(probe::grad_svd_projection(
                    pre_model, layer, target.inputs, target.labels)));
      ctx.write("svdproj_random" + seed_tag(seed) + ".csv",
                io::svd_projection_csv(probe::grad_svd_projection(
                    random_model, layer, target.inputs, target.labels)));
    }
  }
}

void run_probe_distmat(const json& config, RunContext& ctx,
                       const std::vector<std::uint64_t>& seeds) {
  const tasks::TaskPairSpec pair_spec = parse_pair(config);
  json summary = json::array();
  for (std::uint64_t seed : seeds) {
    // One pretrained net, fine-tuned to three fresh targets from the same
    // process, plus one scratch net trained on the first target.
    tasks::TaskPairSpec spec = pair_spec;
    spec.seed = pair_spec.seed + seed;
    auto [source, target0] = tasks::make_task_pair(spec);
    std::vector<tasks::TaskDataset> targets = {target0};
    for (int extra = 1; extra < 3; ++extra) {
      tasks::TaskPairSpec alt = spec;
      alt.seed = spec.seed + 1000 * extra;
      targets.push_back(tasks::make_task_pair(alt).second);
    }
    const TrainConfig fine_cfg = parse_train(config, "fine", target0);
    shallow::ShallowNet net = trained_net(config, source, seed);
    std::vector<probe::WeightList> checkpoints;
    std::vector<std::string> labels;
    checkpoints.push_back({net.W});
    labels.push_back("pretrained");
    for (std::size_t t = 0; t < targets.size(); ++t) {
      auto [tuned, trace] =
          shallow::train_gd(net, targets[t], fine_cfg, DeviationRef::kStart);
      checkpoints.push_back({tuned.W});
      labels.push_back("finetuned_t" + std::to_string(t));
    }
    const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target0);
    shallow::ShallowNet scratch_init = shallow::init_net(
        source.d(), net_cfg.m, net_cfg.kappa, seed + 777);
    auto [scratch, scratch_trace] =
        shallow::train_gd(scratch_init, target0, fine_cfg, DeviationRef::kInit);
    checkpoints.push_back({scratch.W});
    labels.push_back("scratch");

    const probe::DistanceMatrix dist =
        probe::checkpoint_distance_matrix(labels, checkpoints);
    ctx.write("distmat" + seed_tag(seed) + ".csv",
              io::distance_matrix_csv(dist));

    // Cluster check: fine-tuned nets mutually closer than any is to scratch.
    double intra_max = 0.0, to_scratch_min = 1e300;
    const Eigen::Index s_idx = dist.values.rows() - 1;
    for (Eigen::Index i = 1; i <= 3; ++i) {
      for (Eigen::Index j = i + 1; j <= 3; ++j)
        intra_max = std::max(intra_max, dist.values(i, j));
      to_scratch_min = std::min(to_scratch_min, dist.values(i, s_idx));
    }
    summary.push_back(json{{"seed", seed},
                           {"intra_finetuned_max", intra_max},
                           {"to_scratch_min", to_scratch_min},
                           {"clustered", intra_max < to_scratch_min}});
  }
  ctx.write("distmat_summary.json", summary.dump(2) + "\n");
}

void run_sweep_epochs(const json& config, RunContext& ctx,
                      const std::vector<std::uint64_t>& seeds) {
  auto [source, target] = build_pair(config);
  const json& sweep = require_field(config, "sweep", "$");
  const json& cps = require_field(sweep, "checkpoints", "$.sweep");
  if (!cps.is_array() || cps.empty())
    throw ConfigError("$.sweep.checkpoints: must be a non-empty array");
  std::vector<int> checkpoints;
  for (const auto& c : cps) checkpoints.push_back(c.get<int>());
  const TrainConfig pre_cfg = parse_train(config, "train", source);
  const TrainConfig fine_cfg = parse_train(config, "fine", target);
  for (std::uint64_t seed : seeds) {
    const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
    const shallow::SweepReport report = shallow::epoch_sweep_transfer(
        source, target, net_cfg, checkpoints, pre_cfg, fine_cfg);
    std::ostringstream csv;
    csv << "pretrain_steps,source_residual,target_residual\n";
    for (const auto& row : report.rows)
      csv << row.pretrain_steps << "," << io::format_double(row.source_residual)
          << "," << io::format_double(row.target_residual) << "\n";
    ctx.write("epoch_sweep" + seed_tag(seed) + ".csv", csv.str());
  }
}

void run_sweep_similarity(const json& config, RunContext& ctx,
                          const std::vector<std::uint64_t>& seeds) {
  const tasks::TaskPairSpec base = parse_pair(config);
  const json& sweep = require_field(config, "sweep", "$");
  const int points = static_cast<int>(sweep.value("points", 5));
  if (points < 2) throw ConfigError("$.sweep.points: must be >= 2");

  std::ostringstream csv;
  csv << "overlap,seed,lambda_source,lambda_target,similarity_l2,similarity_"
         "quadform,theorem2_bound,weight_movement\n";
  for (std::uint64_t seed : seeds) {
    for (int p = 0; p < points; ++p) {
      tasks::TaskPairSpec spec = base;
      spec.input_overlap =
          static_cast<double>(p) / static_cast<double>(points - 1);
      auto [source, target] = tasks::make_task_pair(spec);
      const TrainConfig pre_cfg = parse_train(config, "train", source);
      const TrainConfig fine_cfg = parse_train(config, "fine", target);
      const shallow::NetConfig net_cfg = resolve_net(config, seed, source, target);
      const shallow::TransferReport report = shallow::pretrain_then_transfer(
          source, target, net_cfg, pre_cfg, fine_cfg);
      csv << io::format_double(spec.input_overlap) << "," << seed << ","
          << io::format_double(report.bundle.lambda_source) << ","
          << io::format_double(report.bundle.lambda_target) << ","
          << io::format_double(report.bundle.similarity_l2) << ","
          << io::format_double(report.bundle.similarity_quadform) << ","
          << io::format_double(ntk::theorem2_bound(report.bundle)) << ","
          << io::format_double(report.weight_movement) << "\n";
    }
  }
  ctx.write("similarity_sweep.csv", csv.str());
}

void dispatch(const std::string& kind, const json& config, RunContext& ctx,
              const std::vector<std::uint64_t>& seeds) {
  if (kind == "gram") return run_gram(config, ctx);
  if (kind == "pretrain") return run_pretrain(config, ctx, seeds);
  if (kind == "transfer") return run_transfer(config, ctx, seeds);
  if (kind == "verify-thm1") return run_verify_thm1(config, ctx, seeds);
  if (kind == "verify-thm2") return run_verify_thm2(config, ctx, seeds);
  if (kind == "verify-convergence")
    return run_verify_convergence(config, ctx, seeds);
  if (kind == "probe-landscape") return run_probe_landscape(config, ctx, seeds);
  if (kind == "probe-hessian") return run_probe_hessian(config, ctx, seeds);
  if (kind == "probe-gradvar") return run_probe_gradvar(config, ctx, seeds);
  if (kind == "probe-svdproj") return run_probe_svdproj(config, ctx, seeds);
  if (kind == "probe-distmat") return run_probe_distmat(config, ctx, seeds);
  if (kind == "sweep-epochs") return run_sweep_epochs(config, ctx, seeds);
  if (kind == "sweep-similarity")
    return run_sweep_similarity(config, ctx, seeds);
  throw ConfigError("$.kind: unknown experiment kind '" + kind + "'");
}

fs::path resolve_output_dir(const json& config, const RunOverrides& overrides) {
  if (overrides.out_dir) return *overrides.out_dir;
  if (config.contains("output_dir")) {
    fs::path dir = config.at("output_dir").get<std::string>();
    if (dir.is_relative()) {
      if (const char* root = std::getenv(kOutputRootEnv)) {
        return fs::path(root) / dir;
      }
    }
    return dir;
  }
  throw ConfigError("$.output_dir: missing (or pass --out)");
}

}  // namespace

const std::vector<std::string>& experiment_kinds() { return kKinds; }

std::vector<std::string> validate_config(const json& config) {
  std::vector<std::string> errors;
  try {
    if (!config.is_object()) {
      errors.push_back("$: config must be a JSON object");
      return errors;
    }
    if (config.value("schema_version", 0) != 1)
      errors.push_back("$.schema_version: must be 1");
    const std::string kind =
        require_field(config, "kind", "$").get<std::string>();
    RunOverrides no_overrides;
    const auto seeds = parse_seeds(config, no_overrides);

    // Dry-parse the sections the kind will need.
    const bool deep_probe =
        (kind == "probe-landscape" || kind == "probe-hessian" ||
         kind == "probe-svdproj") &&
        config.value("model", "shallow") == "deep";
    if (config.value("model", "shallow") == "deep" && !deep_probe)
      errors.push_back("$.model: 'deep' is only supported by probe-landscape, "
                       "probe-hessian and probe-svdproj");
    if (deep_probe) {
      const json& deep = require_field(config, "deep", "$");
      (void)require_field(deep, "layer_dims", "$.deep");
      (void)require_number(deep, "scale", "$.deep");
    } else if (kind != "gram") {
      (void)parse_net(config, seeds.front());
    }
    (void)parse_pair(config);
    if (kind == "verify-thm1" || kind == "verify-thm2") (void)parse_m_list(config);
    if (kind == "verify-convergence") {
      const json& sweep = require_field(config, "sweep", "$");
      (void)require_positive_int(sweep, "pretrain_steps", "$.sweep");
      (void)require_positive_int(sweep, "finetune_steps", "$.sweep");
    }
    if (kind == "sweep-epochs")
      (void)require_field(require_field(config, "sweep", "$"), "checkpoints",
                          "$.sweep");
    bool known = false;
    for (const auto& k : kKinds) known = known || (k == kind);
    if (!known) errors.push_back("$.kind: unknown experiment kind '" + kind + "'");
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  } catch (const std::exception& e) {
    errors.push_back(std::string("$: ") + e.what());
  }
  return errors;
}

std::vector<std::string> validate_config_file(const fs::path& config_path) {
  json config;
  try {
    config = json::parse(io::read_file(config_path));
  } catch (const std::exception& e) {
    return {std::string("cannot parse config: ") + e.what()};
  }
  return validate_config(config);
}

int run_experiment(const fs::path& config_path, const RunOverrides& overrides) {
  json config;
  try {
    config = json::parse(io::read_file(config_path));
  } catch (const std::exception& e) {
    std::cerr << "error: cannot parse config: " << e.what() << "\n";
    return 1;
  }
  const auto errors = validate_config(config);
  if (!errors.empty()) {
    for (const auto& err : errors) std::cerr << "config error: " << err << "\n";
    return 1;
  }
  try {
    const std::string started = utc_now();
    const std::string kind = config.at("kind").get<std::string>();
    const auto seeds = parse_seeds(config, overrides);
    RunContext ctx(resolve_output_dir(config, overrides), config);
    ctx.write("config_echo.json", config.dump(2) + "\n");
    dispatch(kind, config, ctx, seeds);
    ctx.finish(kind, started, utc_now());
    return ctx.all_verdicts_pass() ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int report_run(const fs::path& run_dir, std::ostream& out) {
  const fs::path manifest_path = run_dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    out << "no manifest found in " << run_dir.string() << "\n";
    return 1;
  }
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path));
  } catch (const std::exception& e) {
    out << "corrupt manifest: " << e.what() << "\n";
    return 1;
  }
  out << "run kind: " << manifest.value("kind", "?") << "  ("
      << manifest.value("tool_version", "?") << ")\n";
  bool intact = true;
  for (const auto& artifact : manifest.value("artifacts", json::array())) {
    const std::string rel = artifact.at("path").get<std::string>();
    const std::string want = artifact.at("fnv1a64").get<std::string>();
    std::string got;
    try {
      got = io::fnv1a64_hex(io::read_file(run_dir / rel));
    } catch (const std::exception&) {
      got = "<missing>";
    }
    if (got != want) {
      intact = false;
      out << "INTEGRITY ERROR  " << rel << " (expected " << want << ", got "
          << got << ")\n";
    }
  }
  bool verdicts_pass = true;
  for (const auto& verdict : manifest.value("verdicts", json::array())) {
    const bool pass = verdict.at("pass").get<bool>();
    verdicts_pass = verdicts_pass && pass;
    out << (pass ? "PASS" : "FAIL") << "  "
        << verdict.at("name").get<std::string>() << "  ["
        << verdict.value("detail", "") << "]\n";
  }
  if (manifest.value("verdicts", json::array()).empty())
    out << "PASS  (no verdicts recorded; artifacts only)\n";
  if (!intact) return 1;
  return verdicts_pass ? 0 : 2;
}

std::string artifacts_digest(const json& manifest) {
  std::ostringstream out;
  for (const auto& artifact : manifest.value("artifacts", json::array()))
    out << artifact.at("path").get<std::string>() << "="
        << artifact.at("fnv1a64").get<std::string>() << "\n";
  return out.str();
}

}  // namespace xferlab::cli
