#include "xferlab/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace xferlab::io {

namespace {

using nlohmann::json;

void append_doubles_le(std::string& out, const double* data, std::size_t count) {
  static_assert(sizeof(double) == 8);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &data[i], 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char raw[8];
    std::memcpy(raw, &bits, 8);
    out.append(raw, 8);
  }
}

void read_doubles_le(std::string_view in, std::size_t& offset, double* data,
                     std::size_t count) {
  if (in.size() < offset + 8 * count)
    throw std::runtime_error("checkpoint: truncated payload");
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, in.data() + offset, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&data[i], &bits, 8);
    offset += 8;
  }
}

const char* gram_kind_name(ntk::GramKind kind) {
  switch (kind) {
    case ntk::GramKind::kExactInfinite: return "exact-infinite";
    case ntk::GramKind::kMonteCarlo: return "monte-carlo";
    case ntk::GramKind::kEmpiricalFinite: return "empirical-finite";
  }
  return "?";
}

json gram_to_json(const ntk::GramMatrix& gram) {
  json values = json::array();
  for (Eigen::Index i = 0; i < gram.rows(); ++i)
    for (Eigen::Index j = 0; j < gram.cols(); ++j)
      values.push_back(gram.values(i, j));
  return json{{"rows", gram.rows()},
              {"cols", gram.cols()},
              {"kind", gram_kind_name(gram.kind)},
              {"meta", gram.meta},
              {"values", values}};
}

std::pair<std::string, std::string> split_header_payload(
    const std::string& blob) {
  const auto nl = blob.find('\n');
  if (nl == std::string::npos)
    throw std::runtime_error("checkpoint: missing header line");
  return {blob.substr(0, nl), blob.substr(nl + 1)};
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 0xCBF29CE484222325ull;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001B3ull;
  }
  return hash;
}

std::string fnv1a64_hex(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

void write_file_atomic(const std::filesystem::path& path,
                       std::string_view contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_file(tmp, contents);
  std::filesystem::rename(tmp, path);
}

// ----- datasets -----------------------------------------------------------

json task_to_json(const tasks::TaskDataset& task) {
  json inputs = json::array();
  for (Eigen::Index i = 0; i < task.n(); ++i)
    for (Eigen::Index j = 0; j < task.d(); ++j)
      inputs.push_back(task.inputs(i, j));
  json labels = json::array();
  for (Eigen::Index i = 0; i < task.n(); ++i) labels.push_back(task.labels[i]);
  json provenance;
  try {
    provenance = json::parse(task.provenance);
  } catch (const json::parse_error&) {
    provenance = task.provenance;
  }
  return json{{"name", task.name},     {"seed", task.seed},
              {"d", task.d()},         {"n", task.n()},
              {"inputs", inputs},      {"labels", labels},
              {"provenance", provenance}};
}

tasks::TaskDataset task_from_json(const json& j) {
  tasks::TaskDataset task;
  task.name = j.at("name").get<std::string>();
  task.seed = j.at("seed").get<std::uint64_t>();
  const auto n = j.at("n").get<Eigen::Index>();
  const auto d = j.at("d").get<Eigen::Index>();
  const auto& inputs = j.at("inputs");
  const auto& labels = j.at("labels");
  if (static_cast<Eigen::Index>(inputs.size()) != n * d ||
      static_cast<Eigen::Index>(labels.size()) != n)
    throw std::runtime_error("task_from_json: inconsistent sizes");
  task.inputs.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index jj = 0; jj < d; ++jj)
      task.inputs(i, jj) = inputs[i * d + jj].get<double>();
  task.labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) task.labels[i] = labels[i].get<double>();
  task.provenance = j.value("provenance", json::object()).dump();
  return task;
}

std::string task_csv(const tasks::TaskDataset& task) {
  std::ostringstream out;
  out << "label";
  for (Eigen::Index j = 0; j < task.d(); ++j) out << ",x" << j;
  out << "\n";
  for (Eigen::Index i = 0; i < task.n(); ++i) {
    out << format_double(task.labels[i]);
    for (Eigen::Index j = 0; j < task.d(); ++j)
      out << "," << format_double(task.inputs(i, j));
    out << "\n";
  }
  return out.str();
}

// ----- kernels --------------------------------------------------------------

json bundle_to_json(const ntk::GramBundle& bundle) {
  json y_transformed = json::array();
  for (Eigen::Index i = 0; i < bundle.labels_transformed.size(); ++i)
    y_transformed.push_back(bundle.labels_transformed[i]);
  return json{{"H_source", gram_to_json(bundle.gram_source)},
              {"H_target", gram_to_json(bundle.gram_target)},
              {"H_cross", gram_to_json(bundle.gram_cross)},
              {"lambda_source", bundle.lambda_source},
              {"lambda_target", bundle.lambda_target},
              {"y_transformed", y_transformed},
              {"similarity_l2", bundle.similarity_l2},
              {"similarity_quadform", bundle.similarity_quadform},
              {"scratch_quadform", bundle.scratch_quadform},
              {"theorem2_bound", ntk::theorem2_bound(bundle)},
              {"scratch_bound", ntk::scratch_bound(bundle)},
              {"jitter_used", bundle.jitter_used}};
}

std::string bundle_summary_csv_header() {
  return "pair_id,lambda_source,lambda_target,similarity_l2,similarity_"
         "quadform,theorem2_bound\n";
}

std::string bundle_summary_csv_row(const std::string& pair_id,
                                   const ntk::GramBundle& bundle) {
  std::ostringstream out;
  out << pair_id << "," << format_double(bundle.lambda_source) << ","
      << format_double(bundle.lambda_target) << ","
      << format_double(bundle.similarity_l2) << ","
      << format_double(bundle.similarity_quadform) << ","
      << format_double(ntk::theorem2_bound(bundle)) << "\n";
  return out.str();
}

// ----- traces ----------------------------------------------------------------

std::string trace_csv(const TrainTrace& trace) {
  std::ostringstream out;
  out << "step,loss,residual,deviation,grad_norm,flip_fraction\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << trace.step[i] << "," << format_double(trace.loss[i]) << ","
        << format_double(trace.residual_norm[i]) << ","
        << format_double(trace.weight_deviation[i]) << ","
        << format_double(trace.grad_fro_norm[i]) << ","
        << format_double(trace.flip_fraction[i]) << "\n";
  }
  return out.str();
}

// ----- checkpoints --------------------------------------------------------------

void save_shallow_checkpoint(const std::filesystem::path& path,
                             const shallow::ShallowNet& net,
                             std::uint64_t seed, int step) {
  json header{{"format", "xferlab-checkpoint"},
              {"version", 1},
              {"model", "shallow"},
              {"d", net.d},
              {"m", net.m},
              {"kappa", net.kappa},
              {"seed", seed},
              {"step", step},
              {"layout", "col-major"},
              {"payload", json::array({"W", "W_init", "a"})}};
  std::string blob = header.dump();
  blob.push_back('\n');
  append_doubles_le(blob, net.W.data(), net.W.size());
  append_doubles_le(blob, net.W_init.data(), net.W_init.size());
  append_doubles_le(blob, net.a.data(), net.a.size());
  write_file_atomic(path, blob);
}

shallow::ShallowNet load_shallow_checkpoint(const std::filesystem::path& path,
                                            std::uint64_t* seed, int* step) {
  const std::string blob = read_file(path);
  auto [header_line, payload] = split_header_payload(blob);
  const json header = json::parse(header_line);
  if (header.at("model") != "shallow")
    throw std::runtime_error("checkpoint: not a shallow model");
  shallow::ShallowNet net;
  net.d = header.at("d").get<Eigen::Index>();
  net.m = header.at("m").get<Eigen::Index>();
  net.kappa = header.at("kappa").get<double>();
  if (seed) *seed = header.at("seed").get<std::uint64_t>();
  if (step) *step = header.at("step").get<int>();
  net.W.resize(net.d, net.m);
  net.W_init.resize(net.d, net.m);
  net.a.resize(net.m);
  std::size_t offset = 0;
  read_doubles_le(payload, offset, net.W.data(), net.W.size());
  read_doubles_le(payload, offset, net.W_init.data(), net.W_init.size());
  read_doubles_le(payload, offset, net.a.data(), net.a.size());
  if (offset != payload.size())
    throw std::runtime_error("checkpoint: trailing bytes");
  return net;
}

void save_deep_checkpoint(const std::filesystem::path& path,
                          const deepnet::DeepNet& net, std::uint64_t seed,
                          int step) {
  json dims = json::array();
  for (Eigen::Index d : net.layer_dims) dims.push_back(d);
  json header{{"format", "xferlab-checkpoint"},
              {"version", 1},
              {"model", "deep"},
              {"layer_dims", dims},
              {"init_kind", net.init_kind == deepnet::InitKind::kRandomGaussian
                                ? "random-gaussian"
                                : "pretrained-from"},
              {"init_run_id", net.init_run_id},
              {"seed", seed},
              {"step", step},
              {"layout", "col-major"},
              {"payload", json::array({"weights", "init_snapshot"})}};
  std::string blob = header.dump();
  blob.push_back('\n');
  for (const auto& w : net.weights) append_doubles_le(blob, w.data(), w.size());
  for (const auto& w : net.init_snapshot)
    append_doubles_le(blob, w.data(), w.size());
  write_file_atomic(path, blob);
}

deepnet::DeepNet load_deep_checkpoint(const std::filesystem::path& path,
                                      std::uint64_t* seed, int* step) {
  const std::string blob = read_file(path);
  auto [header_line, payload] = split_header_payload(blob);
  const json header = json::parse(header_line);
  if (header.at("model") != "deep")
    throw std::runtime_error("checkpoint: not a deep model");
  deepnet::DeepNet net;
  for (const auto& d : header.at("layer_dims"))
    net.layer_dims.push_back(d.get<Eigen::Index>());
  net.init_kind = header.at("init_kind") == "random-gaussian"
                      ? deepnet::InitKind::kRandomGaussian
                      : deepnet::InitKind::kPretrained;
  net.init_run_id = header.value("init_run_id", "");
  if (seed) *seed = header.at("seed").get<std::uint64_t>();
  if (step) *step = header.at("step").get<int>();
  std::size_t offset = 0;
  for (std::size_t k = 0; k + 1 < net.layer_dims.size(); ++k) {
    Eigen::MatrixXd w(net.layer_dims[k], net.layer_dims[k + 1]);
    read_doubles_le(payload, offset, w.data(), w.size());
    net.weights.push_back(std::move(w));
  }
  for (std::size_t k = 0; k + 1 < net.layer_dims.size(); ++k) {
    Eigen::MatrixXd w(net.layer_dims[k], net.layer_dims[k + 1]);
    read_doubles_le(payload, offset, w.data(), w.size());
    net.init_snapshot.push_back(std::move(w));
  }
  if (offset != payload.size())
    throw std::runtime_error("checkpoint: trailing bytes");
  return net;
}

// ----- probe exports ---------------------------------------------------------------

std::string landscape_csv(const probe::LandscapeGrid& grid) {
  std::ostringstream out;
  for (Eigen::Index i = 0; i < grid.grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.grid.cols(); ++j) {
      if (j > 0) out << ",";
      out << format_double(grid.grid(i, j));
    }
    out << "\n";
  }
  return out.str();
}

json landscape_meta_json(const probe::LandscapeGrid& grid) {
  json scales1 = json::array(), scales2 = json::array();
  for (Eigen::Index i = 0; i < grid.scales1.size(); ++i) {
    scales1.push_back(grid.scales1[i]);
    scales2.push_back(grid.scales2[i]);
  }
  auto hash_of = [](const Eigen::VectorXd& v) {
    return fnv1a64_hex(std::string_view(
        reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
  };
  return json{{"center_loss", grid.center_loss},
              {"grid_size", grid.grid.rows()},
              {"step_scale", grid.step_scale},
              {"direction1_hash", hash_of(grid.direction1)},
              {"direction2_hash", hash_of(grid.direction2)},
              {"scales1", scales1},
              {"scales2", scales2},
              {"used_global_fallback", grid.used_global_fallback},
              {"batch_id", grid.batch_id},
              {"seed", grid.seed}};
}

json hessian_to_json(const probe::HessianSpectrum& spectrum) {
  json eigs = json::array(), iters = json::array(), residuals = json::array(),
       converged = json::array();
  for (std::size_t i = 0; i < spectrum.eigenvalues.size(); ++i) {
    eigs.push_back(spectrum.eigenvalues[i]);
    iters.push_back(spectrum.iterations_per_eig[i]);
    residuals.push_back(spectrum.residuals[i]);
    converged.push_back(static_cast<bool>(spectrum.converged[i]));
  }
  return json{{"eigenvalues", eigs},
              {"iterations_per_eig", iters},
              {"residuals", residuals},
              {"converged", converged},
              {"batch_id", spectrum.batch_id}};
}

std::string distance_matrix_csv(const probe::DistanceMatrix& matrix) {
  std::ostringstream out;
  out << "checkpoint";
  for (const auto& label : matrix.labels) out << "," << label;
  out << "\n";
  for (Eigen::Index i = 0; i < matrix.values.rows(); ++i) {
    out << matrix.labels[i];
    for (Eigen::Index j = 0; j < matrix.values.cols(); ++j)
      out << "," << format_double(matrix.values(i, j));
    out << "\n";
  }
  return out.str();
}

std::string grad_variation_csv(const probe::GradVariationSeries& series) {
  std::ostringstream out;
  out << "step,variation\n";
  for (std::size_t i = 0; i < series.step.size(); ++i)
    out << series.step[i] << "," << format_double(series.variation[i]) << "\n";
  return out.str();
}

std::string svd_projection_csv(const probe::SvdProjection& projection) {
  std::ostringstream out;
  out << "singular_value,projection\n";
  for (std::size_t i = 0; i < projection.singular_values.size(); ++i)
    out << format_double(projection.singular_values[i]) << ","
        << format_double(projection.projections[i]) << "\n";
  return out.str();
}

}  // namespace xferlab::io
