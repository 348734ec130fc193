#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "xferlab/dataset.hpp"
#include "xferlab/deepnet.hpp"
#include "xferlab/ntk.hpp"
#include "xferlab/probe.hpp"
#include "xferlab/shallow.hpp"
#include "xferlab/train.hpp"

namespace xferlab::io {

// Shortest round-trip decimal representation; used for every number that
// lands in a CSV so that artifact bytes are stable across reruns.
std::string format_double(double value);

std::uint64_t fnv1a64(std::string_view bytes);
std::string fnv1a64_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
// Writes to a sibling temp file and renames into place.
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view contents);

// ----- datasets -----------------------------------------------------------

nlohmann::json task_to_json(const tasks::TaskDataset& task);
tasks::TaskDataset task_from_json(const nlohmann::json& j);
std::string task_csv(const tasks::TaskDataset& task);  // label,x0,...,x{d-1}

// ----- kernels --------------------------------------------------------------

nlohmann::json bundle_to_json(const ntk::GramBundle& bundle);
std::string bundle_summary_csv_header();
std::string bundle_summary_csv_row(const std::string& pair_id,
                                   const ntk::GramBundle& bundle);

// ----- traces ----------------------------------------------------------------

std::string trace_csv(const TrainTrace& trace);

// ----- checkpoints --------------------------------------------------------------
// One file: a single-line JSON header followed by little-endian IEEE-754
// float64 payload (column-major per matrix).

void save_shallow_checkpoint(const std::filesystem::path& path,
                             const shallow::ShallowNet& net,
                             std::uint64_t seed, int step);
shallow::ShallowNet load_shallow_checkpoint(const std::filesystem::path& path,
                                            std::uint64_t* seed = nullptr,
                                            int* step = nullptr);

void save_deep_checkpoint(const std::filesystem::path& path,
                          const deepnet::DeepNet& net, std::uint64_t seed,
                          int step);
deepnet::DeepNet load_deep_checkpoint(const std::filesystem::path& path,
                                      std::uint64_t* seed = nullptr,
                                      int* step = nullptr);

// ----- probe exports ---------------------------------------------------------------

std::string landscape_csv(const probe::LandscapeGrid& grid);
nlohmann::json landscape_meta_json(const probe::LandscapeGrid& grid);
nlohmann::json hessian_to_json(const probe::HessianSpectrum& spectrum);
std::string distance_matrix_csv(const probe::DistanceMatrix& matrix);
std::string grad_variation_csv(const probe::GradVariationSeries& series);
std::string svd_projection_csv(const probe::SvdProjection& projection);

}  // namespace xferlab::io
