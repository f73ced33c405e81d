// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dora/checkpoint.hpp"
#include "dora/matrix.hpp"

namespace dora {

// Weight decomposition: W as a magnitude row (per-column norms) and a
// column-normalized direction matrix.
std::pair<RowVector, Matrix> decompose(const Matrix& w, double eps = kDefaultEps);

// Mean absolute per-column norm change between a trained weight and its
// base: (1/k) sum_j | |wt_j| - |w0_j| |.
double delta_magnitude(const Matrix& w_t, const Matrix& w0);

// Mean per-column direction change: (1/k) sum_j (1 - cos(wt_j, w0_j)).
// Always in [0, 2].
double delta_direction(const Matrix& w_t, const Matrix& w0, double eps = kDefaultEps);

// Glob match with '*' (any run) and '?' (any one char).
bool name_matches(const std::string& name, const std::string& pattern);

struct DecompositionRecord {
  std::string method;
  std::string layer;
  std::int64_t step = 0;
  double delta_D = 0.0;
  double delta_M = 0.0;
};

struct MethodSummary {
  std::string method;
  std::size_t n_points = 0;
  bool stats_ok = false;
  double pearson_r = 0.0;  // meaningful only when stats_ok
  double slope = 0.0;      // least-squares slope of delta_M on delta_D
  std::string note;        // degeneracy reason when !stats_ok
};

struct AnalysisResult {
  std::vector<DecompositionRecord> records;
  std::vector<MethodSummary> methods;  // sorted by method name
};

// Compares each checkpoint's merged weights against the named baseline
// weights and pools (delta_D, delta_M) points per method tag. A layer is
// analyzed when its role set marks it adapted (anything but frozen {W0}) and
// it matches the pattern ("" = all adapted). Degenerate statistics are
// reported via stats_ok/note, never as NaN.
AnalysisResult analyze_run(const std::map<std::string, Matrix>& w0,
                           const std::vector<Checkpoint>& checkpoints,
                           const std::string& pattern = "");

// CSV with header "method,layer,step,delta_D,delta_M", 17 significant
// digits, written atomically (temp file + rename).
void emit_analysis_csv(const AnalysisResult& r, const std::filesystem::path& path);

// JSON mirror of the records plus a per-method summary block
// {n_points, pearson_r, slope} (nulls plus a note when degenerate).
void emit_scatter_json(const AnalysisResult& r, const std::filesystem::path& path);

}  // namespace dora
