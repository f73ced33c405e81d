// SPDX-License-Identifier: Apache-2.0
#include "dora/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "dora/fsio.hpp"
#include "json.hpp"

namespace dora {

namespace fs = std::filesystem;
using nlohmann::json;

std::pair<RowVector, Matrix> decompose(const Matrix& w, double eps) {
  return {column_norms(w), normalize_columns(w, eps)};
}

double delta_magnitude(const Matrix& w_t, const Matrix& w0) {
  if (!w_t.same_shape(w0)) {
    throw ShapeError("delta_magnitude: shape mismatch " + w_t.shape_str() + " vs " +
                     w0.shape_str());
  }
  const RowVector nt = column_norms(w_t);
  const RowVector n0 = column_norms(w0);
  double s = 0.0;
  for (std::size_t j = 0; j < nt.cols(); ++j) s += std::abs(nt[j] - n0[j]);
  return s / static_cast<double>(nt.cols());
}

double delta_direction(const Matrix& w_t, const Matrix& w0, double eps) {
  if (!w_t.same_shape(w0)) {
    throw ShapeError("delta_direction: shape mismatch " + w_t.shape_str() + " vs " +
                     w0.shape_str());
  }
  double s = 0.0;
  for (std::size_t j = 0; j < w_t.cols(); ++j) {
    s += 1.0 - column_cosine(w_t.col(j), w0.col(j), eps);
  }
  return s / static_cast<double>(w_t.cols());
}

bool name_matches(const std::string& name, const std::string& pattern) {
  // Iterative glob with '*' backtracking; '?' matches one char.
  std::size_t n = 0, p = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
      ++n;
      ++p;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

AnalysisResult analyze_run(const std::map<std::string, Matrix>& w0,
                           const std::vector<Checkpoint>& checkpoints,
                           const std::string& pattern) {
  AnalysisResult out;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> pools;

  for (const Checkpoint& c : checkpoints) {
    const auto roles = role_sets(c);
    const auto effective = to_effective(c);
    for (const auto& [name, eff] : effective) {
      const auto& rs = roles.at(name);
      const bool adapted = !(rs.size() == 1 && rs[0] == Role::W0);
      if (!adapted) continue;
      if (!pattern.empty() && !name_matches(name, pattern)) continue;
      const auto base = w0.find(name);
      if (base == w0.end()) {
        throw ConfigError("analyze_run: layer '" + name + "' (method " + c.method_tag +
                          ", step " + std::to_string(c.step) + ") missing from baseline");
      }
      if (!eff.same_shape(base->second)) {
        throw ShapeError("analyze_run: layer '" + name + "' shape drift: " + eff.shape_str() +
                         " at step " + std::to_string(c.step) + " vs baseline " +
                         base->second.shape_str());
      }
      DecompositionRecord rec;
      rec.method = c.method_tag;
      rec.layer = name;
      rec.step = c.step;
      rec.delta_M = delta_magnitude(eff, base->second);
      rec.delta_D = delta_direction(eff, base->second);
      pools[rec.method].first.push_back(rec.delta_D);
      pools[rec.method].second.push_back(rec.delta_M);
      out.records.push_back(std::move(rec));
    }
  }

  for (const auto& [method, xy] : pools) {
    MethodSummary s;
    s.method = method;
    s.n_points = xy.first.size();
    try {
      s.pearson_r = pearson(xy.first, xy.second);
      s.slope = ls_slope(xy.first, xy.second);
      s.stats_ok = true;
    } catch (const DegenerateVarianceError& e) {
      s.stats_ok = false;
      s.note = e.what();
    }
    out.methods.push_back(std::move(s));
  }
  return out;
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void emit_analysis_csv(const AnalysisResult& r, const fs::path& path) {
  std::string body = "method,layer,step,delta_D,delta_M\n";
  for (const DecompositionRecord& rec : r.records) {
    body += rec.method + "," + rec.layer + "," + std::to_string(rec.step) + "," +
            fmt17(rec.delta_D) + "," + fmt17(rec.delta_M) + "\n";
  }
  write_text_atomic(path, body, "emit_analysis_csv");
}

void emit_scatter_json(const AnalysisResult& r, const fs::path& path) {
  json j;
  json records = json::array();
  for (const DecompositionRecord& rec : r.records) {
    records.push_back({{"method", rec.method},
                       {"layer", rec.layer},
                       {"step", rec.step},
                       {"delta_D", rec.delta_D},
                       {"delta_M", rec.delta_M}});
  }
  j["records"] = std::move(records);
  json summary = json::object();
  for (const MethodSummary& s : r.methods) {
    json m;
    m["n_points"] = s.n_points;
    if (s.stats_ok) {
      m["pearson_r"] = s.pearson_r;
      m["slope"] = s.slope;
    } else {
      m["pearson_r"] = nullptr;
      m["slope"] = nullptr;
      m["note"] = s.note;
    }
    summary[s.method] = std::move(m);
  }
  j["summary"] = std::move(summary);
  write_text_atomic(path, j.dump(1) + "\n", "emit_scatter_json");
}

}  // namespace dora
