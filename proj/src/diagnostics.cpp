#include "lpfa/diagnostics.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lpfa/serialize.hpp"

namespace lpfa {

namespace {

using json = nlohmann::json;

json mat_json(const Mat& m) {
  return json{{"rows", m.rows},
              {"cols", m.cols},
              {"grid", grid_name(m.grid)},
              {"data", m.data}};
}

Grid grid_by_name(const std::string& s) {
  if (s == "B16") return Grid::B16;
  if (s == "F32") return Grid::F32;
  if (s == "F64") return Grid::F64;
  throw std::invalid_argument("report_from_json: unknown grid " + s);
}

Mat mat_from(const json& j) {
  Mat m;
  m.rows = j.at("rows").get<std::size_t>();
  m.cols = j.at("cols").get<std::size_t>();
  m.grid = grid_by_name(j.at("grid").get<std::string>());
  m.data = j.at("data").get<std::vector<double>>();
  if (m.data.size() != m.rows * m.cols)
    throw std::invalid_argument("report_from_json: matrix payload size");
  return m;
}

json vec_json(const Vec& v) {
  return json{{"grid", grid_name(v.grid)}, {"data", v.data}};
}

Vec vec_from(const json& j) {
  Vec v;
  v.grid = grid_by_name(j.at("grid").get<std::string>());
  v.data = j.at("data").get<std::vector<double>>();
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw std::invalid_argument("bad numeric field: " + s);
  return v;
}

}  // namespace

GradErrorReport grad_error_report(const AttnTape& tape, const Mat& dO,
                                  const Mat& X, const Mat& K, double alpha) {
  if (tape.O_lp.empty() || tape.O_hp.empty())
    throw std::invalid_argument("grad_error_report: tape missing outputs");
  if (dO.rows != tape.O_lp.rows || dO.cols != tape.O_lp.cols)
    throw std::invalid_argument("grad_error_report: dO shape");
  const std::size_t n = tape.P.rows;
  if (K.rows != tape.P.cols)
    throw std::invalid_argument("grad_error_report: K rows vs P cols");
  if (X.rows != n) throw std::invalid_argument("grad_error_report: X rows");

  GradErrorReport rep;
  rep.coeffs = delta_diff(tape, dO);
  for (std::size_t t = 0; t < n; ++t) rep.bias_sum += rep.coeffs[t];

  const Mat pk = matmul(tape.P, K, Mode::Exact);
  rep.dq_diff = scale(diag_scale(rep.coeffs, pk), alpha);

  rep.rank1_terms.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    Vec u = Vec::zeros(pk.cols);
    for (std::size_t a = 0; a < pk.cols; ++a) u[a] = pk.at(t, a);
    Vec x = Vec::zeros(X.cols);
    for (std::size_t b = 0; b < X.cols; ++b) x[b] = X.at(t, b);
    rep.rank1_terms.push_back(rank1_outer(u, x));
  }

  // Eq. 2's final line verbatim: the weighted rank-1 sum, ascending T.
  rep.dwq_diff = Mat::zeros(pk.cols, X.cols);
  for (std::size_t t = 0; t < n; ++t) {
    const Mat& term = rep.rank1_terms[t];
    for (std::size_t idx = 0; idx < rep.dwq_diff.data.size(); ++idx)
      rep.dwq_diff.data[idx] += rep.coeffs[t] * term.data[idx];
  }
  for (double& v : rep.dwq_diff.data) v *= alpha;

  std::vector<double> fro(n);
  for (std::size_t t = 0; t < n; ++t) fro[t] = frobenius(rep.rank1_terms[t]);
  for (std::size_t t = 0; t < n; ++t)
    if (fro[t] == 0.0) ++rep.zero_terms;

  rep.similarity = Mat::zeros(n, n);
  for (std::size_t t = 0; t < n; ++t) {
    rep.similarity.at(t, t) = 1.0;
    for (std::size_t u = t + 1; u < n; ++u) {
      const double c = cosine_flat(rep.rank1_terms[t], rep.rank1_terms[u]);
      rep.similarity.at(t, u) = c;
      rep.similarity.at(u, t) = c;
    }
  }

  rep.r_hat = Mat::zeros(pk.cols, X.cols);
  const std::size_t nonzero = n - rep.zero_terms;
  if (nonzero > 0) {
    for (std::size_t t = 0; t < n; ++t) {
      if (fro[t] == 0.0) continue;
      const Mat& term = rep.rank1_terms[t];
      for (std::size_t idx = 0; idx < rep.r_hat.data.size(); ++idx)
        rep.r_hat.data[idx] += term.data[idx] / fro[t];
    }
    for (double& v : rep.r_hat.data) v /= static_cast<double>(nonzero);
  }

  const double dwq_norm = frobenius(rep.dwq_diff);
  const double rhat_sq = dot_flat(rep.r_hat, rep.r_hat);
  if (dwq_norm == 0.0) {
    rep.rank1_residual = 0.0;
  } else if (rhat_sq == 0.0) {
    rep.rank1_residual = 1.0;
  } else {
    const double c = dot_flat(rep.dwq_diff, rep.r_hat) / rhat_sq;
    const Mat resid = sub(rep.dwq_diff, scale(rep.r_hat, c));
    rep.rank1_residual = frobenius(resid) / dwq_norm;
  }
  return rep;
}

std::vector<double> bias_cumsum(const std::vector<GradErrorReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("bias_cumsum: no reports");
  std::vector<double> out;
  out.reserve(reports.size());
  double acc = 0.0;
  for (const GradErrorReport& r : reports) {
    acc += r.bias_sum;
    out.push_back(acc);
  }
  return out;
}

double similarity_summary(const GradErrorReport& report, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("similarity_summary: threshold not in (0,1)");
  const std::size_t n = report.rank1_terms.size();
  std::vector<std::size_t> live;
  for (std::size_t t = 0; t < n; ++t)
    if (frobenius(report.rank1_terms[t]) != 0.0) live.push_back(t);
  if (live.size() < 2) return 0.0;
  std::size_t hits = 0, pairs = 0;
  for (std::size_t a = 0; a < live.size(); ++a)
    for (std::size_t b = a + 1; b < live.size(); ++b) {
      ++pairs;
      if (report.similarity.at(live[a], live[b]) > threshold) ++hits;
    }
  return static_cast<double>(hits) / static_cast<double>(pairs);
}

NormSeries norm_tracker(const std::vector<Mat>& weights, std::size_t step,
                        NormSeries series) {
  if (series.names.empty() && series.norms.empty()) {
    for (std::size_t m = 0; m < weights.size(); ++m)
      series.names.push_back("w" + std::to_string(m));
    series.norms.resize(weights.size());
  }
  if (weights.size() != series.names.size() ||
      weights.size() != series.norms.size())
    throw std::invalid_argument("norm_tracker: weight count changed");
  series.steps.push_back(step);
  for (std::size_t m = 0; m < weights.size(); ++m)
    series.norms[m].push_back(spectral_norm(weights[m]).value);
  return series;
}

std::string report_to_json(const GradErrorReport& report) {
  json j;
  j["schema"] = "lpfa.grad_error_report";
  j["version"] = 1;
  j["bias_sum"] = report.bias_sum;
  j["rank1_residual"] = report.rank1_residual;
  j["zero_terms"] = report.zero_terms;
  j["coeffs"] = vec_json(report.coeffs);
  j["dq_diff"] = mat_json(report.dq_diff);
  j["dwq_diff"] = mat_json(report.dwq_diff);
  j["r_hat"] = mat_json(report.r_hat);
  j["similarity"] = mat_json(report.similarity);
  json terms = json::array();
  for (const Mat& t : report.rank1_terms) terms.push_back(mat_json(t));
  j["rank1_terms"] = std::move(terms);
  return j.dump();
}

GradErrorReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("schema").get<std::string>() != "lpfa.grad_error_report" ||
      j.at("version").get<int>() != 1)
    throw std::invalid_argument("report_from_json: unknown schema/version");
  GradErrorReport rep;
  rep.bias_sum = j.at("bias_sum").get<double>();
  rep.rank1_residual = j.at("rank1_residual").get<double>();
  rep.zero_terms = j.at("zero_terms").get<std::size_t>();
  rep.coeffs = vec_from(j.at("coeffs"));
  rep.dq_diff = mat_from(j.at("dq_diff"));
  rep.dwq_diff = mat_from(j.at("dwq_diff"));
  rep.r_hat = mat_from(j.at("r_hat"));
  rep.similarity = mat_from(j.at("similarity"));
  for (const json& t : j.at("rank1_terms")) rep.rank1_terms.push_back(mat_from(t));
  return rep;
}

std::string report_summary_csv(const GradErrorReport& report) {
  const std::size_t n = report.rank1_terms.size();
  std::string out = "token,coeff,term_fro,sim_mean\n";
  for (std::size_t t = 0; t < n; ++t) {
    double sim = 0.0;
    if (n > 1) {
      for (std::size_t u = 0; u < n; ++u)
        if (u != t) sim += report.similarity.at(t, u);
      sim /= static_cast<double>(n - 1);
    }
    out += std::to_string(t);
    out += ',';
    out += shortest(report.coeffs[t]);
    out += ',';
    out += shortest(frobenius(report.rank1_terms[t]));
    out += ',';
    out += shortest(sim);
    out += '\n';
  }
  return out;
}

std::string norm_series_csv(const NormSeries& series) {
  std::string out = "step";
  for (const std::string& name : series.names) {
    out += ',';
    out += name;
  }
  out += '\n';
  for (std::size_t i = 0; i < series.steps.size(); ++i) {
    out += std::to_string(series.steps[i]);
    for (std::size_t m = 0; m < series.norms.size(); ++m) {
      out += ',';
      out += shortest(series.norms[m].at(i));
    }
    out += '\n';
  }
  return out;
}

NormSeries norm_series_from_csv(const std::string& text) {
  NormSeries series;
  std::size_t start = 0;
  bool header = true;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, ',');
    if (header) {
      if (fields.empty() || fields[0] != "step")
        throw std::invalid_argument("norm_series_from_csv: bad header");
      series.names.assign(fields.begin() + 1, fields.end());
      series.norms.resize(series.names.size());
      header = false;
      continue;
    }
    if (fields.size() != series.names.size() + 1)
      throw std::invalid_argument("norm_series_from_csv: column count");
    series.steps.push_back(
        static_cast<std::size_t>(parse_double(fields[0])));
    for (std::size_t m = 0; m < series.norms.size(); ++m)
      series.norms[m].push_back(parse_double(fields[m + 1]));
  }
  if (header) throw std::invalid_argument("norm_series_from_csv: empty input");
  return series;
}

}  // namespace lpfa
