#pragma once

// Longitudinal data model and the building blocks shared by every estimator:
// pooled propensity model, working correlation structures and blipped-down
// outcomes.

#include <peg/common.hpp>

#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string_view>
#include <unordered_map>

namespace peg {

/// One person-session: outcome, binary treatment, adjuster row (h[0] == 1).
struct SessionRow {
  double y = 0.0;
  int a = 0;
  Vector h;
};

/// All sessions of one subject, stored column-major for the estimators.
/// Row j of `h` is the adjuster vector of session j.
struct Subject {
  std::string id;
  Matrix h;
  Vector y;
  Vector a;

  Index sessions() const { return h.rows(); }
  SessionRow session(Index j) const { return {y(j), static_cast<int>(a(j)), h.row(j).transpose()}; }
};

/// Immutable collection of subjects sharing the adjuster dimension K.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<Subject> subjects, std::vector<std::string> column_names = {})
      : subjects_(std::move(subjects)), names_(std::move(column_names)) {
    if (subjects_.empty()) throw DataError("dataset has no subjects");
    K_ = subjects_.front().h.cols();
    if (K_ < 1) throw DataError("dataset has no adjuster columns");
    for (const auto& s : subjects_) {
      if (s.h.cols() != K_) throw DataError("subject " + s.id + ": adjuster dimension differs from K");
      if (s.h.rows() < 1) throw DataError("subject " + s.id + ": no sessions");
      if (s.y.size() != s.h.rows() || s.a.size() != s.h.rows())
        throw DataError("subject " + s.id + ": outcome/treatment length mismatch");
      for (Index j = 0; j < s.h.rows(); ++j) {
        if (s.a(j) != 0.0 && s.a(j) != 1.0)
          throw DataError("subject " + s.id + ", session " + std::to_string(j) + ": treatment must be 0 or 1");
        if (s.h(j, 0) != 1.0)
          throw DataError("subject " + s.id + ", session " + std::to_string(j) + ": intercept column must be 1");
        if (!s.h.row(j).allFinite() || !std::isfinite(s.y(j)))
          throw DataError("subject " + s.id + ", session " + std::to_string(j) + ": non-finite value");
      }
      total_ += s.h.rows();
      max_sessions_ = std::max(max_sessions_, s.h.rows());
    }
    if (names_.empty()) {
      names_.push_back("(Intercept)");
      for (Index k = 1; k < K_; ++k) names_.push_back("h" + std::to_string(k));
    }
    if (static_cast<Index>(names_.size()) != K_) throw DataError("column name count differs from K");
  }

  Index n() const { return static_cast<Index>(subjects_.size()); }
  Index K() const { return K_; }
  Index total_sessions() const { return total_; }
  Index max_sessions() const { return max_sessions_; }
  bool balanced() const {
    return std::all_of(subjects_.begin(), subjects_.end(),
                       [&](const Subject& s) { return s.sessions() == max_sessions_; });
  }
  const std::vector<Subject>& subjects() const { return subjects_; }
  const Subject& subject(Index i) const { return subjects_[static_cast<std::size_t>(i)]; }
  const std::vector<std::string>& column_names() const { return names_; }

  /// Index of a named column, or nullopt.
  std::optional<Index> column(std::string_view name) const {
    for (std::size_t k = 0; k < names_.size(); ++k)
      if (names_[k] == name) return static_cast<Index>(k);
    return std::nullopt;
  }

 private:
  std::vector<Subject> subjects_;
  std::vector<std::string> names_;
  Index K_ = 0;
  Index total_ = 0;
  Index max_sessions_ = 0;
};

/// Sorted subset of adjuster columns that always contains the intercept 0.
class ModelIndexSet {
 public:
  ModelIndexSet() : idx_{0} {}

  explicit ModelIndexSet(std::vector<Index> indices) : idx_(std::move(indices)) {
    std::sort(idx_.begin(), idx_.end());
    idx_.erase(std::unique(idx_.begin(), idx_.end()), idx_.end());
    if (idx_.empty() || idx_.front() != 0) throw UsageError("model index set must contain column 0");
  }

  static ModelIndexSet full(Index K) {
    std::vector<Index> v(static_cast<std::size_t>(K));
    for (Index k = 0; k < K; ++k) v[static_cast<std::size_t>(k)] = k;
    return ModelIndexSet(std::move(v));
  }

  Index size() const { return static_cast<Index>(idx_.size()); }
  Index operator[](Index i) const { return idx_[static_cast<std::size_t>(i)]; }
  const std::vector<Index>& indices() const { return idx_; }
  bool contains(Index k) const { return std::binary_search(idx_.begin(), idx_.end(), k); }
  auto begin() const { return idx_.begin(); }
  auto end() const { return idx_.end(); }

  void check_within(Index K) const {
    if (idx_.back() >= K) throw UsageError("model index " + std::to_string(idx_.back()) + " outside 0..K-1");
  }

  bool operator==(const ModelIndexSet& other) const = default;

 private:
  std::vector<Index> idx_;
};

// ---------------------------------------------------------------------------
// CSV ingestion

/// Maps CSV columns to roles. An empty covariate list means "every column
/// that is not id/time/outcome/treatment, in file order".
struct ColumnSchema {
  std::string id = "id";
  std::string time = "time";
  std::string outcome = "y";
  std::string treatment = "a";
  std::vector<std::string> covariates;

  static ColumnSchema from_json(const nlohmann::json& j) {
    ColumnSchema s;
    if (j.contains("id")) s.id = j.at("id").get<std::string>();
    if (j.contains("time")) s.time = j.at("time").get<std::string>();
    if (j.contains("outcome")) s.outcome = j.at("outcome").get<std::string>();
    if (j.contains("treatment")) s.treatment = j.at("treatment").get<std::string>();
    if (j.contains("covariates")) s.covariates = j.at("covariates").get<std::vector<std::string>>();
    return s;
  }

  static ColumnSchema from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema file " + path);
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("schema file " + path + ": " + e.what());
    }
  }

  nlohmann::json to_json() const {
    return {{"id", id}, {"time", time}, {"outcome", outcome}, {"treatment", treatment}, {"covariates", covariates}};
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline std::string trim(std::string s) {
  auto notspace = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

inline std::optional<double> parse_number(const std::string& raw) {
  std::string s = trim(raw);
  if (s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null") return std::nullopt;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Reads a long-format CSV (one row per person-session) into a Dataset.
/// An intercept column is prepended; sessions are ordered by the time column.
inline Dataset load_dataset(std::istream& in, const ColumnSchema& schema = {}) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV is empty (header required)");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  auto find = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("CSV header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::size_t c_id = find(schema.id), c_time = find(schema.time), c_y = find(schema.outcome),
              c_a = find(schema.treatment);
  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (c != c_id && c != c_time && c != c_y && c != c_a) cov_names.push_back(header[c]);
  }
  std::vector<std::size_t> c_cov;
  for (const auto& name : cov_names) c_cov.push_back(find(name));

  struct Raw {
    double time;
    double y;
    int a;
    std::vector<double> h;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<Raw>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv_line(line);
    auto where = [&](const std::string& col) { return "row " + std::to_string(line_no) + " (column '" + col + "')"; };
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(f.size()));
    std::string id = detail::trim(f[c_id]);
    if (id.empty()) throw DataError("missing value at " + where(schema.id));
    auto get = [&](std::size_t c, const std::string& col) {
      auto v = detail::parse_number(f[c]);
      if (!v) throw DataError("missing or non-numeric value at " + where(col));
      return *v;
    };
    Raw r;
    r.time = get(c_time, schema.time);
    r.y = get(c_y, schema.outcome);
    double a = get(c_a, schema.treatment);
    if (a != 0.0 && a != 1.0) throw DataError("non-binary treatment value at " + where(schema.treatment));
    r.a = static_cast<int>(a);
    for (std::size_t k = 0; k < c_cov.size(); ++k) r.h.push_back(get(c_cov[k], cov_names[k]));
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) order.push_back(id);
    it->second.push_back(std::move(r));
  }
  if (order.empty()) throw DataError("CSV has no data rows");

  const Index K = static_cast<Index>(cov_names.size()) + 1;
  std::vector<Subject> subjects;
  subjects.reserve(order.size());
  for (const auto& id : order) {
    auto& rs = rows[id];
    std::stable_sort(rs.begin(), rs.end(), [](const Raw& x, const Raw& y) { return x.time < y.time; });
    for (std::size_t j = 1; j < rs.size(); ++j)
      if (rs[j].time == rs[j - 1].time) throw DataError("subject " + id + ": duplicated session index");
    Subject s;
    s.id = id;
    const Index J = static_cast<Index>(rs.size());
    s.h.resize(J, K);
    s.y.resize(J);
    s.a.resize(J);
    for (Index j = 0; j < J; ++j) {
      const auto& r = rs[static_cast<std::size_t>(j)];
      s.h(j, 0) = 1.0;
      for (Index k = 1; k < K; ++k) s.h(j, k) = r.h[static_cast<std::size_t>(k - 1)];
      s.y(j) = r.y;
      s.a(j) = r.a;
    }
    subjects.push_back(std::move(s));
  }
  std::vector<std::string> names{"(Intercept)"};
  names.insert(names.end(), cov_names.begin(), cov_names.end());
  return Dataset(std::move(subjects), std::move(names));
}

inline Dataset load_dataset(const std::string& path, const ColumnSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file " + path);
  return load_dataset(in, schema);
}

/// Writes the dataset back in long format (intercept column omitted).
inline void write_dataset(std::ostream& out, const Dataset& d) {
  out << "id,time,y,a";
  for (Index k = 1; k < d.K(); ++k) out << ',' << d.column_names()[static_cast<std::size_t>(k)];
  out << '\n';
  out.precision(17);
  for (const auto& s : d.subjects()) {
    for (Index j = 0; j < s.sessions(); ++j) {
      out << s.id << ',' << (j + 1) << ',' << s.y(j) << ',' << static_cast<int>(s.a(j));
      for (Index k = 1; k < d.K(); ++k) out << ',' << s.h(j, k);
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Propensity model

/// Pooled logistic regression of treatment on a subset of adjuster columns.
struct PropensityModel {
  ModelIndexSet columns;
  Vector beta;
  std::vector<Vector> fitted;  // e_ij per subject
  std::vector<double> loglik_path;
  int iterations = 0;
};

inline double expit(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

namespace detail {
inline double logistic_loglik(const Vector& eta, const Vector& a) {
  double ll = 0.0;
  for (Index r = 0; r < eta.size(); ++r) {
    double e = eta(r);
    double log1pexp = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += a(r) * e - log1pexp;
  }
  return ll;
}
}  // namespace detail

/// Newton-Raphson maximum likelihood with step halving, so the log-likelihood
/// path is non-decreasing. Throws NumericalError on rank deficiency or
/// (quasi-)complete separation.
inline PropensityModel fit_propensity(const Dataset& d, const ModelIndexSet& columns) {
  columns.check_within(d.K());
  const Index N = d.total_sessions(), p = columns.size();
  Matrix X(N, p);
  Vector a(N);
  {
    Index r = 0;
    for (const auto& s : d.subjects())
      for (Index j = 0; j < s.sessions(); ++j, ++r) {
        for (Index c = 0; c < p; ++c) X(r, c) = s.h(j, columns[c]);
        a(r) = s.a(j);
      }
  }
  if (Eigen::ColPivHouseholderQR<Matrix>(X).rank() < p)
    throw NumericalError("propensity design matrix is rank deficient");

  PropensityModel pm;
  pm.columns = columns;
  Vector beta = Vector::Zero(p);
  Vector eta = X * beta;
  double ll = detail::logistic_loglik(eta, a);
  pm.loglik_path.push_back(ll);
  constexpr int kMaxIter = 100;
  constexpr double kSeparationEta = 30.0;
  bool converged = false;
  for (int it = 0; it < kMaxIter; ++it) {
    Vector mu = eta.unaryExpr([](double e) { return expit(e); });
    Vector grad = X.transpose() * (a - mu);
    if (sup_norm(grad) < 1e-8) {
      converged = true;
      break;
    }
    Vector wts = mu.cwiseProduct(Vector::Ones(N) - mu);
    Matrix info = X.transpose() * wts.asDiagonal() * X;
    Eigen::LLT<Matrix> llt(info);
    if (llt.info() != Eigen::Success) throw NumericalError("propensity information matrix is singular (separation?)");
    Vector step = llt.solve(grad);
    if (grad.dot(step) < 1e-14 * std::max(1.0, std::abs(ll))) {  // Newton decrement
      converged = true;
      break;
    }
    double t = 1.0;
    Vector trial_beta, trial_eta;
    double trial_ll = -std::numeric_limits<double>::infinity();
    for (int half = 0; half < 40; ++half, t *= 0.5) {
      trial_beta = beta + t * step;
      trial_eta = X * trial_beta;
      trial_ll = detail::logistic_loglik(trial_eta, a);
      if (trial_ll >= ll) break;
    }
    if (!(trial_ll >= ll)) break;
    beta = trial_beta;
    eta = trial_eta;
    ll = trial_ll;
    pm.loglik_path.push_back(ll);
    pm.iterations = it + 1;
    if (sup_norm(eta) > kSeparationEta)
      throw NumericalError("propensity model diverges: treatment is (quasi-)perfectly separated");
  }
  if (!converged) {
    if (sup_norm(eta) > 15.0)
      throw NumericalError("propensity model diverges: treatment is (quasi-)perfectly separated");
    throw NumericalError("propensity Newton-Raphson did not converge");
  }
  if (sup_norm(eta) > 15.0)
    throw NumericalError("propensity fit has fitted probabilities numerically 0 or 1 (separation)");

  pm.beta = beta;
  Index r = 0;
  for (const auto& s : d.subjects()) {
    Vector e(s.sessions());
    for (Index j = 0; j < s.sessions(); ++j, ++r) e(j) = expit(eta(r));
    pm.fitted.push_back(std::move(e));
  }
  return pm;
}

/// Propensity model over every adjuster column.
inline PropensityModel fit_propensity(const Dataset& d) { return fit_propensity(d, ModelIndexSet::full(d.K())); }

// ---------------------------------------------------------------------------
// Working correlation

enum class CorrelationKind { independent, exchangeable, ar1, unstructured };

inline std::string to_string(CorrelationKind k) {
  switch (k) {
    case CorrelationKind::independent: return "ind";
    case CorrelationKind::exchangeable: return "exch";
    case CorrelationKind::ar1: return "ar1";
    case CorrelationKind::unstructured: return "un";
  }
  return "?";
}

inline CorrelationKind parse_correlation_kind(std::string_view s) {
  if (s == "ind" || s == "independent" || s == "indep") return CorrelationKind::independent;
  if (s == "exch" || s == "exchangeable") return CorrelationKind::exchangeable;
  if (s == "ar1") return CorrelationKind::ar1;
  if (s == "un" || s == "unstructured") return CorrelationKind::unstructured;
  throw UsageError("unknown correlation structure '" + std::string(s) + "' (expected ind|exch|ar1|un)");
}

struct WorkingCorrelation {
  CorrelationKind kind = CorrelationKind::independent;
  double rho = 0.0;  // exchangeable / ar1
  Matrix R;          // unstructured

  static WorkingCorrelation independent() { return {}; }
  static WorkingCorrelation exchangeable(double rho) { return {CorrelationKind::exchangeable, rho, {}}; }
  static WorkingCorrelation ar1(double rho) { return {CorrelationKind::ar1, rho, {}}; }
  static WorkingCorrelation unstructured(Matrix R) { return {CorrelationKind::unstructured, 0.0, std::move(R)}; }
};

struct CorrelationMatrices {
  Matrix R;
  Matrix R_inverse;
};

/// J x J correlation matrix for the structure, plus its inverse via Cholesky.
inline CorrelationMatrices materialize_correlation(const WorkingCorrelation& w, Index J) {
  if (J < 1) throw UsageError("materialize_correlation: J must be positive");
  Matrix R = Matrix::Identity(J, J);
  switch (w.kind) {
    case CorrelationKind::independent:
      return {R, R};
    case CorrelationKind::exchangeable:
      if (!(w.rho > -1.0 && w.rho < 1.0) || (J > 1 && !(w.rho > -1.0 / static_cast<double>(J - 1))))
        throw UsageError("exchangeable rho out of range");
      R.setConstant(w.rho);
      R.diagonal().setOnes();
      break;
    case CorrelationKind::ar1:
      if (!(w.rho > -1.0 && w.rho < 1.0)) throw UsageError("ar1 rho out of range");
      for (Index r = 0; r < J; ++r)
        for (Index c = 0; c < J; ++c) R(r, c) = std::pow(w.rho, static_cast<double>(std::abs(r - c)));
      break;
    case CorrelationKind::unstructured:
      if (w.R.rows() != J || w.R.cols() != J)
        throw DataError("unstructured correlation is " + std::to_string(w.R.rows()) + "x" +
                        std::to_string(w.R.cols()) + " but subject has " + std::to_string(J) +
                        " sessions (unstructured requires balanced data)");
      if (!w.R.isApprox(w.R.transpose(), 1e-12)) throw NumericalError("unstructured correlation is not symmetric");
      R = w.R;
      break;
  }
  Eigen::LLT<Matrix> llt(R);
  if (llt.info() != Eigen::Success) throw NumericalError("working correlation matrix is not positive definite");
  Matrix inv = llt.solve(Matrix::Identity(J, J));
  inv = 0.5 * (inv + inv.transpose()).eval();
  return {std::move(R), std::move(inv)};
}

struct CorrelationEstimate {
  WorkingCorrelation corr;
  bool clamped = false;
};

inline constexpr double kRhoBound = 0.99;

/// Moment estimator of the working correlation from raw residuals e_ij and
/// dispersion sigma2 (standardized residuals r = e / sigma).
inline CorrelationEstimate estimate_correlation(std::span<const Vector> residuals, CorrelationKind kind,
                                                double sigma2) {
  if (!(sigma2 > 0.0)) throw UsageError("estimate_correlation: sigma2 must be positive");
  CorrelationEstimate out;
  out.corr.kind = kind;
  const double sd = std::sqrt(sigma2);
  Index Jmax = 0;
  for (const auto& e : residuals) Jmax = std::max(Jmax, e.size());

  auto clamp_rho = [&](double rho, double lower) {
    double hi = kRhoBound, lo = std::max(-kRhoBound, lower);
    if (rho > hi) {
      out.clamped = true;
      return hi;
    }
    if (rho < lo) {
      out.clamped = true;
      return lo;
    }
    return rho;
  };

  switch (kind) {
    case CorrelationKind::independent:
      return out;
    case CorrelationKind::exchangeable: {
      double num = 0.0, pairs = 0.0;
      for (const auto& e : residuals) {
        const Index J = e.size();
        double s = e.sum() / sd, ss = e.squaredNorm() / sigma2;
        num += 0.5 * (s * s - ss);
        pairs += 0.5 * static_cast<double>(J * (J - 1));
      }
      double rho = pairs > 0 ? num / pairs : 0.0;
      double lower = Jmax > 1 ? -1.0 / static_cast<double>(Jmax - 1) + 1e-6 : -kRhoBound;
      out.corr.rho = clamp_rho(rho, lower);
      return out;
    }
    case CorrelationKind::ar1: {
      double num = 0.0, pairs = 0.0;
      for (const auto& e : residuals) {
        for (Index j = 0; j + 1 < e.size(); ++j) num += e(j) * e(j + 1) / sigma2;
        pairs += static_cast<double>(std::max<Index>(e.size() - 1, 0));
      }
      out.corr.rho = clamp_rho(pairs > 0 ? num / pairs : 0.0, -kRhoBound);
      return out;
    }
    case CorrelationKind::unstructured: {
      Matrix S = Matrix::Zero(Jmax, Jmax);
      for (const auto& e : residuals) {
        if (e.size() != Jmax) throw DataError("unstructured working correlation requires balanced sessions");
        S.noalias() += (e / sd) * (e / sd).transpose();
      }
      S /= static_cast<double>(residuals.size());
      Vector inv_sd = S.diagonal().cwiseSqrt().cwiseInverse();
      if (!inv_sd.allFinite()) throw NumericalError("unstructured correlation: zero residual variance at a session");
      Matrix R = inv_sd.asDiagonal() * S * inv_sd.asDiagonal();
      R = 0.5 * (R + R.transpose()).eval();
      R.diagonal().setOnes();
      // Clamp entries, then shrink toward identity until R is comfortably SPD.
      for (Index r = 0; r < Jmax; ++r)
        for (Index c = 0; c < Jmax; ++c)
          if (r != c && std::abs(R(r, c)) > kRhoBound) {
            R(r, c) = std::copysign(kRhoBound, R(r, c));
            out.clamped = true;
          }
      for (int step = 0; step < 200; ++step) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(R, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() > 1e-6) break;
        out.clamped = true;
        Matrix off = R;
        off.diagonal().setZero();
        R = Matrix::Identity(Jmax, Jmax) + 0.95 * off;
      }
      out.corr.R = std::move(R);
      return out;
    }
  }
  return out;
}

/// Matrix overload: row i holds subject i's residuals (balanced data).
inline CorrelationEstimate estimate_correlation(const Matrix& residuals, CorrelationKind kind, double sigma2) {
  std::vector<Vector> rows;
  rows.reserve(static_cast<std::size_t>(residuals.rows()));
  for (Index i = 0; i < residuals.rows(); ++i) rows.emplace_back(residuals.row(i).transpose());
  return estimate_correlation(std::span<const Vector>(rows), kind, sigma2);
}

// ---------------------------------------------------------------------------

/// U_j = y_j - a_j * h_j' psi: the outcome with the proximal blip removed.
inline Vector blipped_down(const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& a,
                           const Eigen::Ref<const Matrix>& H, const Eigen::Ref<const Vector>& psi) {
  if (y.size() != a.size() || y.size() != H.rows() || H.cols() != psi.size())
    throw UsageError("blipped_down: dimension mismatch");
  return y - a.cwiseProduct(H * psi);
}

// ---------------------------------------------------------------------------
// Standardization of continuous adjusters (scale only; the intercept and
// binary columns keep scale 1 so coefficients map back coordinate-wise).

struct Standardized {
  Dataset data;
  Vector scale;  // column k of the new data = column k of the old data / scale(k)
};

inline Standardized standardize(const Dataset& d) {
  const Index K = d.K();
  Vector scale = Vector::Ones(K);
  const double N = static_cast<double>(d.total_sessions());
  for (Index k = 1; k < K; ++k) {
    std::set<double> distinct;
    double sum = 0.0, sumsq = 0.0;
    for (const auto& s : d.subjects()) {
      for (Index j = 0; j < s.sessions(); ++j) {
        double v = s.h(j, k);
        if (distinct.size() < 3) distinct.insert(v);
        sum += v;
        sumsq += v * v;
      }
    }
    if (distinct.size() <= 2 || N < 2) continue;
    double mean = sum / N;
    double var = (sumsq - N * mean * mean) / (N - 1.0);
    if (var > 0) scale(k) = std::sqrt(var);
  }
  std::vector<Subject> subjects = d.subjects();
  for (auto& s : subjects)
    for (Index k = 1; k < K; ++k) s.h.col(k) /= scale(k);
  return {Dataset(std::move(subjects), d.column_names()), std::move(scale)};
}

}  // namespace peg
