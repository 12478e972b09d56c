#pragma once

// Shared fixtures and independent reference computations for the test suites.

#include <peg/peg.hpp>

#include <random>

namespace testing_support {

using peg::Index;
using peg::Matrix;
using peg::Vector;

struct ToyOptions {
  Index n = 30;
  Index K = 4;
  Index J = 3;
  bool ragged = false;       // session counts vary in [1, J]
  double noise = 1.0;
  double blip = 0.7;
};

// Random longitudinal data with a linear treatment-free mean and blip.
inline peg::Dataset toy_dataset(const ToyOptions& o, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::vector<peg::Subject> subjects;
  for (Index i = 0; i < o.n; ++i) {
    Index J = o.ragged ? 1 + static_cast<Index>(eng() % static_cast<std::uint64_t>(o.J)) : o.J;
    peg::Subject s;
    s.id = "s" + std::to_string(i);
    s.h.resize(J, o.K);
    s.y.resize(J);
    s.a.resize(J);
    for (Index j = 0; j < J; ++j) {
      s.h(j, 0) = 1.0;
      for (Index k = 1; k < o.K; ++k) s.h(j, k) = nd(eng);
      double p = 1.0 / (1.0 + std::exp(-0.5 * s.h(j, std::min<Index>(1, o.K - 1))));
      s.a(j) = ud(eng) < p ? 1.0 : 0.0;
      double mu = s.h.row(j).sum() * 0.5;
      double gam = s.a(j) * o.blip * (s.h(j, 0) + (o.K > 1 ? s.h(j, 1) : 0.0));
      s.y(j) = mu + gam + o.noise * nd(eng);
    }
    subjects.push_back(std::move(s));
  }
  return peg::Dataset(std::move(subjects));
}

// Reference W, G for the full model by explicit element-wise sums over
// subjects, sessions and session pairs.
inline std::pair<Matrix, Vector> reference_moments(const peg::Dataset& d, const peg::PropensityModel& pm,
                                                   const peg::WorkingCorrelation& corr, double sigma2) {
  const Index K = d.K();
  Matrix W = Matrix::Zero(2 * K, 2 * K);
  Vector G = Vector::Zero(2 * K);
  for (Index i = 0; i < d.n(); ++i) {
    const auto& s = d.subject(i);
    const auto& e = pm.fitted[static_cast<std::size_t>(i)];
    const Index J = s.sessions();
    Matrix V = sigma2 * peg::materialize_correlation(corr, J).R;
    Matrix Vinv = V.fullPivLu().inverse();
    for (Index j = 0; j < J; ++j)
      for (Index jp = 0; jp < J; ++jp) {
        const double v = Vinv(j, jp);
        for (Index r = 0; r < 2 * K; ++r) {
          double dr = r < K ? s.h(j, r) : (s.a(j) - e(j)) * s.h(j, r - K);
          G(r) += dr * v * s.y(jp);
          for (Index c = 0; c < 2 * K; ++c) {
            double xc = c < K ? s.h(jp, c) : s.a(jp) * s.h(jp, c - K);
            W(r, c) += dr * v * xc;
          }
        }
      }
  }
  W /= static_cast<double>(d.n());
  G /= static_cast<double>(d.n());
  return {W, G};
}

inline peg::PropensityModel constant_propensity(const peg::Dataset& d, double e) {
  peg::PropensityModel pm;
  pm.columns = peg::ModelIndexSet();
  pm.beta = Vector::Constant(1, std::log(e / (1.0 - e)));
  for (const auto& s : d.subjects()) pm.fitted.push_back(Vector::Constant(s.sessions(), e));
  return pm;
}

}  // namespace testing_support
