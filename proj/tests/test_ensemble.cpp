#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vfp/ensemble.hpp"

using namespace vfp;

TEST_CASE("mean") {
  Matrix c = Matrix::Constant(4, 6, 2.5);
  CHECK((Ensemble(c).mean() - StateVector::Constant(4, 2.5)).norm() == 0.0);

  Matrix two(2, 2);
  two << 1.0, 3.0, -2.0, 4.0;
  StateVector m = Ensemble(two).mean();
  CHECK(m[0] == doctest::Approx(2.0));
  CHECK(m[1] == doctest::Approx(1.0));

  std::mt19937_64 gen(1);
  Matrix x(5, 7);
  for (int i = 0; i < x.size(); ++i)
    x(i / 7, i % 7) = std::normal_distribution<double>(0, 1)(gen);
  StateVector mm = Ensemble(x).mean();
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int e = 0; e < 7; ++e) s += x(i, e);
    CHECK(mm[i] == doctest::Approx(s / 7.0).epsilon(1e-14));
  }
}

TEST_CASE("anomalies") {
  Matrix same = Matrix::Constant(3, 5, 1.0);
  CHECK(Ensemble(same).anomalies().norm() == 0.0);

  Matrix pair(1, 2);
  pair << 0.0, 2.0;
  Matrix a = Ensemble(pair).anomalies();
  CHECK(a(0, 0) == doctest::Approx(-1.0));
  CHECK(a(0, 1) == doctest::Approx(1.0));

  std::mt19937_64 gen(2);
  Matrix x(4, 9);
  for (int i = 0; i < x.size(); ++i)
    x(i / 9, i % 9) = std::normal_distribution<double>(0, 2)(gen);
  Matrix an = Ensemble(x).anomalies();
  CHECK(an.rowwise().sum().norm() < 1e-12);

  CHECK_THROWS(Ensemble(Matrix::Ones(3, 1)).anomalies());
}

TEST_CASE("covariance") {
  Matrix same = Matrix::Constant(3, 5, 1.0);
  CHECK(Ensemble(same).covariance().norm() == 0.0);

  Matrix pair(1, 2);
  pair << 0.0, 2.0;
  CHECK(Ensemble(pair).covariance()(0, 0) == doctest::Approx(2.0));

  std::mt19937_64 gen(3);
  Matrix x(6, 4);  // rank deficient on purpose
  for (int i = 0; i < x.size(); ++i)
    x(i / 4, i % 4) = std::normal_distribution<double>(0, 1)(gen);
  Ensemble ens(x);
  Matrix p = ens.covariance();
  Matrix a = ens.anomalies();
  CHECK((p - a * a.transpose()).norm() == 0.0);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(p);
  CHECK(eig.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("statistics invariant under particle permutation") {
  std::mt19937_64 gen(4);
  Matrix x(3, 8);
  for (int i = 0; i < x.size(); ++i)
    x(i / 8, i % 8) = std::normal_distribution<double>(0, 1)(gen);
  std::vector<int> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Matrix shuffled(3, 8);
  for (int e = 0; e < 8; ++e) shuffled.col(e) = x.col(perm[e]);

  Ensemble a(x), b(shuffled);
  CHECK((a.mean() - b.mean()).norm() < 1e-14);
  CHECK((a.covariance() - b.covariance()).norm() < 1e-13);
}
