#pragma once

#include <json.hpp>

#include "afflow/matrix.hpp"

namespace afflow {

using nlohmann::json;

/// Matrix wire format: {"n": N, "re": [...], "im": [...]}, row-major.
inline json matrix_to_json(const CMat& x) {
  const Eigen::Index n = x.rows();
  std::vector<double> re, im;
  re.reserve(n * n);
  im.reserve(n * n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      re.push_back(x(i, j).real());
      im.push_back(x(i, j).imag());
    }
  return json{{"n", n}, {"re", re}, {"im", im}};
}

inline CMat matrix_from_json(const json& j) {
  const Eigen::Index n = j.at("n").get<Eigen::Index>();
  const auto& re = j.at("re");
  const auto& im = j.at("im");
  if (static_cast<Eigen::Index>(re.size()) != n * n ||
      static_cast<Eigen::Index>(im.size()) != n * n)
    throw DimensionMismatch("matrix_from_json: entry count mismatch");
  CMat x(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j2 = 0; j2 < n; ++j2)
      x(i, j2) = Complex(re[i * n + j2].get<double>(),
                         im[i * n + j2].get<double>());
  return x;
}

}  // namespace afflow
