/*
 * Copyright 2026 The posbias Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace posbias {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent data handed between pipeline stages (e.g. provenance mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

/// An estimator cannot produce any output from the given statistics.
class EstimatorError : public Error {
 public:
  using Error::Error;
};

/// Dense M x M grid addressed by 1-based rank pairs (k, k'), k != k'.
/// The diagonal is allocated but unused.
template <typename T>
class PairGrid {
 public:
  PairGrid() = default;
  explicit PairGrid(int m) : m_(m), v_(static_cast<std::size_t>(m) * static_cast<std::size_t>(m)) {}

  int M() const { return m_; }

  T& at(int k, int kp) {
    check(k, kp);
    return v_[idx(k, kp)];
  }
  const T& at(int k, int kp) const {
    check(k, kp);
    return v_[idx(k, kp)];
  }

  /// Unchecked access for hot loops.
  T& operator()(int k, int kp) { return v_[idx(k, kp)]; }
  const T& operator()(int k, int kp) const { return v_[idx(k, kp)]; }

  bool operator==(const PairGrid& o) const { return m_ == o.m_ && v_ == o.v_; }

 private:
  std::size_t idx(int k, int kp) const {
    return static_cast<std::size_t>(k - 1) * static_cast<std::size_t>(m_) + static_cast<std::size_t>(kp - 1);
  }
  void check(int k, int kp) const {
    if (k < 1 || k > m_ || kp < 1 || kp > m_) {
      throw ValidationError("PairGrid: rank pair (" + std::to_string(k) + "," + std::to_string(kp) +
                            ") out of range [1," + std::to_string(m_) + "]");
    }
  }

  int m_ = 0;
  std::vector<T> v_;
};

/// Relative examination propensities p_k / p_1 for ranks 1..M.
///
/// Rank 1 is the normalization anchor and equals 1 exactly when defined.
/// Ranks an estimator cannot support are marked absent (never reported as 0)
/// and carry a per-rank diagnostic note.
class PropensityCurve {
 public:
  PropensityCurve() = default;
  explicit PropensityCurve(int m)
      : m_(m), values_(static_cast<std::size_t>(m), 0.0), present_(static_cast<std::size_t>(m), 0),
        notes_(static_cast<std::size_t>(m)) {}

  int M() const { return m_; }

  bool defined(int rank) const {
    check(rank);
    return present_[static_cast<std::size_t>(rank - 1)] != 0;
  }

  double at(int rank) const {
    check(rank);
    if (!present_[static_cast<std::size_t>(rank - 1)]) {
      throw ValidationError("propensity curve: rank " + std::to_string(rank) + " is undefined" +
                            (notes_[static_cast<std::size_t>(rank - 1)].empty()
                                 ? std::string()
                                 : " (" + notes_[static_cast<std::size_t>(rank - 1)] + ")"));
    }
    return values_[static_cast<std::size_t>(rank - 1)];
  }

  double inverse_at(int rank) const { return 1.0 / at(rank); }

  void set(int rank, double value) {
    check(rank);
    values_[static_cast<std::size_t>(rank - 1)] = value;
    present_[static_cast<std::size_t>(rank - 1)] = 1;
    notes_[static_cast<std::size_t>(rank - 1)].clear();
  }

  void mark_absent(int rank, std::string note) {
    check(rank);
    present_[static_cast<std::size_t>(rank - 1)] = 0;
    values_[static_cast<std::size_t>(rank - 1)] = 0.0;
    notes_[static_cast<std::size_t>(rank - 1)] = std::move(note);
  }

  const std::string& note(int rank) const {
    check(rank);
    return notes_[static_cast<std::size_t>(rank - 1)];
  }

  bool fully_defined() const {
    for (int k = 1; k <= m_; ++k) {
      if (!defined(k)) return false;
    }
    return m_ > 0;
  }

  std::vector<int> undefined_ranks() const {
    std::vector<int> out;
    for (int k = 1; k <= m_; ++k) {
      if (!defined(k)) out.push_back(k);
    }
    return out;
  }

  /// Curve rescaled so that rank 1 equals 1 exactly. Requires rank 1 defined
  /// and positive.
  PropensityCurve normalized() const {
    if (m_ < 1 || !defined(1)) throw ValidationError("propensity curve: cannot normalize, rank 1 undefined");
    const double p1 = at(1);
    if (!(p1 > 0.0)) throw ValidationError("propensity curve: cannot normalize, rank 1 is not positive");
    PropensityCurve out(m_);
    for (int k = 1; k <= m_; ++k) {
      if (defined(k)) {
        out.set(k, k == 1 ? 1.0 : at(k) / p1);
      } else {
        out.mark_absent(k, note(k));
      }
    }
    return out;
  }

  bool operator==(const PropensityCurve& o) const {
    return m_ == o.m_ && values_ == o.values_ && present_ == o.present_;
  }

 private:
  void check(int rank) const {
    if (rank < 1 || rank > m_) {
      throw ValidationError("propensity curve: rank " + std::to_string(rank) + " out of range [1," +
                            std::to_string(m_) + "]");
    }
  }

  int m_ = 0;
  std::vector<double> values_;
  std::vector<char> present_;
  std::vector<std::string> notes_;
};

}  // namespace posbias
