#pragma once

// Sparse LU with a fill-reducing symmetric ordering and a static pivot
// sequence. The symbolic analysis depends only on the sparsity pattern, so it
// is computed once per network topology and reused for every Newton step of
// every scenario sharing that topology.

#include <Eigen/OrderingMethods>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <vector>

namespace flexest {

class StaticSparseLU {
 public:
  /// Symbolic analysis of a square column-major pattern.
  void analyze(const Eigen::SparseMatrix<double>& a) {
    n_ = a.rows();
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> perm;
    Eigen::AMDOrdering<int> amd;
    amd(a, perm);
    order_.assign(perm.indices().data(), perm.indices().data() + n_);
    inv_.assign(n_, 0);
    for (Eigen::Index k = 0; k < n_; ++k) inv_[order_[k]] = static_cast<int>(k);

    // Permuted row patterns.
    std::vector<std::vector<int>> rows(n_);
    for (Eigen::Index c = 0; c < a.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, c); it; ++it)
        rows[inv_[it.row()]].push_back(inv_[it.col()]);

    // Row-wise symbolic elimination.
    row_ptr_.assign(n_ + 1, 0);
    cols_.clear();
    diag_pos_.assign(n_, 0);
    std::vector<std::vector<int>> upper(n_);
    std::vector<char> mark(n_, 0);
    for (Eigen::Index i = 0; i < n_; ++i) {
      std::vector<int> pattern = rows[i];
      pattern.push_back(static_cast<int>(i));
      std::priority_queue<int, std::vector<int>, std::greater<>> pending;
      std::vector<int> list;
      for (int j : pattern) {
        if (mark[j]) continue;
        mark[j] = 1;
        list.push_back(j);
        if (j < i) pending.push(j);
      }
      while (!pending.empty()) {
        const int k = pending.top();
        pending.pop();
        for (int j : upper[k]) {
          if (mark[j]) continue;
          mark[j] = 1;
          list.push_back(j);
          if (j < i) pending.push(j);
        }
      }
      std::sort(list.begin(), list.end());
      for (int j : list) {
        mark[j] = 0;
        if (j == i) diag_pos_[i] = static_cast<int>(cols_.size());
        if (j > i) upper[i].push_back(j);
        cols_.push_back(j);
      }
      row_ptr_[i + 1] = static_cast<int>(cols_.size());
    }

    // Map every stored entry of the input onto the factor storage.
    slot_.clear();
    slot_.reserve(a.nonZeros());
    for (Eigen::Index c = 0; c < a.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, c); it; ++it) {
        const int r = inv_[it.row()], cc = inv_[it.col()];
        const auto first = cols_.begin() + row_ptr_[r];
        const auto last = cols_.begin() + row_ptr_[r + 1];
        slot_.push_back(static_cast<int>(std::lower_bound(first, last, cc) - cols_.begin()));
      }
    nnz_ = a.nonZeros();
    vals_.assign(cols_.size(), 0.0);
    colpos_.assign(n_, -1);
  }

  /// Numeric factorization; false if a pivot is zero, tiny or non-finite.
  bool factorize(const Eigen::SparseMatrix<double>& a) {
    std::fill(vals_.begin(), vals_.end(), 0.0);
    const double* av = a.valuePtr();
    double scale = 0.0;
    for (Eigen::Index e = 0; e < nnz_; ++e) {
      vals_[slot_[e]] += av[e];
      scale = std::max(scale, std::abs(av[e]));
    }
    const double tiny = 1e-13 * std::max(scale, 1e-300);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const int begin = row_ptr_[i], end = row_ptr_[i + 1], dpos = diag_pos_[i];
      for (int p = begin; p < end; ++p) colpos_[cols_[p]] = p;
      for (int p = begin; p < dpos; ++p) {
        const int k = cols_[p];
        const double l = vals_[p] / vals_[diag_pos_[k]];
        vals_[p] = l;
        if (l == 0.0) continue;
        for (int q = diag_pos_[k] + 1; q < row_ptr_[k + 1]; ++q) vals_[colpos_[cols_[q]]] -= l * vals_[q];
      }
      for (int p = begin; p < end; ++p) colpos_[cols_[p]] = -1;
      const double pivot = vals_[dpos];
      if (!std::isfinite(pivot) || std::abs(pivot) < tiny) return false;
    }
    return true;
  }

  /// Solves A x = b in place.
  void solve(Eigen::VectorXd& b) const {
    work_.resize(n_);
    for (Eigen::Index k = 0; k < n_; ++k) work_[k] = b[order_[k]];
    for (Eigen::Index i = 0; i < n_; ++i) {
      double s = work_[i];
      for (int p = row_ptr_[i]; p < diag_pos_[i]; ++p) s -= vals_[p] * work_[cols_[p]];
      work_[i] = s;
    }
    for (Eigen::Index i = n_ - 1; i >= 0; --i) {
      double s = work_[i];
      for (int p = diag_pos_[i] + 1; p < row_ptr_[i + 1]; ++p) s -= vals_[p] * work_[cols_[p]];
      work_[i] = s / vals_[diag_pos_[i]];
    }
    for (Eigen::Index k = 0; k < n_; ++k) b[order_[k]] = work_[k];
  }

  [[nodiscard]] std::size_t factor_nonzeros() const { return cols_.size(); }

 private:
  Eigen::Index n_ = 0;
  Eigen::Index nnz_ = 0;
  std::vector<int> order_, inv_;
  std::vector<int> row_ptr_, cols_, diag_pos_, slot_;
  std::vector<double> vals_;
  std::vector<int> colpos_;
  mutable Eigen::VectorXd work_;
};

}  // namespace flexest
