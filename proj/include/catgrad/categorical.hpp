#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "catgrad/rng.hpp"

namespace catgrad {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// One value per variable, entry d in [0, K_d).
using Assignment = Eigen::VectorXi;

// N x D, one assignment per row.
using SampleBatch = Eigen::MatrixXi;

inline constexpr std::int64_t kDefaultEnumBudget = 10'000'000;

// Numerically stable softmax / log-softmax of one logit row
// (max-subtraction, shift invariant, no overflow for |logit| <= 1e4).
Vec softmax_row(const Eigen::Ref<const Vec>& logits);
Vec log_softmax_row(const Eigen::Ref<const Vec>& logits);

// ---------------------------------------------------------------------------
// LogitTable: per-variable logit rows directly parametrising independent
// categorical factors. Rows may have different lengths (ragged cardinality).
// ---------------------------------------------------------------------------
struct LogitTable {
  std::vector<int> cards;
  std::vector<Vec> rows;

  LogitTable() = default;
  LogitTable(std::vector<int> cards_, std::vector<Vec> rows_);

  static LogitTable zeros(const std::vector<int>& cards);
  // D x K matrix, one row per variable (uniform cardinality K).
  static LogitTable from_matrix(const Mat& logits);
  // Requires uniform cardinality.
  Mat to_matrix() const;

  int num_vars() const { return static_cast<int>(cards.size()); }
  void validate() const;  // throws std::invalid_argument on violations
};

// ---------------------------------------------------------------------------
// GradTable: per-factor coefficient blocks matching a factorisation's
// parameters. Block d has one row per joint parent assignment (a single row
// for unconditional factors) and K_d columns.
// ---------------------------------------------------------------------------
class GradTable {
 public:
  GradTable() = default;
  explicit GradTable(std::vector<Mat> blocks) : blocks_(std::move(blocks)) {}

  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  Mat& block(int d) { return blocks_[static_cast<std::size_t>(d)]; }
  const Mat& block(int d) const { return blocks_[static_cast<std::size_t>(d)]; }

  std::int64_t size() const;
  void set_zero();
  bool all_finite() const;

  GradTable& operator+=(const GradTable& other);
  GradTable& operator-=(const GradTable& other);
  GradTable& operator*=(double s);

  double squared_norm() const;
  double norm() const { return std::sqrt(squared_norm()); }
  double max_abs() const;
  double max_abs_diff(const GradTable& other) const;

  // Fixed coefficient order: blocks in variable order, each block row-major.
  Vec flatten() const;
  void flatten_into(Vec& out) const;

  template <class F>
  void for_each(F&& fn) const {
    for (const Mat& b : blocks_) {
      for (Eigen::Index r = 0; r < b.rows(); ++r)
        for (Eigen::Index c = 0; c < b.cols(); ++c) fn(b(r, c));
    }
  }

 private:
  std::vector<Mat> blocks_;
};

// ---------------------------------------------------------------------------
// Factorisation: an ordered product of categorical factors, either fully
// independent or chain-conditional with dense conditional probability
// tables. CPT rows are indexed row-major over the joint parent assignment
// (earlier variables vary slowest). Probabilities are cached at
// construction; instances are immutable and safe to share across threads.
// ---------------------------------------------------------------------------
enum class FactorKind { Independent, Chain };

class Factorisation {
 public:
  static Factorisation independent(LogitTable table);
  // cpt_logits[d]: (prod_{j<d} K_j) x K_d logit matrix.
  static Factorisation chain(std::vector<int> cards, std::vector<Mat> cpt_logits);

  FactorKind kind() const { return kind_; }
  int num_vars() const { return static_cast<int>(cards_.size()); }
  const std::vector<int>& cards() const { return cards_; }

  // Product of cardinalities, saturating at 2^62.
  std::int64_t support_size() const;

  const Mat& logits(int d) const { return logits_[static_cast<std::size_t>(d)]; }
  const Mat& probs(int d) const { return probs_[static_cast<std::size_t>(d)]; }

  // Row of variable d's table selected by the parent values in x
  // (always 0 for Independent).
  int parent_row(int d, const Assignment& x) const;

  GradTable zero_grad() const;
  // The independent parametrisation; throws for Chain factorisations.
  LogitTable independent_table() const;

  void validate_assignment(const Assignment& x) const;

 private:
  Factorisation() = default;
  FactorKind kind_ = FactorKind::Independent;
  std::vector<int> cards_;
  std::vector<Mat> logits_;
  std::vector<Mat> probs_;  // softmax of each logit row, cached
};

// ---------------------------------------------------------------------------
// FunctionOracle: f over complete assignments, with an optional batched
// form and an optional differentiable relaxation over per-variable
// probability vectors (soft assignments).
// ---------------------------------------------------------------------------
class FunctionOracle {
 public:
  using Fn = std::function<double(const Assignment&)>;
  using BatchFn = std::function<Vec(const SampleBatch&)>;

  struct Relaxation {
    // Value of the relaxed function at soft assignments (one probability
    // vector per variable).
    std::function<double(const std::vector<Vec>&)> value;
    // Gradient w.r.t. each probability vector, written into `grad_out`
    // (resized/overwritten by the callee to match the input shapes).
    std::function<void(const std::vector<Vec>&, std::vector<Vec>&)> grad;
  };

  explicit FunctionOracle(Fn f) : fn_(std::move(f)) {}
  FunctionOracle(Fn f, Relaxation relaxed)
      : fn_(std::move(f)), relaxed_(std::move(relaxed)), has_relaxed_(true) {}

  void set_batch(BatchFn b) { batch_ = std::move(b); }

  double operator()(const Assignment& x) const { return fn_(x); }

  // Evaluates all rows; uses the batched form when provided.
  Vec eval_batch(const SampleBatch& xs) const;

  bool has_relaxation() const { return has_relaxed_; }
  const Relaxation& relaxation() const;

 private:
  Fn fn_;
  BatchFn batch_;
  Relaxation relaxed_;
  bool has_relaxed_ = false;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// log p(x) = sum_d log softmax(theta_d(x_{<d}))[x_d]; always <= 0.
double log_prob(const Factorisation& fact, const Assignment& x);

// d/dtheta log p(x): in the parent-selected row of block d, entry k is
// 1[x_d = k] - softmax(row)[k]; untouched rows stay zero.
GradTable score(const Factorisation& fact, const Assignment& x);

// acc += w * score(fact, x), touching only the selected rows.
void add_scaled_score(GradTable& acc, const Factorisation& fact, const Assignment& x,
                      double w);

// Ancestral sampling: variable d drawn from the softmax of its conditional
// row given previously drawn values. Deterministic given the rng state.
SampleBatch sample_ancestral(const Factorisation& fact, std::int64_t n, Rng& rng);
void sample_ancestral_into(SampleBatch& out, const Factorisation& fact, std::int64_t n,
                           Rng& rng);
void sample_assignment_into(Assignment& x, const Factorisation& fact, Rng& rng);
// Fills x[0..d) ancestrally; entries at and past d are untouched.
void sample_prefix_into(Assignment& x, const Factorisation& fact, int d, Rng& rng);
// Fills x(d..D) ancestrally, conditioning on the values already in x[0..d].
void sample_suffix_into(Assignment& x, const Factorisation& fact, int d, Rng& rng);

class SupportTooLargeError : public std::runtime_error {
 public:
  SupportTooLargeError(std::int64_t size, std::int64_t budget);
  std::int64_t support_size;
  std::int64_t budget;
};

// Streams all prod(K_d) assignments exactly once, in row-major order
// (last variable fastest). An empty cardinality list yields one empty
// assignment.
class SupportEnumerator {
 public:
  explicit SupportEnumerator(std::vector<int> cards,
                             std::int64_t budget = kDefaultEnumBudget);
  std::int64_t size() const { return size_; }
  // Fills the next assignment; returns false once exhausted.
  bool next(Assignment& x);
  void reset();

 private:
  std::vector<int> cards_;
  std::vector<int> current_;
  std::int64_t size_ = 0;
  bool started_ = false;
  bool done_ = false;
};

// Materialised support (rows in enumeration order).
Eigen::MatrixXi enumerate_support(const std::vector<int>& cards,
                                  std::int64_t budget = kDefaultEnumBudget);

// E[f] and d/dtheta E[f] by explicit enumeration of the support. Testing
// facilities; they throw SupportTooLargeError past the budget.
double exact_expectation(const Factorisation& fact, const FunctionOracle& f,
                         std::int64_t budget = kDefaultEnumBudget);
GradTable exact_gradient(const Factorisation& fact, const FunctionOracle& f,
                         std::int64_t budget = kDefaultEnumBudget);

// Exact marginal distribution of each variable, by enumeration.
std::vector<Vec> exact_marginals(const Factorisation& fact,
                                 std::int64_t budget = kDefaultEnumBudget);

}  // namespace catgrad
