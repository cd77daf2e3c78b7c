#include "catgrad/categorical.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace catgrad {

namespace {

std::int64_t checked_product(const std::vector<int>& cards) {
  std::int64_t n = 1;
  constexpr std::int64_t kCap = std::int64_t{1} << 62;
  for (int k : cards) {
    if (k <= 0) throw std::invalid_argument("cardinalities must be positive");
    if (n > kCap / k) return kCap;
    n *= k;
  }
  return n;
}

}  // namespace

Vec softmax_row(const Eigen::Ref<const Vec>& logits) {
  if (logits.size() == 0) throw std::invalid_argument("empty logit row");
  if (!logits.allFinite()) throw std::invalid_argument("non-finite logit");
  const double m = logits.maxCoeff();
  Vec p = (logits.array() - m).exp();
  p /= p.sum();
  return p;
}

Vec log_softmax_row(const Eigen::Ref<const Vec>& logits) {
  if (logits.size() == 0) throw std::invalid_argument("empty logit row");
  if (!logits.allFinite()) throw std::invalid_argument("non-finite logit");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

// ---------------------------------------------------------------------------
// LogitTable
// ---------------------------------------------------------------------------

LogitTable::LogitTable(std::vector<int> cards_, std::vector<Vec> rows_)
    : cards(std::move(cards_)), rows(std::move(rows_)) {
  validate();
}

LogitTable LogitTable::zeros(const std::vector<int>& cards) {
  LogitTable t;
  t.cards = cards;
  t.rows.reserve(cards.size());
  for (int k : cards) {
    if (k <= 0) throw std::invalid_argument("cardinalities must be positive");
    t.rows.push_back(Vec::Zero(k));
  }
  return t;
}

LogitTable LogitTable::from_matrix(const Mat& logits) {
  LogitTable t;
  t.cards.assign(static_cast<std::size_t>(logits.rows()),
                 static_cast<int>(logits.cols()));
  t.rows.reserve(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index d = 0; d < logits.rows(); ++d)
    t.rows.push_back(logits.row(d).transpose());
  t.validate();
  return t;
}

Mat LogitTable::to_matrix() const {
  const int d = num_vars();
  if (d == 0) return Mat(0, 0);
  const int k = cards[0];
  for (int c : cards)
    if (c != k) throw std::invalid_argument("to_matrix requires uniform cardinality");
  Mat m(d, k);
  for (int i = 0; i < d; ++i) m.row(i) = rows[static_cast<std::size_t>(i)].transpose();
  return m;
}

void LogitTable::validate() const {
  if (cards.size() != rows.size())
    throw std::invalid_argument("logit table: cards/rows length mismatch");
  for (std::size_t d = 0; d < cards.size(); ++d) {
    if (cards[d] <= 0) throw std::invalid_argument("cardinalities must be positive");
    if (rows[d].size() != cards[d])
      throw std::invalid_argument("logit table: row length != cardinality");
    if (!rows[d].allFinite()) throw std::invalid_argument("non-finite logit");
  }
}

// ---------------------------------------------------------------------------
// GradTable
// ---------------------------------------------------------------------------

std::int64_t GradTable::size() const {
  std::int64_t n = 0;
  for (const Mat& b : blocks_) n += b.size();
  return n;
}

void GradTable::set_zero() {
  for (Mat& b : blocks_) b.setZero();
}

bool GradTable::all_finite() const {
  for (const Mat& b : blocks_)
    if (!b.allFinite()) return false;
  return true;
}

GradTable& GradTable::operator+=(const GradTable& other) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i] += other.blocks_[i];
  return *this;
}

GradTable& GradTable::operator-=(const GradTable& other) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i] -= other.blocks_[i];
  return *this;
}

GradTable& GradTable::operator*=(double s) {
  for (Mat& b : blocks_) b *= s;
  return *this;
}

double GradTable::squared_norm() const {
  double n = 0;
  for (const Mat& b : blocks_) n += b.squaredNorm();
  return n;
}

double GradTable::max_abs() const {
  double m = 0;
  for (const Mat& b : blocks_)
    if (b.size() > 0) m = std::max(m, b.cwiseAbs().maxCoeff());
  return m;
}

double GradTable::max_abs_diff(const GradTable& other) const {
  double m = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].size() > 0)
      m = std::max(m, (blocks_[i] - other.blocks_[i]).cwiseAbs().maxCoeff());
  return m;
}

Vec GradTable::flatten() const {
  Vec out(size());
  flatten_into(out);
  return out;
}

void GradTable::flatten_into(Vec& out) const {
  out.resize(size());
  std::int64_t i = 0;
  for_each([&](double v) { out[i++] = v; });
}

// ---------------------------------------------------------------------------
// Factorisation
// ---------------------------------------------------------------------------

Factorisation Factorisation::independent(LogitTable table) {
  table.validate();
  Factorisation f;
  f.kind_ = FactorKind::Independent;
  f.cards_ = table.cards;
  f.logits_.reserve(table.rows.size());
  f.probs_.reserve(table.rows.size());
  for (const Vec& row : table.rows) {
    f.logits_.push_back(row.transpose());
    f.probs_.push_back(softmax_row(row).transpose());
  }
  return f;
}

Factorisation Factorisation::chain(std::vector<int> cards, std::vector<Mat> cpt_logits) {
  if (cards.size() != cpt_logits.size())
    throw std::invalid_argument("chain: cards/tables length mismatch");
  Factorisation f;
  f.kind_ = FactorKind::Chain;
  f.cards_ = std::move(cards);
  std::int64_t parent_rows = 1;
  for (std::size_t d = 0; d < f.cards_.size(); ++d) {
    const Mat& t = cpt_logits[d];
    if (f.cards_[d] <= 0) throw std::invalid_argument("cardinalities must be positive");
    if (t.rows() != parent_rows || t.cols() != f.cards_[d])
      throw std::invalid_argument("chain: CPT for variable " + std::to_string(d) +
                                  " must be " + std::to_string(parent_rows) + " x " +
                                  std::to_string(f.cards_[d]));
    if (!t.allFinite()) throw std::invalid_argument("non-finite logit");
    Mat p(t.rows(), t.cols());
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      p.row(r) = softmax_row(t.row(r).transpose()).transpose();
    f.logits_.push_back(t);
    f.probs_.push_back(std::move(p));
    parent_rows *= f.cards_[d];
  }
  return f;
}

std::int64_t Factorisation::support_size() const { return checked_product(cards_); }

int Factorisation::parent_row(int d, const Assignment& x) const {
  if (kind_ == FactorKind::Independent) return 0;
  std::int64_t idx = 0;
  for (int j = 0; j < d; ++j) idx = idx * cards_[static_cast<std::size_t>(j)] + x[j];
  return static_cast<int>(idx);
}

GradTable Factorisation::zero_grad() const {
  std::vector<Mat> blocks;
  blocks.reserve(logits_.size());
  for (const Mat& l : logits_) blocks.push_back(Mat::Zero(l.rows(), l.cols()));
  return GradTable(std::move(blocks));
}

LogitTable Factorisation::independent_table() const {
  if (kind_ != FactorKind::Independent)
    throw std::invalid_argument("factorisation is not independent");
  LogitTable t;
  t.cards = cards_;
  t.rows.reserve(logits_.size());
  for (const Mat& l : logits_) t.rows.push_back(l.row(0).transpose());
  return t;
}

void Factorisation::validate_assignment(const Assignment& x) const {
  if (x.size() != num_vars())
    throw std::invalid_argument("assignment length != number of variables");
  for (int d = 0; d < num_vars(); ++d)
    if (x[d] < 0 || x[d] >= cards_[static_cast<std::size_t>(d)])
      throw std::invalid_argument("assignment entry out of range at variable " +
                                  std::to_string(d));
}

// ---------------------------------------------------------------------------
// FunctionOracle
// ---------------------------------------------------------------------------

Vec FunctionOracle::eval_batch(const SampleBatch& xs) const {
  if (batch_) return batch_(xs);
  Vec out(xs.rows());
  Assignment x(xs.cols());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    x = xs.row(i).transpose();
    out[i] = fn_(x);
  }
  return out;
}

const FunctionOracle::Relaxation& FunctionOracle::relaxation() const {
  if (!has_relaxed_)
    throw std::invalid_argument("Gumbel-Softmax requires a relaxed function");
  return relaxed_;
}

// ---------------------------------------------------------------------------
// log_prob / score
// ---------------------------------------------------------------------------

double log_prob(const Factorisation& fact, const Assignment& x) {
  fact.validate_assignment(x);
  double lp = 0.0;
  for (int d = 0; d < fact.num_vars(); ++d) {
    const int r = fact.parent_row(d, x);
    lp += log_softmax_row(fact.logits(d).row(r).transpose())[x[d]];
  }
  return lp;
}

GradTable score(const Factorisation& fact, const Assignment& x) {
  GradTable g = fact.zero_grad();
  add_scaled_score(g, fact, x, 1.0);
  return g;
}

void add_scaled_score(GradTable& acc, const Factorisation& fact, const Assignment& x,
                      double w) {
  for (int d = 0; d < fact.num_vars(); ++d) {
    const int r = fact.parent_row(d, x);
    acc.block(d).row(r) -= w * fact.probs(d).row(r);
    acc.block(d)(r, x[d]) += w;
  }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

void sample_assignment_into(Assignment& x, const Factorisation& fact, Rng& rng) {
  x.resize(fact.num_vars());
  sample_suffix_into(x, fact, -1, rng);
}

void sample_prefix_into(Assignment& x, const Factorisation& fact, int d, Rng& rng) {
  for (int j = 0; j < d; ++j) {
    const int r = fact.parent_row(j, x);
    x[j] = rng.categorical(fact.probs(j).row(r).transpose());
  }
}

void sample_suffix_into(Assignment& x, const Factorisation& fact, int d, Rng& rng) {
  for (int j = d + 1; j < fact.num_vars(); ++j) {
    const int r = fact.parent_row(j, x);
    x[j] = rng.categorical(fact.probs(j).row(r).transpose());
  }
}

void sample_ancestral_into(SampleBatch& out, const Factorisation& fact, std::int64_t n,
                           Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  out.resize(n, fact.num_vars());
  Assignment x(fact.num_vars());
  for (std::int64_t i = 0; i < n; ++i) {
    sample_suffix_into(x, fact, -1, rng);
    out.row(i) = x.transpose();
  }
}

SampleBatch sample_ancestral(const Factorisation& fact, std::int64_t n, Rng& rng) {
  SampleBatch out;
  sample_ancestral_into(out, fact, n, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Enumeration
// ---------------------------------------------------------------------------

SupportTooLargeError::SupportTooLargeError(std::int64_t size_, std::int64_t budget_)
    : std::runtime_error("support too large: " + std::to_string(size_) +
                         " outcomes exceed budget " + std::to_string(budget_)),
      support_size(size_),
      budget(budget_) {}

SupportEnumerator::SupportEnumerator(std::vector<int> cards, std::int64_t budget)
    : cards_(std::move(cards)), current_(cards_.size(), 0) {
  size_ = checked_product(cards_);
  if (size_ > budget) throw SupportTooLargeError(size_, budget);
}

bool SupportEnumerator::next(Assignment& x) {
  if (done_) return false;
  if (!started_) {
    started_ = true;
  } else {
    // Odometer with the last variable fastest.
    int d = static_cast<int>(cards_.size()) - 1;
    while (d >= 0) {
      if (++current_[static_cast<std::size_t>(d)] < cards_[static_cast<std::size_t>(d)])
        break;
      current_[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0) {
      done_ = true;
      return false;
    }
  }
  x.resize(static_cast<Eigen::Index>(cards_.size()));
  for (std::size_t d = 0; d < cards_.size(); ++d)
    x[static_cast<Eigen::Index>(d)] = current_[d];
  if (cards_.empty()) done_ = true;  // single empty assignment
  return true;
}

void SupportEnumerator::reset() {
  std::fill(current_.begin(), current_.end(), 0);
  started_ = false;
  done_ = false;
}

Eigen::MatrixXi enumerate_support(const std::vector<int>& cards, std::int64_t budget) {
  SupportEnumerator en(cards, budget);
  Eigen::MatrixXi out(en.size(), static_cast<Eigen::Index>(cards.size()));
  Assignment x;
  Eigen::Index i = 0;
  while (en.next(x)) out.row(i++) = x.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

namespace {

double joint_prob(const Factorisation& fact, const Assignment& x) {
  double p = 1.0;
  for (int d = 0; d < fact.num_vars(); ++d)
    p *= fact.probs(d)(fact.parent_row(d, x), x[d]);
  return p;
}

}  // namespace

double exact_expectation(const Factorisation& fact, const FunctionOracle& f,
                         std::int64_t budget) {
  SupportEnumerator en(fact.cards(), budget);
  double e = 0.0;
  Assignment x;
  while (en.next(x)) e += joint_prob(fact, x) * f(x);
  return e;
}

GradTable exact_gradient(const Factorisation& fact, const FunctionOracle& f,
                         std::int64_t budget) {
  SupportEnumerator en(fact.cards(), budget);
  GradTable g = fact.zero_grad();
  Assignment x;
  while (en.next(x)) add_scaled_score(g, fact, x, joint_prob(fact, x) * f(x));
  return g;
}

std::vector<Vec> exact_marginals(const Factorisation& fact, std::int64_t budget) {
  SupportEnumerator en(fact.cards(), budget);
  std::vector<Vec> marg;
  marg.reserve(static_cast<std::size_t>(fact.num_vars()));
  for (int d = 0; d < fact.num_vars(); ++d)
    marg.push_back(Vec::Zero(fact.cards()[static_cast<std::size_t>(d)]));
  Assignment x;
  while (en.next(x)) {
    const double p = joint_prob(fact, x);
    for (int d = 0; d < fact.num_vars(); ++d) marg[static_cast<std::size_t>(d)][x[d]] += p;
  }
  return marg;
}

}  // namespace catgrad
