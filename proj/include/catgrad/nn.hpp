#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "catgrad/rng.hpp"

namespace catgrad::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// ParamStore: named parameter matrices with matching gradient accumulators.
// Insertion order is the canonical serialisation order. Checkpoints are a
// flat binary blob of coefficients plus a JSON shape manifest.
// ---------------------------------------------------------------------------
class ParamStore {
 public:
  Mat& add(const std::string& name, int rows, int cols);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  Mat& grad(const std::string& name);
  const Mat& grad(const std::string& name) const;

  void zero_grad();
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t total_size() const;
  bool values_finite() const;

  // Gradients of all entries flattened in declaration order.
  Vec flat_grad() const;

  void save(const std::string& path_prefix) const;
  static ParamStore load(const std::string& path_prefix);

 private:
  struct Entry {
    Mat value;
    Mat grad;
  };
  int at(const std::string& name) const;
  std::vector<Entry> entries_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Tape: a record of primitive operations built during a forward pass.
// backward() replays it once in reverse, accumulating exact vector-Jacobian
// products into the tape and into any ParamStore leaves.
// ---------------------------------------------------------------------------
class Tape;

class Value {
 public:
  Value() = default;
  const Mat& data() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Value(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Leaves.
  Value input(Mat x);                // gradient tracked, queryable via grad()
  Value constant(Mat x);             // no gradient
  Value param(ParamStore& store, const std::string& name);

  // Primitives.
  Value matmul(Value a, Value b);
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);       // elementwise
  Value scale(Value a, double s);
  Value add_rowvec(Value a, Value bias);  // bias is 1 x F, broadcast over rows
  Value relu(Value a);
  Value sigmoid(Value a);
  Value softmax_rows(Value a);
  Value sum_all(Value a);            // 1 x 1
  Value mean_all(Value a);           // 1 x 1
  Value row_sum(Value a);            // B x 1
  // sum((pred - target)^2), scalar.
  Value squared_error_sum(Value pred, Mat target);
  // Row i: sum_j [t_ij * o_ij - softplus(o_ij)], the Bernoulli log-likelihood
  // of targets t under logits o. B x 1.
  Value bernoulli_loglik_rowsum(Value logits, Mat targets);

  // Reverse pass seeded with `upstream` at `out` (shape must match). A tape
  // can be consumed exactly once.
  void backward(Value out, const Mat& upstream);
  void backward(Value out);  // scalar out, seeds with 1

  // Gradient w.r.t. any node (empty if the node was never reached).
  const Mat& grad(Value v) const;

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  friend class Value;
  enum class Op {
    Input, Constant, Param, MatMul, Add, Sub, Mul, Scale, AddRowVec, Relu,
    Sigmoid, SoftmaxRows, SumAll, MeanAll, RowSum, SquaredErrorSum,
    BernoulliLoglikRowSum
  };
  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    Mat value;
    Mat grad;
    Mat aux;  // saved targets for loss nodes
    double scalar = 0.0;
    ParamStore* store = nullptr;
    std::string pname;
  };
  Value push(Node n);
  Node& node(Value v);
  const Node& cnode(Value v) const;
  void accumulate(int id, const Mat& g);

  std::vector<Node> nodes_;
  bool consumed_ = false;
  Mat empty_;
};

// ---------------------------------------------------------------------------
// Dense multi-layer perceptron over a named parameter prefix.
// ---------------------------------------------------------------------------
enum class Act { None, Relu, Sigmoid };

struct LayerSpec {
  int width;
  Act act = Act::None;
};

class Mlp {
 public:
  Mlp(std::string prefix, int input_width, std::vector<LayerSpec> layers);

  // Glorot-uniform weights, zero biases; entries must not already exist.
  void init_params(ParamStore& store, Rng& rng) const;
  Value forward(Tape& tape, ParamStore& store, Value input) const;
  Mat forward_only(const ParamStore& store, const Mat& input) const;

  int input_width() const { return input_width_; }
  int output_width() const { return layers_.back().width; }
  const std::string& prefix() const { return prefix_; }
  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;
  std::size_t num_layers() const { return layers_.size(); }

 private:
  std::string prefix_;
  int input_width_;
  std::vector<LayerSpec> layers_;
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Standard update with bias correction; throws on non-finite gradients,
  // naming the offending parameter.
  void step(ParamStore& store);
  std::int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, std::pair<Mat, Mat>> moments_;
};

struct RmsPropConfig {
  double lr = 1e-2;
  double rho = 0.9;
  double eps = 1e-8;
};

class RmsProp {
 public:
  explicit RmsProp(RmsPropConfig cfg = {}) : cfg_(cfg) {}
  void step(ParamStore& store);

 private:
  RmsPropConfig cfg_;
  std::unordered_map<std::string, Mat> accum_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------
struct FiniteDiffReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  bool pass = false;
  std::string worst_coord;
};

// Compares the analytic gradient produced by `loss_and_grad` (which must
// evaluate the loss at the current parameters and leave its gradient in the
// store) against central differences on a random subset of at least
// `min_coords` coordinates. Relative error uses a floor of
// max(1e-8, 1e-3 * max|analytic|) so near-zero coordinates are judged on the
// gradient's own scale.
FiniteDiffReport finite_diff_check(ParamStore& params,
                                   const std::function<double(ParamStore&)>& loss_and_grad,
                                   double h, double tol, std::int64_t min_coords,
                                   Rng& rng);

}  // namespace catgrad::nn
