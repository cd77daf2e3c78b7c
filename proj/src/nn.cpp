#include "catgrad/nn.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace catgrad::nn {

namespace {

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Mat& ParamStore::add(const std::string& name, int rows, int cols) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  index_[name] = static_cast<int>(entries_.size());
  order_.push_back(name);
  entries_.push_back({Mat::Zero(rows, cols), Mat::Zero(rows, cols)});
  return entries_.back().value;
}

int ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

Mat& ParamStore::value(const std::string& name) {
  return entries_[static_cast<std::size_t>(at(name))].value;
}
const Mat& ParamStore::value(const std::string& name) const {
  return entries_[static_cast<std::size_t>(at(name))].value;
}
Mat& ParamStore::grad(const std::string& name) {
  return entries_[static_cast<std::size_t>(at(name))].grad;
}
const Mat& ParamStore::grad(const std::string& name) const {
  return entries_[static_cast<std::size_t>(at(name))].grad;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool ParamStore::values_finite() const {
  for (const auto& e : entries_)
    if (!e.value.allFinite()) return false;
  return true;
}

Vec ParamStore::flat_grad() const {
  Vec out(total_size());
  std::int64_t i = 0;
  for (const auto& e : entries_) {
    for (Eigen::Index r = 0; r < e.grad.rows(); ++r)
      for (Eigen::Index c = 0; c < e.grad.cols(); ++c) out[i++] = e.grad(r, c);
  }
  return out;
}

void ParamStore::save(const std::string& path_prefix) const {
  nlohmann::json manifest;
  manifest["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < order_.size(); ++i) {
    manifest["params"].push_back({{"name", order_[i]},
                                  {"rows", entries_[i].value.rows()},
                                  {"cols", entries_[i].value.cols()}});
  }
  std::ofstream mf(path_prefix + ".json");
  if (!mf) throw std::runtime_error("cannot write " + path_prefix + ".json");
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(path_prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + path_prefix + ".bin");
  for (const auto& e : entries_) {
    bf.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(sizeof(double) * e.value.size()));
  }
}

ParamStore ParamStore::load(const std::string& path_prefix) {
  std::ifstream mf(path_prefix + ".json");
  if (!mf) throw std::runtime_error("cannot read " + path_prefix + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  ParamStore store;
  std::ifstream bf(path_prefix + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + path_prefix + ".bin");
  for (const auto& p : manifest.at("params")) {
    Mat& m = store.add(p.at("name").get<std::string>(), p.at("rows").get<int>(),
                       p.at("cols").get<int>());
    bf.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!bf) throw std::runtime_error("checkpoint truncated: " + path_prefix);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Mat& Value::data() const { return tape_->cnode(*this).value; }

Value Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Tape::Node& Tape::node(Value v) { return nodes_[static_cast<std::size_t>(v.id_)]; }
const Tape::Node& Tape::cnode(Value v) const {
  return nodes_[static_cast<std::size_t>(v.id_)];
}

Value Tape::input(Mat x) { return push({Op::Input, -1, -1, std::move(x), {}, {}, 0, nullptr, {}}); }
Value Tape::constant(Mat x) {
  return push({Op::Constant, -1, -1, std::move(x), {}, {}, 0, nullptr, {}});
}
Value Tape::param(ParamStore& store, const std::string& name) {
  return push({Op::Param, -1, -1, store.value(name), {}, {}, 0, &store, name});
}

Value Tape::matmul(Value a, Value b) {
  if (a.data().cols() != b.data().rows())
    throw std::invalid_argument("matmul: inner dimensions differ");
  return push({Op::MatMul, a.id_, b.id_, a.data() * b.data(), {}, {}, 0, nullptr, {}});
}

Value Tape::add(Value a, Value b) {
  if (a.data().rows() != b.data().rows() || a.data().cols() != b.data().cols())
    throw std::invalid_argument("add: shape mismatch");
  return push({Op::Add, a.id_, b.id_, a.data() + b.data(), {}, {}, 0, nullptr, {}});
}

Value Tape::sub(Value a, Value b) {
  if (a.data().rows() != b.data().rows() || a.data().cols() != b.data().cols())
    throw std::invalid_argument("sub: shape mismatch");
  return push({Op::Sub, a.id_, b.id_, a.data() - b.data(), {}, {}, 0, nullptr, {}});
}

Value Tape::mul(Value a, Value b) {
  if (a.data().rows() != b.data().rows() || a.data().cols() != b.data().cols())
    throw std::invalid_argument("mul: shape mismatch");
  return push({Op::Mul, a.id_, b.id_, a.data().cwiseProduct(b.data()), {}, {}, 0,
               nullptr, {}});
}

Value Tape::scale(Value a, double s) {
  return push({Op::Scale, a.id_, -1, s * a.data(), {}, {}, s, nullptr, {}});
}

Value Tape::add_rowvec(Value a, Value bias) {
  if (bias.data().rows() != 1 || bias.data().cols() != a.data().cols())
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(a)");
  Mat out = a.data();
  out.rowwise() += bias.data().row(0);
  return push({Op::AddRowVec, a.id_, bias.id_, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::relu(Value a) {
  return push({Op::Relu, a.id_, -1, a.data().cwiseMax(0.0), {}, {}, 0, nullptr, {}});
}

Value Tape::sigmoid(Value a) {
  Mat out = a.data().unaryExpr([](double x) { return sigmoid_scalar(x); });
  return push({Op::Sigmoid, a.id_, -1, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::softmax_rows(Value a) {
  Mat out = a.data();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return push({Op::SoftmaxRows, a.id_, -1, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::sum_all(Value a) {
  Mat out(1, 1);
  out(0, 0) = a.data().sum();
  return push({Op::SumAll, a.id_, -1, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::mean_all(Value a) {
  Mat out(1, 1);
  out(0, 0) = a.data().mean();
  return push({Op::MeanAll, a.id_, -1, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::row_sum(Value a) {
  Mat out = a.data().rowwise().sum();
  return push({Op::RowSum, a.id_, -1, std::move(out), {}, {}, 0, nullptr, {}});
}

Value Tape::squared_error_sum(Value pred, Mat target) {
  if (pred.data().rows() != target.rows() || pred.data().cols() != target.cols())
    throw std::invalid_argument("squared_error_sum: shape mismatch");
  Mat out(1, 1);
  out(0, 0) = (pred.data() - target).squaredNorm();
  return push({Op::SquaredErrorSum, pred.id_, -1, std::move(out), {}, std::move(target),
               0, nullptr, {}});
}

Value Tape::bernoulli_loglik_rowsum(Value logits, Mat targets) {
  const Mat& o = logits.data();
  if (o.rows() != targets.rows() || o.cols() != targets.cols())
    throw std::invalid_argument("bernoulli_loglik_rowsum: shape mismatch");
  Mat out(o.rows(), 1);
  for (Eigen::Index r = 0; r < o.rows(); ++r) {
    double s = 0;
    for (Eigen::Index c = 0; c < o.cols(); ++c)
      s += targets(r, c) * o(r, c) - softplus(o(r, c));
    out(r, 0) = s;
  }
  return push({Op::BernoulliLoglikRowSum, logits.id_, -1, std::move(out), {},
               std::move(targets), 0, nullptr, {}});
}

void Tape::accumulate(int id, const Mat& g) {
  if (id < 0) return;
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.op == Op::Constant) return;
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  n.grad += g;
}

void Tape::backward(Value out) { backward(out, Mat::Ones(1, 1)); }

void Tape::backward(Value out, const Mat& upstream) {
  if (consumed_) throw std::runtime_error("tape already consumed by backward");
  consumed_ = true;
  if (upstream.rows() != out.data().rows() || upstream.cols() != out.data().cols())
    throw std::invalid_argument("backward: upstream shape mismatch");
  accumulate(out.id_, upstream);

  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    const Mat& u = n.grad;
    switch (n.op) {
      case Op::Input:
      case Op::Constant:
        break;
      case Op::Param:
        n.store->grad(n.pname) += u;
        break;
      case Op::MatMul: {
        const Mat& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const Mat& B = nodes_[static_cast<std::size_t>(n.b)].value;
        accumulate(n.a, u * B.transpose());
        accumulate(n.b, A.transpose() * u);
        break;
      }
      case Op::Add:
        accumulate(n.a, u);
        accumulate(n.b, u);
        break;
      case Op::Sub:
        accumulate(n.a, u);
        accumulate(n.b, -u);
        break;
      case Op::Mul: {
        const Mat& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const Mat& B = nodes_[static_cast<std::size_t>(n.b)].value;
        accumulate(n.a, u.cwiseProduct(B));
        accumulate(n.b, u.cwiseProduct(A));
        break;
      }
      case Op::Scale:
        accumulate(n.a, n.scalar * u);
        break;
      case Op::AddRowVec:
        accumulate(n.a, u);
        accumulate(n.b, u.colwise().sum());
        break;
      case Op::Relu: {
        const Mat& A = nodes_[static_cast<std::size_t>(n.a)].value;
        accumulate(n.a, u.cwiseProduct(
                            (A.array() > 0.0).cast<double>().matrix()));
        break;
      }
      case Op::Sigmoid: {
        const Mat& s = n.value;
        accumulate(n.a,
                   u.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
        break;
      }
      case Op::SoftmaxRows: {
        const Mat& s = n.value;
        Mat g(s.rows(), s.cols());
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
          const double dot = u.row(r).dot(s.row(r));
          g.row(r) = (u.row(r).array() - dot) * s.row(r).array();
        }
        accumulate(n.a, g);
        break;
      }
      case Op::SumAll: {
        const Node& a = nodes_[static_cast<std::size_t>(n.a)];
        accumulate(n.a, Mat::Constant(a.value.rows(), a.value.cols(), u(0, 0)));
        break;
      }
      case Op::MeanAll: {
        const Node& a = nodes_[static_cast<std::size_t>(n.a)];
        accumulate(n.a, Mat::Constant(a.value.rows(), a.value.cols(),
                                      u(0, 0) / static_cast<double>(a.value.size())));
        break;
      }
      case Op::RowSum: {
        const Node& a = nodes_[static_cast<std::size_t>(n.a)];
        accumulate(n.a, u.col(0) * Eigen::RowVectorXd::Ones(a.value.cols()));
        break;
      }
      case Op::SquaredErrorSum: {
        const Mat& pred = nodes_[static_cast<std::size_t>(n.a)].value;
        accumulate(n.a, 2.0 * u(0, 0) * (pred - n.aux));
        break;
      }
      case Op::BernoulliLoglikRowSum: {
        const Mat& o = nodes_[static_cast<std::size_t>(n.a)].value;
        Mat sig = o.unaryExpr([](double x) { return sigmoid_scalar(x); });
        Mat g = (n.aux - sig).array().colwise() * u.col(0).array();
        accumulate(n.a, g);
        break;
      }
    }
  }
}

const Mat& Tape::grad(Value v) const {
  const Node& n = cnode(v);
  return n.grad.size() > 0 ? n.grad : empty_;
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp::Mlp(std::string prefix, int input_width, std::vector<LayerSpec> layers)
    : prefix_(std::move(prefix)), input_width_(input_width), layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("MLP needs at least one layer");
}

std::string Mlp::weight_name(std::size_t layer) const {
  return prefix_ + ".L" + std::to_string(layer) + ".W";
}
std::string Mlp::bias_name(std::size_t layer) const {
  return prefix_ + ".L" + std::to_string(layer) + ".b";
}

void Mlp::init_params(ParamStore& store, Rng& rng) const {
  int in = input_width_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const int out = layers_[l].width;
    Mat& w = store.add(weight_name(l), in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    store.add(bias_name(l), 1, out);
    in = out;
  }
}

Value Mlp::forward(Tape& tape, ParamStore& store, Value input) const {
  Value h = input;
  int in = input_width_;
  if (input.data().cols() != in)
    throw std::invalid_argument("layer " + prefix_ + ".L0: input width " +
                                std::to_string(input.data().cols()) + " != " +
                                std::to_string(in));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Value w = tape.param(store, weight_name(l));
    Value b = tape.param(store, bias_name(l));
    h = tape.add_rowvec(tape.matmul(h, w), b);
    switch (layers_[l].act) {
      case Act::None: break;
      case Act::Relu: h = tape.relu(h); break;
      case Act::Sigmoid: h = tape.sigmoid(h); break;
    }
  }
  return h;
}

Mat Mlp::forward_only(const ParamStore& store, const Mat& input) const {
  if (input.cols() != input_width_)
    throw std::invalid_argument("layer " + prefix_ + ".L0: input width " +
                                std::to_string(input.cols()) + " != " +
                                std::to_string(input_width_));
  Mat h = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h *= store.value(weight_name(l));
    h.rowwise() += store.value(bias_name(l)).row(0);
    switch (layers_[l].act) {
      case Act::None: break;
      case Act::Relu: h = h.cwiseMax(0.0); break;
      case Act::Sigmoid:
        h = h.unaryExpr([](double x) { return sigmoid_scalar(x); });
        break;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

void Adam::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const std::string& name : store.names()) {
    const Mat& g = store.grad(name);
    if (!g.allFinite())
      throw std::runtime_error("non-finite gradient for parameter " + name);
    auto [it, inserted] = moments_.try_emplace(name, Mat::Zero(g.rows(), g.cols()),
                                               Mat::Zero(g.rows(), g.cols()));
    Mat& m = it->second.first;
    Mat& v = it->second.second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const Mat mhat = m / bc1;
    const Mat vhat = v / bc2;
    store.value(name).array() -=
        cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
  }
}

void RmsProp::step(ParamStore& store) {
  for (const std::string& name : store.names()) {
    const Mat& g = store.grad(name);
    if (!g.allFinite())
      throw std::runtime_error("non-finite gradient for parameter " + name);
    auto [it, inserted] = accum_.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    Mat& v = it->second;
    v = cfg_.rho * v + (1.0 - cfg_.rho) * g.cwiseProduct(g);
    store.value(name).array() -= cfg_.lr * g.array() / (v.array().sqrt() + cfg_.eps);
  }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(ParamStore& params,
                                   const std::function<double(ParamStore&)>& loss_and_grad,
                                   double h, double tol, std::int64_t min_coords,
                                   Rng& rng) {
  if (!(h > 0.0)) throw std::invalid_argument("finite differences require h > 0");
  params.zero_grad();
  loss_and_grad(params);

  struct Coord {
    std::string name;
    Eigen::Index r, c;
    double analytic;
  };
  std::vector<Coord> coords;
  double max_abs = 0.0;
  for (const std::string& name : params.names()) {
    const Mat& g = params.grad(name);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        coords.push_back({name, r, c, g(r, c)});
        max_abs = std::max(max_abs, std::abs(g(r, c)));
      }
  }
  // Fisher-Yates prefix shuffle to pick the subset.
  const std::int64_t total = static_cast<std::int64_t>(coords.size());
  const std::int64_t take = std::min(total, std::max<std::int64_t>(min_coords, 1));
  for (std::int64_t i = 0; i < take; ++i) {
    const std::int64_t j = i + rng.below(total - i);
    std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(j)]);
  }

  const double floor = std::max(1e-8, 1e-3 * max_abs);
  FiniteDiffReport rep;
  rep.coords_checked = take;
  for (std::int64_t i = 0; i < take; ++i) {
    const Coord& cd = coords[static_cast<std::size_t>(i)];
    double& p = params.value(cd.name)(cd.r, cd.c);
    const double saved = p;
    p = saved + h;
    params.zero_grad();
    const double up = loss_and_grad(params);
    p = saved - h;
    params.zero_grad();
    const double dn = loss_and_grad(params);
    p = saved;
    const double fd = (up - dn) / (2.0 * h);
    const double rel =
        std::abs(cd.analytic - fd) / std::max({floor, std::abs(cd.analytic), std::abs(fd)});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = cd.name + "(" + std::to_string(cd.r) + "," +
                        std::to_string(cd.c) + ")";
    }
  }
  // Restore the analytic gradient state.
  params.zero_grad();
  loss_and_grad(params);
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace catgrad::nn
