#include "sisda/graph.hpp"

#include <algorithm>
#include <cmath>

#include "sisda/error.hpp"
#include "sisda/kernels.hpp"

namespace sisda {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::matmul_transposed: return "matmul-transposed";
    case OpKind::add: return "add";
    case OpKind::add_row: return "add-row";
    case OpKind::scale: return "scale";
    case OpKind::mul: return "elementwise-multiply";
    case OpKind::softmax_rows: return "softmax-rows";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::gather_rows: return "gather-rows";
    case OpKind::concat_rows: return "concat-rows";
    case OpKind::concat_cols: return "concat-cols";
    case OpKind::slice_rows: return "slice-rows";
    case OpKind::slice_cols: return "slice-cols";
    case OpKind::layer_norm: return "layer-norm";
    case OpKind::gelu: return "gelu";
    case OpKind::relu: return "relu";
    case OpKind::log_softmax_rows: return "log-softmax-rows";
    case OpKind::pick: return "pick";
    case OpKind::sum: return "sum";
    case OpKind::log_sigmoid: return "log-sigmoid";
  }
  return "unknown";
}

Var Graph::leaf(std::string name, Tensor value, bool requires_grad) {
  if (!value.is_matrix()) {
    throw Error(ErrorKind::shape_mismatch,
                "leaf '" + name + "' must be rank-2, got " + shape_string(value.shape()));
  }
  if (leaves_.contains(name)) {
    throw Error(ErrorKind::invalid_argument, "duplicate leaf name '" + name + "'");
  }
  if (!value.all_finite()) {
    throw Error(ErrorKind::non_finite, "leaf '" + name + "' holds non-finite values");
  }
  Node n;
  n.kind = OpKind::leaf;
  n.name = name;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  leaves_.emplace(std::move(name), nodes_.size() - 1);
  grads_ready_ = false;
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  if (!value.is_matrix()) {
    throw Error(ErrorKind::shape_mismatch,
                "constant must be rank-2, got " + shape_string(value.shape()));
  }
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  grads_ready_ = false;
  return Var{nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw Error(ErrorKind::invalid_argument, "variable does not belong to this graph");
  }
  return nodes_[v.id];
}

Var Graph::record(Node n) {
  for (std::size_t in : n.inputs) {
    if (in >= nodes_.size()) {
      throw Error(ErrorKind::invalid_argument, "op input does not belong to this graph");
    }
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  try {
    evaluate(id);
  } catch (...) {
    nodes_.pop_back();
    throw;
  }
  grads_ready_ = false;
  return Var{id};
}

void Graph::fail_shape(std::size_t id, const std::string& what) const {
  throw Error(ErrorKind::shape_mismatch, "node " + std::to_string(id) + " (" +
                                             std::string(op_name(nodes_[id].kind)) + "): " + what);
}


namespace {

std::vector<std::size_t> ids(std::span<const Var> vars) {
  std::vector<std::size_t> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(v.id);
  return out;
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.kind = OpKind::matmul;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var Graph::matmul_transposed(Var a, Var b) {
  Node n;
  n.kind = OpKind::matmul_transposed;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.kind = OpKind::add;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var Graph::add_row(Var a, Var row) {
  Node n;
  n.kind = OpKind::add_row;
  n.inputs = {a.id, row.id};
  return record(std::move(n));
}

Var Graph::scale(Var a, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.inputs = {a.id};
  n.factor = factor;
  return record(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  Node n;
  n.kind = OpKind::mul;
  n.inputs = {a.id, b.id};
  return record(std::move(n));
}

Var Graph::softmax_rows(Var a, bool causal) {
  Node n;
  n.kind = OpKind::softmax_rows;
  n.inputs = {a.id};
  n.flag = causal;
  return record(std::move(n));
}

Var Graph::log(Var a) {
  Node n;
  n.kind = OpKind::log;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::exp(Var a) {
  Node n;
  n.kind = OpKind::exp;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::gather_rows(Var table, std::vector<std::size_t> rows) {
  Node n;
  n.kind = OpKind::gather_rows;
  n.inputs = {table.id};
  n.index = std::move(rows);
  return record(std::move(n));
}

Var Graph::concat_rows(std::span<const Var> parts) {
  Node n;
  n.kind = OpKind::concat_rows;
  n.inputs = ids(parts);
  return record(std::move(n));
}

Var Graph::concat_cols(std::span<const Var> parts) {
  Node n;
  n.kind = OpKind::concat_cols;
  n.inputs = ids(parts);
  return record(std::move(n));
}

Var Graph::slice_rows(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.kind = OpKind::slice_rows;
  n.inputs = {a.id};
  n.begin = begin;
  n.end = end;
  return record(std::move(n));
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.kind = OpKind::slice_cols;
  n.inputs = {a.id};
  n.begin = begin;
  n.end = end;
  return record(std::move(n));
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
  Node n;
  n.kind = OpKind::layer_norm;
  n.inputs = {x.id, gain.id, bias.id};
  return record(std::move(n));
}

Var Graph::gelu(Var a) {
  Node n;
  n.kind = OpKind::gelu;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::relu(Var a) {
  Node n;
  n.kind = OpKind::relu;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::log_softmax_rows(Var a) {
  Node n;
  n.kind = OpKind::log_softmax_rows;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::pick(Var a, std::vector<std::size_t> cols) {
  Node n;
  n.kind = OpKind::pick;
  n.inputs = {a.id};
  n.index = std::move(cols);
  return record(std::move(n));
}

Var Graph::sum(Var a) {
  Node n;
  n.kind = OpKind::sum;
  n.inputs = {a.id};
  return record(std::move(n));
}

Var Graph::log_sigmoid(Var a) {
  Node n;
  n.kind = OpKind::log_sigmoid;
  n.inputs = {a.id};
  return record(std::move(n));
}

void Graph::retain_grad(Var v) {
  node(v);
  Node& n = nodes_[v.id];
  if (n.kind == OpKind::constant) {
    throw Error(ErrorKind::invalid_argument, "retain_grad on a constant");
  }
  if (!n.requires_grad && v.id + 1 != nodes_.size()) {
    throw Error(ErrorKind::state, "retain_grad on a frozen node must precede its consumers");
  }
  n.retain = true;
  n.requires_grad = true;
}

bool Graph::retains_grad(Var v) const { return node(v).retain; }

const Tensor& Graph::value(Var v) const { return node(v).value; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (!grads_ready_) {
    throw Error(ErrorKind::state, "gradients requested before backward()");
  }
  if (!n.requires_grad) {
    throw Error(ErrorKind::state,
                "node " + std::to_string(v.id) + " does not depend on any grad-requiring leaf");
  }
  return n.grad;
}

OpKind Graph::kind(Var v) const { return node(v).kind; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Var Graph::find_leaf(std::string_view name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) {
    throw Error(ErrorKind::invalid_argument, "no leaf named '" + std::string(name) + "'");
  }
  return Var{it->second};
}

std::vector<std::string> Graph::leaf_names() const {
  std::vector<std::string> out;
  for (const auto& [name, id] : leaves_) out.push_back(name);
  return out;
}

void Graph::evaluate(std::size_t id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs.at(k)].value; };
  for (std::size_t k = 0; k < n.inputs.size(); ++k) {
    if (!in(k).is_matrix()) fail_shape(id, "input " + std::to_string(k) + " is not rank-2");
  }

  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      return;

    case OpKind::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) {
        fail_shape(id, shape_string(a.shape()) + " * " + shape_string(b.shape()));
      }
      Tensor out = Tensor::zeros({a.rows(), b.cols()});
      kernels::matmul_acc(a.values(), b.values(), out.values(), a.rows(), a.cols(), b.cols());
      n.value = std::move(out);
      break;
    }
    case OpKind::matmul_transposed: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.cols()) {
        fail_shape(id, shape_string(a.shape()) + " * " + shape_string(b.shape()) + "^T");
      }
      Tensor out = Tensor::zeros({a.rows(), b.rows()});
      kernels::matmul_bt_acc(a.values(), b.values(), out.values(), a.rows(), a.cols(), b.rows());
      n.value = std::move(out);
      break;
    }
    case OpKind::add:
    case OpKind::mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() != b.shape()) {
        fail_shape(id, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
      }
      Tensor out = a;
      auto ov = out.values();
      auto bv = b.values();
      if (n.kind == OpKind::add) {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
      } else {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::add_row: {
      const Tensor& a = in(0);
      const Tensor& r = in(1);
      if (r.rows() != 1 || r.cols() != a.cols()) {
        fail_shape(id, "row " + shape_string(r.shape()) + " for " + shape_string(a.shape()));
      }
      Tensor out = a;
      for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += r[j];
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::scale: {
      Tensor out = in(0);
      for (double& v : out.values()) v *= n.factor;
      n.value = std::move(out);
      break;
    }
    case OpKind::softmax_rows: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.rows(); ++i) {
        kernels::softmax_row(out.row(i), n.flag ? i + 1 : out.cols());
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::log: {
      Tensor out = in(0);
      for (double& v : out.values()) v = std::log(std::max(v, kernels::kLogFloor));
      n.value = std::move(out);
      break;
    }
    case OpKind::exp: {
      Tensor out = in(0);
      for (double& v : out.values()) v = std::exp(v);
      n.value = std::move(out);
      break;
    }
    case OpKind::gather_rows: {
      const Tensor& t = in(0);
      Tensor out = Tensor::zeros({n.index.size(), t.cols()});
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        if (n.index[r] >= t.rows()) {
          fail_shape(id, "row index " + std::to_string(n.index[r]) + " outside table of " +
                             std::to_string(t.rows()) + " rows");
        }
        auto src = t.row(n.index[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::concat_rows: {
      if (n.inputs.empty()) fail_shape(id, "no parts");
      const std::size_t cols = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (in(k).cols() != cols) fail_shape(id, "part " + std::to_string(k) + " column count");
        rows += in(k).rows();
      }
      std::vector<double> vals;
      vals.reserve(rows * cols);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        auto v = in(k).values();
        vals.insert(vals.end(), v.begin(), v.end());
      }
      n.value = Tensor::matrix(rows, cols, std::move(vals));
      break;
    }
    case OpKind::concat_cols: {
      if (n.inputs.empty()) fail_shape(id, "no parts");
      const std::size_t rows = in(0).rows();
      std::size_t cols = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (in(k).rows() != rows) fail_shape(id, "part " + std::to_string(k) + " row count");
        cols += in(k).cols();
      }
      Tensor out = Tensor::zeros({rows, cols});
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        for (std::size_t i = 0; i < rows; ++i) {
          auto src = p.row(i);
          std::copy(src.begin(), src.end(), out.row(i).begin() + offset);
        }
        offset += p.cols();
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::slice_rows: {
      const Tensor& a = in(0);
      if (n.begin >= n.end || n.end > a.rows()) {
        fail_shape(id, "rows [" + std::to_string(n.begin) + "," + std::to_string(n.end) +
                           ") of " + shape_string(a.shape()));
      }
      auto v = a.values();
      n.value = Tensor::matrix(n.end - n.begin, a.cols(),
                               std::vector<double>(v.begin() + n.begin * a.cols(),
                                                   v.begin() + n.end * a.cols()));
      break;
    }
    case OpKind::slice_cols: {
      const Tensor& a = in(0);
      if (n.begin >= n.end || n.end > a.cols()) {
        fail_shape(id, "cols [" + std::to_string(n.begin) + "," + std::to_string(n.end) +
                           ") of " + shape_string(a.shape()));
      }
      Tensor out = Tensor::zeros({a.rows(), n.end - n.begin});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        auto src = a.row(i);
        std::copy(src.begin() + n.begin, src.begin() + n.end, out.row(i).begin());
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::layer_norm: {
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const Tensor& b = in(2);
      if (g.rows() != 1 || b.rows() != 1 || g.cols() != x.cols() || b.cols() != x.cols()) {
        fail_shape(id, "gain/bias must be 1x" + std::to_string(x.cols()));
      }
      Tensor out = Tensor::zeros(x.shape());
      n.cache.assign(2 * x.rows(), 0.0);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        kernels::layer_norm_row(x.row(i), g.values(), b.values(), out.row(i), n.cache[2 * i],
                                n.cache[2 * i + 1]);
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::gelu: {
      Tensor out = in(0);
      for (double& v : out.values()) v = kernels::gelu(v);
      n.value = std::move(out);
      break;
    }
    case OpKind::relu: {
      Tensor out = in(0);
      for (double& v : out.values()) v = std::max(v, 0.0);
      n.value = std::move(out);
      break;
    }
    case OpKind::log_softmax_rows: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        const double lse = kernels::log_sum_exp(row);
        for (double& v : row) v -= lse;
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::pick: {
      const Tensor& a = in(0);
      if (n.index.size() != a.rows()) fail_shape(id, "one column index per row required");
      Tensor out = Tensor::zeros({a.rows(), 1});
      for (std::size_t r = 0; r < a.rows(); ++r) {
        if (n.index[r] >= a.cols()) fail_shape(id, "column index out of range");
        out[r] = a(r, n.index[r]);
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::sum: {
      double s = 0.0;
      for (double v : in(0).values()) s += v;
      n.value = Tensor::scalar(s);
      break;
    }
    case OpKind::log_sigmoid: {
      Tensor out = in(0);
      for (double& v : out.values()) v = std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v)));
      n.value = std::move(out);
      break;
    }
  }

  if (!n.value.all_finite()) {
    throw Error(ErrorKind::non_finite, "node " + std::to_string(id) + " (" +
                                           std::string(op_name(n.kind)) +
                                           ") produced a non-finite value");
  }
}

void Graph::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const Tensor& dy = n.grad;
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto gin = [&](std::size_t k) -> Tensor& { return nodes_[n.inputs[k]].grad; };
  auto vin = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };

  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      return;

    case OpKind::matmul: {
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      if (needs(0)) {
        kernels::matmul_bt_acc(dy.values(), b.values(), gin(0).values(), a.rows(), b.cols(),
                               a.cols());
      }
      if (needs(1)) {
        kernels::matmul_at_acc(a.values(), dy.values(), gin(1).values(), a.rows(), a.cols(),
                               b.cols());
      }
      break;
    }
    case OpKind::matmul_transposed: {
      // y = a b^T, a: m x k, b: n x k
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      if (needs(0)) {
        kernels::matmul_acc(dy.values(), b.values(), gin(0).values(), a.rows(), b.rows(),
                            a.cols());
      }
      if (needs(1)) {
        kernels::matmul_at_acc(dy.values(), a.values(), gin(1).values(), a.rows(), b.rows(),
                               a.cols());
      }
      break;
    }
    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!needs(k)) continue;
        auto g = gin(k).values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      break;
    }
    case OpKind::mul: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!needs(k)) continue;
        auto g = gin(k).values();
        auto other = vin(1 - k).values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
      }
      break;
    }
    case OpKind::add_row: {
      if (needs(0)) {
        auto g = gin(0).values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (needs(1)) {
        auto g = gin(1).values();
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          auto row = dy.row(i);
          for (std::size_t j = 0; j < row.size(); ++j) g[j] += row[j];
        }
      }
      break;
    }
    case OpKind::scale: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.factor * dy[i];
      break;
    }
    case OpKind::softmax_rows: {
      if (!needs(0)) break;
      Tensor& g = gin(0);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < y.rows(); ++i) {
        auto yr = y.row(i);
        auto dr = dy.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * dr[j];
        auto gr = g.row(i);
        for (std::size_t j = 0; j < yr.size(); ++j) gr[j] += yr[j] * (dr[j] - dot);
      }
      break;
    }
    case OpKind::log: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      auto x = vin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > kernels::kLogFloor) g[i] += dy[i] / x[i];
      }
      break;
    }
    case OpKind::exp: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * n.value[i];
      break;
    }
    case OpKind::gather_rows: {
      if (!needs(0)) break;
      Tensor& g = gin(0);
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        auto src = dy.row(r);
        auto dst = g.row(n.index[r]);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      break;
    }
    case OpKind::concat_rows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t count = vin(k).size();
        if (needs(k)) {
          auto g = gin(k).values();
          for (std::size_t i = 0; i < count; ++i) g[i] += dy[offset + i];
        }
        offset += count;
      }
      break;
    }
    case OpKind::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t cols = vin(k).cols();
        if (needs(k)) {
          Tensor& g = gin(k);
          for (std::size_t i = 0; i < g.rows(); ++i) {
            auto src = dy.row(i);
            auto dst = g.row(i);
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[offset + j];
          }
        }
        offset += cols;
      }
      break;
    }
    case OpKind::slice_rows: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      const std::size_t base = n.begin * vin(0).cols();
      for (std::size_t i = 0; i < dy.size(); ++i) g[base + i] += dy[i];
      break;
    }
    case OpKind::slice_cols: {
      if (!needs(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto src = dy.row(i);
        auto dst = g.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) dst[n.begin + j] += src[j];
      }
      break;
    }
    case OpKind::layer_norm: {
      const Tensor& x = vin(0);
      const Tensor& gain = vin(1);
      const std::size_t d = x.cols();
      std::vector<double> xhat(d), dxhat(d);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double mu = n.cache[2 * i];
        const double r = n.cache[2 * i + 1];
        auto xr = x.row(i);
        auto dr = dy.row(i);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (xr[j] - mu) * r;
          dxhat[j] = dr[j] * gain[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
        }
        mean_d /= static_cast<double>(d);
        mean_dx /= static_cast<double>(d);
        if (needs(0)) {
          auto gr = gin(0).row(i);
          for (std::size_t j = 0; j < d; ++j) gr[j] += r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
        if (needs(1)) {
          auto gg = gin(1).values();
          for (std::size_t j = 0; j < d; ++j) gg[j] += dr[j] * xhat[j];
        }
        if (needs(2)) {
          auto gb = gin(2).values();
          for (std::size_t j = 0; j < d; ++j) gb[j] += dr[j];
        }
      }
      break;
    }
    case OpKind::gelu: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      auto x = vin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * kernels::gelu_derivative(x[i]);
      break;
    }
    case OpKind::relu: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      auto x = vin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) g[i] += dy[i];
      }
      break;
    }
    case OpKind::log_softmax_rows: {
      if (!needs(0)) break;
      Tensor& g = gin(0);
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto dr = dy.row(i);
        auto yr = n.value.row(i);
        double total = 0.0;
        for (double v : dr) total += v;
        auto gr = g.row(i);
        for (std::size_t j = 0; j < dr.size(); ++j) gr[j] += dr[j] - std::exp(yr[j]) * total;
      }
      break;
    }
    case OpKind::pick: {
      if (!needs(0)) break;
      Tensor& g = gin(0);
      for (std::size_t r = 0; r < n.index.size(); ++r) g(r, n.index[r]) += dy[r];
      break;
    }
    case OpKind::sum: {
      if (!needs(0)) break;
      const double d = dy[0];
      for (double& v : gin(0).values()) v += d;
      break;
    }
    case OpKind::log_sigmoid: {
      if (!needs(0)) break;
      auto g = gin(0).values();
      auto x = vin(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] / (1.0 + std::exp(x[i]));
      break;
    }
  }
}

void Graph::replay(const std::function<void(std::size_t, Tensor&)>& after_eval) {
  grads_ready_ = false;
  consistent_ = false;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    evaluate(id);
    if (after_eval) after_eval(id, nodes_[id].value);
  }
  consistent_ = true;
}

Tensor Graph::forward(const std::map<std::string, Tensor>& bindings, Var root) {
  node(root);
  for (const auto& [name, value] : bindings) {
    const std::size_t id = find_leaf(name).id;
    if (value.shape() != nodes_[id].value.shape()) {
      throw Error(ErrorKind::shape_mismatch, "node " + std::to_string(id) + " (leaf '" + name +
                                                 "'): bound " + shape_string(value.shape()) +
                                                 ", expected " +
                                                 shape_string(nodes_[id].value.shape()));
    }
    if (!value.all_finite()) {
      throw Error(ErrorKind::non_finite, "node " + std::to_string(id) + " (leaf '" + name +
                                             "'): bound value is non-finite");
    }
  }
  for (const auto& [name, value] : bindings) nodes_[find_leaf(name).id].value = value;
  replay(nullptr);
  return nodes_[root.id].value;
}

Tensor Graph::forward_perturbed(Var target, std::size_t index, double delta, Var root) {
  node(root);
  const Node& t = node(target);
  if (index >= t.value.size()) {
    throw Error(ErrorKind::invalid_argument, "perturbation index out of range");
  }
  const bool is_input = t.kind == OpKind::leaf || t.kind == OpKind::constant;
  const double original = t.value[index];
  if (is_input) nodes_[target.id].value[index] = original + delta;
  try {
    replay([&](std::size_t id, Tensor& v) {
      if (!is_input && id == target.id) v[index] += delta;
    });
  } catch (...) {
    if (is_input) nodes_[target.id].value[index] = original;
    throw;
  }
  Tensor out = nodes_[root.id].value;
  if (is_input) nodes_[target.id].value[index] = original;
  consistent_ = false;  // interior values reflect the perturbation
  return out;
}

void Graph::backward(Var root) {
  const Node& r = node(root);
  if (!consistent_) {
    throw Error(ErrorKind::state, "backward() before a clean forward pass");
  }
  if (!r.value.is_scalar()) {
    throw Error(ErrorKind::shape_mismatch,
                "backward root must be scalar, got " + shape_string(r.value.shape()));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      if (n.grad.shape() == n.value.shape()) {
        n.grad.fill(0.0);
      } else {
        n.grad = Tensor::zeros(n.value.shape());
      }
    } else {
      n.grad = Tensor();
    }
  }
  if (r.requires_grad) {
    nodes_[root.id].grad[0] = 1.0;
    std::vector<char> reached(root.id + 1, 0);
    reached[root.id] = 1;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      if (!reached[id] || !nodes_[id].requires_grad) continue;
      propagate(id);
      for (std::size_t in : nodes_[id].inputs) reached[in] = 1;
    }
  }
  grads_ready_ = true;
}

Tensor finite_difference_gradient(Graph& graph, Var node, double step, Var root) {
  if (!(step > 0.0)) throw Error(ErrorKind::invalid_argument, "finite-difference step must be > 0");
  const std::size_t count = graph.value(node).size();
  Tensor out = Tensor::zeros(graph.value(node).shape());
  for (std::size_t i = 0; i < count; ++i) {
    const double plus = graph.forward_perturbed(node, i, step, root).item();
    const double minus = graph.forward_perturbed(node, i, -step, root).item();
    out[i] = (plus - minus) / (2.0 * step);
  }
  graph.forward({}, root);
  return out;
}

double finite_difference_check_node(Graph& graph, Var node, double step, Var root) {
  if (!graph.has_gradients()) graph.backward(root);
  const Tensor analytic = graph.grad(node);
  const Tensor numeric = finite_difference_gradient(graph, node, step, root);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double c = numeric[i];
    worst = std::max(worst, std::abs(a - c) / (std::abs(a) + std::abs(c) + 1e-12));
  }
  graph.backward(root);
  return worst;
}

double finite_difference_check(Graph& graph, std::string_view leaf_name, double step, Var root) {
  return finite_difference_check_node(graph, graph.find_leaf(leaf_name), step, root);
}

}  // namespace sisda
