#include "nextlocmoe/autodiff.hpp"

#include "nextlocmoe/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nextlocmoe::ad {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(std::string("autodiff: ") + what);
}

void same_graph(Var a, Var b) {
  require(a.valid() && b.valid() && a.graph() == b.graph(), "operands belong to different graphs");
}

}  // namespace

const Matrix& Var::value() const { return graph_->value(id_); }

bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, {}, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(const Parameter& p) {
  if (auto it = param_leaves_.find(&p); it != param_leaves_.end()) {
    return {this, it->second};
  }
  nodes_.push_back(Node{{}, &p.value, {}, track_ && p.trainable, {}, &p});
  const int id = static_cast<int>(nodes_.size() - 1);
  param_leaves_.emplace(&p, id);
  return {this, id};
}

const Matrix& Graph::value(int id) const {
  const auto& node = nodes_[static_cast<std::size_t>(id)];
  return node.external != nullptr ? *node.external : node.value;
}

Var Graph::make(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return make(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::make(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (track_) {
    for (const Var& v : inputs) {
      if (v.valid() && requires_grad(v.id())) {
        needs = true;
        break;
      }
    }
  }
  nodes_.push_back(Node{std::move(value), nullptr, {}, needs, needs ? std::move(fn) : BackwardFn{}, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::backward(Var root, double seed) {
  require(root.graph() == this, "root from another graph");
  require(root.rows() == 1 && root.cols() == 1, "backward root must be 1x1");
  auto& r = nodes_[static_cast<std::size_t>(root.id())];
  if (!r.requires_grad) return;
  r.grad = Matrix::Constant(1, 1, seed);
  for (int id = root.id(); id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || !node.backward || node.grad.size() == 0) continue;
    node.backward(*this, node.grad);
  }
}

const Matrix& Graph::grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }

void Graph::accumulate_into(GradientBuffer& buffer) const {
  for (const auto& [param, id] : param_leaves_) {
    const auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.size() == 0) continue;
    Matrix& dst = buffer[param->index];
    if (dst.size() == 0) continue;
    dst += node.grad;
  }
}

Var matmul(Var a, Var b) {
  same_graph(a, b);
  require(a.cols() == b.rows(), "matmul shape mismatch");
  Graph& g = *a.graph();
  const int ia = a.id();
  const int ib = b.id();
  return g.make(a.value() * b.value(), {a, b}, [ia, ib](Graph& gr, const Matrix& dy) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, dy * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * dy);
  });
}

Var matmul_nt(Var a, Var b) {
  same_graph(a, b);
  require(a.cols() == b.cols(), "matmul_nt shape mismatch");
  Graph& g = *a.graph();
  const int ia = a.id();
  const int ib = b.id();
  return g.make(a.value() * b.value().transpose(), {a, b}, [ia, ib](Graph& gr, const Matrix& dy) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, dy * gr.value(ib));
    if (gr.requires_grad(ib)) gr.accumulate(ib, dy.transpose() * gr.value(ia));
  });
}

Var linear(Var x, Var w, Var bias) {
  same_graph(x, w);
  require(x.cols() == w.cols(), "linear input width mismatch");
  Graph& g = *x.graph();
  Matrix out = x.value() * w.value().transpose();
  const bool has_bias = bias.valid();
  if (has_bias) {
    same_graph(x, bias);
    require(bias.rows() == 1 && bias.cols() == w.rows(), "linear bias shape mismatch");
    out.rowwise() += bias.value().row(0);
  }
  const int ix = x.id();
  const int iw = w.id();
  const int ib = has_bias ? bias.id() : -1;
  return g.make(std::move(out), {x, w, bias}, [ix, iw, ib](Graph& gr, const Matrix& dy) {
    if (gr.requires_grad(ix)) gr.accumulate(ix, dy * gr.value(iw));
    if (gr.requires_grad(iw)) gr.accumulate(iw, dy.transpose() * gr.value(ix));
    if (ib >= 0 && gr.requires_grad(ib)) gr.accumulate(ib, dy.colwise().sum());
  });
}

Var transpose(Var a) {
  Graph& g = *a.graph();
  const int ia = a.id();
  return g.make(a.value().transpose(), {a}, [ia](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy.transpose());
  });
}

Var add(Var a, Var b) {
  same_graph(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return a.graph()->make(a.value() + b.value(), {a, b}, [ia, ib](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy);
    gr.accumulate(ib, dy);
  });
}

Var sub(Var a, Var b) {
  same_graph(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return a.graph()->make(a.value() - b.value(), {a, b}, [ia, ib](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy);
    gr.accumulate(ib, -dy);
  });
}

Var add_row(Var a, Var row) {
  same_graph(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id();
  const int ir = row.id();
  return a.graph()->make(std::move(out), {a, row}, [ia, ir](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy);
    if (gr.requires_grad(ir)) gr.accumulate(ir, dy.colwise().sum());
  });
}

Var scale(Var a, double c) {
  const int ia = a.id();
  return a.graph()->make(a.value() * c, {a}, [ia, c](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy * c);
  });
}

Var scale_by(Var a, Var s) {
  same_graph(a, s);
  require(s.rows() == 1 && s.cols() == 1, "scale_by expects a 1x1 factor");
  const int ia = a.id();
  const int is = s.id();
  return a.graph()->make(a.value() * s.scalar(), {a, s}, [ia, is](Graph& gr, const Matrix& dy) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, dy * gr.value(is)(0, 0));
    if (gr.requires_grad(is)) {
      gr.accumulate(is, Matrix::Constant(1, 1, dy.cwiseProduct(gr.value(ia)).sum()));
    }
  });
}

Var scale_rows(Var a, Var w) {
  same_graph(a, w);
  require(w.rows() == a.rows() && w.cols() == 1, "scale_rows weight shape mismatch");
  Matrix out = a.value().array().colwise() * w.value().col(0).array();
  const int ia = a.id();
  const int iw = w.id();
  return a.graph()->make(std::move(out), {a, w}, [ia, iw](Graph& gr, const Matrix& dy) {
    if (gr.requires_grad(ia)) {
      Matrix da = dy.array().colwise() * gr.value(iw).col(0).array();
      gr.accumulate(ia, da);
    }
    if (gr.requires_grad(iw)) {
      Matrix dw = dy.cwiseProduct(gr.value(ia)).rowwise().sum();
      gr.accumulate(iw, dw);
    }
  });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  const double inner = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

}  // namespace

Var gelu(Var a) {
  const int ia = a.id();
  Matrix out = a.value().unaryExpr(&gelu_value);
  return a.graph()->make(std::move(out), {a}, [ia](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy.cwiseProduct(gr.value(ia).unaryExpr(&gelu_derivative)));
  });
}

Var relu(Var a) {
  const int ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return a.graph()->make(std::move(out), {a}, [ia](Graph& gr, const Matrix& dy) {
    Matrix mask = (gr.value(ia).array() > 0.0).cast<double>().matrix();
    gr.accumulate(ia, dy.cwiseProduct(mask));
  });
}

Var tanh(Var a) {
  Matrix y = a.value().array().tanh().matrix();
  const int ia = a.id();
  auto holder = std::make_shared<Matrix>(y);
  return a.graph()->make(std::move(y), {a}, [ia, holder](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy.cwiseProduct((1.0 - holder->array().square()).matrix()));
  });
}

Var dropout(Var a, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 - rate;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  }
  Matrix out = a.value().cwiseProduct(mask);
  const int ia = a.id();
  return a.graph()->make(std::move(out), {a}, [ia, mask = std::move(mask)](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy.cwiseProduct(mask));
  });
}

namespace {

Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix softmax_backward(const Matrix& y, const Matrix& dy) {
  Eigen::VectorXd dots = dy.cwiseProduct(y).rowwise().sum();
  Matrix dx = dy;
  dx.colwise() -= dots;
  return y.cwiseProduct(dx);
}

}  // namespace

Var softmax_rows(Var a) {
  Graph& g = *a.graph();
  Matrix y = softmax_rows_value(a.value());
  const int ia = a.id();
  auto holder = std::make_shared<Matrix>(y);
  return g.make(std::move(y), {a}, [ia, holder](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, softmax_backward(*holder, dy));
  });
}

Var causal_softmax_rows(Var a) {
  require(a.rows() == a.cols(), "causal softmax expects a square matrix");
  const Matrix& x = a.value();
  const Eigen::Index n = x.rows();
  Matrix y = Matrix::Zero(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = x.row(r).head(r + 1);
    const double m = row.maxCoeff();
    y.row(r).head(r + 1) = (row.array() - m).exp().matrix();
    y.row(r).head(r + 1) /= y.row(r).head(r + 1).sum();
  }
  const int ia = a.id();
  auto holder = std::make_shared<Matrix>(y);
  return a.graph()->make(std::move(y), {a}, [ia, holder](Graph& gr, const Matrix& dy) {
    // Masked entries have y = 0, so the plain softmax backward zeroes them.
    gr.accumulate(ia, softmax_backward(*holder, dy));
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  same_graph(x, gamma);
  same_graph(x, beta);
  const Eigen::Index n = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          "layer norm parameter shape mismatch");
  const Matrix& xv = x.value();
  auto xhat = std::make_shared<Matrix>(xv.rows(), n);
  auto inv_std = std::make_shared<Eigen::VectorXd>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (xv.row(r).array() - mu) * is;
  }
  Matrix out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int ix = x.id();
  const int ig = gamma.id();
  const int ib = beta.id();
  return x.graph()->make(std::move(out), {x, gamma, beta},
                         [ix, ig, ib, xhat, inv_std, n](Graph& gr, const Matrix& dy) {
                           if (gr.requires_grad(ig)) {
                             gr.accumulate(ig, dy.cwiseProduct(*xhat).colwise().sum());
                           }
                           if (gr.requires_grad(ib)) gr.accumulate(ib, dy.colwise().sum());
                           if (gr.requires_grad(ix)) {
                             Matrix gxhat = dy.array().rowwise() * gr.value(ig).row(0).array();
                             Matrix dx(gxhat.rows(), n);
                             for (Eigen::Index r = 0; r < gxhat.rows(); ++r) {
                               const double mean_g = gxhat.row(r).mean();
                               const double mean_gx = gxhat.row(r).cwiseProduct(xhat->row(r)).mean();
                               dx.row(r) = (*inv_std)(r) *
                                           (gxhat.row(r).array() - mean_g - xhat->row(r).array() * mean_gx).matrix();
                             }
                             gr.accumulate(ix, dx);
                           }
                         });
}

Var entropy_rows(Var p) {
  const Matrix& pv = p.value();
  Matrix out(pv.rows(), 1);
  for (Eigen::Index r = 0; r < pv.rows(); ++r) {
    double h = 0.0;
    for (Eigen::Index c = 0; c < pv.cols(); ++c) {
      const double v = pv(r, c);
      if (v > 0.0) h -= v * std::log(v);
    }
    out(r, 0) = h;
  }
  const int ip = p.id();
  return p.graph()->make(std::move(out), {p}, [ip](Graph& gr, const Matrix& dy) {
    const Matrix& pv2 = gr.value(ip);
    Matrix dp(pv2.rows(), pv2.cols());
    for (Eigen::Index r = 0; r < pv2.rows(); ++r) {
      for (Eigen::Index c = 0; c < pv2.cols(); ++c) {
        const double v = pv2(r, c);
        dp(r, c) = v > 0.0 ? -dy(r, 0) * (std::log(v) + 1.0) : 0.0;
      }
    }
    gr.accumulate(ip, dp);
  });
}

Var row_norms(Var a) {
  Matrix out = a.value().rowwise().norm();
  const int ia = a.id();
  auto norms = std::make_shared<Matrix>(out);
  return a.graph()->make(std::move(out), {a}, [ia, norms](Graph& gr, const Matrix& dy) {
    const Matrix& av = gr.value(ia);
    Matrix da = Matrix::Zero(av.rows(), av.cols());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
      const double nrm = (*norms)(r, 0);
      if (nrm > 0.0) da.row(r) = av.row(r) * (dy(r, 0) / nrm);
    }
    gr.accumulate(ia, da);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Graph& g = *parts.front().graph();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& v : parts) {
    require(v.graph() == &g && v.rows() == rows, "concat_cols row mismatch");
    cols += v.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& v : parts) {
    out.middleCols(offset, v.cols()) = v.value();
    layout.emplace_back(v.id(), offset);
    offset += v.cols();
  }
  return g.make(std::move(out), parts, [layout = std::move(layout)](Graph& gr, const Matrix& dy) {
    for (const auto& [id, off] : layout) {
      if (gr.requires_grad(id)) gr.accumulate(id, dy.middleCols(off, gr.value(id).cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Graph& g = *parts.front().graph();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& v : parts) {
    require(v.graph() == &g && v.cols() == cols, "concat_rows column mismatch");
    rows += v.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& v : parts) {
    out.middleRows(offset, v.rows()) = v.value();
    layout.emplace_back(v.id(), offset);
    offset += v.rows();
  }
  return g.make(std::move(out), parts, [layout = std::move(layout)](Graph& gr, const Matrix& dy) {
    for (const auto& [id, off] : layout) {
      if (gr.requires_grad(id)) gr.accumulate(id, dy.middleRows(off, gr.value(id).rows()));
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  return a.graph()->make(a.value().middleRows(start, count), {a},
                         [ia, start, count, rows, cols](Graph& gr, const Matrix& dy) {
                           Matrix full = Matrix::Zero(rows, cols);
                           full.middleRows(start, count) = dy;
                           gr.accumulate(ia, full);
                         });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  return a.graph()->make(a.value().middleCols(start, count), {a},
                         [ia, start, count, rows, cols](Graph& gr, const Matrix& dy) {
                           Matrix full = Matrix::Zero(rows, cols);
                           full.middleCols(start, count) = dy;
                           gr.accumulate(ia, full);
                         });
}

Var shift_down(Var a, Eigen::Index shift) {
  require(shift >= 0, "shift_down expects a nonnegative shift");
  if (shift == 0) return a;
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  Matrix out = Matrix::Zero(rows, cols);
  const Eigen::Index keep = std::max<Eigen::Index>(0, rows - shift);
  if (keep > 0) out.bottomRows(keep) = a.value().topRows(keep);
  const int ia = a.id();
  return a.graph()->make(std::move(out), {a}, [ia, keep, rows, cols](Graph& gr, const Matrix& dy) {
    Matrix da = Matrix::Zero(rows, cols);
    if (keep > 0) da.topRows(keep) = dy.bottomRows(keep);
    gr.accumulate(ia, da);
  });
}

Var repeat_rows(Var row, Eigen::Index count) {
  require(row.rows() == 1 && count >= 1, "repeat_rows expects a single row");
  Matrix out = row.value().replicate(count, 1);
  const int ir = row.id();
  return row.graph()->make(std::move(out), {row}, [ir](Graph& gr, const Matrix& dy) {
    gr.accumulate(ir, dy.colwise().sum());
  });
}

Var element(Var a, Eigen::Index r, Eigen::Index c) {
  require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "element index out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  return a.graph()->make(Matrix::Constant(1, 1, a.value()(r, c)), {a},
                         [ia, r, c, rows, cols](Graph& gr, const Matrix& dy) {
                           Matrix da = Matrix::Zero(rows, cols);
                           da(r, c) = dy(0, 0);
                           gr.accumulate(ia, da);
                         });
}

Var sum(Var a) {
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  const Eigen::Index cols = a.cols();
  return a.graph()->make(Matrix::Constant(1, 1, a.value().sum()), {a},
                         [ia, rows, cols](Graph& gr, const Matrix& dy) {
                           gr.accumulate(ia, Matrix::Constant(rows, cols, dy(0, 0)));
                         });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(Var a) {
  const int ia = a.id();
  const Eigen::Index rows = a.rows();
  Matrix out = a.value().colwise().mean();
  return a.graph()->make(std::move(out), {a}, [ia, rows](Graph& gr, const Matrix& dy) {
    gr.accumulate(ia, dy.replicate(rows, 1) / static_cast<double>(rows));
  });
}

}  // namespace nextlocmoe::ad
