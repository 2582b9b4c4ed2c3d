#include "vton/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "vton/errors.hpp"

namespace vton {

// ---------------------------------------------------------------------------
// ParamStore

Mat& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (entries_.count(name) != 0) {
    throw ConfigError("duplicate parameter '" + name + "'");
  }
  Entry& e = entries_[name];
  e.value = Mat::Zero(rows, cols);
  e.grad = Mat::Zero(rows, cols);
  return e.value;
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) != 0; }

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Mat& ParamStore::value(const std::string& name) { return entry(name).value; }
const Mat& ParamStore::value(const std::string& name) const { return entry(name).value; }
Mat& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Mat& ParamStore::grad(const std::string& name) const { return entry(name).grad; }

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.setZero();
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& [_, e] : entries_) {
    if (!e.value.allFinite()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

const Mat& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(ParamStore& store, const std::string& name) {
  ParamStore::Entry& e = store.entry(name);
  Node n;
  n.value = e.value;
  n.requires_grad = true;
  n.param = &e;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Mat value, const std::vector<Var>& parents, Backward fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error("operands recorded on different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.tape() != this || root.value().size() != 1) {
    throw std::logic_error("backward() needs a scalar root on this tape");
  }
  accumulate(root.id(), Mat::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      Mat g = std::move(n.grad);
      n.backward(g, *this);
    }
  }
}

// ---------------------------------------------------------------------------
// Helpers

Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

namespace {

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

namespace ag {

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {a, b}, [ia, ib](const Mat& g, Tape& tp) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value().transpose(), {a, b}, [ia, ib](const Mat& g, Tape& tp) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](const Mat& g, Tape& tp) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](const Mat& g, Tape& tp) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias width mismatch");
  const int ia = a.id(), ir = row.id();
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](const Mat& g, Tape& tp) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, {a}, [ia, s](const Mat& g, Tape& tp) { tp.accumulate(ia, g * s); });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  const int ia = a.id(), ib = b.id();
  Mat out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](const Mat& g, Tape& tp) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Mat& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias width mismatch");
  }
  Mat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {x, gain, bias},
                          [ix, ig, ib, xhat, inv_std](const Mat& g, Tape& tp) {
                            const Eigen::Index d = xhat.cols();
                            if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                            if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                            if (!tp.requires_grad(ix)) return;
                            const Mat gh = g.array().rowwise() * tp.value(ig).row(0).array();
                            Mat gx(gh.rows(), d);
                            for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                              const double m1 = gh.row(r).mean();
                              const double m2 = gh.row(r).dot(xhat.row(r)) / static_cast<double>(d);
                              gx.row(r) = inv_std(r) * (gh.row(r).array() - m1 - xhat.row(r).array() * m2);
                            }
                            tp.accumulate(ix, gx);
                          });
}

Var softmax_rows(Var x) {
  Mat y = vton::softmax_rows(x.value());
  const int ix = x.id();
  Mat yc = y;
  return x.tape()->record(std::move(y), {x}, [ix, yc](const Mat& g, Tape& tp) {
    const Vec dots = g.cwiseProduct(yc).rowwise().sum();
    Mat gx = yc.array() * (g.colwise() - dots).array();
    tp.accumulate(ix, gx);
  });
}

Var gelu(Var x) {
  const Mat& xv = x.value();
  Mat y = xv.unaryExpr([](double v) { return vton::gelu(v); });
  const int ix = x.id();
  Mat xc = xv;
  return x.tape()->record(std::move(y), {x}, [ix, xc](const Mat& g, Tape& tp) {
    tp.accumulate(ix, g.cwiseProduct(xc.unaryExpr([](double v) { return gelu_grad(v); })));
  });
}

Var l2_normalize_rows(Var x, double eps) {
  const Mat& xv = x.value();
  const Vec norms = (xv.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Mat y = xv.array().colwise() / norms.array();
  const int ix = x.id();
  Mat yc = y;
  return x.tape()->record(std::move(y), {x}, [ix, yc, norms](const Mat& g, Tape& tp) {
    const Vec along = g.cwiseProduct(yc).rowwise().sum();
    Mat d = g - (yc.array().colwise() * along.array()).matrix();
    tp.accumulate(ix, Mat(d.array().colwise() / norms.array()));
  });
}

Var silu(Var x) {
  const Mat& xv = x.value();
  Mat y = xv.unaryExpr([](double v) { return v * sigmoid(v); });
  const int ix = x.id();
  Mat xc = xv;
  return x.tape()->record(std::move(y), {x}, [ix, xc](const Mat& g, Tape& tp) {
    Mat d = xc.unaryExpr([](double v) {
      const double s = sigmoid(v);
      return s * (1.0 + v * (1.0 - s));
    });
    tp.accumulate(ix, g.cwiseProduct(d));
  });
}

Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw ShapeError("slice_rows: out of range");
  const int ix = x.id();
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return x.tape()->record(x.value().middleRows(begin, count), {x},
                          [ix, begin, count, rows, cols](const Mat& g, Tape& tp) {
                            Mat gx = Mat::Zero(rows, cols);
                            gx.middleRows(begin, count) = g;
                            tp.accumulate(ix, gx);
                          });
}

Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw ShapeError("slice_cols: out of range");
  const int ix = x.id();
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return x.tape()->record(x.value().middleCols(begin, count), {x},
                          [ix, begin, count, rows, cols](const Mat& g, Tape& tp) {
                            Mat gx = Mat::Zero(rows, cols);
                            gx.middleCols(begin, count) = g;
                            tp.accumulate(ix, gx);
                          });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [spans](const Mat& g, Tape& tp) {
    for (const auto& [id, start] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(start, tp.value(id).rows()));
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return parts.front().tape()->record(std::move(out), parts, [spans](const Mat& g, Tape& tp) {
    for (const auto& [id, start] : spans) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(start, tp.value(id).cols()));
    }
  });
}

Var apply_left(const SparseMat& op, Var x) {
  if (op.cols() != x.rows()) throw ShapeError("apply_left: operator width mismatch");
  const int ix = x.id();
  Mat out = op * x.value();
  return x.tape()->record(std::move(out), {x}, [ix, op](const Mat& g, Tape& tp) {
    tp.accumulate(ix, op.transpose() * g);
  });
}

Var im2col3x3(Var x, int height, int width) {
  const Mat& xv = x.value();
  if (xv.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("im2col3x3: grid mismatch");
  const Eigen::Index c = xv.cols();
  Mat out = Mat::Zero(xv.rows(), 9 * c);
  for (int y = 0; y < height; ++y) {
    for (int xx = 0; xx < width; ++xx) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
      for (int q = 0; q < 9; ++q) {
        const int sy = y + q / 3 - 1, sx = xx + q % 3 - 1;
        if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
        out.block(row, q * c, 1, c) = xv.row(static_cast<Eigen::Index>(sy) * width + sx);
      }
    }
  }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, height, width, c](const Mat& g, Tape& tp) {
    Mat gx = Mat::Zero(static_cast<Eigen::Index>(height) * width, c);
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) {
        const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
        for (int q = 0; q < 9; ++q) {
          const int sy = y + q / 3 - 1, sx = xx + q % 3 - 1;
          if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
          gx.row(static_cast<Eigen::Index>(sy) * width + sx) += g.block(row, q * c, 1, c);
        }
      }
    }
    tp.accumulate(ix, gx);
  });
}

Var mse(Var x, const Mat& target) {
  require_same_shape(x.value(), target, "mse");
  const Mat diff = x.value() - target;
  const double n = static_cast<double>(diff.size());
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  const int ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, diff, n](const Mat& g, Tape& tp) {
    tp.accumulate(ix, diff * (2.0 * g(0, 0) / n));
  });
}

Var soft_cross_entropy(Var logits, const Mat& targets, double temperature) {
  if (logits.rows() != 1 || targets.cols() != logits.cols()) {
    throw ShapeError("soft_cross_entropy: expects 1xK logits and RxK targets");
  }
  const Mat scaled = logits.value() / temperature;
  const double mx = scaled.maxCoeff();
  const double lse = mx + std::log((scaled.array() - mx).exp().sum());
  const RowVec log_p = (scaled.array() - lse).matrix().row(0);
  const RowVec target_sum = targets.colwise().sum();
  Mat out(1, 1);
  out(0, 0) = -(target_sum.cwiseProduct(log_p)).sum();
  const RowVec p = log_p.array().exp().matrix();
  const double mass = target_sum.sum();
  const int il = logits.id();
  return logits.tape()->record(std::move(out), {logits},
                               [il, p, target_sum, mass, temperature](const Mat& g, Tape& tp) {
                                 Mat gl = ((p * mass - target_sum) * (g(0, 0) / temperature));
                                 tp.accumulate(il, gl);
                               });
}

Var sum(Var x) {
  Mat out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id();
  const Eigen::Index r = x.rows(), c = x.cols();
  return x.tape()->record(std::move(out), {x}, [ix, r, c](const Mat& g, Tape& tp) {
    tp.accumulate(ix, Mat::Constant(r, c, g(0, 0)));
  });
}

}  // namespace ag
}  // namespace vton
