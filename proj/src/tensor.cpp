#include "mimd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mimd/error.hpp"

namespace mimd {

Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, Array values)
    : shape_(std::move(shape)), values_(std::make_shared<Array>(std::move(values))) {
  for (Index d : shape_) {
    if (d <= 0) throw ShapeError("tensor axes must be positive, got " + shape_string(shape_));
  }
  if (values_->size() != shape_size(shape_)) {
    throw ShapeError("value count " + std::to_string(values_->size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  Index n = shape_size(shape);
  return Tensor(std::move(shape), Array::Constant(n, value));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  Array a(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  return Tensor(std::move(shape), std::move(a));
}

Index Tensor::dim(Index axis) const {
  Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar shape " + shape_string(shape_));
  return (*values_)(0);
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  if (rank() != 2 && rank() != 3) {
    throw ShapeError("matrix view needs rank 2 or 3, got " + shape_string(shape_));
  }
  Index cols = shape_.back();
  return {values_->data(), size() / cols, cols};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::clone() const { return Tensor(shape_, *values_); }

// ---- Gradients / Tape ------------------------------------------------------

bool Gradients::contains(const Tensor& t) const {
  return t.requires_grad() && grads_.count(t.node()) > 0;
}

const Array& Gradients::of(const Tensor& t) const {
  auto it = grads_.find(t.node());
  if (!t.requires_grad() || it == grads_.end()) {
    throw std::out_of_range("no gradient recorded for this tensor");
  }
  return it->second;
}

Tensor Tape::track(const Tensor& leaf) {
  Tensor t = leaf;
  t.tape_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back({OpKind::Leaf, {}, leaf.size(), nullptr});
  return t;
}

Tensor Tape::record(OpKind kind, Shape shape, Array values, std::vector<NodeId> parents,
                    BackwardFn backward) {
  Tensor t(std::move(shape), std::move(values));
  t.tape_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back({kind, std::move(parents), t.size(), std::move(backward)});
  return t;
}

Gradients Tape::backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ShapeError("backward needs a scalar root, got shape " + shape_string(root.shape()));
  }
  Gradients out;
  if (root.tape() != this) return out;

  std::vector<Array> grads(nodes_.size());
  auto acc = [&grads, this](NodeId id, const Array& g) {
    if (id < 0) return;
    Array& slot = grads[static_cast<std::size_t>(id)];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  };
  grads[static_cast<std::size_t>(root.node())] = Array::Ones(1);

  for (NodeId id = root.node(); id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    Array& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0) continue;
    if (node.kind == OpKind::Leaf) {
      out.grads_.emplace(id, std::move(g));
      continue;
    }
    node.backward(g, acc);
    g.resize(0);
  }
  return out;
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tape()) continue;
    if (tape && tape != t->tape()) throw std::logic_error("tensors belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return axis;
}

// Sizes of the (outer, axis, inner) decomposition around `axis`.
struct AxisSplit {
  Index outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) {
    s.inner *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

// Flat index map from `a`'s layout into broadcast operand `b`. Empty when the
// shapes are equal (identity map).
std::vector<Index> broadcast_map(const Shape& a, const Shape& b) {
  auto mismatch = [&] {
    return ShapeError("cannot broadcast " + shape_string(b) + " to " + shape_string(a));
  };
  if (b.size() > a.size()) throw mismatch();
  std::size_t offset = a.size() - b.size();
  bool same = b.size() == a.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[offset + i]) {
      same = false;
      if (b[i] != 1) throw mismatch();
    }
  }
  if (same) return {};

  // Strides of b expressed on a's trailing axes (0 where b stretches).
  std::vector<Index> stride(a.size(), 0);
  Index s = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    stride[offset + i] = b[i] == 1 ? 0 : s;
    s *= b[i];
  }
  Index n = shape_size(a);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> idx(a.size(), 0);
  for (Index flat = 0; flat < n; ++flat) {
    Index bi = 0;
    for (std::size_t ax = 0; ax < a.size(); ++ax) bi += idx[ax] * stride[ax];
    map[static_cast<std::size_t>(flat)] = bi;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      if (++idx[ax] < a[ax]) break;
      idx[ax] = 0;
    }
  }
  return map;
}

Array expand(const Array& b, const std::vector<Index>& map) {
  if (map.empty()) return b;
  Array out(static_cast<Index>(map.size()));
  for (std::size_t i = 0; i < map.size(); ++i) out(static_cast<Index>(i)) = b(map[i]);
  return out;
}

Array reduce(const Array& g, const std::vector<Index>& map, Index b_size) {
  if (map.empty()) return g;
  Array out = Array::Zero(b_size);
  for (std::size_t i = 0; i < map.size(); ++i) out(map[i]) += g(static_cast<Index>(i));
  return out;
}

enum class Elementwise { Add, Sub, Mul };

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  auto map = std::make_shared<const std::vector<Index>>(broadcast_map(a.shape(), b.shape()));
  Array bb = expand(b.values(), *map);
  Array out;
  switch (kind) {
    case Elementwise::Add: out = a.values() + bb; break;
    case Elementwise::Sub: out = a.values() - bb; break;
    case Elementwise::Mul: out = a.values() * bb; break;
  }
  Tape* tape = tape_of({&a, &b});
  if (!tape) return Tensor(a.shape(), std::move(out));

  NodeId pa = a.node(), pb = b.node();
  Index b_size = b.size();
  OpKind op = kind == Elementwise::Add ? OpKind::Add
              : kind == Elementwise::Sub ? OpKind::Sub : OpKind::Mul;
  if (kind == Elementwise::Mul) {
    auto av = std::make_shared<Array>(a.values());
    auto bv = std::make_shared<Array>(std::move(bb));
    return tape->record(op, a.shape(), std::move(out), {pa, pb},
                        [=](const Array& g, const Tape::Accumulate& acc) {
                          if (pa >= 0) acc(pa, g * *bv);
                          if (pb >= 0) acc(pb, reduce(g * *av, *map, b_size));
                        });
  }
  double sign = kind == Elementwise::Sub ? -1.0 : 1.0;
  return tape->record(op, a.shape(), std::move(out), {pa, pb},
                      [=](const Array& g, const Tape::Accumulate& acc) {
                        if (pa >= 0) acc(pa, g);
                        if (pb >= 0) acc(pb, sign * reduce(g, *map, b_size));
                      });
}

}  // namespace

// ---- ops -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
  Array out = x.values() * factor;
  if (!x.tape()) return Tensor(x.shape(), std::move(out));
  NodeId px = x.node();
  return x.tape()->record(OpKind::Scale, x.shape(), std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) { acc(px, g * factor); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if ((a.rank() != 2 && a.rank() != 3) || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2/3 by rank-2, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  if (a.shape().back() != b.shape()[0]) {
    throw ShapeError("matmul inner dimensions differ: " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  auto am = a.matrix();
  auto bm = b.matrix();
  Index rows = am.rows(), inner = am.cols(), cols = bm.cols();
  Shape out_shape = a.shape();
  out_shape.back() = cols;
  Array out(rows * cols);
  Eigen::Map<RowMatrix>(out.data(), rows, cols).noalias() = am * bm;

  Tape* tape = tape_of({&a, &b});
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  NodeId pa = a.node(), pb = b.node();
  Tensor as = a, bs = b;  // keep storage alive for the backward pass
  return tape->record(
      OpKind::MatMul, std::move(out_shape), std::move(out), {pa, pb},
      [=](const Array& g, const Tape::Accumulate& acc) {
        Eigen::Map<const RowMatrix> gm(g.data(), rows, cols);
        if (pa >= 0) {
          Array da(rows * inner);
          Eigen::Map<RowMatrix>(da.data(), rows, inner).noalias() = gm * bs.matrix().transpose();
          acc(pa, da);
        }
        if (pb >= 0) {
          Array db(inner * cols);
          Eigen::Map<RowMatrix>(db.data(), inner, cols).noalias() = as.matrix().transpose() * gm;
          acc(pb, db);
        }
      });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_string(x.shape()));
  Index r = x.shape()[0], c = x.shape()[1];
  Array out(r * c);
  Eigen::Map<RowMatrix>(out.data(), c, r) = x.matrix().transpose();
  if (!x.tape()) return Tensor({c, r}, std::move(out));
  NodeId px = x.node();
  return x.tape()->record(OpKind::Transpose, {c, r}, std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            Array dx(r * c);
                            Eigen::Map<RowMatrix>(dx.data(), r, c) =
                                Eigen::Map<const RowMatrix>(g.data(), c, r).transpose();
                            acc(px, dx);
                          });
}

Tensor softmax(const Tensor& x, Index axis) {
  axis = normalize_axis(axis, x.rank());
  AxisSplit s = split_at(x.shape(), axis);
  const Array& v = x.values();
  auto y = std::make_shared<Array>(v.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index in = 0; in < s.inner; ++in) {
      Index base = o * s.extent * s.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.extent; ++k) m = std::max(m, v(base + k * s.inner));
      double z = 0.0;
      for (Index k = 0; k < s.extent; ++k) {
        double e = std::exp(v(base + k * s.inner) - m);
        (*y)(base + k * s.inner) = e;
        z += e;
      }
      for (Index k = 0; k < s.extent; ++k) (*y)(base + k * s.inner) /= z;
    }
  }
  if (!x.tape()) return Tensor(x.shape(), *y);
  NodeId px = x.node();
  return x.tape()->record(OpKind::Softmax, x.shape(), *y, {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            Array dx(g.size());
                            for (Index o = 0; o < s.outer; ++o) {
                              for (Index in = 0; in < s.inner; ++in) {
                                Index base = o * s.extent * s.inner + in;
                                double dot = 0.0;
                                for (Index k = 0; k < s.extent; ++k) {
                                  Index i = base + k * s.inner;
                                  dot += g(i) * (*y)(i);
                                }
                                for (Index k = 0; k < s.extent; ++k) {
                                  Index i = base + k * s.inner;
                                  dx(i) = (*y)(i) * (g(i) - dot);
                                }
                              }
                            }
                            acc(px, dx);
                          });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  Index width = x.shape().back();
  if (gamma.size() != width || beta.size() != width) {
    throw ShapeError("layer_norm scale/offset " + shape_string(gamma.shape()) + "/" +
                     shape_string(beta.shape()) + " do not match last axis of " +
                     shape_string(x.shape()));
  }
  Index rows = x.size() / width;
  Eigen::Map<const RowMatrix> xm(x.values().data(), rows, width);
  auto xhat = std::make_shared<RowMatrix>(rows, width);
  auto inv_std = std::make_shared<Eigen::VectorXd>(rows);
  for (Index r = 0; r < rows; ++r) {
    double mu = xm.row(r).mean();
    auto centered = (xm.row(r).array() - mu).eval();
    double var = centered.square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = centered * (*inv_std)(r);
  }
  Array out(x.size());
  Eigen::Map<RowMatrix> om(out.data(), rows, width);
  Eigen::Map<const Eigen::RowVectorXd> gv(gamma.values().data(), width);
  Eigen::Map<const Eigen::RowVectorXd> bv(beta.values().data(), width);
  om = (xhat->array().rowwise() * gv.array()).rowwise() + bv.array();

  Tape* tape = tape_of({&x, &gamma, &beta});
  if (!tape) return Tensor(x.shape(), std::move(out));
  NodeId px = x.node(), pg = gamma.node(), pb = beta.node();
  Tensor gs = gamma;
  return tape->record(
      OpKind::LayerNorm, x.shape(), std::move(out), {px, pg, pb},
      [=](const Array& g, const Tape::Accumulate& acc) {
        Eigen::Map<const RowMatrix> gm(g.data(), rows, width);
        if (pg >= 0) acc(pg, (gm.array() * xhat->array()).colwise().sum().transpose());
        if (pb >= 0) acc(pb, gm.array().colwise().sum().transpose());
        if (px < 0) return;
        Eigen::Map<const Eigen::RowVectorXd> gam(gs.values().data(), width);
        Array dx(rows * width);
        Eigen::Map<RowMatrix> dm(dx.data(), rows, width);
        for (Index r = 0; r < rows; ++r) {
          Eigen::RowVectorXd dxhat = gm.row(r).cwiseProduct(gam);
          double mean_d = dxhat.mean();
          double mean_dx = dxhat.cwiseProduct(xhat->row(r)).mean();
          dm.row(r) = (*inv_std)(r) *
                      (dxhat.array() - mean_d - xhat->row(r).array() * mean_dx).matrix();
        }
        acc(px, dx);
      });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Tensor gelu(const Tensor& x) {
  Array cdf = x.values().unaryExpr([](double v) { return normal_cdf(v); });
  Array out = x.values() * cdf;
  if (!x.tape()) return Tensor(x.shape(), std::move(out));
  NodeId px = x.node();
  auto xv = std::make_shared<Array>(x.values());
  auto cv = std::make_shared<Array>(std::move(cdf));
  return x.tape()->record(OpKind::Gelu, x.shape(), std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            constexpr double inv_sqrt_2pi = 0.39894228040143267794;
                            Array pdf = (-0.5 * xv->square()).exp() * inv_sqrt_2pi;
                            acc(px, g * (*cv + *xv * pdf));
                          });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto mask = std::make_shared<Array>(x.size());
  double keep_scale = 1.0 / (1.0 - rate);
  for (Index i = 0; i < x.size(); ++i) (*mask)(i) = uniform(rng) < rate ? 0.0 : keep_scale;
  Array out = x.values() * *mask;
  if (!x.tape()) return Tensor(x.shape(), std::move(out));
  NodeId px = x.node();
  return x.tape()->record(OpKind::Dropout, x.shape(), std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) { acc(px, g * *mask); });
}

Tensor concat(std::span<const Tensor> parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat of an empty list");
  const Shape& first = parts[0].shape();
  axis = normalize_axis(axis, static_cast<Index>(first.size()));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const Tensor& p : parts) {
    bool ok = p.shape().size() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) {
      if (static_cast<Index>(i) != axis && p.shape()[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat shape " + shape_string(p.shape()) + " incompatible with " +
                       shape_string(first) + " on axis " + std::to_string(axis));
    }
    out_shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  AxisSplit s = split_at(out_shape, axis);
  std::vector<Index> widths;  // contiguous chunk width of each part per outer index
  for (const Tensor& p : parts) widths.push_back(p.shape()[static_cast<std::size_t>(axis)] * s.inner);
  Index row = s.extent * s.inner;
  Array out(shape_size(out_shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (Index o = 0; o < s.outer; ++o) {
      out.segment(o * row + offset, widths[k]) = parts[k].values().segment(o * widths[k], widths[k]);
    }
    offset += widths[k];
  }

  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (!p.tape()) continue;
    if (tape && tape != p.tape()) throw std::logic_error("tensors belong to different tapes");
    tape = p.tape();
  }
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  std::vector<NodeId> ids;
  for (const Tensor& p : parts) ids.push_back(p.node());
  return tape->record(OpKind::Concat, std::move(out_shape), std::move(out), ids,
                      [=](const Array& g, const Tape::Accumulate& acc) {
                        Index off = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          if (ids[k] >= 0) {
                            Array d(s.outer * widths[k]);
                            for (Index o = 0; o < s.outer; ++o) {
                              d.segment(o * widths[k], widths[k]) = g.segment(o * row + off, widths[k]);
                            }
                            acc(ids[k], d);
                          }
                          off += widths[k];
                        }
                      });
}

Tensor narrow(const Tensor& x, Index axis, Index start, Index length) {
  axis = normalize_axis(axis, x.rank());
  Index extent = x.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || length <= 0 || start + length > extent) {
    throw ShapeError("narrow [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") outside axis of extent " + std::to_string(extent));
  }
  AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Index in_row = extent * s.inner, out_row = length * s.inner, off = start * s.inner;
  Array out(s.outer * out_row);
  for (Index o = 0; o < s.outer; ++o) out.segment(o * out_row, out_row) = x.values().segment(o * in_row + off, out_row);
  if (!x.tape()) return Tensor(std::move(out_shape), std::move(out));
  NodeId px = x.node();
  Index in_size = x.size();
  return x.tape()->record(OpKind::Narrow, std::move(out_shape), std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            Array dx = Array::Zero(in_size);
                            for (Index o = 0; o < s.outer; ++o) {
                              dx.segment(o * in_row + off, out_row) = g.segment(o * out_row, out_row);
                            }
                            acc(px, dx);
                          });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  if (!x.tape()) return x.reshaped(std::move(shape));
  NodeId px = x.node();
  return x.tape()->record(OpKind::Reshape, std::move(shape), x.values(), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) { acc(px, g); });
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<Index>> index, Shape shape) {
  if (static_cast<Index>(index->size()) != shape_size(shape)) {
    throw ShapeError("gather index count does not match " + shape_string(shape));
  }
  Array out(static_cast<Index>(index->size()));
  for (std::size_t i = 0; i < index->size(); ++i) {
    Index src = (*index)[i];
    if (src < 0 || src >= x.size()) throw ShapeError("gather index out of range");
    out(static_cast<Index>(i)) = x.values()(src);
  }
  if (!x.tape()) return Tensor(std::move(shape), std::move(out));
  NodeId px = x.node();
  Index in_size = x.size();
  return x.tape()->record(OpKind::Gather, std::move(shape), std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            Array dx = Array::Zero(in_size);
                            for (std::size_t i = 0; i < index->size(); ++i) dx((*index)[i]) += g(static_cast<Index>(i));
                            acc(px, dx);
                          });
}

Tensor sum(const Tensor& x) {
  Array out = Array::Constant(1, x.values().sum());
  if (!x.tape()) return Tensor({1}, std::move(out));
  NodeId px = x.node();
  Index n = x.size();
  return x.tape()->record(OpKind::Sum, {1}, std::move(out), {px},
                          [=](const Array& g, const Tape::Accumulate& acc) {
                            acc(px, Array::Constant(n, g(0)));
                          });
}

Tensor cross_entropy(const Tensor& probs, Index label) {
  if (label < 0 || label >= probs.size()) {
    throw std::invalid_argument("label " + std::to_string(label) + " outside class range");
  }
  constexpr double floor = 1e-12;
  double p = probs.values()(label);
  double clamped = std::max(p, floor);
  Array out = Array::Constant(1, -std::log(clamped));
  if (!probs.tape()) return Tensor({1}, std::move(out));
  NodeId pp = probs.node();
  Index n = probs.size();
  return probs.tape()->record(OpKind::CrossEntropy, {1}, std::move(out), {pp},
                              [=](const Array& g, const Tape::Accumulate& acc) {
                                Array d = Array::Zero(n);
                                if (p > floor) d(label) = -g(0) / p;
                                acc(pp, d);
                              });
}

}  // namespace mimd
