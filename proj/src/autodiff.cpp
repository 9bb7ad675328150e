#include "qmri/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace qmri::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, Buffer<T> values, bool needs_grad)
    : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (ad::numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " holds " + std::to_string(ad::numel(shape)) +
                     " values but data has " + std::to_string(data.size()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape s, bool needs_grad) {
  Buffer<T> values(ad::numel(s), T(0));
  return Tensor(std::move(s), std::move(values), needs_grad);
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::leaf(TensorPtr<T> t) {
  const bool needs = t->requires_grad;
  nodes_.push_back(Node{std::move(t), {}, nullptr, needs});
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> t) {
  t.requires_grad = false;
  nodes_.push_back(Node{std::make_shared<Tensor<T>>(std::move(t)), {}, nullptr, false});
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::vector<int> inputs, BackwardFn fn) {
  bool needs = false;
  for (int in : inputs) {
    if (in < 0 || static_cast<std::size_t>(in) >= nodes_.size()) {
      throw ShapeError("graph input id " + std::to_string(in) + " does not precede its consumer");
    }
    needs = needs || nodes_[static_cast<std::size_t>(in)].needs_grad;
  }
  value.requires_grad = false;
  nodes_.push_back(Node{std::make_shared<Tensor<T>>(std::move(value)), std::move(inputs),
                        needs ? std::move(fn) : BackwardFn{}, needs});
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw InvalidArgument("backward: loss belongs to another graph");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  for (auto& node : nodes_) {
    if (node.needs_grad) node.value->grad.assign(node.value->numel(), T(0));
  }
  if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
  grad(loss.id)[0] = T(1);
  for (int id = loss.id; id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.needs_grad && node.backward) node.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, const char* op, const char* arg) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got shape " +
                     to_string(v.shape()));
  }
}

template <typename T>
Graph<T>& graph_of(std::initializer_list<Var<T>> vars, const char* op) {
  Graph<T>* g = nullptr;
  for (const auto& v : vars) {
    if (v.graph == nullptr) throw InvalidArgument(std::string(op) + ": unbound variable");
    if (g != nullptr && g != v.graph) throw InvalidArgument(std::string(op) + ": operands from different graphs");
    g = v.graph;
  }
  return *g;
}

struct ConvGeom {
  std::size_t cin, height, width, cout, k, stride, pad, out_h, out_w;
};

// Output columns [lo, hi) whose input column ox*stride + kj - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeom& c, std::size_t kj) {
  std::size_t lo = 0;
  while (lo < c.out_w && lo * c.stride + kj < c.pad) ++lo;
  std::size_t hi = lo;
  while (hi < c.out_w && hi * c.stride + kj - c.pad < c.width) ++hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, const ConvGeom& c, T* col) {
  const std::size_t n = c.out_h * c.out_w;
  for (std::size_t ci = 0; ci < c.cin; ++ci) {
    for (std::size_t ki = 0; ki < c.k; ++ki) {
      for (std::size_t kj = 0; kj < c.k; ++kj) {
        T* row = col + ((ci * c.k + ki) * c.k + kj) * n;
        const auto [lo, hi] = valid_cols(c, kj);
        for (std::size_t oy = 0; oy < c.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + ki) - static_cast<std::ptrdiff_t>(c.pad);
          T* dst = row + oy * c.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.height)) {
            std::fill(dst, dst + c.out_w, T(0));
            continue;
          }
          const T* src = x + (ci * c.height + static_cast<std::size_t>(iy)) * c.width;
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = T(0);
          if (c.stride == 1) {
            std::copy(src + (lo + kj - c.pad), src + (hi + kj - c.pad), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * c.stride + kj - c.pad];
          }
          for (std::size_t ox = hi; ox < c.out_w; ++ox) dst[ox] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& c, T* x) {
  const std::size_t n = c.out_h * c.out_w;
  for (std::size_t ci = 0; ci < c.cin; ++ci) {
    for (std::size_t ki = 0; ki < c.k; ++ki) {
      for (std::size_t kj = 0; kj < c.k; ++kj) {
        const T* row = col + ((ci * c.k + ki) * c.k + kj) * n;
        const auto [lo, hi] = valid_cols(c, kj);
        for (std::size_t oy = 0; oy < c.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + ki) - static_cast<std::ptrdiff_t>(c.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.height)) continue;
          T* dst = x + (ci * c.height + static_cast<std::size_t>(iy)) * c.width;
          const T* src = row + oy * c.out_w;
          if (c.stride == 1) {
            T* d = dst + (lo + kj - c.pad);
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * c.stride + kj - c.pad] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  auto& g = graph_of<T>({x, w, b}, "conv2d");
  require_rank(x, 3, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  require_rank(b, 1, "conv2d", "bias");
  if (stride < 1 || pad < 0) throw InvalidArgument("conv2d: stride must be >= 1 and pad >= 0");
  const auto& X = x.value();
  const auto& W = w.value();
  ConvGeom c{};
  c.cin = X.dim(0);
  c.height = X.dim(1);
  c.width = X.dim(2);
  c.cout = W.dim(0);
  c.k = W.dim(2);
  c.stride = static_cast<std::size_t>(stride);
  c.pad = static_cast<std::size_t>(pad);
  if (W.dim(3) != c.k) throw ShapeError("conv2d: kernel must be square, got " + to_string(W.shape));
  if (c.k != 1 && c.k != 3) throw ShapeError("conv2d: kernel size must be 1 or 3, got " + std::to_string(c.k));
  if (W.dim(1) != c.cin) {
    throw ShapeError("conv2d: input channel dimension " + std::to_string(c.cin) + " does not match weight C_in " +
                     std::to_string(W.dim(1)));
  }
  if (b.value().dim(0) != c.cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(b.value().dim(0)) + " does not match C_out " +
                     std::to_string(c.cout));
  }
  if (c.height + 2 * c.pad < c.k || c.width + 2 * c.pad < c.k) {
    throw ShapeError("conv2d: spatial size " + to_string(X.shape) + " smaller than kernel");
  }
  c.out_h = (c.height + 2 * c.pad - c.k) / c.stride + 1;
  c.out_w = (c.width + 2 * c.pad - c.k) / c.stride + 1;

  const std::size_t kdim = c.cin * c.k * c.k;
  const std::size_t n = c.out_h * c.out_w;
  const bool direct = c.k == 1 && c.stride == 1 && c.pad == 0;
  std::shared_ptr<Buffer<T>> col;
  if (!direct) {
    col = std::make_shared<Buffer<T>>(kdim * n);
    im2col(X.data.data(), c, col->data());
  }
  const T* colp = direct ? X.data.data() : col->data();

  auto out = Tensor<T>::zeros({c.cout, c.out_h, c.out_w});
  MatMap<T> y(out.data.data(), static_cast<Eigen::Index>(c.cout), static_cast<Eigen::Index>(n));
  ConstMatMap<T> wm(W.data.data(), static_cast<Eigen::Index>(c.cout), static_cast<Eigen::Index>(kdim));
  ConstMatMap<T> cm(colp, static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(n));
  y.noalias() = wm * cm;
  const auto& bias = b.value().data;
  for (std::size_t co = 0; co < c.cout; ++co) y.row(static_cast<Eigen::Index>(co)).array() += bias[co];

  const int xi = x.id, wi = w.id, bi = b.id;
  return g.record(std::move(out), {xi, wi, bi}, [c, col, direct, xi, wi, bi, kdim, n](Graph<T>& gr, int self) {
    const auto ei_cout = static_cast<Eigen::Index>(c.cout);
    const auto ei_k = static_cast<Eigen::Index>(kdim);
    const auto ei_n = static_cast<Eigen::Index>(n);
    ConstMatMap<T> dy(gr.grad(self).data(), ei_cout, ei_n);
    const T* colp = direct ? gr.tensor(xi).data.data() : col->data();
    ConstMatMap<T> cm(colp, ei_k, ei_n);
    if (gr.needs_grad(wi)) {
      MatMap<T> dw(gr.grad(wi).data(), ei_cout, ei_k);
      dw.noalias() += dy * cm.transpose();
    }
    if (gr.needs_grad(bi)) {
      auto& db = gr.grad(bi);
      for (std::size_t co = 0; co < c.cout; ++co) db[co] += dy.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (gr.needs_grad(xi)) {
      ConstMatMap<T> wm(gr.tensor(wi).data.data(), ei_cout, ei_k);
      if (direct) {
        MatMap<T> dx(gr.grad(xi).data(), ei_k, ei_n);
        dx.noalias() += wm.transpose() * dy;
      } else {
        thread_local Buffer<T> dcol;
        if (dcol.size() < kdim * n) dcol.resize(kdim * n);
        MatMap<T> dc(dcol.data(), ei_k, ei_n);
        dc.noalias() = wm.transpose() * dy;
        col2im_add(dcol.data(), c, gr.grad(xi).data());
      }
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise / structural ops

template <typename T>
Var<T> relu(Var<T> x) {
  auto& g = graph_of<T>({x}, "relu");
  const auto& X = x.value();
  Tensor<T> out(X.shape, X.data);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const int xi = x.id;
  return g.record(std::move(out), {xi}, [xi](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    const auto& xv = gr.tensor(xi).data;
    auto& dx = gr.grad(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> maxpool2(Var<T> x) {
  auto& g = graph_of<T>({x}, "maxpool2");
  require_rank(x, 3, "maxpool2", "input");
  const auto& X = x.value();
  const std::size_t ch = X.dim(0), h = X.dim(1), w = X.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: H and W must be even (got " + std::to_string(h) + "x" + std::to_string(w) +
                     "); pad or crop the input first");
  }
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = Tensor<T>::zeros({ch, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(ch * oh * ow);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = (c * h + 2 * i) * w + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (X.data[cand[q]] > X.data[best]) best = cand[q];
        }
        const std::size_t o = (c * oh + i) * ow + j;
        out.data[o] = X.data[best];
        (*argmax)[o] = best;
      }
    }
  }
  const int xi = x.id;
  return g.record(std::move(out), {xi}, [xi, argmax](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto& dx = gr.grad(xi);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[(*argmax)[o]] += dy[o];
  });
}

template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
  auto& g = graph_of<T>({x}, "upsample_nearest2");
  require_rank(x, 3, "upsample_nearest2", "input");
  const auto& X = x.value();
  const std::size_t ch = X.dim(0), h = X.dim(1), w = X.dim(2);
  auto out = Tensor<T>::zeros({ch, 2 * h, 2 * w});
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      const T* src = X.data.data() + (c * h + i / 2) * w;
      T* dst = out.data.data() + (c * 2 * h + i) * 2 * w;
      for (std::size_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
    }
  }
  const int xi = x.id;
  return g.record(std::move(out), {xi}, [xi, ch, h, w](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto& dx = gr.grad(xi);
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        const T* src = dy.data() + (c * 2 * h + i) * 2 * w;
        T* dst = dx.data() + (c * h + i / 2) * w;
        for (std::size_t j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> xs) {
  if (xs.empty()) throw InvalidArgument("concat_channels: no inputs");
  Graph<T>& g = *xs[0].graph;
  std::size_t total = 0;
  const std::size_t h = xs[0].value().rank() == 3 ? xs[0].value().dim(1) : 0;
  const std::size_t w = xs[0].value().rank() == 3 ? xs[0].value().dim(2) : 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const auto& v : xs) {
    if (v.graph != &g) throw InvalidArgument("concat_channels: operands from different graphs");
    require_rank(v, 3, "concat_channels", "input");
    if (v.value().dim(1) != h || v.value().dim(2) != w) {
      throw ShapeError("concat_channels: spatial size " + to_string(v.shape()) + " does not match " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    offsets.push_back(total * h * w);
    total += v.value().dim(0);
    ids.push_back(v.id);
  }
  auto out = Tensor<T>::zeros({total, h, w});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& d = xs[i].value().data;
    std::copy(d.begin(), d.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offsets[i]));
  }
  return g.record(std::move(out), ids, [ids, offsets](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.needs_grad(ids[i])) continue;
      auto& dx = gr.grad(ids[i]);
      const T* src = dy.data() + offsets[i];
      for (std::size_t j = 0; j < dx.size(); ++j) dx[j] += src[j];
    }
  });
}

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t count) {
  auto& g = graph_of<T>({x}, "slice_channels");
  require_rank(x, 3, "slice_channels", "input");
  const auto& X = x.value();
  if (count == 0 || begin + count > X.dim(0)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside channel dimension " + std::to_string(X.dim(0)));
  }
  const std::size_t plane = X.dim(1) * X.dim(2);
  const auto first = X.data.begin() + static_cast<std::ptrdiff_t>(begin * plane);
  Tensor<T> out({count, X.dim(1), X.dim(2)}, Buffer<T>(first, first + static_cast<std::ptrdiff_t>(count * plane)));
  const int xi = x.id;
  const std::size_t offset = begin * plane;
  return g.record(std::move(out), {xi}, [xi, offset](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto& dx = gr.grad(xi);
    for (std::size_t j = 0; j < dy.size(); ++j) dx[offset + j] += dy[j];
  });
}

template <typename T>
Var<T> linear(Var<T> v, Var<T> w, Var<T> b) {
  auto& g = graph_of<T>({v, w, b}, "linear");
  require_rank(v, 1, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  require_rank(b, 1, "linear", "bias");
  const std::size_t m = w.value().dim(0), n = w.value().dim(1);
  if (v.value().dim(0) != n) {
    throw ShapeError("linear: input length " + std::to_string(v.value().dim(0)) + " does not match weight columns " +
                     std::to_string(n));
  }
  if (b.value().dim(0) != m) {
    throw ShapeError("linear: bias length " + std::to_string(b.value().dim(0)) + " does not match weight rows " +
                     std::to_string(m));
  }
  auto out = Tensor<T>::zeros({m});
  const auto& W = w.value().data;
  const auto& V = v.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    T acc = b.value().data[i];
    for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * V[j];
    out.data[i] = acc;
  }
  const int vi = v.id, wi = w.id, bi = b.id;
  return g.record(std::move(out), {vi, wi, bi}, [vi, wi, bi, m, n](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    const auto& Wd = gr.tensor(wi).data;
    const auto& Vd = gr.tensor(vi).data;
    if (gr.needs_grad(wi)) {
      auto& dw = gr.grad(wi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dw[i * n + j] += dy[i] * Vd[j];
    }
    if (gr.needs_grad(bi)) {
      auto& db = gr.grad(bi);
      for (std::size_t i = 0; i < m; ++i) db[i] += dy[i];
    }
    if (gr.needs_grad(vi)) {
      auto& dv = gr.grad(vi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dv[j] += Wd[i * n + j] * dy[i];
    }
  });
}

template <typename T>
Var<T> broadcast_spatial(Var<T> v, std::size_t height, std::size_t width) {
  auto& g = graph_of<T>({v}, "broadcast_spatial");
  require_rank(v, 1, "broadcast_spatial", "input");
  if (height == 0 || width == 0) throw ShapeError("broadcast_spatial: target size must be positive");
  const std::size_t n = v.value().dim(0), plane = height * width;
  auto out = Tensor<T>::zeros({n, height, width});
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(out.data.begin() + static_cast<std::ptrdiff_t>(c * plane),
              out.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane), v.value().data[c]);
  }
  const int vi = v.id;
  return g.record(std::move(out), {vi}, [vi, n, plane](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto& dv = gr.grad(vi);
    for (std::size_t c = 0; c < n; ++c) {
      T acc = T(0);
      for (std::size_t j = 0; j < plane; ++j) acc += dy[c * plane + j];
      dv[c] += acc;
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = graph_of<T>({a, b}, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  Tensor<T> out(a.shape(), a.value().data);
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
  const int ai = a.id, bi = b.id;
  return g.record(std::move(out), {ai, bi}, [ai, bi](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    for (int id : {ai, bi}) {
      if (!gr.needs_grad(id)) continue;
      auto& dx = gr.grad(id);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  auto& g = graph_of<T>({x}, "scale");
  Tensor<T> out(x.shape(), x.value().data);
  for (auto& v : out.data) v *= factor;
  const int xi = x.id;
  return g.record(std::move(out), {xi}, [xi, factor](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto& dx = gr.grad(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& g = graph_of<T>({x}, "sum");
  T acc = T(0);
  for (auto v : x.value().data) acc += v;
  const int xi = x.id;
  return g.record(Tensor<T>({1}, {acc}), {xi}, [xi](Graph<T>& gr, int self) {
    const T dy = gr.grad(self)[0];
    for (auto& d : gr.grad(xi)) d += dy;
  });
}

template <typename T>
Var<T> mean_square(Var<T> x) {
  auto& g = graph_of<T>({x}, "mean_square");
  T acc = T(0);
  for (auto v : x.value().data) acc += v * v;
  const T inv_n = T(1) / static_cast<T>(x.value().numel());
  const int xi = x.id;
  return g.record(Tensor<T>({1}, {acc * inv_n}), {xi}, [xi, inv_n](Graph<T>& gr, int self) {
    const T dy = gr.grad(self)[0];
    const auto& xv = gr.tensor(xi).data;
    auto& dx = gr.grad(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += T(2) * xv[i] * inv_n * dy;
  });
}

template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& r) {
  auto& g = graph_of<T>({x}, "dot_const");
  if (r.shape != x.shape()) {
    throw ShapeError("dot_const: shapes " + to_string(x.shape()) + " and " + to_string(r.shape) + " differ");
  }
  T acc = T(0);
  for (std::size_t i = 0; i < r.data.size(); ++i) acc += x.value().data[i] * r.data[i];
  auto weights = std::make_shared<Buffer<T>>(r.data);
  const int xi = x.id;
  return g.record(Tensor<T>({1}, {acc}), {xi}, [xi, weights](Graph<T>& gr, int self) {
    const T dy = gr.grad(self)[0];
    auto& dx = gr.grad(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += (*weights)[i] * dy;
  });
}

template <typename T>
Var<T> masked_mse_per_channel(Var<T> pred, Var<T> target, Var<T> mask) {
  auto& g = graph_of<T>({pred, target, mask}, "masked_mse_per_channel");
  require_rank(pred, 3, "masked_mse_per_channel", "pred");
  if (target.shape() != pred.shape()) {
    throw ShapeError("masked_mse_per_channel: target shape " + to_string(target.shape()) +
                     " does not match prediction " + to_string(pred.shape()));
  }
  const std::size_t ch = pred.value().dim(0), h = pred.value().dim(1), w = pred.value().dim(2);
  if (mask.value().shape != Shape{h, w}) {
    throw ShapeError("masked_mse_per_channel: mask shape " + to_string(mask.shape()) + " does not match " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const auto& m = mask.value().data;
  std::size_t count = 0;
  for (auto v : m) count += v != T(0);
  if (count == 0) throw InvalidArgument("masked_mse_per_channel: mask is empty");
  const std::size_t plane = h * w;
  const T inv = T(1) / static_cast<T>(count);
  auto out = Tensor<T>::zeros({ch});
  const auto& p = pred.value().data;
  const auto& t = target.value().data;
  for (std::size_t c = 0; c < ch; ++c) {
    T acc = T(0);
    for (std::size_t j = 0; j < plane; ++j) {
      if (m[j] == T(0)) continue;
      const T d = p[c * plane + j] - t[c * plane + j];
      acc += d * d;
    }
    out.data[c] = acc * inv;
  }
  const int pi = pred.id, ti = target.id, mi = mask.id;
  return g.record(std::move(out), {pi, ti, mi}, [pi, ti, mi, ch, plane, inv](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    const auto& pv = gr.tensor(pi).data;
    const auto& tv = gr.tensor(ti).data;
    const auto& mv = gr.tensor(mi).data;
    const bool gp = gr.needs_grad(pi), gt = gr.needs_grad(ti);
    for (std::size_t c = 0; c < ch; ++c) {
      const T s = T(2) * inv * dy[c];
      for (std::size_t j = 0; j < plane; ++j) {
        if (mv[j] == T(0)) continue;
        const std::size_t k = c * plane + j;
        const T d = s * (pv[k] - tv[k]);
        if (gp) gr.grad(pi)[k] += d;
        if (gt) gr.grad(ti)[k] -= d;
      }
    }
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> v, std::vector<T> weights) {
  auto& g = graph_of<T>({v}, "weighted_sum");
  require_rank(v, 1, "weighted_sum", "input");
  if (weights.size() != v.value().dim(0)) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for vector of length " +
                     std::to_string(v.value().dim(0)));
  }
  T acc = T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * v.value().data[i];
  const int vi = v.id;
  return g.record(Tensor<T>({1}, {acc}), {vi}, [vi, weights = std::move(weights)](Graph<T>& gr, int self) {
    const T dy = gr.grad(self)[0];
    auto& dv = gr.grad(vi);
    for (std::size_t i = 0; i < weights.size(); ++i) dv[i] += weights[i] * dy;
  });
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(std::span<const TensorPtr<T>> params, AdamState<T>& state, double lr) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p->numel(), T(0));
      state.v.emplace_back(p->numel(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (state.m[i].size() != p.numel() || state.v[i].size() != p.numel()) {
      throw ShapeError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    }
    if (p.grad.size() != p.numel()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    }
    for (auto gv : p.grad) {
      if (!std::isfinite(static_cast<double>(gv))) {
        throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
      }
    }
  }
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = static_cast<double>(p.grad[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      p.data[j] = static_cast<T>(static_cast<double>(p.data[j]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// grad_check

double grad_check(const GradClosure& op, const std::vector<TensorPtr<double>>& inputs, double eps,
                  std::uint64_t projection_seed) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) throw InvalidArgument("grad_check: eps must lie in [1e-6, 1e-4]");
  std::vector<bool> saved_flags;
  for (const auto& t : inputs) {
    saved_flags.push_back(t->requires_grad);
    t->requires_grad = true;
  }

  Tensor<double> projection;
  auto run = [&](bool with_backward) {
    Graph<double> g;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.leaf(t));
    Var<double> out = op(g, vars);
    Var<double> loss = out;
    if (out.value().numel() != 1) {
      if (projection.data.empty()) {
        std::mt19937_64 rng(projection_seed);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        std::vector<double> r(out.value().numel());
        for (auto& v : r) v = dist(rng);
        projection = Tensor<double>(out.shape(), std::move(r));
      }
      loss = dot_const(out, projection);
    }
    if (with_backward) g.backward(loss);
    return loss.value().data[0];
  };

  run(true);
  std::vector<Buffer<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t->grad);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& data = inputs[i]->data;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + eps;
      const double fp = run(false);
      data[j] = saved - eps;
      const double fm = run(false);
      data[j] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double a = analytic[i][j];
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      worst = std::max(worst, err);
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i]->requires_grad = saved_flags[i];
  return worst;
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define QMRI_AD_INSTANTIATE(T)                                                      \
  template struct Tensor<T>;                                                        \
  template class Graph<T>;                                                          \
  template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, int, int);                      \
  template Var<T> relu<T>(Var<T>);                                                  \
  template Var<T> maxpool2<T>(Var<T>);                                              \
  template Var<T> upsample_nearest2<T>(Var<T>);                                     \
  template Var<T> concat_channels<T>(std::span<const Var<T>>);                      \
  template Var<T> slice_channels<T>(Var<T>, std::size_t, std::size_t);              \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                \
  template Var<T> broadcast_spatial<T>(Var<T>, std::size_t, std::size_t);           \
  template Var<T> add<T>(Var<T>, Var<T>);                                           \
  template Var<T> scale<T>(Var<T>, T);                                              \
  template Var<T> sum<T>(Var<T>);                                                   \
  template Var<T> mean_square<T>(Var<T>);                                           \
  template Var<T> dot_const<T>(Var<T>, const Tensor<T>&);                           \
  template Var<T> masked_mse_per_channel<T>(Var<T>, Var<T>, Var<T>);                \
  template Var<T> weighted_sum<T>(Var<T>, std::vector<T>);                          \
  template void adam_step<T>(std::span<const TensorPtr<T>>, AdamState<T>&, double);

QMRI_AD_INSTANTIATE(float)
QMRI_AD_INSTANTIATE(double)

#undef QMRI_AD_INSTANTIATE

}  // namespace qmri::ad
