#include "ditflow/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <string>

#include "ditflow/kernels.hpp"

namespace ditflow::ag {

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  require_finite(value, "leaf");
  value.set_requires_grad(requires_grad);
  value.clear_grad();
  nodes_.push_back(Node{OpKind::leaf, std::move(value), {}, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite())
    throw NonFiniteError("non-finite result of op " + std::to_string(static_cast<int>(kind)) + " with dims " +
                         to_string(value.dims()));
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_.at(in).value.requires_grad();
  value.set_requires_grad(needs);
  if (!needs) {
    backward = nullptr;
    inputs.clear();
  }
  nodes_.push_back(Node{kind, std::move(value), std::move(inputs), std::move(backward)});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_buffer(std::size_t id) {
  Tensor<T>& v = nodes_.at(id).value;
  if (!v.has_grad()) v.zero_grad();
  return v.grad_storage();
}

template <typename T>
void Tape<T>::backward(Var<T> out) {
  if (out.tape() != this) throw std::invalid_argument("backward: variable belongs to another tape");
  const Tensor<T>& ov = value(out.id());
  if (ov.size() != 1) throw ShapeError("backward needs a scalar output, got " + to_string(ov.dims()));
  for (Node& n : nodes_) n.value.clear_grad();
  if (ov.requires_grad()) {
    grad_buffer(out.id())[0] = T(1);
    for (std::size_t id = out.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.value.has_grad()) continue;
      n.backward(*this, id);
    }
  }
  for (Node& n : nodes_)
    if (n.kind == OpKind::leaf && n.value.requires_grad() && !n.value.has_grad()) n.value.zero_grad();
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  return value(v.id()).grad_tensor();
}

namespace {

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw std::invalid_argument("operands must live on the same tape");
  return *a.tape();
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty variable");
  return *a.tape();
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible dims " + to_string(a) + " and " + to_string(b));
}

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = tape_of(a, b);
  const Shape& da = a.dims();
  const Shape& db = b.dims();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
  Shape out_dims;
  if (da.size() == 2 && db.size() == 2 && da[1] == db[0]) {
    m = da[0], k = da[1], n = db[1];
    out_dims = {m, n};
  } else if (da.size() == 3 && db.size() == 3 && da[0] == db[0] && da[2] == db[1]) {
    batch = da[0], m = da[1], k = da[2], n = db[2];
    out_dims = {batch, m, n};
  } else if (da.size() == 3 && db.size() == 2 && da[2] == db[0]) {
    m = da[0] * da[1], k = da[2], n = db[1];
    shared_rhs = true;
    out_dims = {da[0], da[1], n};
  } else {
    mismatch("matmul", da, db);
  }
  const auto& kt = kernels::active<T>();
  Tensor<T> out(out_dims);
  for (std::size_t bi = 0; bi < batch; ++bi)
    kt.gemm_nn(m, n, k, a.value().data() + bi * m * k, b.value().data() + bi * k * n, out.data() + bi * m * n);

  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::matmul, std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
    const auto& kt2 = kernels::active<T>();
    const T* g = tp.output_grad(self).data();
    const T* av = tp.value(ia).data();
    const T* bv = tp.value(ib).data();
    (void)shared_rhs;
    if (tp.requires_grad(ia)) {
      T* ga = tp.grad_buffer(ia).data();
      for (std::size_t bi = 0; bi < batch; ++bi)
        kt2.gemm_nt(m, k, n, g + bi * m * n, bv + bi * k * n, ga + bi * m * k);
    }
    if (tp.requires_grad(ib)) {
      T* gb = tp.grad_buffer(ib).data();
      for (std::size_t bi = 0; bi < batch; ++bi)
        kt2.gemm_tn(k, n, m, av + bi * m * k, g + bi * m * n, gb + bi * k * n);
    }
  });
}

namespace {

template <typename T>
void transpose_last2(const T* src, T* dst, std::size_t batch, std::size_t rows, std::size_t cols) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dst[b * rows * cols + c * rows + r] = src[b * rows * cols + r * cols + c];
}

}  // namespace

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& tape = tape_of(a);
  const Shape& d = a.dims();
  if (d.size() != 2 && d.size() != 3) throw ShapeError("transpose needs rank 2 or 3, got " + to_string(d));
  const std::size_t batch = d.size() == 3 ? d[0] : 1;
  const std::size_t rows = d[d.size() - 2], cols = d[d.size() - 1];
  Shape od = d;
  std::swap(od[od.size() - 1], od[od.size() - 2]);
  Tensor<T> out(od);
  transpose_last2(a.value().data(), out.data(), batch, rows, cols);
  const std::size_t ia = a.id();
  return tape.record(OpKind::transpose, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.output_grad(self).data();
    std::vector<T> tmp(batch * rows * cols);
    transpose_last2(g, tmp.data(), batch, cols, rows);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
  });
}

namespace {

enum class Binary { add, sub, mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary op, const char* name, OpKind kind) {
  Tape<T>& tape = tape_of(a, b);
  if (!is_suffix(a.dims(), b.dims())) mismatch(name, a.dims(), b.dims());
  const std::size_t inner = b.value().size();
  const std::size_t outer = a.value().size() / inner;
  Tensor<T> out(a.dims());
  const T* av = a.value().data();
  const T* bv = b.value().data();
  T* o = out.data();
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t i = 0; i < inner; ++i) {
      const T x = av[r * inner + i], y = bv[i];
      o[r * inner + i] = op == Binary::add ? x + y : op == Binary::sub ? x - y : x * y;
    }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(kind, std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.output_grad(self).data();
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      const T* bv2 = tp.value(ib).data();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t i = 0; i < inner; ++i)
          ga[r * inner + i] += op == Binary::mul ? g[r * inner + i] * bv2[i] : g[r * inner + i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      const T* av2 = tp.value(ia).data();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t i = 0; i < inner; ++i) {
          const T gi = g[r * inner + i];
          gb[i] += op == Binary::add ? gi : op == Binary::sub ? -gi : gi * av2[r * inner + i];
        }
    }
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::add, "add", OpKind::add);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::sub, "sub", OpKind::sub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::mul, "mul", OpKind::mul);
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tape<T>& tape = tape_of(a);
  Tensor<T> out(a.dims());
  const T* av = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const std::size_t ia = a.id();
  return tape.record(OpKind::scale, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    auto g = tp.output_grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> softmax(Var<T> a, T temperature) {
  Tape<T>& tape = tape_of(a);
  if (!(temperature > T(0))) throw std::invalid_argument("softmax temperature must be positive");
  const std::size_t n = a.dims().back();
  const std::size_t rows = a.value().size() / n;
  Tensor<T> out(a.dims());
  const auto& kt = kernels::active<T>();
  for (std::size_t r = 0; r < rows; ++r) kt.softmax_row(a.value().data() + r * n, out.data() + r * n, n, temperature);
  const std::size_t ia = a.id();
  return tape.record(OpKind::softmax, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.output_grad(self).data();
    const T* y = tp.value(self).data();
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * n;
      const T* yr = y + r * n;
      T dotgy = T(0);
      for (std::size_t i = 0; i < n; ++i) dotgy += gr[i] * yr[i];
      for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += temperature * yr[i] * (gr[i] - dotgy);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tape<T>& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const std::size_t d = x.dims().back();
  if (gamma.dims() != Shape{d}) mismatch("layer_norm gamma", x.dims(), gamma.dims());
  if (beta.dims() != Shape{d}) mismatch("layer_norm beta", x.dims(), beta.dims());
  const std::size_t rows = x.value().size() / d;
  std::vector<T> mean(rows), rstd(rows);
  Tensor<T> out(x.dims());
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= T(d);
    T var = T(0);
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = gv[i] * (xr[i] - mu) * rs + bv[i];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(OpKind::layer_norm, std::move(out), {ix, ig, ib},
                     [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& tp, std::size_t self) {
                       const T* g = tp.output_grad(self).data();
                       const T* xs = tp.value(ix).data();
                       const T* gam = tp.value(ig).data();
                       const bool need_x = tp.requires_grad(ix);
                       const bool need_g = tp.requires_grad(ig);
                       const bool need_b = tp.requires_grad(ib);
                       T* gx = need_x ? tp.grad_buffer(ix).data() : nullptr;
                       T* gg = need_g ? tp.grad_buffer(ig).data() : nullptr;
                       T* gb = need_b ? tp.grad_buffer(ib).data() : nullptr;
                       std::vector<T> xhat(d), dxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T m1 = T(0), m2 = T(0);
                         for (std::size_t i = 0; i < d; ++i) {
                           xhat[i] = (xs[r * d + i] - mean[r]) * rstd[r];
                           const T gi = g[r * d + i];
                           if (gg) gg[i] += gi * xhat[i];
                           if (gb) gb[i] += gi;
                           dxhat[i] = gi * gam[i];
                           m1 += dxhat[i];
                           m2 += dxhat[i] * xhat[i];
                         }
                         if (!gx) continue;
                         m1 /= T(d);
                         m2 /= T(d);
                         for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                       }
                     });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>& tape = tape_of(a);
  Tensor<T> out(a.dims());
  kernels::active<T>().gelu(a.value().data(), out.data(), out.size());
  const std::size_t ia = a.id();
  return tape.record(OpKind::gelu, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    auto g = tp.output_grad(self);
    kernels::active<T>().gelu_grad(tp.value(ia).data(), g.data(), tp.grad_buffer(ia).data(), g.size());
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape dims) {
  Tape<T>& tape = tape_of(a);
  Tensor<T> out = a.value().reshaped(std::move(dims));
  const std::size_t ia = a.id();
  return tape.record(OpKind::reshape, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    auto g = tp.output_grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {

// Source offset for each destination element of a permutation.
std::vector<std::size_t> permutation_map(const Shape& src, const std::vector<std::size_t>& axes) {
  const std::size_t rank = src.size();
  std::vector<std::size_t> src_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) src_stride[i - 1] = src_stride[i] * src[i];
  Shape dst(rank);
  for (std::size_t i = 0; i < rank; ++i) dst[i] = src[axes[i]];
  const std::size_t total = numel(src);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t lin = 0; lin < total; ++lin) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * src_stride[axes[i]];
    map[lin] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < dst[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

// The model permutes the same few shapes every forward pass.
std::shared_ptr<const std::vector<std::size_t>> cached_permutation_map(const Shape& src,
                                                                       const std::vector<std::size_t>& axes) {
  thread_local std::map<std::pair<Shape, std::vector<std::size_t>>, std::shared_ptr<const std::vector<std::size_t>>> cache;
  auto key = std::make_pair(src, axes);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  if (cache.size() > 64) cache.clear();
  auto map = std::make_shared<const std::vector<std::size_t>>(permutation_map(src, axes));
  cache.emplace(std::move(key), map);
  return map;
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes) {
  Tape<T>& tape = tape_of(a);
  const Shape& src = a.dims();
  if (axes.size() != src.size()) throw ShapeError("permute: axes count does not match rank of " + to_string(src));
  std::vector<bool> seen(axes.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= axes.size() || seen[ax]) throw ShapeError("permute: invalid axis order for " + to_string(src));
    seen[ax] = true;
  }
  Shape dst(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[axes[i]];
  auto map = cached_permutation_map(src, axes);
  Tensor<T> out(dst);
  const T* av = a.value().data();
  const std::size_t* mp = map->data();
  for (std::size_t i = 0; i < map->size(); ++i) out[i] = av[mp[i]];
  const std::size_t ia = a.id();
  return tape.record(OpKind::permute, std::move(out), {ia}, [ia, map](Tape<T>& tp, std::size_t self) {
    auto g = tp.output_grad(self);
    auto& ga = tp.grad_buffer(ia);
    const std::size_t* mp2 = map->data();
    for (std::size_t i = 0; i < map->size(); ++i) ga[mp2[i]] += g[i];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> rows) {
  Tape<T>& tape = tape_of(a);
  const Shape& d = a.dims();
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t width = a.value().size() / d[0];
  for (std::size_t r : rows)
    if (r >= d[0]) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + to_string(d));
  Shape od = d;
  od[0] = rows.size();
  Tensor<T> out(od);
  const T* av = a.value().data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(av + rows[i] * width, width, out.data() + i * width);
  const std::size_t ia = a.id();
  return tape.record(OpKind::gather_rows, std::move(out), {ia},
                     [ia, width, rows = std::move(rows)](Tape<T>& tp, std::size_t self) {
                       const T* g = tp.output_grad(self).data();
                       auto& ga = tp.grad_buffer(ia);
                       for (std::size_t i = 0; i < rows.size(); ++i)
                         for (std::size_t c = 0; c < width; ++c) ga[rows[i] * width + c] += g[i * width + c];
                     });
}

template <typename T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
  Tape<T>& tape = tape_of(a);
  const Shape& d = a.dims();
  if (axis >= d.size()) throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " + to_string(d));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
  for (std::size_t i = axis + 1; i < d.size(); ++i) inner *= d[i];
  const std::size_t len = d[axis];
  Shape od;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (i != axis) od.push_back(d[i]);
  if (od.empty()) od.push_back(1);
  Tensor<T> out(od);
  const T* av = a.value().data();
  const T inv = T(1) / T(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T acc = T(0);
      for (std::size_t l = 0; l < len; ++l) acc += av[(o * len + l) * inner + i];
      out[o * inner + i] = acc * inv;
    }
  const std::size_t ia = a.id();
  return tape.record(OpKind::mean_axis, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.output_grad(self).data();
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + l) * inner + i] += g[o * inner + i] * inv;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& tape = tape_of(a);
  T acc = T(0);
  for (T v : a.value().values()) acc += v;
  const std::size_t ia = a.id();
  return tape.record(OpKind::sum, Tensor<T>::scalar(acc), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T g = tp.output_grad(self)[0];
    for (T& x : tp.grad_buffer(ia)) x += g;
  });
}

template <typename T>
Var<T> sum_squares(Var<T> a) {
  Tape<T>& tape = tape_of(a);
  T acc = T(0);
  for (T v : a.value().values()) acc += v * v;
  const std::size_t ia = a.id();
  return tape.record(OpKind::sum_squares, Tensor<T>::scalar(acc), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T g = tp.output_grad(self)[0];
    const T* xs = tp.value(ia).data();
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * g * xs[i];
  });
}

#define DITFLOW_INSTANTIATE(T)                                   \
  template class Var<T>;                                         \
  template class Tape<T>;                                        \
  template Var<T> matmul(Var<T>, Var<T>);                        \
  template Var<T> transpose(Var<T>);                             \
  template Var<T> add(Var<T>, Var<T>);                           \
  template Var<T> sub(Var<T>, Var<T>);                           \
  template Var<T> mul(Var<T>, Var<T>);                           \
  template Var<T> scale(Var<T>, T);                              \
  template Var<T> softmax(Var<T>, T);                            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);         \
  template Var<T> gelu(Var<T>);                                  \
  template Var<T> reshape(Var<T>, Shape);                        \
  template Var<T> permute(Var<T>, std::vector<std::size_t>);     \
  template Var<T> gather_rows(Var<T>, std::vector<std::size_t>); \
  template Var<T> mean_axis(Var<T>, std::size_t);                \
  template Var<T> sum(Var<T>);                                   \
  template Var<T> sum_squares(Var<T>);

DITFLOW_INSTANTIATE(float)
DITFLOW_INSTANTIATE(double)

}  // namespace ditflow::ag
