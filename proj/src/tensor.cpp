#include "ecgsl/tensor.hpp"

#include "ecgsl/random.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ecgsl {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "E_INVALID_CONFIG";
    case ErrorCode::Data: return "E_DATA";
    case ErrorCode::Shape: return "E_SHAPE";
    case ErrorCode::Numeric: return "E_NUMERIC";
    case ErrorCode::EmptyPeaks: return "E_EMPTY_PEAKS";
    case ErrorCode::Segmentation: return "E_SEGMENTATION";
    case ErrorCode::InvalidDataset: return "E_INVALID_DATASET";
    case ErrorCode::EmptyClass: return "E_EMPTY_CLASS";
    case ErrorCode::InvalidState: return "E_INVALID_STATE";
    case ErrorCode::Manifest: return "E_MANIFEST";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::BadMagic: return "E_BAD_MAGIC";
    case ErrorCode::Version: return "E_VERSION";
    case ErrorCode::Truncated: return "E_TRUNCATED";
    case ErrorCode::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::StageOrder: return "E_STAGE_ORDER";
  }
  return "E_UNKNOWN";
}

// ---------------------------------------------------------------------------
// Tape

template <class T>
Tensor<T> Tape<T>::make_leaf(Array<T> value, bool requires_grad) {
  for (T v : value.data)
    require(std::isfinite(v), ErrorCode::Numeric, "non-finite value in leaf tensor");
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(value.shape);
  node->value = std::move(value.data);
  node->requires_grad = requires_grad;
  node->leaf = true;
  node->index = nodes_.size();
  node->tape = this;
  nodes_.push_back(node);
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> value, bool requires_grad,
                          std::function<void(detail::Node<T>&)> backward) {
  for (T v : value)
    if (!std::isfinite(v)) fail(ErrorCode::Numeric, std::string("non-finite output from ") + op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->leaf = false;
  node->index = nodes_.size();
  node->tape = this;
  if (requires_grad) node->backward = std::move(backward);
  nodes_.push_back(node);
  return Tensor<T>(std::move(node));
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  require(loss.valid() && loss.node()->tape == this, ErrorCode::InvalidState,
          "backward() called with a tensor from another tape");
  require(loss.size() == 1, ErrorCode::Shape,
          "backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  const std::size_t last = loss.node()->index;
  for (std::size_t i = 0; i <= last; ++i)
    if (!nodes_[i]->leaf) nodes_[i]->grad.clear();
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += T(1);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& n = *nodes_[i];
    if (!n.leaf && n.backward && !n.grad.empty()) n.backward(n);
  }
}

template <class T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) n->grad.clear();
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <class T>
using NodePtr = std::shared_ptr<detail::Node<T>>;
template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
Tape<T>& tape_of(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.valid() && b.valid(), ErrorCode::InvalidState, "op on an empty tensor");
  require(&a.tape() == &b.tape(), ErrorCode::InvalidState, "op mixes tensors from different tapes");
  return a.tape();
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::Shape,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  require(s.size() == rank, ErrorCode::Shape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

// Layout helpers for [B, C, L] <-> [C, B*L].
template <class T>
void to_channel_major(std::span<const T> x, std::size_t B, std::size_t C, std::size_t L,
                      std::span<T> out) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(x.begin() + (b * C + c) * L, L, out.begin() + c * (B * L) + b * L);
}

template <class T>
void add_from_channel_major(std::span<const T> in, std::size_t B, std::size_t C, std::size_t L,
                            std::span<T> x) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = in.data() + c * (B * L) + b * L;
      T* dst = x.data() + (b * C + c) * L;
      for (std::size_t t = 0; t < L; ++t) dst[t] += src[t];
    }
}

struct ConvGeometry {
  std::size_t batch, channels, length, kernel, stride, padding, out_length;
};

// cols[(c*K + k), (b*Lout + t)] = x[b, c, t*stride - padding + k]
template <class T>
void im2col(std::span<const T> x, const ConvGeometry& g, std::span<T> cols) {
  const std::size_t width = g.batch * g.out_length;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t k = 0; k < g.kernel; ++k) {
      T* row = cols.data() + (c * g.kernel + k) * width;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* src = x.data() + (b * g.channels + c) * g.length;
        for (std::size_t t = 0; t < g.out_length; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                     static_cast<std::ptrdiff_t>(g.padding);
          row[b * g.out_length + t] =
              (pos >= 0 && pos < static_cast<std::ptrdiff_t>(g.length)) ? src[pos] : T(0);
        }
      }
    }
}

// Scatter-add inverse of im2col.
template <class T>
void col2im(std::span<const T> cols, const ConvGeometry& g, std::span<T> x) {
  const std::size_t width = g.batch * g.out_length;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const T* row = cols.data() + (c * g.kernel + k) * width;
      for (std::size_t b = 0; b < g.batch; ++b) {
        T* dst = x.data() + (b * g.channels + c) * g.length;
        for (std::size_t t = 0; t < g.out_length; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                     static_cast<std::ptrdiff_t>(g.padding);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(g.length))
            dst[pos] += row[b * g.out_length + t];
        }
      }
    }
}

template <class T>
void add_channel_bias(std::vector<T>& out, std::span<const T> bias, std::size_t B, std::size_t C,
                      std::size_t L) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T* row = out.data() + (b * C + c) * L;
      for (std::size_t t = 0; t < L; ++t) row[t] += bias[c];
    }
}

template <class T>
void accumulate_channel_bias_grad(std::span<const T> g, std::size_t B, std::size_t C,
                                  std::size_t L, std::span<T> gb) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* row = g.data() + (b * C + c) * L;
      T s = 0;
      for (std::size_t t = 0; t < L; ++t) s += row[t];
      gb[c] += s;
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto& tape = tape_of(a, b);
  require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  NodePtr<T> pa = a.shared(), pb = b.shared();
  return tape.record("add", a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                     [pa, pb](detail::Node<T>& self) {
                       for (auto* p : {pa.get(), pb.get()}) {
                         if (!p->requires_grad) continue;
                         auto g = p->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                     });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto& tape = tape_of(a, b);
  require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  NodePtr<T> pa = a.shared(), pb = b.shared();
  return tape.record("sub", a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                     [pa, pb](detail::Node<T>& self) {
                       if (pa->requires_grad) {
                         auto g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto g = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                       }
                     });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto& tape = tape_of(a, b);
  require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  NodePtr<T> pa = a.shared(), pb = b.shared();
  return tape.record("mul", a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                     [pa, pb](detail::Node<T>& self) {
                       if (pa->requires_grad) {
                         auto g = pa->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
                       }
                       if (pb->requires_grad) {
                         auto g = pb->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
                       }
                     });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  NodePtr<T> pa = a.shared();
  return a.tape().record("scale", a.shape(), std::move(out), a.requires_grad(),
                         [pa, factor](detail::Node<T>& self) {
                           auto g = pa->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                         });
}

template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  auto& tape = tape_of(x, bias);
  require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(), ErrorCode::Shape,
          "add_bias: bias " + shape_string(bias.shape()) + " does not match " +
              shape_string(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  NodePtr<T> px = x.shared(), pb = bias.shared();
  return tape.record("add_bias", x.shape(), std::move(out),
                     x.requires_grad() || bias.requires_grad(), [px, pb, n](detail::Node<T>& self) {
                       if (px->requires_grad) {
                         auto g = px->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb->requires_grad) {
                         auto g = pb->grad_buffer();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto& tape = tape_of(a, b);
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  require(b.dim(0) == K, ErrorCode::Shape,
          "matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
              shape_string(b.shape()));
  std::vector<T> out(M * N);
  MatMap<T>(out.data(), M, N).noalias() =
      ConstMatMap<T>(a.data().data(), M, K) * ConstMatMap<T>(b.data().data(), K, N);
  NodePtr<T> pa = a.shared(), pb = b.shared();
  return tape.record("matmul", Shape{M, N}, std::move(out),
                     a.requires_grad() || b.requires_grad(),
                     [pa, pb, M, K, N](detail::Node<T>& self) {
                       ConstMatMap<T> G(self.grad.data(), M, N);
                       if (pa->requires_grad)
                         MatMap<T>(pa->grad_buffer().data(), M, K).noalias() +=
                             G * ConstMatMap<T>(pb->value.data(), K, N).transpose();
                       if (pb->requires_grad)
                         MatMap<T>(pb->grad_buffer().data(), K, N).noalias() +=
                             ConstMatMap<T>(pa->value.data(), M, K).transpose() * G;
                     });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank("transpose", a.shape(), 2);
  const std::size_t M = a.dim(0), N = a.dim(1);
  std::vector<T> out(M * N);
  MatMap<T>(out.data(), N, M) = ConstMatMap<T>(a.data().data(), M, N).transpose();
  NodePtr<T> pa = a.shared();
  return a.tape().record("transpose", Shape{N, M}, std::move(out), a.requires_grad(),
                         [pa, M, N](detail::Node<T>& self) {
                           MatMap<T>(pa->grad_buffer().data(), M, N) +=
                               ConstMatMap<T>(self.grad.data(), N, M).transpose();
                         });
}

template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Convolutions

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding, const Tensor<T>* bias) {
  auto& tape = tape_of(x, kernel);
  require(x.rank() == 2 || x.rank() == 3, ErrorCode::Shape,
          "conv1d: input must be [C, L] or [B, C, L], got " + shape_string(x.shape()));
  require_rank("conv1d kernel", kernel.shape(), 3);
  require(stride >= 1, ErrorCode::Shape, "conv1d: stride must be >= 1");
  const bool batched = x.rank() == 3;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t Ci = x.dim(batched ? 1 : 0), L = x.dim(batched ? 2 : 1);
  const std::size_t Co = kernel.dim(0), K = kernel.dim(2);
  require(kernel.dim(1) == Ci, ErrorCode::Shape,
          "conv1d: kernel " + shape_string(kernel.shape()) + " does not match input channels " +
              std::to_string(Ci));
  require(K <= L + 2 * padding, ErrorCode::Shape, "conv1d: kernel longer than padded input");
  if (bias)
    require(bias->rank() == 1 && bias->dim(0) == Co && &bias->tape() == &tape, ErrorCode::Shape,
            "conv1d: bias must be [C_out]");
  const std::size_t Lout = (L + 2 * padding - K) / stride + 1;
  const ConvGeometry geo{B, Ci, L, K, stride, padding, Lout};

  std::vector<T> cols(Ci * K * B * Lout);
  im2col<T>(x.data(), geo, cols);
  std::vector<T> out_cm(Co * B * Lout);
  MatMap<T>(out_cm.data(), Co, B * Lout).noalias() =
      ConstMatMap<T>(kernel.data().data(), Co, Ci * K) *
      ConstMatMap<T>(cols.data(), Ci * K, B * Lout);
  std::vector<T> out(B * Co * Lout, T(0));
  add_from_channel_major<T>(out_cm, B, Co, Lout, out);
  if (bias) add_channel_bias<T>(out, bias->data(), B, Co, Lout);

  Shape shape = batched ? Shape{B, Co, Lout} : Shape{Co, Lout};
  NodePtr<T> px = x.shared(), pk = kernel.shared();
  NodePtr<T> pb = bias ? bias->shared() : nullptr;
  const bool req = x.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
  return tape.record(
      "conv1d", std::move(shape), std::move(out), req,
      [px, pk, pb, geo, Co, cols = std::move(cols)](detail::Node<T>& self) {
        const std::size_t width = geo.batch * geo.out_length;
        const std::size_t depth = geo.channels * geo.kernel;
        std::vector<T> g_cm(Co * width);
        to_channel_major<T>(self.grad, geo.batch, Co, geo.out_length, g_cm);
        ConstMatMap<T> G(g_cm.data(), Co, width);
        if (pk->requires_grad)
          MatMap<T>(pk->grad_buffer().data(), Co, depth).noalias() +=
              G * ConstMatMap<T>(cols.data(), depth, width).transpose();
        if (px->requires_grad) {
          std::vector<T> gcols(depth * width);
          MatMap<T>(gcols.data(), depth, width).noalias() =
              ConstMatMap<T>(pk->value.data(), Co, depth).transpose() * G;
          col2im<T>(gcols, geo, px->grad_buffer());
        }
        if (pb && pb->requires_grad)
          accumulate_channel_bias_grad<T>(self.grad, geo.batch, Co, geo.out_length,
                                          pb->grad_buffer());
      });
}

template <class T>
Tensor<T> conv1d_transpose(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                           std::size_t padding, std::size_t output_padding, const Tensor<T>* bias) {
  auto& tape = tape_of(x, kernel);
  require(x.rank() == 2 || x.rank() == 3, ErrorCode::Shape,
          "conv1d_transpose: input must be [C, L] or [B, C, L], got " + shape_string(x.shape()));
  require_rank("conv1d_transpose kernel", kernel.shape(), 3);
  require(stride >= 1 && output_padding < stride, ErrorCode::Shape,
          "conv1d_transpose: need stride >= 1 and output_padding < stride");
  const bool batched = x.rank() == 3;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t Ci = x.dim(batched ? 1 : 0), Lin = x.dim(batched ? 2 : 1);
  const std::size_t Co = kernel.dim(1), K = kernel.dim(2);
  require(kernel.dim(0) == Ci, ErrorCode::Shape,
          "conv1d_transpose: kernel " + shape_string(kernel.shape()) +
              " does not match input channels " + std::to_string(Ci));
  const std::ptrdiff_t lout_signed = static_cast<std::ptrdiff_t>((Lin - 1) * stride + K + output_padding) -
                                     static_cast<std::ptrdiff_t>(2 * padding);
  require(lout_signed >= 1, ErrorCode::Shape, "conv1d_transpose: non-positive output length");
  const std::size_t Lout = static_cast<std::size_t>(lout_signed);
  if (bias)
    require(bias->rank() == 1 && bias->dim(0) == Co && &bias->tape() == &tape, ErrorCode::Shape,
            "conv1d_transpose: bias must be [C_out]");
  // Geometry of the forward convolution this op is the adjoint of.
  const ConvGeometry geo{B, Co, Lout, K, stride, padding, Lin};
  const std::size_t width = B * Lin;
  const std::size_t depth = Co * K;

  std::vector<T> x_cm(Ci * width);
  to_channel_major<T>(x.data(), B, Ci, Lin, x_cm);
  std::vector<T> cols(depth * width);
  MatMap<T>(cols.data(), depth, width).noalias() =
      ConstMatMap<T>(kernel.data().data(), Ci, depth).transpose() *
      ConstMatMap<T>(x_cm.data(), Ci, width);
  std::vector<T> out(B * Co * Lout, T(0));
  col2im<T>(cols, geo, out);
  if (bias) add_channel_bias<T>(out, bias->data(), B, Co, Lout);

  Shape shape = batched ? Shape{B, Co, Lout} : Shape{Co, Lout};
  NodePtr<T> px = x.shared(), pk = kernel.shared();
  NodePtr<T> pb = bias ? bias->shared() : nullptr;
  const bool req = x.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
  return tape.record(
      "conv1d_transpose", std::move(shape), std::move(out), req,
      [px, pk, pb, geo, Ci, width, depth, x_cm = std::move(x_cm)](detail::Node<T>& self) {
        std::vector<T> gcols(depth * width);
        im2col<T>(self.grad, geo, gcols);
        ConstMatMap<T> GC(gcols.data(), depth, width);
        if (px->requires_grad) {
          std::vector<T> gx_cm(Ci * width);
          MatMap<T>(gx_cm.data(), Ci, width).noalias() =
              ConstMatMap<T>(pk->value.data(), Ci, depth) * GC;
          add_from_channel_major<T>(gx_cm, geo.batch, Ci, geo.out_length, px->grad_buffer());
        }
        if (pk->requires_grad)
          MatMap<T>(pk->grad_buffer().data(), Ci, depth).noalias() +=
              ConstMatMap<T>(x_cm.data(), Ci, width) * GC.transpose();
        if (pb && pb->requires_grad)
          accumulate_channel_bias_grad<T>(self.grad, geo.batch, geo.channels, geo.length,
                                          pb->grad_buffer());
      });
}

template <class T>
Tensor<T> max_pool1d(const Tensor<T>& x, std::size_t size) {
  require(x.rank() == 2 || x.rank() == 3, ErrorCode::Shape,
          "max_pool1d: input must be [C, L] or [B, C, L]");
  require(size >= 1, ErrorCode::Shape, "max_pool1d: window must be >= 1");
  const std::size_t L = x.shape().back();
  const std::size_t rows = x.size() / L;
  const std::size_t Lout = L / size;
  require(Lout >= 1, ErrorCode::Shape, "max_pool1d: input shorter than the window");
  std::vector<T> out(rows * Lout);
  std::vector<std::size_t> arg(rows * Lout);
  auto xv = x.data();
  std::uint64_t sig = 1469598103934665603ULL;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < Lout; ++t) {
      std::size_t best = r * L + t * size;
      for (std::size_t k = 1; k < size; ++k)
        if (xv[r * L + t * size + k] > xv[best]) best = r * L + t * size + k;
      out[r * Lout + t] = xv[best];
      arg[r * Lout + t] = best;
      sig = (sig ^ (best - r * L - t * size)) * 1099511628211ULL;
    }
  x.tape().mix_kink(sig);
  Shape shape = x.shape();
  shape.back() = Lout;
  NodePtr<T> px = x.shared();
  return x.tape().record("max_pool1d", std::move(shape), std::move(out), x.requires_grad(),
                         [px, arg = std::move(arg)](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
                         });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.data();
  std::uint64_t sig = 1469598103934665603ULL, word = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = xv[i] > T(0);
    out[i] = on ? xv[i] : T(0);
    word = (word << 1) | static_cast<std::uint64_t>(on);
    if ((i & 63) == 63) {
      sig = (sig ^ word) * 1099511628211ULL;
      word = 0;
    }
  }
  x.tape().mix_kink((sig ^ word) * 1099511628211ULL);
  NodePtr<T> px = x.shared();
  return x.tape().record("relu", x.shape(), std::move(out), x.requires_grad(),
                         [px](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (px->value[i] > T(0)) g[i] += self.grad[i];
                         });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    if (v >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  NodePtr<T> px = x.shared();
  return x.tape().record("sigmoid", x.shape(), std::move(out), x.requires_grad(),
                         [px](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const T y = self.value[i];
                             g[i] += self.grad[i] * y * (T(1) - y);
                           }
                         });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  NodePtr<T> px = x.shared();
  return x.tape().record("tanh", x.shape(), std::move(out), x.requires_grad(),
                         [px](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const T y = self.value[i];
                             g[i] += self.grad[i] * (T(1) - y * y);
                           }
                         });
}

namespace {

// Shared softmax kernel; mask may be empty (all admissible).
template <class T>
Tensor<T> softmax_impl(const char* op, const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require(x.rank() >= 1, ErrorCode::Shape, std::string(op) + ": needs rank >= 1");
  const std::size_t C = x.shape().back();
  const std::size_t R = x.size() / C;
  require(mask.empty() || mask.size() == x.size(), ErrorCode::Shape,
          std::string(op) + ": mask length does not match input");
  auto xv = x.data();
  std::vector<T> out(x.size(), T(0));
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv.data() + r * C;
    T* y = out.data() + r * C;
    auto admit = [&](std::size_t j) { return mask.empty() || mask[r * C + j] != 0; };
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < C; ++j)
      if (admit(j)) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) continue;
    T s = 0;
    for (std::size_t j = 0; j < C; ++j)
      if (admit(j)) {
        y[j] = std::exp(row[j] - mx);
        s += y[j];
      }
    for (std::size_t j = 0; j < C; ++j) y[j] /= s;
  }
  NodePtr<T> px = x.shared();
  return x.tape().record(op, x.shape(), std::move(out), x.requires_grad(),
                         [px, R, C](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t r = 0; r < R; ++r) {
                             const T* y = self.value.data() + r * C;
                             const T* gy = self.grad.data() + r * C;
                             T dot = 0;
                             for (std::size_t j = 0; j < C; ++j) dot += gy[j] * y[j];
                             for (std::size_t j = 0; j < C; ++j) g[r * C + j] += y[j] * (gy[j] - dot);
                           }
                         });
}

}  // namespace

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax_impl<T>("softmax", x, {});
}

template <class T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require(mask.size() == x.size(), ErrorCode::Shape, "masked_softmax: mask length mismatch");
  return softmax_impl<T>("masked_softmax", x, mask);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  auto& tape = tape_of(x, gamma);
  tape_of(x, beta);
  require(x.rank() >= 1, ErrorCode::Shape, "layer_norm: needs rank >= 1");
  const std::size_t N = x.shape().back();
  require(gamma.shape() == Shape{N} && beta.shape() == Shape{N}, ErrorCode::Shape,
          "layer_norm: scale/shift must be [" + std::to_string(N) + "]");
  const std::size_t R = x.size() / N;
  auto xv = x.data();
  std::vector<T> xhat(x.size()), rstd(R), out(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv.data() + r * N;
    T mu = 0;
    for (std::size_t j = 0; j < N; ++j) mu += row[j];
    mu /= T(N);
    T var = 0;
    for (std::size_t j = 0; j < N; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(N);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < N; ++j) {
      xhat[r * N + j] = (row[j] - mu) * rstd[r];
      out[r * N + j] = gamma.data()[j] * xhat[r * N + j] + beta.data()[j];
    }
  }
  NodePtr<T> px = x.shared(), pg = gamma.shared(), pb = beta.shared();
  const bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return tape.record(
      "layer_norm", x.shape(), std::move(out), req,
      [px, pg, pb, R, N, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        if (pg->requires_grad) {
          auto gg = pg->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) gg[i % N] += self.grad[i] * xhat[i];
        }
        if (pb->requires_grad) {
          auto gb = pb->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % N] += self.grad[i];
        }
        if (!px->requires_grad) return;
        auto gx = px->grad_buffer();
        std::vector<T> dxhat(N);
        for (std::size_t r = 0; r < R; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < N; ++j) {
            dxhat[j] = self.grad[r * N + j] * pg->value[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[r * N + j];
          }
          m1 /= T(N);
          m2 /= T(N);
          for (std::size_t j = 0; j < N; ++j)
            gx[r * N + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * N + j] * m2);
        }
      });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64* rng) {
  require(p >= 0.0 && p < 1.0, ErrorCode::InvalidConfig, "dropout: probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  require(rng != nullptr, ErrorCode::InvalidConfig, "dropout: training mode needs an rng");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> keep(x.size()), out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = unit_uniform(*rng) < p ? T(0) : keep_scale;
    out[i] = x.data()[i] * keep[i];
  }
  NodePtr<T> px = x.shared();
  return x.tape().record("dropout", x.shape(), std::move(out), x.requires_grad(),
                         [px, keep = std::move(keep)](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
                         });
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target,
                     std::span<const std::uint8_t> mask) {
  auto& tape = tape_of(pred, target);
  require_same_shape("masked_mse", pred, target);
  require(pred.rank() >= 1 && mask.size() == pred.dim(0), ErrorCode::Shape,
          "masked_mse: mask length must equal the row count");
  const std::size_t N = pred.dim(0);
  const std::size_t S = N ? pred.size() / N : 0;
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  require(count > 0, ErrorCode::InvalidConfig, "masked_mse: mask selects no rows");
  const T denom = T(count * S);
  T total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < S; ++j) {
      const T d = pred.data()[i * S + j] - target.data()[i * S + j];
      total += d * d;
    }
  }
  NodePtr<T> pp = pred.shared(), pt = target.shared();
  std::vector<std::uint8_t> rows(mask.begin(), mask.end());
  return tape.record("masked_mse", Shape{}, {total / denom},
                     pred.requires_grad() || target.requires_grad(),
                     [pp, pt, rows = std::move(rows), S, denom](detail::Node<T>& self) {
                       const T k = T(2) * self.grad[0] / denom;
                       std::span<T> gp, gt;
                       if (pp->requires_grad) gp = pp->grad_buffer();
                       if (pt->requires_grad) gt = pt->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         if (!rows[i]) continue;
                         for (std::size_t j = 0; j < S; ++j) {
                           const std::size_t idx = i * S + j;
                           const T d = k * (pp->value[idx] - pt->value[idx]);
                           if (!gp.empty()) gp[idx] += d;
                           if (!gt.empty()) gt[idx] -= d;
                         }
                       }
                     });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  require(labels.size() == B && B > 0, ErrorCode::Shape,
          "cross_entropy: need one label per logits row");
  std::vector<T> prob(B * C);
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    require(labels[b] < C, ErrorCode::Data, "cross_entropy: label out of range");
    const T* row = logits.data().data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) {
      prob[b * C + c] = std::exp(row[c] - mx);
      s += prob[b * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= s;
    total += std::log(s) + mx - row[labels[b]];
  }
  NodePtr<T> pl = logits.shared();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape().record(
      "cross_entropy", Shape{}, {total / T(B)}, logits.requires_grad(),
      [pl, B, C, prob = std::move(prob), lab = std::move(lab)](detail::Node<T>& self) {
        auto g = pl->grad_buffer();
        const T k = self.grad[0] / T(B);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            g[b * C + c] += k * (prob[b * C + c] - (c == lab[b] ? T(1) : T(0)));
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), ErrorCode::Shape,
          "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  NodePtr<T> px = x.shared();
  return x.tape().record("reshape", std::move(shape), std::move(out), x.requires_grad(),
                         [px](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                         });
}

namespace {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::Shape, "concat: no inputs");
  const Shape& ref = parts[0].shape();
  require(axis < ref.size(), ErrorCode::Shape, "concat: axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  bool req = false;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    tape_of(parts[0], p);
    require(p.rank() == ref.size(), ErrorCode::Shape, "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      require(i == axis || p.dim(i) == ref[i], ErrorCode::Shape,
              "concat: incompatible shape " + shape_string(p.shape()));
    shape[axis] += p.dim(axis);
    req = req || p.requires_grad();
    nodes.push_back(p.shared());
  }
  const AxisSplit total = split_at(shape, axis);
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const AxisSplit s = split_at(p.shape(), axis);
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(p.data().begin() + o * s.extent * s.inner, s.extent * s.inner,
                  out.begin() + (o * total.extent + offset) * total.inner);
    offset += s.extent;
  }
  return parts[0].tape().record(
      "concat", std::move(shape), std::move(out), req,
      [nodes = std::move(nodes), axis, total](detail::Node<T>& self) {
        std::size_t offset = 0;
        for (const auto& p : nodes) {
          const AxisSplit s = split_at(p->shape, axis);
          if (p->requires_grad) {
            auto g = p->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o)
              for (std::size_t i = 0; i < s.extent * s.inner; ++i)
                g[o * s.extent * s.inner + i] +=
                    self.grad[(o * total.extent + offset) * total.inner + i];
          }
          offset += s.extent;
        }
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < x.rank() && begin < end && end <= x.dim(axis), ErrorCode::Shape,
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") invalid for axis " + std::to_string(axis) + " of " + shape_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.data().begin() + (o * s.extent + begin) * s.inner, len * s.inner,
                out.begin() + o * len * s.inner);
  NodePtr<T> px = x.shared();
  return x.tape().record("slice", std::move(shape), std::move(out), x.requires_grad(),
                         [px, s, begin, len](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t i = 0; i < len * s.inner; ++i)
                               g[(o * s.extent + begin) * s.inner + i] += self.grad[o * len * s.inner + i];
                         });
}

template <class T>
Tensor<T> index_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require(x.rank() >= 1 && !rows.empty(), ErrorCode::Shape, "index_rows: need rows to select");
  const std::size_t N = x.dim(0);
  const std::size_t width = x.size() / N;
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<T> out(rows.size() * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < N, ErrorCode::Shape, "index_rows: row index out of range");
    std::copy_n(x.data().begin() + rows[i] * width, width, out.begin() + i * width);
  }
  NodePtr<T> px = x.shared();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().record("index_rows", std::move(shape), std::move(out), x.requires_grad(),
                         [px, width, idx = std::move(idx)](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < width; ++j)
                               g[idx[i] * width + j] += self.grad[i * width + j];
                         });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  NodePtr<T> px = x.shared();
  return x.tape().record("sum", Shape{}, {s}, x.requires_grad(), [px](detail::Node<T>& self) {
    auto g = px->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.size() > 0, ErrorCode::Shape, "mean: empty tensor");
  return scale(sum(x), T(1) / T(x.size()));
}

template <class T>
Tensor<T> mean_last(const Tensor<T>& x) {
  require(x.rank() >= 1 && x.shape().back() > 0, ErrorCode::Shape, "mean_last: needs rank >= 1");
  const std::size_t N = x.shape().back();
  const std::size_t R = x.size() / N;
  std::vector<T> out(R, T(0));
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < N; ++j) out[r] += x.data()[r * N + j];
    out[r] /= T(N);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  NodePtr<T> px = x.shared();
  return x.tape().record("mean_last", std::move(shape), std::move(out), x.requires_grad(),
                         [px, N](detail::Node<T>& self) {
                           auto g = px->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / N] / T(N);
                         });
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const GradCheckFn& f, const Array<double>& x, double eps) {
  require(eps > 0.0, ErrorCode::InvalidConfig, "grad_check: eps must be positive");
  std::vector<double> analytic(x.size(), 0.0);
  std::uint64_t base_sig = 0;
  {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    require(y.size() == 1, ErrorCode::Shape, "grad_check: function must be scalar-valued");
    tape.backward(y);
    if (!xv.grad().empty()) analytic.assign(xv.grad().begin(), xv.grad().end());
    base_sig = tape.kink_signature();
  }
  auto probe = [&](const Array<double>& at, std::uint64_t& sig) {
    Tape<double> tape;
    auto y = f(tape, tape.constant(at));
    sig = tape.kink_signature();
    return y.item();
  };
  GradCheckResult res;
  Array<double> shifted = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::uint64_t sig_p = 0, sig_m = 0;
    shifted[i] = x[i] + eps;
    const double fp = probe(shifted, sig_p);
    shifted[i] = x[i] - eps;
    const double fm = probe(shifted, sig_m);
    shifted[i] = x[i];
    if (sig_p != base_sig || sig_m != base_sig) {
      ++res.skipped;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    require(std::isfinite(numeric), ErrorCode::Numeric, "grad_check: non-finite difference");
    const double err = std::abs(analytic[i] - numeric) /
                       std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    res.max_rel_error = std::max(res.max_rel_error, err);
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------

#define ECGSL_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t,         \
                            const Tensor<T>*);                                                    \
  template Tensor<T> conv1d_transpose(const Tensor<T>&, const Tensor<T>&, std::size_t,            \
                                      std::size_t, std::size_t, const Tensor<T>*);                \
  template Tensor<T> max_pool1d(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                   \
  template Tensor<T> tanh(const Tensor<T>&);                                                      \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>);             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64*);                   \
  template Tensor<T> masked_mse(const Tensor<T>&, const Tensor<T>&,                               \
                                std::span<const std::uint8_t>);                                   \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                             \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);              \
  template Tensor<T> index_rows(const Tensor<T>&, std::span<const std::size_t>);                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> mean_last(const Tensor<T>&);

ECGSL_INSTANTIATE_OPS(float)
ECGSL_INSTANTIATE_OPS(double)

#undef ECGSL_INSTANTIATE_OPS

}  // namespace ecgsl
