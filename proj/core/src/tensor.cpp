#include "das/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "das/errors.hpp"

namespace das {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local MacCounterScope* g_mac_counter = nullptr;

// c (+)= a[p x q] * b[q x r], ikj order for unit-stride inner loops.
void mm_nn(const double* a, const double* b, double* c, std::size_t p,
           std::size_t q, std::size_t r, bool accumulate) {
  if (!accumulate) std::fill(c, c + p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    const double* arow = a + i * q;
    double* crow = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = arow[k];
      const double* brow = b + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c += a[p x q] * b^T where b is [r x q].
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t p,
               std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const double* arow = a + i * q;
    double* crow = c + i * r;
    for (std::size_t j = 0; j < r; ++j) {
      const double* brow = b + j * q;
      double acc = 0.0;
      for (std::size_t k = 0; k < q; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// c += a^T * b where a is [q x p], b is [q x r].
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t p,
               std::size_t q, std::size_t r) {
  for (std::size_t k = 0; k < q; ++k) {
    const double* arow = a + k * p;
    const double* brow = b + k * r;
    for (std::size_t i = 0; i < p; ++i) {
      const double aki = arow[i];
      double* crow = c + i * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
    }
  }
}

void record_if_tracked(const Tensor& out, std::function<void()> fn) {
  Tape* tape = Tape::current();
  if (tape != nullptr && out.requires_grad()) {
    tape->record(out, std::move(fn));
  }
}

bool tracked(const Tensor& t) {
  // Gradient flows through t if it is a target itself or was produced from
  // one (producers mark outputs requires_grad).
  return Tape::current() != nullptr && t.requires_grad() && !t.frozen();
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Tensor::Impl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until materialized
  bool requires_grad = false;
  bool frozen = false;
};

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ValidationError("tensor: " + std::to_string(values.size()) +
                          " values for shape " + shape_str(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw ValidationError("tensor: zero dimension in shape");
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

void Tensor::require_defined() const {
  if (!impl_) throw UsageError("tensor: use of default-constructed tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return impl_->shape;
}

std::size_t Tensor::numel() const {
  require_defined();
  return impl_->values.size();
}

std::size_t Tensor::rows() const {
  require_defined();
  if (impl_->shape.size() != 2) {
    throw UsageError("tensor: rows() on non-2D shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require_defined();
  if (impl_->shape.size() != 2) {
    throw UsageError("tensor: cols() on non-2D shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[1];
}

std::span<const double> Tensor::values() const {
  require_defined();
  return impl_->values;
}

std::span<double> Tensor::values_mut() {
  require_defined();
  return impl_->values;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined();
  if (impl_->grad.empty()) {
    throw UsageError("tensor: grad() before backward populated it");
  }
  return impl_->grad;
}

double Tensor::item() const {
  require_defined();
  if (impl_->values.size() != 1) {
    throw UsageError("tensor: item() on shape " + shape_str(impl_->shape));
  }
  return impl_->values[0];
}

bool Tensor::requires_grad() const {
  require_defined();
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool v) {
  require_defined();
  impl_->requires_grad = v;
}

bool Tensor::frozen() const {
  require_defined();
  return impl_->frozen;
}

void Tensor::set_frozen(bool v) {
  require_defined();
  impl_->frozen = v;
}

bool Tensor::wants_grad() const {
  return impl_ && impl_->requires_grad && !impl_->frozen;
}

void Tensor::zero_grad() {
  require_defined();
  impl_->grad.clear();
}

std::span<double> Tensor::grad_accum() {
  require_defined();
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

const void* Tensor::id() const { return impl_.get(); }

Tensor Tensor::clone() const {
  require_defined();
  Tensor out(impl_->shape, impl_->values, impl_->requires_grad);
  out.impl_->frozen = impl_->frozen;
  return out;
}

// --- Tape ---

Tape* Tape::current() { return g_current_tape; }

void Tape::clear() {
  nodes_.clear();
  produced_ids_.clear();
}

void Tape::record(const Tensor& out, std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
  produced_ids_.push_back(out.id());
}

bool Tape::produced(const Tensor& t) const {
  return std::find(produced_ids_.begin(), produced_ids_.end(), t.id()) !=
         produced_ids_.end();
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!produced(loss)) {
    throw UsageError("backward: tensor was not produced on this tape");
  }
  Tensor seed = loss;  // handle copy
  seed.grad_accum()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) {
  g_current_tape = &tape;
}

TapeScope::~TapeScope() { g_current_tape = prev_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw UsageError("backward: no active tape");
  tape->backward(loss);
}

// --- MAC counter ---

MacCounterScope::MacCounterScope() : prev_(g_mac_counter) {
  g_mac_counter = this;
}

MacCounterScope::~MacCounterScope() { g_mac_counter = prev_; }

void MacCounterScope::add(std::uint64_t macs) {
  if (g_mac_counter != nullptr) g_mac_counter->count_ += macs;
}

// --- Ops ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ValidationError("matmul: incompatible shapes " + shape_str(sa) +
                          " and " + shape_str(sb));
  }
  const std::size_t p = sa[0], q = sa[1], r = sb[1];
  Tensor out = Tensor::zeros({p, r});
  mm_nn(a.values().data(), b.values().data(), out.values_mut().data(), p, q, r,
        false);
  MacCounterScope::add(static_cast<std::uint64_t>(p) * q * r);

  if (tracked(a) || tracked(b)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [a = a, b = b, out = out, p, q, r]() mutable {
      auto gout = out.grad_accum();
      if (a.wants_grad()) {
        mm_nt_acc(gout.data(), b.values().data(), a.grad_accum().data(), p, r,
                  q);
      }
      if (b.wants_grad()) {
        mm_tn_acc(a.values().data(), gout.data(), b.grad_accum().data(), q, p,
                  r);
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError("add: shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];

  if (tracked(a) || tracked(b)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [a = a, b = b, out = out]() mutable {
      auto gout = out.grad_accum();
      if (a.wants_grad()) {
        auto ga = a.grad_accum();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
      }
      if (b.wants_grad()) {
        auto gb = b.grad_accum();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i];
      }
    });
  }
  return out;
}

Tensor add_bias_row(const Tensor& x, const Tensor& bias) {
  if (x.shape().size() != 2 || bias.shape().size() != 1 ||
      bias.shape()[0] != x.shape()[1]) {
    throw ValidationError("add_bias_row: shapes " + shape_str(x.shape()) +
                          " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto bv = bias.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      ov[i * cols + j] = xv[i * cols + j] + bv[j];
    }
  }

  if (tracked(x) || tracked(bias)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [x = x, bias = bias, out = out, rows, cols]() mutable {
      auto gout = out.grad_accum();
      if (x.wants_grad()) {
        auto gx = x.grad_accum();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
      }
      if (bias.wants_grad()) {
        auto gb = bias.grad_accum();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) gb[j] += gout[i * cols + j];
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;

  if (tracked(x)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [x = x, out = out]() mutable {
      if (!x.wants_grad()) return;
      auto gout = out.grad_accum();
      auto gx = x.grad_accum();
      auto xv2 = x.values();
      // Subgradient at exactly 0 is defined as 0.
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xv2[i] > 0.0) gx[i] += gout[i];
      }
    });
  }
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sigmoid(xv[i]);

  if (tracked(x)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [x = x, out = out]() mutable {
      if (!x.wants_grad()) return;
      auto gout = out.grad_accum();
      auto gx = x.grad_accum();
      auto ov2 = out.values();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += gout[i] * ov2[i] * (1.0 - ov2[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);

  if (tracked(x)) {
    out.set_requires_grad(true);
    record_if_tracked(out, [x = x, out = out]() mutable {
      if (!x.wants_grad()) return;
      const double g = out.grad_accum()[0];
      auto gx = x.grad_accum();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels) {
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (labels.size() != batch) {
    throw ValidationError("softmax_cross_entropy: " +
                          std::to_string(labels.size()) + " labels for batch " +
                          std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValidationError("softmax_cross_entropy: label " +
                            std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
  }

  auto lv = logits.values();
  std::vector<double> probs(batch * classes);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* row = lv.data() + i * classes;
    double mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      probs[i * classes + j] = std::exp(row[j] - mx);
      denom += probs[i * classes + j];
    }
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= denom;
    loss += std::log(denom) - (row[labels[i]] - mx);
  }
  loss /= static_cast<double>(batch);
  Tensor out = Tensor::scalar(loss);

  if (tracked(logits)) {
    out.set_requires_grad(true);
    record_if_tracked(
        out, [logits = logits, out = out, labels, probs = std::move(probs),
              batch, classes]() mutable {
          if (!logits.wants_grad()) return;
          const double g = out.grad_accum()[0] / static_cast<double>(batch);
          auto gl = logits.grad_accum();
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < classes; ++j) {
              double p = probs[i * classes + j];
              double target = (static_cast<std::size_t>(labels[i]) == j);
              gl[i * classes + j] += g * (p - target);
            }
          }
        });
  }
  return out;
}

// --- Parameter ---

Parameter::Parameter(Tensor t) : tensor_(std::move(t)) {
  tensor_.set_requires_grad(true);
}

bool Parameter::frozen() const { return tensor_.frozen(); }

void Parameter::freeze() {
  tensor_.set_frozen(true);
  tensor_.zero_grad();
}

void Parameter::unfreeze() { tensor_.set_frozen(false); }

}  // namespace das
