#pragma once

// Small dense/convolutional network toolkit with hand-written backprop.
// Samples are columns: a batch of B inputs of dimension D is a D x B matrix.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "vlmpref/error.hpp"

namespace vlmpref::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
struct ParamView {
  S* value;
  S* grad;
  Eigen::Index size;
};

template <class S>
class Layer {
 public:
  virtual ~Layer() = default;
  // `keep` caches whatever backward() needs.
  virtual Mat<S> forward(const Mat<S>& x, bool keep) = 0;
  // Accumulates parameter gradients (unless `param_grads` is false) and
  // returns d(loss)/d(input).
  virtual Mat<S> backward(const Mat<S>& dy, bool param_grads = true) = 0;
  virtual std::vector<ParamView<S>> params() { return {}; }
  [[nodiscard]] virtual std::unique_ptr<Layer> clone() const = 0;
};

template <class S>
class Linear final : public Layer<S> {
 public:
  Linear(int in, int out, std::mt19937_64& rng) : weight_(out, in), bias_(out), grad_w_(out, in), grad_b_(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<S>(u(rng));
    for (Eigen::Index i = 0; i < bias_.size(); ++i) bias_[i] = static_cast<S>(u(rng));
    grad_w_.setZero();
    grad_b_.setZero();
  }

  Mat<S> forward(const Mat<S>& x, bool keep) override {
    if (keep) input_ = x;
    Mat<S> y(weight_.rows(), x.cols());
    y.noalias() = weight_ * x;
    y.colwise() += bias_;
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, bool param_grads = true) override {
    if (param_grads) {
      grad_w_.noalias() += dy * input_.transpose();
      grad_b_ += dy.rowwise().sum();
    }
    Mat<S> dx(weight_.cols(), dy.cols());
    dx.noalias() = weight_.transpose() * dy;
    return dx;
  }

  std::vector<ParamView<S>> params() override {
    return {{weight_.data(), grad_w_.data(), weight_.size()}, {bias_.data(), grad_b_.data(), bias_.size()}};
  }

  [[nodiscard]] std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Linear>(*this); }

  Mat<S>& weight() { return weight_; }
  Vec<S>& bias() { return bias_; }

 private:
  Mat<S> weight_;
  Vec<S> bias_;
  Mat<S> grad_w_;
  Vec<S> grad_b_;
  Mat<S> input_;
};

template <class S>
class ReLU final : public Layer<S> {
 public:
  Mat<S> forward(const Mat<S>& x, bool keep) override {
    Mat<S> y = x.cwiseMax(S(0));
    if (keep) output_ = y;
    return y;
  }
  Mat<S> backward(const Mat<S>& dy, bool = true) override {
    return (output_.array() > S(0)).select(dy, S(0));
  }
  [[nodiscard]] std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  Mat<S> output_;
};

template <class S>
class Tanh final : public Layer<S> {
 public:
  Mat<S> forward(const Mat<S>& x, bool keep) override {
    Mat<S> y = x.array().tanh();
    if (keep) output_ = y;
    return y;
  }
  Mat<S> backward(const Mat<S>& dy, bool = true) override {
    return (dy.array() * (S(1) - output_.array().square())).matrix();
  }
  [[nodiscard]] std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Tanh>(*this); }

 private:
  Mat<S> output_;
};

struct ImageShape {
  int channels = 3;
  int height = 0;
  int width = 0;
  [[nodiscard]] int size() const { return channels * height * width; }
};

// Valid (unpadded) square convolution. Inputs and outputs are channel-major
// columns (C x H x W flattened).
template <class S>
class Conv2d final : public Layer<S> {
 public:
  Conv2d(ImageShape in, int out_channels, int kernel, int stride, std::mt19937_64& rng)
      : in_(in), kernel_(kernel), stride_(stride) {
    out_ = {out_channels, (in.height - kernel) / stride + 1, (in.width - kernel) / stride + 1};
    if (out_.height <= 0 || out_.width <= 0) throw Error("convolution input too small");
    const int fan_in = in.channels * kernel * kernel;
    weight_.resize(fan_in, out_channels);
    bias_.resize(out_channels);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<S>(u(rng));
    for (Eigen::Index i = 0; i < bias_.size(); ++i) bias_[i] = static_cast<S>(u(rng));
    grad_w_ = Mat<S>::Zero(weight_.rows(), weight_.cols());
    grad_b_ = Vec<S>::Zero(bias_.size());
  }

  [[nodiscard]] ImageShape output_shape() const { return out_; }

  Mat<S> forward(const Mat<S>& x, bool keep) override {
    if (x.rows() != in_.size()) throw Error("convolution input size mismatch");
    Mat<S> y(out_.size(), x.cols());
    if (keep) patches_.resize(static_cast<std::size_t>(x.cols()));
    Mat<S> patches;
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
      im2col(x.col(b), patches);
      Eigen::Map<Mat<S>> out(y.col(b).data(), out_.height * out_.width, out_.channels);
      out.noalias() = patches * weight_;
      out.rowwise() += bias_.transpose();
      if (keep) patches_[static_cast<std::size_t>(b)] = patches;
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& dy, bool param_grads = true) override {
    Mat<S> dx = Mat<S>::Zero(in_.size(), dy.cols());
    Mat<S> dpatches;
    for (Eigen::Index b = 0; b < dy.cols(); ++b) {
      Eigen::Map<const Mat<S>> dout(dy.col(b).data(), out_.height * out_.width, out_.channels);
      const auto& patches = patches_[static_cast<std::size_t>(b)];
      if (param_grads) {
        grad_w_.noalias() += patches.transpose() * dout;
        grad_b_ += dout.colwise().sum().transpose();
      }
      dpatches.noalias() = dout * weight_.transpose();
      col2im(dpatches, dx.col(b));
    }
    return dx;
  }

  std::vector<ParamView<S>> params() override {
    return {{weight_.data(), grad_w_.data(), weight_.size()}, {bias_.data(), grad_b_.data(), bias_.size()}};
  }

  [[nodiscard]] std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  template <class Col>
  void im2col(const Col& x, Mat<S>& patches) const {
    patches.resize(out_.height * out_.width, in_.channels * kernel_ * kernel_);
    for (int c = 0; c < in_.channels; ++c)
      for (int ky = 0; ky < kernel_; ++ky)
        for (int kx = 0; kx < kernel_; ++kx) {
          const int k = (c * kernel_ + ky) * kernel_ + kx;
          for (int oy = 0; oy < out_.height; ++oy)
            for (int ox = 0; ox < out_.width; ++ox) {
              const int iy = oy * stride_ + ky, ix = ox * stride_ + kx;
              patches(oy * out_.width + ox, k) = x((c * in_.height + iy) * in_.width + ix);
            }
        }
  }

  template <class Col>
  void col2im(const Mat<S>& dpatches, Col&& dx) const {
    for (int c = 0; c < in_.channels; ++c)
      for (int ky = 0; ky < kernel_; ++ky)
        for (int kx = 0; kx < kernel_; ++kx) {
          const int k = (c * kernel_ + ky) * kernel_ + kx;
          for (int oy = 0; oy < out_.height; ++oy)
            for (int ox = 0; ox < out_.width; ++ox) {
              const int iy = oy * stride_ + ky, ix = ox * stride_ + kx;
              dx((c * in_.height + iy) * in_.width + ix) += dpatches(oy * out_.width + ox, k);
            }
        }
  }

  ImageShape in_;
  ImageShape out_;
  int kernel_;
  int stride_;
  Mat<S> weight_;  // (C*k*k) x out_channels
  Vec<S> bias_;
  Mat<S> grad_w_;
  Vec<S> grad_b_;
  std::vector<Mat<S>> patches_;
};

template <class S>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& other) {
    if (this != &other) {
      layers_.clear();
      for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <class L>
  L& add(L layer) {
    auto p = std::make_unique<L>(std::move(layer));
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  Mat<S> forward(const Mat<S>& x, bool keep = false) {
    Mat<S> h = x;
    for (auto& l : layers_) h = l->forward(h, keep);
    return h;
  }

  // Evaluation forward that leaves cached activations untouched.
  [[nodiscard]] Mat<S> predict(const Mat<S>& x) const {
    Mat<S> h = x;
    for (const auto& l : layers_) h = l->forward(h, false);
    return h;
  }

  Mat<S> backward(const Mat<S>& dy, bool param_grads = true) {
    Mat<S> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, param_grads);
    return g;
  }

  std::vector<ParamView<S>> params() {
    std::vector<ParamView<S>> out;
    for (auto& l : layers_)
      for (auto& p : l->params()) out.push_back(p);
    return out;
  }

  [[nodiscard]] Eigen::Index num_params() const {
    Eigen::Index n = 0;
    for (auto& p : const_cast<Sequential*>(this)->params()) n += p.size;
    return n;
  }

  void zero_grad() {
    for (auto& p : params()) std::fill(p.grad, p.grad + p.size, S(0));
  }

  [[nodiscard]] Vec<S> flat_params() const {
    Vec<S> out(num_params());
    Eigen::Index o = 0;
    for (auto& p : const_cast<Sequential*>(this)->params()) {
      std::copy(p.value, p.value + p.size, out.data() + o);
      o += p.size;
    }
    return out;
  }

  [[nodiscard]] Vec<S> flat_grads() {
    Vec<S> out(num_params());
    Eigen::Index o = 0;
    for (auto& p : params()) {
      std::copy(p.grad, p.grad + p.size, out.data() + o);
      o += p.size;
    }
    return out;
  }

  void set_flat_params(const Vec<S>& v) {
    if (v.size() != num_params()) throw Error("parameter count mismatch");
    Eigen::Index o = 0;
    for (auto& p : params()) {
      std::copy(v.data() + o, v.data() + o + p.size, p.value);
      o += p.size;
    }
  }

  // Pointer to the i-th scalar parameter (flat order) and its gradient.
  std::pair<S*, S*> param_at(Eigen::Index i) {
    for (auto& p : params()) {
      if (i < p.size) return {p.value + i, p.grad + i};
      i -= p.size;
    }
    throw Error("parameter index out of range");
  }

  [[nodiscard]] std::size_t depth() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<S>>> layers_;
};

// Fully connected stack with ReLU between layers.
template <class S>
Sequential<S> make_mlp(int in, const std::vector<int>& hidden, int out, bool tanh_head, std::mt19937_64& rng) {
  Sequential<S> net;
  int prev = in;
  for (int h : hidden) {
    net.add(Linear<S>(prev, h, rng));
    net.add(ReLU<S>());
    prev = h;
  }
  net.add(Linear<S>(prev, out, rng));
  if (tanh_head) net.add(Tanh<S>());
  return net;
}

template <class S>
void write_params(std::ostream& out, const Vec<S>& v) {
  const std::uint64_t n = static_cast<std::uint64_t>(v.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(S) * v.size()));
}

template <class S>
Vec<S> read_params(std::istream& in) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  Vec<S> v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(S) * n));
  if (!in) throw Error("truncated checkpoint");
  return v;
}

// First/second-moment adaptive optimizer (bias-corrected).
template <class S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamView<S>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Vec<S>::Zero(p.size));
        v_.push_back(Vec<S>::Zero(p.size));
      }
    }
    if (m_.size() != params.size()) throw Error("optimizer parameter mismatch");
    ++t_;
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S c1 = static_cast<S>(1.0 - std::pow(beta1_, t_));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2_, t_));
    const S step = static_cast<S>(lr_) / c1;
    const S c2_sqrt = std::sqrt(c2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Eigen::Map<Vec<S>> value(params[i].value, params[i].size);
      Eigen::Map<const Vec<S>> grad(params[i].grad, params[i].size);
      m_[i] = b1 * m_[i] + (S(1) - b1) * grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * grad.cwiseProduct(grad);
      value.array() -= step * m_[i].array() / (v_[i].array().sqrt() / c2_sqrt + static_cast<S>(eps_));
    }
  }

  [[nodiscard]] double learning_rate() const { return lr_; }
  [[nodiscard]] long steps() const { return t_; }

  void save(std::ostream& out) const {
    const std::int64_t t = t_, n = static_cast<std::int64_t>(m_.size());
    out.write(reinterpret_cast<const char*>(&t), sizeof t);
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      write_params<S>(out, m_[i]);
      write_params<S>(out, v_[i]);
    }
  }

  void load(std::istream& in) {
    std::int64_t t = 0, n = 0;
    in.read(reinterpret_cast<char*>(&t), sizeof t);
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!in || n < 0) throw Error("truncated checkpoint");
    m_.assign(static_cast<std::size_t>(n), {});
    v_.assign(static_cast<std::size_t>(n), {});
    for (std::int64_t i = 0; i < n; ++i) {
      m_[static_cast<std::size_t>(i)] = read_params<S>(in);
      v_[static_cast<std::size_t>(i)] = read_params<S>(in);
    }
    t_ = static_cast<long>(t);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Vec<S>> m_, v_;
};

}  // namespace vlmpref::nn
