#include "dgseg/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace dgseg::ag {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Var make(Mat v, std::vector<Var> parents, std::function<void(Node&)> bf) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->needs_grad) n->needs_grad = true;
  if (n->needs_grad) n->backward_fn = std::move(bf);
  return n;
}

void accum(const Var& p, const Mat& g) {
  if (!p->needs_grad) return;
  p->ensure_grad();
  p->grad += g;
}

}  // namespace

Var constant(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var param(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->needs_grad = true;
  return n;
}

void backward(const Var& root) {
  check(root != nullptr, "backward: null root");
  check(root->value.rows() == 1 && root->value.cols() == 1,
        "backward: root must be a 1x1 scalar node");
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    // A node can end up with no seeded grad when every consumer had an
    // exactly-zero subgradient for it (e.g. norm2 at the origin); skip it.
    if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  check(a->value.rows() == b->value.rows() &&
            a->value.cols() == b->value.cols(),
        "add: shape mismatch");
  return make(a->value + b->value, {a, b}, [](Node& s) {
    accum(s.parents[0], s.grad);
    accum(s.parents[1], s.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check(a->value.rows() == b->value.rows() &&
            a->value.cols() == b->value.cols(),
        "sub: shape mismatch");
  return make(a->value - b->value, {a, b}, [](Node& s) {
    accum(s.parents[0], s.grad);
    accum(s.parents[1], -s.grad);
  });
}

Var cmul(const Var& a, const Var& b) {
  check(a->value.rows() == b->value.rows() &&
            a->value.cols() == b->value.cols(),
        "cmul: shape mismatch");
  return make(a->value.cwiseProduct(b->value), {a, b}, [](Node& s) {
    accum(s.parents[0], s.grad.cwiseProduct(s.parents[1]->value));
    accum(s.parents[1], s.grad.cwiseProduct(s.parents[0]->value));
  });
}

Var cdiv(const Var& a, const Var& b) {
  check(a->value.rows() == b->value.rows() &&
            a->value.cols() == b->value.cols(),
        "cdiv: shape mismatch");
  return make(a->value.cwiseQuotient(b->value), {a, b}, [](Node& s) {
    const Mat& bv = s.parents[1]->value;
    accum(s.parents[0], s.grad.cwiseQuotient(bv));
    accum(s.parents[1], -s.grad.cwiseProduct(s.value).cwiseQuotient(bv));
  });
}

Var matmul(const Var& a, const Var& b) {
  check(a->value.cols() == b->value.rows(), "matmul: inner dim mismatch");
  return make(a->value * b->value, {a, b}, [](Node& s) {
    const Var& a = s.parents[0];
    const Var& b = s.parents[1];
    if (a->needs_grad) {
      a->ensure_grad();
      a->grad.noalias() += s.grad * b->value.transpose();
    }
    if (b->needs_grad) {
      b->ensure_grad();
      b->grad.noalias() += a->value.transpose() * s.grad;
    }
  });
}

Var transpose(const Var& a) {
  return make(a->value.transpose(), {a},
              [](Node& s) { accum(s.parents[0], s.grad.transpose()); });
}

Var scale(const Var& a, Scalar s) {
  return make(a->value * s, {a},
              [s](Node& n) { accum(n.parents[0], n.grad * s); });
}

Var add_scalar(const Var& a, Scalar s) {
  return make(a->value.array() + s, {a},
              [](Node& n) { accum(n.parents[0], n.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_colvec(const Var& a, const Var& v) {
  check(v->value.cols() == 1 && v->value.rows() == a->value.rows(),
        "add_colvec: v must be (rows(a) x 1)");
  return make(a->value.colwise() + Eigen::VectorXd(v->value.col(0)), {a, v},
              [](Node& s) {
                accum(s.parents[0], s.grad);
                accum(s.parents[1], s.grad.rowwise().sum());
              });
}

Var mul_colvec(const Var& a, const Var& v) {
  check(v->value.cols() == 1 && v->value.rows() == a->value.rows(),
        "mul_colvec: v must be (rows(a) x 1)");
  Mat out = a->value.array().colwise() * v->value.col(0).array();
  return make(std::move(out), {a, v}, [](Node& s) {
    const Mat& av = s.parents[0]->value;
    const Mat& vv = s.parents[1]->value;
    accum(s.parents[0], s.grad.array().colwise() * vv.col(0).array());
    accum(s.parents[1], s.grad.cwiseProduct(av).rowwise().sum());
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  const Index rows = parts[0]->value.rows();
  Index cols = 0;
  for (const auto& p : parts) {
    check(p->value.rows() == rows, "concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Mat out(rows, cols);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p->value.cols()) = p->value;
    off += p->value.cols();
  }
  return make(std::move(out), parts, [](Node& s) {
    Index off = 0;
    for (auto& p : s.parents) {
      const Index n = p->value.cols();
      accum(p, s.grad.middleCols(off, n));
      off += n;
    }
  });
}

Var slice_cols(const Var& a, Index start, Index n) {
  check(start >= 0 && n >= 0 && start + n <= a->value.cols(),
        "slice_cols: out of range");
  return make(a->value.middleCols(start, n), {a}, [start, n](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    p->grad.middleCols(start, n) += s.grad;
  });
}

Var slice_rows(const Var& a, Index start, Index n) {
  check(start >= 0 && n >= 0 && start + n <= a->value.rows(),
        "slice_rows: out of range");
  return make(a->value.middleRows(start, n), {a}, [start, n](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    p->grad.middleRows(start, n) += s.grad;
  });
}

Var relu(const Var& a) {
  return make(a->value.cwiseMax(0.0), {a}, [](Node& s) {
    const Mat mask =
        (s.parents[0]->value.array() > 0.0).cast<Scalar>().matrix();
    accum(s.parents[0], s.grad.cwiseProduct(mask));
  });
}

Var gelu(const Var& a) {
  const Mat phi = a->value.unaryExpr(
      [](Scalar v) { return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)); });
  Mat out = a->value.cwiseProduct(phi);
  return make(std::move(out), {a}, [phi](Node& s) {
    const auto& x = s.parents[0]->value.array();
    const Mat d =
        (phi.array() +
         x * (-0.5 * x.square()).exp() * (1.0 / std::sqrt(2.0 * M_PI)))
            .matrix();
    accum(s.parents[0], s.grad.cwiseProduct(d));
  });
}

Var sigmoid(const Var& a) {
  Mat out = 0.5 + 0.5 * (0.5 * a->value.array()).tanh();
  return make(std::move(out), {a}, [](Node& s) {
    const Mat d = s.value.array() * (1.0 - s.value.array());
    accum(s.parents[0], s.grad.cwiseProduct(d));
  });
}

Var softmax_cols(const Var& a) {
  Mat out = a->value;
  for (Index j = 0; j < out.cols(); ++j) {
    const Scalar mx = out.col(j).maxCoeff();
    out.col(j) = (out.col(j).array() - mx).exp();
    out.col(j) /= out.col(j).sum();
  }
  return make(std::move(out), {a}, [](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    Mat g(s.value.rows(), s.value.cols());
    for (Index j = 0; j < s.value.cols(); ++j) {
      const Scalar dot = s.grad.col(j).dot(s.value.col(j));
      g.col(j) =
          s.value.col(j).cwiseProduct(s.grad.col(j) - Vec::Constant(s.value.rows(), dot));
    }
    accum(p, g);
  });
}

Var masked_softmax_cols(const Var& a, const Mat& mask) {
  check(mask.rows() == a->value.rows() && mask.cols() == a->value.cols(),
        "masked_softmax_cols: mask shape mismatch");
  Mat out = Mat::Zero(a->value.rows(), a->value.cols());
  for (Index j = 0; j < out.cols(); ++j) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < out.rows(); ++i)
      if (mask(i, j) != 0.0) mx = std::max(mx, a->value(i, j));
    check(std::isfinite(mx),
          "masked_softmax_cols: column " + std::to_string(j) +
              " has no allowed entries");
    Scalar z = 0.0;
    for (Index i = 0; i < out.rows(); ++i)
      if (mask(i, j) != 0.0) {
        out(i, j) = std::exp(a->value(i, j) - mx);
        z += out(i, j);
      }
    out.col(j) /= z;
  }
  return make(std::move(out), {a}, [](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    Mat g(s.value.rows(), s.value.cols());
    for (Index j = 0; j < s.value.cols(); ++j) {
      const Scalar dot = s.grad.col(j).dot(s.value.col(j));
      g.col(j) = s.value.col(j).cwiseProduct(
          s.grad.col(j) - Vec::Constant(s.value.rows(), dot));
    }
    accum(p, g);
  });
}

Var masked_lse_cols(const Var& a, const Mat& mask) {
  check(mask.rows() == a->value.rows() && mask.cols() == a->value.cols(),
        "masked_lse_cols: mask shape mismatch");
  const Index n = a->value.cols();
  Mat out(1, n);
  Mat probs = Mat::Zero(a->value.rows(), n);
  for (Index j = 0; j < n; ++j) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < a->value.rows(); ++i)
      if (mask(i, j) != 0.0) mx = std::max(mx, a->value(i, j));
    check(std::isfinite(mx), "masked_lse_cols: column " + std::to_string(j) +
                                 " has no allowed entries");
    Scalar z = 0.0;
    for (Index i = 0; i < a->value.rows(); ++i)
      if (mask(i, j) != 0.0) {
        probs(i, j) = std::exp(a->value(i, j) - mx);
        z += probs(i, j);
      }
    probs.col(j) /= z;
    out(0, j) = mx + std::log(z);
  }
  return make(std::move(out), {a}, [probs](Node& s) {
    Mat g = probs;
    for (Index j = 0; j < g.cols(); ++j) g.col(j) *= s.grad(0, j);
    accum(s.parents[0], g);
  });
}

Var layernorm_cols(const Var& a, const Var& gamma, const Var& beta,
                   Scalar eps) {
  const Index rows = a->value.rows();
  check(gamma->value.rows() == rows && gamma->value.cols() == 1 &&
            beta->value.rows() == rows && beta->value.cols() == 1,
        "layernorm_cols: gain/bias must be (rows x 1)");
  check(rows >= 2, "layernorm_cols: needs at least 2 features");
  const Index cols = a->value.cols();
  Mat xhat(rows, cols);
  Vec inv_std(cols);
  for (Index j = 0; j < cols; ++j) {
    const Scalar mu = a->value.col(j).mean();
    const Scalar var =
        (a->value.col(j).array() - mu).square().sum() / static_cast<Scalar>(rows);
    inv_std(j) = 1.0 / std::sqrt(var + eps);
    xhat.col(j) = (a->value.col(j).array() - mu) * inv_std(j);
  }
  Mat out = (xhat.array().colwise() * gamma->value.col(0).array()).colwise() +
            beta->value.col(0).array();
  return make(std::move(out), {a, gamma, beta}, [xhat, inv_std](Node& s) {
    const Var& a = s.parents[0];
    const Var& gamma = s.parents[1];
    const Var& beta = s.parents[2];
    const Index rows = xhat.rows();
    accum(beta, s.grad.rowwise().sum());
    accum(gamma, s.grad.cwiseProduct(xhat).rowwise().sum());
    if (!a->needs_grad) return;
    Mat g(rows, xhat.cols());
    for (Index j = 0; j < xhat.cols(); ++j) {
      const Vec h = s.grad.col(j).cwiseProduct(gamma->value.col(0));
      const Scalar mh = h.mean();
      const Scalar mhx = h.dot(xhat.col(j)) / static_cast<Scalar>(rows);
      g.col(j) = (h.array() - mh - xhat.col(j).array() * mhx) * inv_std(j);
    }
    accum(a, g);
  });
}

Var l2normalize_cols(const Var& a, Scalar eps) {
  const Index cols = a->value.cols();
  Mat out(a->value.rows(), cols);
  Vec norms(cols);
  for (Index j = 0; j < cols; ++j) {
    norms(j) = std::max(a->value.col(j).norm(), eps);
    out.col(j) = a->value.col(j) / norms(j);
  }
  return make(std::move(out), {a}, [norms, eps](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    Mat g(s.value.rows(), s.value.cols());
    for (Index j = 0; j < s.value.cols(); ++j) {
      if (p->value.col(j).norm() > eps) {
        const Scalar dot = s.grad.col(j).dot(s.value.col(j));
        g.col(j) = (s.grad.col(j) - s.value.col(j) * dot) / norms(j);
      } else {
        g.col(j) = s.grad.col(j) / norms(j);
      }
    }
    accum(p, g);
  });
}

Var rowsum(const Var& a) {
  return make(a->value.rowwise().sum(), {a}, [](Node& s) {
    accum(s.parents[0],
          s.grad * Mat::Ones(1, s.parents[0]->value.cols()));
  });
}

Var colsum(const Var& a) {
  return make(a->value.colwise().sum(), {a}, [](Node& s) {
    accum(s.parents[0],
          Mat::Ones(s.parents[0]->value.rows(), 1) * s.grad);
  });
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a->value.sum();
  return make(std::move(out), {a}, [](Node& s) {
    const Var& p = s.parents[0];
    accum(p, Mat::Constant(p->value.rows(), p->value.cols(), s.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const Scalar n = static_cast<Scalar>(a->value.size());
  check(n > 0, "mean: empty input");
  Mat out(1, 1);
  out(0, 0) = a->value.sum() / n;
  return make(std::move(out), {a}, [n](Node& s) {
    const Var& p = s.parents[0];
    accum(p,
          Mat::Constant(p->value.rows(), p->value.cols(), s.grad(0, 0) / n));
  });
}

Var ce_cols(const Var& logits, const std::vector<int>& targets) {
  const Index K = logits->value.rows();
  const Index n = logits->value.cols();
  check(static_cast<Index>(targets.size()) == n,
        "ce_cols: one target per column required");
  Mat probs(K, n);
  Index valid = 0;
  Scalar total = 0.0;
  for (Index j = 0; j < n; ++j) {
    const Scalar mx = logits->value.col(j).maxCoeff();
    probs.col(j) = (logits->value.col(j).array() - mx).exp();
    const Scalar z = probs.col(j).sum();
    probs.col(j) /= z;
    const int t = targets[static_cast<std::size_t>(j)];
    if (t < 0) continue;
    check(t < K, "ce_cols: target out of range");
    total += mx + std::log(z) - logits->value(t, j);
    ++valid;
  }
  Mat out(1, 1);
  out(0, 0) = valid > 0 ? total / static_cast<Scalar>(valid) : 0.0;
  if (valid == 0) return constant(std::move(out));
  return make(std::move(out), {logits},
              [probs, targets, valid](Node& s) {
                const Var& p = s.parents[0];
                if (!p->needs_grad) return;
                Mat g = Mat::Zero(probs.rows(), probs.cols());
                const Scalar w = s.grad(0, 0) / static_cast<Scalar>(valid);
                for (Index j = 0; j < probs.cols(); ++j) {
                  const int t = targets[static_cast<std::size_t>(j)];
                  if (t < 0) continue;
                  g.col(j) = probs.col(j) * w;
                  g(t, j) -= w;
                }
                accum(p, g);
              });
}

namespace {

Mat sigmoid_arr(const Mat& x) {
  return 0.5 + 0.5 * (0.5 * x.array()).tanh();
}

Mat softplus_arr(const Mat& x) {
  return x.array().max(0.0) + (-x.array().abs()).exp().log1p();
}

}  // namespace

Var bce_logits(const Var& x, const Mat& targets, const Mat& weights) {
  check(targets.rows() == x->value.rows() &&
            targets.cols() == x->value.cols(),
        "bce_logits: target shape mismatch");
  check(weights.rows() == x->value.rows() &&
            weights.cols() == x->value.cols(),
        "bce_logits: weight shape mismatch");
  const Scalar W = weights.sum();
  Mat out(1, 1);
  if (W <= 0.0) {
    out(0, 0) = 0.0;
    return constant(std::move(out));
  }
  out(0, 0) = (weights.array() * (softplus_arr(x->value).array() -
                                  targets.array() * x->value.array()))
                  .sum() /
              W;
  return make(std::move(out), {x}, [targets, weights, W](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    const Mat g =
        weights.array() * (sigmoid_arr(p->value).array() - targets.array());
    accum(p, g * (s.grad(0, 0) / W));
  });
}

Var bce_logits_soft(const Var& x, const Var& t) {
  check(t->value.rows() == x->value.rows() &&
            t->value.cols() == x->value.cols(),
        "bce_logits_soft: shape mismatch");
  const Scalar n = static_cast<Scalar>(x->value.size());
  check(n > 0, "bce_logits_soft: empty input");
  Mat out(1, 1);
  out(0, 0) = (softplus_arr(x->value).array() -
               t->value.array() * x->value.array())
                  .sum() /
              n;
  return make(std::move(out), {x, t}, [n](Node& s) {
    const Var& x = s.parents[0];
    const Var& t = s.parents[1];
    const Scalar w = s.grad(0, 0) / n;
    if (x->needs_grad)
      accum(x, (sigmoid_arr(x->value) - t->value) * w);
    accum(t, -x->value * w);
  });
}

Var dice_loss(const Var& x, const Mat& targets, const Mat& weights,
              Scalar smooth) {
  check(targets.rows() == x->value.rows() &&
            targets.cols() == x->value.cols(),
        "dice_loss: target shape mismatch");
  check(weights.rows() == x->value.rows() &&
            weights.cols() == x->value.cols(),
        "dice_loss: weight shape mismatch");
  const Index R = x->value.rows();
  check(R > 0, "dice_loss: empty input");
  const Mat p = sigmoid_arr(x->value);
  const Mat pw = p.cwiseProduct(weights);
  const Vec num =
      2.0 * pw.cwiseProduct(targets).rowwise().sum().array() + smooth;
  const Vec den = (pw.rowwise().sum() +
                   targets.cwiseProduct(weights).rowwise().sum())
                      .array() +
                  smooth;
  Mat out(1, 1);
  out(0, 0) =
      (1.0 - num.array() / den.array()).sum() / static_cast<Scalar>(R);
  return make(std::move(out), {x},
              [p, num, den, targets, weights, R](Node& s) {
                const Var& xv = s.parents[0];
                if (!xv->needs_grad) return;
                const Scalar w0 = s.grad(0, 0) / static_cast<Scalar>(R);
                const Vec inv_den = den.cwiseInverse();
                const Vec num_d2 = num.cwiseProduct(inv_den).cwiseProduct(inv_den);
                const Mat coeff = num_d2.replicate(1, p.cols()) -
                                  2.0 * (targets.array().colwise() *
                                         inv_den.array())
                                            .matrix();
                Mat g = (coeff.array() * weights.array() * p.array() *
                         (1.0 - p.array()) * w0)
                            .matrix();
                accum(xv, g);
              });
}

Var jsd_softmax_pair(const Var& a, const Var& b) {
  check(a->value.rows() == b->value.rows() &&
            a->value.cols() == b->value.cols(),
        "jsd_softmax_pair: shape mismatch");
  const Index K = a->value.rows();
  const Index n = a->value.cols();
  check(n > 0 && K > 0, "jsd_softmax_pair: empty input");
  auto soft = [K](const Mat& m, Index j) {
    Vec p = m.col(j);
    const Scalar mx = p.maxCoeff();
    p = (p.array() - mx).exp();
    p /= p.sum();
    (void)K;
    return p;
  };
  Mat P(K, n), Q(K, n);
  Scalar total = 0.0;
  for (Index j = 0; j < n; ++j) {
    P.col(j) = soft(a->value, j);
    Q.col(j) = soft(b->value, j);
    for (Index i = 0; i < K; ++i) {
      const Scalar p = P(i, j), q = Q(i, j), m = 0.5 * (p + q);
      if (p > 0.0) total += 0.5 * p * std::log(p / m);
      if (q > 0.0) total += 0.5 * q * std::log(q / m);
    }
  }
  Mat out(1, 1);
  out(0, 0) = std::min(std::max(total / static_cast<Scalar>(n), 0.0),
                       std::log(2.0));
  return make(std::move(out), {a, b}, [P, Q](Node& s) {
    const Scalar w = s.grad(0, 0) / static_cast<Scalar>(P.cols());
    auto chain = [&](const Var& x, const Mat& Pm, const Mat& Qm) {
      if (!x->needs_grad) return;
      Mat g(Pm.rows(), Pm.cols());
      for (Index j = 0; j < Pm.cols(); ++j) {
        Vec gp(Pm.rows());
        for (Index i = 0; i < Pm.rows(); ++i) {
          const Scalar p = Pm(i, j), m = 0.5 * (p + Qm(i, j));
          gp(i) = p > 0.0 ? 0.5 * std::log(p / m) : 0.0;
        }
        const Scalar dot = gp.dot(Pm.col(j));
        g.col(j) = Pm.col(j).cwiseProduct(gp - Vec::Constant(Pm.rows(), dot)) * w;
      }
      accum(x, g);
    };
    chain(s.parents[0], P, Q);
    chain(s.parents[1], Q, P);
  });
}

Var norm2(const Var& a) {
  const Scalar m = a->value.norm();
  Mat out(1, 1);
  out(0, 0) = m;
  return make(std::move(out), {a}, [m](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    if (m > 1e-12) accum(p, p->value * (s.grad(0, 0) / m));
  });
}

Var gather_cols(const Var& a, std::shared_ptr<const GatherPlan> plan) {
  check(plan != nullptr, "gather_cols: null plan");
  check(plan->idx.size() == plan->w.size(), "gather_cols: malformed plan");
  const Index n = static_cast<Index>(plan->idx.size());
  const Index rows = a->value.rows();
  Mat out(rows, n);
  for (Index j = 0; j < n; ++j) {
    const auto& ix = plan->idx[static_cast<std::size_t>(j)];
    const auto& wt = plan->w[static_cast<std::size_t>(j)];
    check(ix[0] >= 0 && ix[0] < a->value.cols() && ix[1] >= 0 &&
              ix[1] < a->value.cols() && ix[2] >= 0 &&
              ix[2] < a->value.cols() && ix[3] >= 0 && ix[3] < a->value.cols(),
          "gather_cols: plan index out of range");
    out.col(j) = wt[0] * a->value.col(ix[0]) + wt[1] * a->value.col(ix[1]) +
                 wt[2] * a->value.col(ix[2]) + wt[3] * a->value.col(ix[3]);
  }
  return make(std::move(out), {a}, [plan](Node& s) {
    const Var& p = s.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (Index j = 0; j < s.value.cols(); ++j) {
      const auto& ix = plan->idx[static_cast<std::size_t>(j)];
      const auto& wt = plan->w[static_cast<std::size_t>(j)];
      for (int k = 0; k < 4; ++k)
        p->grad.col(ix[static_cast<std::size_t>(k)]) +=
            wt[static_cast<std::size_t>(k)] * s.grad.col(j);
    }
  });
}

}  // namespace dgseg::ag
