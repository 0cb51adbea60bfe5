#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dgseg/types.hpp"

namespace dgseg::ag {

// Reverse-mode autodiff over dense double matrices. Graphs are DAGs of
// shared_ptr-linked nodes; ops are free functions that build one node each.
// Tokens live in columns: a feature matrix is (feature_dim x n_tokens).
struct Node {
  Mat value;
  Mat grad;
  bool needs_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Mat::Zero(value.rows(), value.cols());
      grad_ready = true;
    }
  }
};

using Var = std::shared_ptr<Node>;

Var constant(Mat v);
Var param(Mat v);

// Runs backpropagation from a 1x1 root. Gradients accumulate into the
// `grad` field of every reachable node with needs_grad set.
void backward(const Var& root);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var cmul(const Var& a, const Var& b);
Var cdiv(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var scale(const Var& a, Scalar s);
Var add_scalar(const Var& a, Scalar s);
Var neg(const Var& a);

// Broadcast a column vector across all columns of a.
Var add_colvec(const Var& a, const Var& v);
Var mul_colvec(const Var& a, const Var& v);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index n);
Var slice_rows(const Var& a, Index start, Index n);

Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);

// Softmax over each column.
Var softmax_cols(const Var& a);
// Softmax over each column restricted to entries where mask != 0. The mask
// is a constant; every column must keep at least one allowed entry.
Var masked_softmax_cols(const Var& a, const Mat& mask);
// Row vector of log-sum-exp over the unmasked entries of each column.
Var masked_lse_cols(const Var& a, const Mat& mask);

// Per-column layer norm with per-feature gain and bias (rows x 1 each).
Var layernorm_cols(const Var& a, const Var& gamma, const Var& beta,
                   Scalar eps = 1e-5);
// Each column scaled to unit L2 norm (norm floored at eps).
Var l2normalize_cols(const Var& a, Scalar eps = 1e-12);

Var rowsum(const Var& a);
Var colsum(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);

// Cross entropy of softmax over each column against integer targets;
// targets[j] < 0 marks column j ignored. Mean over non-ignored columns;
// returns zero if every column is ignored.
Var ce_cols(const Var& logits, const std::vector<int>& targets);

// Binary cross entropy with logits against constant targets, as
// sum(w * (softplus(x) - t*x)) / sum(w); returns zero when sum(w) == 0.
Var bce_logits(const Var& x, const Mat& targets, const Mat& weights);

// Same loss but with a differentiable target node; plain mean over entries.
Var bce_logits_soft(const Var& x, const Var& t);

// Soft dice loss per row of x against constant binary targets, masked by w,
// averaged over rows: 1 - (2*sum(p.t.w)+s) / (sum(p.w)+sum(t.w)+s).
Var dice_loss(const Var& x, const Mat& targets, const Mat& weights,
              Scalar smooth = 1.0);

// Jensen-Shannon divergence between per-column softmaxes of two logit
// matrices, in nats, averaged over columns.
Var jsd_softmax_pair(const Var& a, const Var& b);

// Euclidean norm of all entries.
Var norm2(const Var& a);

// Sparse column gather: output column j is a fixed 4-tap weighted sum of
// input columns. Used for bilinear upsampling from a patch grid to pixels.
struct GatherPlan {
  std::vector<std::array<Index, 4>> idx;
  std::vector<std::array<Scalar, 4>> w;
};

Var gather_cols(const Var& a, std::shared_ptr<const GatherPlan> plan);

}  // namespace dgseg::ag
