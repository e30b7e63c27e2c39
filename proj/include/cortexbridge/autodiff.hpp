#pragma once

#include <functional>
#include <memory>
#include <vector>

namespace cortexbridge::ad {

// Fixed-structure sparse matrix (CSR), shared across training steps.
struct SparseMat {
    int rows = 0, cols = 0;
    std::vector<int> row_ptr;
    std::vector<int> col;
    std::vector<double> w;
};

// Append-only tape of tensor nodes; ids are creation order, so reverse
// iteration is a valid reverse-topological sweep. The tape is rebuilt per
// training step; parameters live outside and are copied in as inputs.
class Tape {
  public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> val;
        std::vector<double> grad;
        bool needs = false;
        std::function<void()> back;
    };

    int input(std::vector<int> shape, const double* data, bool needs_grad);
    int constant(std::vector<int> shape, const double* data);
    int zeros(std::vector<int> shape, bool needs_grad);

    const Node& node(int id) const { return nodes_[size_t(id)]; }
    const std::vector<double>& val(int id) const { return nodes_[size_t(id)].val; }
    const std::vector<double>& grad(int id) const { return nodes_[size_t(id)].grad; }
    const std::vector<int>& shape(int id) const { return nodes_[size_t(id)].shape; }
    double scalar(int id) const;

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int div(int a, int b);
    int add_scalar(int a, double c);
    int mul_scalar(int a, double c);
    int silu(int a);
    int sigmoid(int a);
    int exp_op(int a);
    int log_op(int a);       // caller guarantees positive inputs
    int softplus(int a);
    int signed_pow(int a, double e);

    int reshape(int a, std::vector<int> shape);
    int transpose2(int a);              // [m,n] -> [n,m]
    int row_scale(int a, int s);        // a[i,j] * s[i], s shape [m]
    int concat_channels(int a, int b);  // NCHW along C
    int upsample2(int a);               // NCHW nearest-neighbor x2
    int add_bias(int a, int bias);      // bias per channel over NCHW

    int matmul(int a, int b);  // [m,k] x [k,n]
    int conv2d(int x, int w, int bias, int stride, int pad);  // x NCHW, w FCkk
    int sparse_apply(std::shared_ptr<const SparseMat> s, int x);  // flat in/out
    int dot_const(int x, std::vector<double> weights);           // scalar out

    int sum(int a);
    int mean(int a);
    int batch_mean(int a);  // mean over dim 0, replicated back to full shape
    // Mean over rows of logsumexp(row) - diagonal entry, for square logits.
    int cross_entropy_rows(int logits);

    void backward(int loss);
    int n_nodes() const { return int(nodes_.size()); }

  private:
    int push(Node n);
    std::vector<Node> nodes_;
};

int numel(const std::vector<int>& shape);

}  // namespace cortexbridge::ad
