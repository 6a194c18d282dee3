#pragma once

// Define-by-run reverse-mode differentiation over Tensor.
//
// A Graph is an append-only tape. Every primitive in `ops` appends one node
// whose inputs precede it, so append order is a valid topological order and
// backward() walks the tape once in reverse.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "h2dilr/tensor.hpp"

namespace h2dilr {

/// A named, persistent learnable tensor. Graphs reference parameters; they
/// never own them.
struct Parameter {
  std::string name;
  Tensor value;
  bool requires_grad = true;
};

using Gradients = std::unordered_map<const Parameter*, Tensor>;

class Graph;

/// Handle to a node on a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the node's own value and its gradient, and accumulates into the
/// gradients of inputs that require one (null entries are inputs that do not).
using BackwardFn =
    std::function<void(const Tensor& out, const Tensor& grad_out, std::vector<Tensor*>& grad_in)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is retrievable through grad() after backward().
  Var input(Tensor value, bool requires_grad = true);
  /// Leaf bound to a persistent parameter. A frozen parameter acts as a constant.
  Var parameter(Parameter& p);

  /// Appends a primitive result. Used by the ops below; throws NumericError if
  /// the value is not finite.
  Var push(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  /// Reverse pass from a scalar loss. Returns the gradient of every tracked
  /// parameter reached by the loss.
  Gradients backward(Var loss);

  /// Gradient of any node after backward(); zeros if the node received none.
  Tensor grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;  // stable element addresses while the tape grows
  std::vector<std::optional<Tensor>> grads_;
};

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
};

struct ConvTranspose1dOptions {
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t output_padding = 0;
};

std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, const Conv1dOptions& opt);
std::size_t conv_transpose1d_out_len(std::size_t len, std::size_t kernel, const ConvTranspose1dOptions& opt);

namespace ops {

Var relu(Var x);
Var gelu(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var sum(Var x);
Var mean(Var x);
/// Mean over axis 1 of a rank-3 tensor: [B, L, E] -> [B, E].
Var mean_tokens(Var x);
/// Mean of squared differences over all elements.
Var mse(Var a, Var b);
/// Mean over rows of -log softmax(logits)[label]; logits [B, C].
Var cross_entropy(Var logits, const std::vector<int>& labels);

/// Softmax over the last axis.
Var softmax(Var x);
/// Normalization over the last axis with affine gamma/beta of that length.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// x [..., in] times w^T [in, out] plus b [out].
Var linear(Var x, Var w, std::optional<Var> b);

/// x [B, Cin, T], w [Cout, Cin, K], b [Cout].
Var conv1d(Var x, Var w, std::optional<Var> b, const Conv1dOptions& opt);
/// x [B, Cin, T], w [Cin, Cout, K], b [Cout].
Var conv_transpose1d(Var x, Var w, std::optional<Var> b, const ConvTranspose1dOptions& opt);
/// Kernel 2, stride 2; odd trailing element dropped.
Var avg_pool1d(Var x);

/// Multi-head scaled dot-product attention on q, k, v [B, L, E] split into
/// `heads` groups of E/heads. `logit_bias` [heads, L, L] is added to the
/// attention logits before the softmax.
Var attention(Var q, Var k, Var v, std::size_t heads, std::optional<Var> logit_bias);

Var reshape(Var x, Shape shape);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose(Var x);
/// Concatenation along axis 0.
Var concat(const std::vector<Var>& parts);
/// Rows [begin, end) along axis 0.
Var slice_rows(Var x, std::size_t begin, std::size_t end);
/// Zeroes every last-axis row whose keep flag is 0.
Var zero_mask(Var x, const std::vector<std::uint8_t>& keep);
/// Rows of table [K, D] at `indices`: [N, D]. Gradient scatters back.
Var gather_rows(Var table, const std::vector<std::size_t>& indices);

/// Forward identity, zero gradient.
Var stop_gradient(Var x);
/// Forward value is `quantized` exactly; the gradient passes to `latent` as
/// identity and nothing reaches `quantized` through this edge.
Var straight_through(Var latent, Var quantized);

}  // namespace ops

/// Attention probabilities [B, heads, L, L] for q, k [B, L, E]; the same
/// computation the attention primitive performs.
Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads, const Tensor* logit_bias);

}  // namespace h2dilr
