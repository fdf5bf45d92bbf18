#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace preroute::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode graph. A node owns its forward value and,
// once backward() reaches it, an accumulated gradient of identical shape.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Propagates this->grad into the parents' grads.
  std::function<void(Node&)> backward;

  void accumulate_grad(std::span<const double> g);
  bool has_grad() const { return !grad.empty(); }
};

// Handle to a node. Copies share the underlying storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return data().size(); }

  std::span<const double> data() const;
  // Mutable access for leaves only (parameter updates, initialisation).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  Tensor detach() const;

  // Reverse pass from this scalar. Gradients accumulate on every reachable
  // node that requires grad.
  void backward() const;

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node);

 private:
  NodePtr node_;
};

// Builds the result of an op: records parents and the backward rule only when
// some parent requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

// Nodes reachable from root in topological order (inputs before outputs),
// restricted to nodes that require grad.
std::vector<Node*> topological_order(const Node& root);

}  // namespace preroute::ad
