#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nse {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

class Tape;

// Handle into a Tape node. Cheap to copy; valid only while the tape lives.
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

// Records the forward graph and replays the chain rule in reverse creation
// order, which is a valid reverse topological order by construction.
// A tape and its tensors are confined to a single thread.
class Tape {
 public:
  Tensor leaf(Mat value);

  // Seeds grad of a 1x1 loss with 1 and accumulates grads into every
  // reachable node. Repeated calls without zero_grad accumulate.
  void backward(Tensor loss);

  void zero_grad();

  const Mat& value_of(int id) const { return nodes_[id].value; }
  const Mat& grad_of(int id) const { return nodes_[id].grad; }
  Mat& grad_ref(int id) { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  // Internal: used by the op free functions.
  Tensor emplace(Mat value, std::function<void(Tape&, int)> back);

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&, int)> back;  // null for leaves
  };
  std::vector<Node> nodes_;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// ---- primitive ops ----------------------------------------------------------

Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);  // elementwise
Tensor matmul(Tensor a, Tensor b);
Tensor transpose(Tensor a);
Tensor scale(Tensor a, double s);
Tensor add_const(Tensor a, double c);
Tensor one_minus(Tensor a);

Tensor sigmoid(Tensor a);
Tensor tanh_t(Tensor a);
Tensor log_t(Tensor a);  // requires strictly positive values

// Column-vector softmax with optional {0,1} mask. Masked positions get
// probability exactly 0; stabilized by max-subtraction over unmasked entries.
// Throws if every position is masked.
Tensor softmax(Tensor x, const Vec* mask = nullptr);

// Elementwise x.*a + b with constant coefficient matrices (no grad through
// a or b). Used for dropout masks and padding overrides.
Tensor elem_affine(Tensor x, const Mat& a, const Mat& b);

// Scales column j of m by z(j); z is cols(m) x 1.
Tensor scale_columns(Tensor m, Tensor z);

// Vertical concatenation of column vectors.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Contiguous row slice [r0, r0+n).
Tensor rows(Tensor a, Eigen::Index r0, Eigen::Index n);
Tensor column(Tensor a, Eigen::Index j);

Tensor sum(Tensor a);            // 1x1
Tensor dot(Tensor a, Tensor b);  // 1x1, both column vectors

// Appends zero columns on the right up to total_cols; grads flow only into
// the original columns.
Tensor pad_columns(Tensor a, Eigen::Index total_cols);

// out(:, j) = table.row(ids[j])^T; grads scatter-add back into table rows.
Tensor embed_rows(Tensor table, const std::vector<int>& ids);

// ---- gradient checking ------------------------------------------------------

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  int probes = 0;
};

// f maps a leaf tensor (registered on the tape it is given) to a scalar
// tensor on the same tape. Compares analytic gradients against central
// finite differences at `probes` randomly chosen coordinates.
GradCheckReport grad_check(
    const std::string& op_name,
    const std::function<Tensor(Tape&, Tensor)>& f, const Mat& x, double eps,
    int probes, std::uint64_t seed);

}  // namespace nse
