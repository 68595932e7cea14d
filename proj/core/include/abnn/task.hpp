#pragma once

#include <cstddef>
#include <vector>

#include "abnn/errors.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

/// One dataset: N labelled points. `x` is [N x D], `y` is [N x P]. The
/// optional `context_mask` (length N when present) marks which rows count as
/// context for conditional models; an empty mask means "no mask recorded".
struct Task {
  Tensor x;
  Tensor y;
  std::vector<bool> context_mask;

  std::size_t size() const { return x.defined() ? x.rows() : 0; }
  bool has_mask() const { return !context_mask.empty(); }

  void validate() const {
    if (!x.defined() || !y.defined()) {
      if (x.defined() != y.defined()) throw ShapeError("Task: x and y must both be set");
      return;  // fully empty task is fine
    }
    if (x.ndim() != 2 || y.ndim() != 2) throw ShapeError("Task: x and y must be 2-D");
    if (x.rows() != y.rows()) throw ShapeError("Task: x and y row counts differ");
    if (has_mask() && context_mask.size() != x.rows())
      throw ShapeError("Task: context mask length must equal the row count");
  }

  /// New task containing the given rows (values copied; result is constant
  /// data, never differentiable). The mask is subset alongside when present.
  Task subset(const std::vector<std::size_t>& rows) const {
    validate();
    const std::size_t d = x.defined() ? x.cols() : 0;
    const std::size_t p = y.defined() ? y.cols() : 0;
    std::vector<double> xv, yv;
    std::vector<bool> mv;
    for (std::size_t r : rows) {
      if (r >= size()) throw ShapeError("Task::subset: row index out of range");
      for (std::size_t j = 0; j < d; ++j) xv.push_back(x.at2(r, j));
      for (std::size_t j = 0; j < p; ++j) yv.push_back(y.at2(r, j));
      if (has_mask()) mv.push_back(context_mask[r]);
    }
    Task out;
    if (!rows.empty()) {
      out.x = Tensor::from({rows.size(), d}, std::move(xv));
      out.y = Tensor::from({rows.size(), p}, std::move(yv));
    }
    out.context_mask = std::move(mv);
    return out;
  }

  /// Rows where the context mask is true. Requires a mask.
  Task context_subset() const {
    if (!has_mask()) throw ContractError("Task::context_subset: no context mask present");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < context_mask.size(); ++i)
      if (context_mask[i]) rows.push_back(i);
    Task out = subset(rows);
    out.context_mask.clear();
    return out;
  }

  /// Copy without the context mask.
  Task without_mask() const {
    Task out = *this;
    out.context_mask.clear();
    return out;
  }
};

/// A collection of tasks to meta-train over.
struct MetaDataset {
  std::vector<Task> tasks;

  std::size_t size() const { return tasks.size(); }
  bool empty() const { return tasks.empty(); }
};

}  // namespace abnn
