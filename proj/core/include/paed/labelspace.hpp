#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "paed/ndbuffer.hpp"

namespace paed {

/// Binary frame activity, [frames, categories], entries 0 or 1.
using FrameLabelMatrix = NdBuffer<std::uint8_t>;
/// Per-task class indices, [frames, tasks].
using ClassIndexMatrix = NdBuffer<std::int64_t>;

/// Ordered, duplicate-free list of event category names.
class CategorySet {
 public:
  explicit CategorySet(std::vector<std::string> names);

  /// The sixteen TUT-SED-Synthetic-2016 categories in their customary order.
  static CategorySet tut_synthetic_2016();

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  /// Index of `name`; throws DataError for unknown names.
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const;

  /// The first `n` categories.
  CategorySet prefix(std::size_t n) const;

  friend bool operator==(const CategorySet&, const CategorySet&) = default;

 private:
  std::vector<std::string> names_;
};

/// Category indices of one task, in bit order (first member is the least
/// significant bit of the task's class index).
using TaskGroup = std::vector<std::size_t>;

/// Partition of Y categories into N disjoint, covering, non-empty groups.
class TaskDecomposition {
 public:
  /// Validates disjointness and coverage; violations throw UsageError.
  TaskDecomposition(std::vector<TaskGroup> groups, std::size_t num_categories);

  /// N contiguous groups of Y/N categories in category order.
  static TaskDecomposition equal_split(std::size_t num_categories, std::size_t num_tasks);

  std::size_t num_tasks() const noexcept { return groups_.size(); }
  std::size_t num_categories() const noexcept { return num_categories_; }
  const std::vector<TaskGroup>& groups() const noexcept { return groups_; }
  const TaskGroup& group(std::size_t task) const { return groups_.at(task); }

  /// 2^{Y_i} for each task.
  std::vector<std::uint64_t> class_counts() const;

  friend bool operator==(const TaskDecomposition&, const TaskDecomposition&) = default;

 private:
  std::vector<TaskGroup> groups_;
  std::size_t num_categories_;
};

/// Largest group the power-set encoding accepts.
inline constexpr std::size_t kMaxGroupSize = 30;

/// Power-set class of the active categories within `group`; categories
/// outside the group are ignored.
std::uint64_t encode_group(std::span<const std::size_t> active, const TaskGroup& group);

/// Inverse of encode_group; throws Error if index >= 2^{|group|}.
std::vector<std::size_t> decode_group(std::uint64_t index, const TaskGroup& group);

/// Per-frame, per-task class indices of a binary label matrix.
ClassIndexMatrix encode_targets(const FrameLabelMatrix& labels, const TaskDecomposition& decomposition);

/// Union of per-task decodings back into a binary label matrix.
FrameLabelMatrix decode_predictions(const ClassIndexMatrix& indices, const TaskDecomposition& decomposition);

}  // namespace paed
