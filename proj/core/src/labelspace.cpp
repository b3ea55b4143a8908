#include "paed/labelspace.hpp"

#include <algorithm>
#include <set>

#include "paed/error.hpp"

namespace paed {

CategorySet::CategorySet(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw UsageError("CategorySet: at least one category is required");
  std::set<std::string_view> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw UsageError("CategorySet: empty category name");
    if (!seen.insert(n).second) throw UsageError("CategorySet: duplicate category '" + n + "'");
  }
}

CategorySet CategorySet::tut_synthetic_2016() {
  return CategorySet({"alarms & sirens", "baby crying", "bird singing", "bus", "cat meowing", "crowd applause",
                      "crowd cheering", "dog barking", "footsteps", "glass smash", "gun shot", "horsewalk", "mixer",
                      "motorcycle", "rain", "thunder"});
}

std::size_t CategorySet::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw DataError("unknown event category '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

bool CategorySet::contains(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

CategorySet CategorySet::prefix(std::size_t n) const {
  if (n == 0 || n > names_.size()) {
    throw UsageError("CategorySet: cannot take " + std::to_string(n) + " of " + std::to_string(names_.size()) +
                     " categories");
  }
  return CategorySet(std::vector<std::string>(names_.begin(), names_.begin() + static_cast<std::ptrdiff_t>(n)));
}

TaskDecomposition::TaskDecomposition(std::vector<TaskGroup> groups, std::size_t num_categories)
    : groups_(std::move(groups)), num_categories_(num_categories) {
  if (groups_.empty()) throw UsageError("TaskDecomposition: no groups");
  std::vector<int> owner(num_categories_, -1);
  std::size_t total = 0;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    if (groups_[g].empty()) throw UsageError("TaskDecomposition: group " + std::to_string(g + 1) + " is empty");
    if (groups_[g].size() > kMaxGroupSize) {
      throw UsageError("TaskDecomposition: group " + std::to_string(g + 1) + " has more than " +
                       std::to_string(kMaxGroupSize) + " categories");
    }
    for (std::size_t c : groups_[g]) {
      if (c >= num_categories_) {
        throw UsageError("TaskDecomposition: category index " + std::to_string(c) + " out of range");
      }
      if (owner[c] >= 0) {
        throw UsageError("TaskDecomposition: category " + std::to_string(c) + " appears in groups " +
                         std::to_string(owner[c] + 1) + " and " + std::to_string(g + 1));
      }
      owner[c] = static_cast<int>(g);
    }
    total += groups_[g].size();
  }
  if (total != num_categories_) {
    throw UsageError("TaskDecomposition: groups cover " + std::to_string(total) + " of " +
                     std::to_string(num_categories_) + " categories");
  }
}

TaskDecomposition TaskDecomposition::equal_split(std::size_t num_categories, std::size_t num_tasks) {
  if (num_tasks == 0 || num_categories % num_tasks != 0) {
    throw UsageError("cannot split " + std::to_string(num_categories) + " categories into " +
                     std::to_string(num_tasks) + " equal tasks (task count must divide category count)");
  }
  const std::size_t per = num_categories / num_tasks;
  std::vector<TaskGroup> groups(num_tasks);
  for (std::size_t c = 0; c < num_categories; ++c) groups[c / per].push_back(c);
  return TaskDecomposition(std::move(groups), num_categories);
}

std::vector<std::uint64_t> TaskDecomposition::class_counts() const {
  std::vector<std::uint64_t> out;
  out.reserve(groups_.size());
  for (const auto& g : groups_) out.push_back(std::uint64_t{1} << g.size());
  return out;
}

std::uint64_t encode_group(std::span<const std::size_t> active, const TaskGroup& group) {
  std::uint64_t index = 0;
  for (std::size_t bit = 0; bit < group.size(); ++bit) {
    if (std::find(active.begin(), active.end(), group[bit]) != active.end()) index |= std::uint64_t{1} << bit;
  }
  return index;
}

std::vector<std::size_t> decode_group(std::uint64_t index, const TaskGroup& group) {
  if (group.size() < 64 && index >= (std::uint64_t{1} << group.size())) {
    throw Error("decode_group: class index " + std::to_string(index) + " out of range for a group of " +
                std::to_string(group.size()));
  }
  std::vector<std::size_t> out;
  for (std::size_t bit = 0; bit < group.size(); ++bit) {
    if (index & (std::uint64_t{1} << bit)) out.push_back(group[bit]);
  }
  return out;
}

ClassIndexMatrix encode_targets(const FrameLabelMatrix& labels, const TaskDecomposition& decomposition) {
  if (labels.rank() != 2 || labels.shape()[1] != decomposition.num_categories()) {
    throw ShapeError("encode_targets: labels " + shape_to_string(labels.shape()) + " do not have " +
                     std::to_string(decomposition.num_categories()) + " category columns");
  }
  const std::size_t frames = labels.shape()[0];
  const std::size_t y = labels.shape()[1];
  ClassIndexMatrix out({frames, decomposition.num_tasks()});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < decomposition.num_tasks(); ++n) {
      const TaskGroup& g = decomposition.group(n);
      std::int64_t index = 0;
      for (std::size_t bit = 0; bit < g.size(); ++bit) {
        const std::uint8_t v = labels[t * y + g[bit]];
        if (v > 1) {
          throw DataError("encode_targets: non-binary label " + std::to_string(v) + " at frame " + std::to_string(t));
        }
        if (v) index |= std::int64_t{1} << bit;
      }
      out[t * decomposition.num_tasks() + n] = index;
    }
  }
  return out;
}

FrameLabelMatrix decode_predictions(const ClassIndexMatrix& indices, const TaskDecomposition& decomposition) {
  const std::size_t tasks = decomposition.num_tasks();
  if (indices.rank() != 2 || indices.shape()[1] != tasks) {
    throw ShapeError("decode_predictions: indices " + shape_to_string(indices.shape()) + " do not have " +
                     std::to_string(tasks) + " task columns");
  }
  const std::size_t frames = indices.shape()[0];
  const std::size_t y = decomposition.num_categories();
  FrameLabelMatrix out({frames, y});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < tasks; ++n) {
      const TaskGroup& g = decomposition.group(n);
      const std::int64_t index = indices[t * tasks + n];
      if (index < 0 || index >= (std::int64_t{1} << g.size())) {
        throw Error("decode_predictions: class index " + std::to_string(index) + " out of range for task " +
                    std::to_string(n + 1) + " at frame " + std::to_string(t));
      }
      for (std::size_t bit = 0; bit < g.size(); ++bit) {
        if (index & (std::int64_t{1} << bit)) out[t * y + g[bit]] = 1;
      }
    }
  }
  return out;
}

}  // namespace paed
