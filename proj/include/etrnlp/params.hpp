#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "etrnlp/tensor.hpp"

namespace etrnlp {

constexpr int kSharedTask = -1;

// One learnable parameter: name, storage, and the task branch it belongs to
// (kSharedTask for parameters every task trains).
template <typename T>
struct ParamEntry {
    std::string name;
    TensorPtrT<T> tensor;
    int task = kSharedTask;
};

template <typename T>
class ParamRegistryT {
  public:
    void add(std::string name, TensorPtrT<T> tensor, int task = kSharedTask) {
        if (index_.count(name)) {
            throw std::invalid_argument("duplicate parameter name: " + name);
        }
        tensor->name = name;
        tensor->requires_grad = true;
        index_[name] = entries_.size();
        entries_.push_back(ParamEntry<T>{std::move(name), std::move(tensor), task});
    }

    void add_buffer(std::string name, TensorPtrT<T> tensor) {
        if (buffer_index_.count(name)) {
            throw std::invalid_argument("duplicate buffer name: " + name);
        }
        tensor->name = name;
        buffer_index_[name] = buffers_.size();
        buffers_.push_back(ParamEntry<T>{std::move(name), std::move(tensor), kSharedTask});
    }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    const std::vector<ParamEntry<T>>& buffers() const { return buffers_; }

    const ParamEntry<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.tensor->numel();
        return n;
    }

    std::vector<const ParamEntry<T>*> select(const std::function<bool(const ParamEntry<T>&)>& pred) const {
        std::vector<const ParamEntry<T>*> out;
        for (const auto& e : entries_) {
            if (pred(e)) out.push_back(&e);
        }
        return out;
    }

    // Parameters stepped when `task` is active: the shared set plus that
    // task's exclusive branch.
    std::vector<const ParamEntry<T>*> scope(int task) const {
        return select([task](const ParamEntry<T>& e) {
            return e.task == kSharedTask || e.task == task;
        });
    }
    std::vector<const ParamEntry<T>*> shared_only() const {
        return select([](const ParamEntry<T>& e) { return e.task == kSharedTask; });
    }
    std::vector<const ParamEntry<T>*> task_only(int task) const {
        return select([task](const ParamEntry<T>& e) { return e.task == task; });
    }

    void zero_grads() const {
        for (const auto& e : entries_) e.tensor->zero_grad();
    }

  private:
    std::vector<ParamEntry<T>> entries_;
    std::vector<ParamEntry<T>> buffers_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, std::size_t> buffer_index_;
};

using ParamRegistry = ParamRegistryT<float>;

}  // namespace etrnlp
