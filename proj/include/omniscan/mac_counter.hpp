// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>

namespace omniscan {

// Multiply-accumulate instrumentation. Constructing a MacCounter makes it the
// active sink for the current thread; every kernel reports the exact number
// of multiply-accumulates it executes. Scopes nest and restore on exit.
class MacCounter {
 public:
  MacCounter() : prev_(active_) { active_ = this; }
  ~MacCounter() { active_ = prev_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const { return count_; }

  static void add(std::uint64_t n) {
    for (MacCounter* c = active_; c != nullptr; c = c->prev_) c->count_ += n;
  }

 private:
  inline static thread_local MacCounter* active_ = nullptr;
  MacCounter* prev_;
  std::uint64_t count_ = 0;
};

}  // namespace omniscan
