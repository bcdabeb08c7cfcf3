#pragma once

#include <chrono>
#include <map>
#include <string>

namespace psla {

// Accumulated wall time per named stage, in milliseconds.
using StageTimes = std::map<std::string, double>;

class ScopedStage {
 public:
  ScopedStage(StageTimes* sink, std::string stage)
      : sink_(sink), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~ScopedStage() {
    if (sink_) {
      const auto end = std::chrono::steady_clock::now();
      (*sink_)[stage_] += std::chrono::duration<double, std::milli>(end - start_).count();
    }
  }
  ScopedStage(const ScopedStage&) = delete;
  ScopedStage& operator=(const ScopedStage&) = delete;

 private:
  StageTimes* sink_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace psla
