#pragma once

#include <stdexcept>
#include <string>

namespace sacnet {

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct NotScalar : std::runtime_error {
  explicit NotScalar(const std::string& msg) : std::runtime_error(msg) {}
};

struct EvenKernelSize : std::runtime_error {
  explicit EvenKernelSize(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigMismatch : std::runtime_error {
  explicit ConfigMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct EmptyPairPlan : std::runtime_error {
  explicit EmptyPairPlan(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateLabels : std::runtime_error {
  explicit DegenerateLabels(const std::string& msg) : std::runtime_error(msg) {}
};

struct UnreadableImage : std::runtime_error {
  explicit UnreadableImage(const std::string& msg) : std::runtime_error(msg) {}
};

struct EmptyDataset : std::runtime_error {
  explicit EmptyDataset(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad flags, unknown config keys and the like. The CLI maps this to exit 1,
// everything else to exit 2.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sacnet
