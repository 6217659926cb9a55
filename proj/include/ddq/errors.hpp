#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ddq {

struct dimension_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct invalid_bitwidth_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct degenerate_range_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct nonfinite_input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct composition_refused_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct degenerate_footprint_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct training_diverged_error : std::runtime_error {
  std::int64_t step;
  training_diverged_error(const std::string& msg, std::int64_t at_step)
      : std::runtime_error(msg), step(at_step) {}
};

struct corrupt_model_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct export_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ddq
