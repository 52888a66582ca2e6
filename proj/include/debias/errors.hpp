#pragma once

#include <stdexcept>
#include <string>

namespace debias {

// Violated operation precondition (sizes, counts, ranges).
struct precondition_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Operand shapes do not agree.
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// User-supplied configuration or spec is out of range.
struct validation_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A class has too few samples to be clustered.
struct degenerate_class_error : std::runtime_error {
    degenerate_class_error(int label, std::size_t count, const std::string& context = "")
        : std::runtime_error(context + "class " + std::to_string(label) + " has " + std::to_string(count) +
                             " sample(s); at least 2 are required"),
          label(label),
          count(count) {}
    int label;
    std::size_t count;
};

// Malformed file contents.
struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File written by an incompatible format version.
struct version_error : std::runtime_error {
    version_error(int found, int expected)
        : std::runtime_error("incompatible format version " + std::to_string(found) + " (expected " +
                             std::to_string(expected) + ")"),
          found(found),
          expected(expected) {}
    int found;
    int expected;
};

// Training produced a non-finite loss or gradient.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace debias
