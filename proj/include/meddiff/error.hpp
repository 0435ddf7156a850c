#pragma once

#include <stdexcept>
#include <string>

namespace meddiff {

// Bad inputs: malformed files, config values out of range, shape mismatches.
// The CLI maps these to exit code 1; everything else is a runtime failure (2).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : ValidationError {
    explicit ParseError(const std::string& msg) : ValidationError(msg) {}
};

}  // namespace meddiff
