#pragma once

#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace sparseconv {

/// Invalid shapes, parameters, or mask/graph combinations.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Caller passed an argument outside an operation's domain (e.g. step index).
class UsageError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Malformed or inconsistent serialized data (.smod, SMSK, CSV).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void invariant_failure(const char* expr, const char* file, int line) {
    std::fprintf(stderr, "sparseconv: internal invariant violated: %s (%s:%d)\n", expr, file, line);
    std::abort();
}

}  // namespace sparseconv

#define SPARSECONV_INVARIANT(cond) \
    ((cond) ? static_cast<void>(0) : ::sparseconv::invariant_failure(#cond, __FILE__, __LINE__))
