#pragma once

#include <stdexcept>
#include <string>

namespace mgpt2 {

// Contract violations: bad shapes, out-of-range ids, misuse of an API.
// CLI maps these to exit code 1.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values (negative weights, bad ranks, unknown flags).
// CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input files (unknown layout names, dimension mismatches, bad magic).
struct FormatError : ContractError {
    explicit FormatError(const std::string& msg) : ContractError(msg) {}
};

// Generated answers that do not follow the expected template structure.
struct MalformedAnswerError : ContractError {
    explicit MalformedAnswerError(const std::string& msg) : ContractError(msg) {}
};

inline void check_contract(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace mgpt2
