#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dcgrid {

/// Raised when a scenario or parameter set violates a model invariant.
/// Carries every problem found, not just the first one.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

    explicit ConfigError(const std::string& problem)
        : ConfigError(std::vector<std::string>{problem}) {}

    const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
    static std::string join(const std::vector<std::string>& items) {
        std::string out;
        for (const auto& s : items) {
            if (!out.empty()) out += "; ";
            out += s;
        }
        return out;
    }

    std::vector<std::string> problems_;
};

/// Linear system too badly conditioned to trust the solution.
class SingularSystemError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Integration aborted (non-finite state, step underflow, unstable step size).
class IntegrationError : public std::runtime_error {
public:
    IntegrationError(const std::string& what, double last_good_time, std::vector<double> last_good_state = {})
        : std::runtime_error(what), last_good_time_(last_good_time), last_good_state_(std::move(last_good_state)) {}

    double last_good_time() const noexcept { return last_good_time_; }
    const std::vector<double>& last_good_state() const noexcept { return last_good_state_; }

private:
    double last_good_time_;
    std::vector<double> last_good_state_;
};

} // namespace dcgrid
