#pragma once

// Central finite-difference checks of every hand-written backward pass,
// grouped into suites and summarized as max relative error per operation.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace gtgm::gradcheck {

enum class Suite { objectives, captioner, encoders };
const char* to_string(Suite s) noexcept;

// Accepts suite names and "all"; duplicates collapse. Empty or unknown → config error.
std::vector<Suite> parse_suites(const std::vector<std::string>& names);

// ||a - b|| / max(||a||, ||b||, floor); the floor keeps vanishing gradients from
// turning rounding noise into a large relative error.
constexpr double kRelativeFloor = 1e-3;
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

// Central differences of f over every coordinate of x.
std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double step);

// As numeric_gradient, for f that also returns its ReLU gate pattern. Coordinates
// whose perturbation flips a gate are skipped and zeroed in `analytic` as well.
std::size_t numeric_gradient_masked(std::vector<double>& x, std::vector<double>& analytic, std::vector<double>& numeric,
                                    const std::function<std::pair<double, std::vector<char>>()>& f, double step);

struct OpReport {
    Suite suite = Suite::objectives;
    std::string op;
    std::size_t instances = 0;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    std::size_t skipped_coordinates = 0;

    bool passed() const noexcept { return max_relative_error < tolerance; }
};

struct Report {
    std::uint64_t seed = 0;
    std::vector<OpReport> ops;
    double seconds = 0.0;

    bool passed() const noexcept;
    std::size_t instances() const noexcept;
    nlohmann::json to_json() const;
    // suite,op,instances,max_relative_error,tolerance,passed
    std::string csv() const;
};

// Randomized instances per operation; every instance draws its shapes and values from `seed`.
Report run(const std::vector<Suite>& suites, std::uint64_t seed, std::size_t instances_per_op = 40);

} // namespace gtgm::gradcheck
