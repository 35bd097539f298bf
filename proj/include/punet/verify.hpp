#pragma once

// Self-check suites behind `punet verify`. Reports contain no timing and are
// byte-identical for a given seed.

#include <cstdint>
#include <string>
#include <vector>

namespace punet {

struct VerifyCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyReport {
    /// Report text, one line per table row or check.
    std::vector<std::string> lines;
    std::vector<VerifyCheck> checks;

    int failures() const;
    std::string text() const;
};

/// kernel, oracle, grad, shapes, metrics.
const std::vector<std::string>& verify_suites();

/// Runs one suite, or every suite for "all". Unknown names throw
/// std::invalid_argument.
VerifyReport run_verify(const std::string& suite, std::uint64_t seed);

// Individual suites, also used by the acceptance runner.
VerifyReport verify_kernel(std::uint64_t seed);
VerifyReport verify_oracle(std::uint64_t seed);
VerifyReport verify_grad(std::uint64_t seed);
VerifyReport verify_shapes(std::uint64_t seed);
VerifyReport verify_metrics(std::uint64_t seed);

struct OracleStats {
    /// Max elementwise deviation of the first trial at the large m.
    double first_trial_max_dev = 0;
    double worst_max_dev = 0;
    double median_max_dev = 0;
    /// Trials where the large-m deviation is below the small-m one.
    int improved = 0;
    int trials = 0;
};

/// N tokens of width c, identity projections, bank redrawn per trial.
OracleStats oracle_trials(std::uint64_t seed, int trials, std::int64_t n = 64, std::int64_t c = 16,
                          std::int64_t m_small = 256, std::int64_t m_large = 16384);

struct MetricsOracleStats {
    int pairs = 0;
    int dice_mismatch = 0;
    int hd_mismatch = 0;
    int hd95_mismatch = 0;
    int hd95_above_hd = 0;
};

/// Random h x w mask pairs compared against direct brute-force references.
MetricsOracleStats metrics_oracle(std::uint64_t seed, int pairs, std::int64_t h = 16, std::int64_t w = 16);

}  // namespace punet
