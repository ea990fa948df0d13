#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "realign/tensor.hpp"

namespace realign::stats {

/// Result of a one-sample or paired t-test. `degenerate` marks zero-variance
/// samples; t/p/d are then not meaningful and p is reported as 1.
struct TestResult {
    double t = 0.0;
    double p = 1.0;
    double d = 0.0;  // Cohen's d
    double mean = 0.0;
    std::size_t n = 0;
    bool degenerate = false;
};

namespace detail {

/// Regularized incomplete beta I_x(a,b) by Lentz's continued fraction.
inline double incbeta_cf(double a, double b, double x) {
    const double tiny = 1e-300;
    const double eps = 1e-15;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace detail

/// I_x(a, b), the regularized incomplete beta function.
inline double incbeta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw std::invalid_argument("incbeta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                      b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::incbeta_cf(a, b, x) / a;
    return 1.0 - std::exp(std::lgamma(a + b) - std::lgamma(b) - std::lgamma(a) +
                          b * std::log(1.0 - x) + a * std::log(x)) *
                     detail::incbeta_cf(b, a, 1.0 - x) / b;
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom, via
/// P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_p_two_tailed(double t, double df) {
    if (df <= 0.0) throw std::invalid_argument("student_t_p: df must be positive");
    double x = df / (df + t * t);
    return incbeta(0.5 * df, 0.5, x);
}

inline double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double sample_sd(std::span<const double> xs, double mean) {
    double s = 0.0;
    for (double x : xs) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

/// Two-tailed one-sample t-test of xs against the reference mu0.
inline TestResult one_sample_t(std::span<const double> xs, double mu0) {
    if (xs.size() < 2) throw std::invalid_argument("one_sample_t: need at least 2 samples");
    TestResult r;
    r.n = xs.size();
    r.mean = mean_of(xs);
    double sd = sample_sd(xs, r.mean);
    if (sd <= 0.0) {
        r.degenerate = true;
        return r;
    }
    r.t = (r.mean - mu0) / (sd / std::sqrt(static_cast<double>(xs.size())));
    r.d = (r.mean - mu0) / sd;
    r.p = student_t_p_two_tailed(r.t, static_cast<double>(xs.size() - 1));
    return r;
}

/// Paired two-tailed t-test: one-sample test on a - b against 0.
inline TestResult paired_t(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_t: sample sizes differ");
    std::vector<double> diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    return one_sample_t(diff, 0.0);
}

}  // namespace realign::stats
