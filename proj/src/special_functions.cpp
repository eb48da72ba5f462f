#include "evseg/special_functions.hpp"

#include <cmath>
#include <string>

#include "evseg/errors.hpp"

namespace evseg {
namespace {

constexpr double kShift = 6.0;
constexpr double kHalfLogTwoPi = 0.91893853320467274178;  // ln(2*pi)/2

void check_domain(double x, const char* name) {
    // NaN fails the comparison too, so this single test covers all bad input.
    if (!(x > 0.0) || std::isinf(x)) {
        throw DomainError(std::string(name) + " is only defined for finite x > 0, got " +
                          std::to_string(x));
    }
}

}  // namespace

double digamma(double x) {
    check_domain(x, "digamma");
    // psi(x) = psi(x+1) - 1/x until the asymptotic series is accurate.
    double acc = 0.0;
    while (x < kShift) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    // psi(x) ~ ln x - 1/(2x) - sum_n B_{2n} / (2n x^{2n})
    const double inv = 1.0 / x;
    const double u = inv * inv;
    const double series =
        u * (1.0 / 12 +
             u * (-1.0 / 120 +
                  u * (1.0 / 252 +
                       u * (-1.0 / 240 +
                            u * (1.0 / 132 +
                                 u * (-691.0 / 32760 + u * (1.0 / 12)))))));
    return acc + std::log(x) - 0.5 * inv - series;
}

double trigamma(double x) {
    check_domain(x, "trigamma");
    // psi'(x) = psi'(x+1) + 1/x^2
    double acc = 0.0;
    while (x < kShift) {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // psi'(x) ~ 1/x + 1/(2x^2) + sum_n B_{2n} x^{-2n-1}
    const double inv = 1.0 / x;
    const double u = inv * inv;
    const double series =
        inv * u *
        (1.0 / 6 +
         u * (-1.0 / 30 +
              u * (1.0 / 42 +
                   u * (-1.0 / 30 +
                        u * (5.0 / 66 + u * (-691.0 / 2730 + u * (7.0 / 6)))))));
    return acc + inv + 0.5 * u + series;
}

double log_gamma(double x) {
    check_domain(x, "log_gamma");
    // The integer zeros are exact, as in libm's lgamma. Callers rely on
    // it: a divergence between identical Dirichlet(1,..,1) distributions
    // must come out as 0.0, not as the series' residual error.
    if (x == 1.0 || x == 2.0) return 0.0;
    // ln G(x) = ln G(x+k) - sum_{i<k} ln(x+i); collect the shift first.
    double shift = 0.0;
    while (x < kShift) {
        shift += std::log(x);
        x += 1.0;
    }
    // Stirling: (x-1/2) ln x - x + ln(2 pi)/2 + sum_n B_{2n}/(2n(2n-1) x^{2n-1})
    const double inv = 1.0 / x;
    const double u = inv * inv;
    const double series =
        inv * (1.0 / 12 +
               u * (-1.0 / 360 +
                    u * (1.0 / 1260 +
                         u * (-1.0 / 1680 +
                              u * (1.0 / 1188 +
                                   u * (-691.0 / 360360 + u * (7.0 / 1092)))))));
    return (x - 0.5) * std::log(x) - x + kHalfLogTwoPi + series - shift;
}

}  // namespace evseg
