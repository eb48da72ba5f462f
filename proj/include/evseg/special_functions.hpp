#pragma once

namespace evseg {

// Digamma, trigamma and log-gamma for strictly positive real arguments.
//
// All three use the same scheme: shift the argument upward with the
// recurrence relations until it reaches 6, then evaluate the asymptotic
// (Bernoulli-number) series there. That keeps the loss code free of any
// dependence on platform math library quirks, and the shift threshold is
// low enough that the per-call cost stays trivial.
//
// Each function throws DomainError for x <= 0, NaN or infinity. Accuracy
// is better than 1e-10 absolute or relative across [1e-3, 1e6]; the test
// suite pins this against an independently computed reference table.

double digamma(double x);
double trigamma(double x);
double log_gamma(double x);

}  // namespace evseg
