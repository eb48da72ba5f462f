#pragma once

#include <cmath>

namespace evseg {

// Numerically stable softplus ln(1 + e^z); maps raw network outputs to
// non-negative evidence. Templated so the training path can run in float
// while gradient-check code runs the identical formula in double.
template <typename T>
inline T softplus(T z) {
    if (z > T(0)) {
        return z + std::log1p(std::exp(-z));
    }
    return std::log1p(std::exp(z));
}

// Logistic sigmoid, which is also d softplus / dz.
template <typename T>
inline T logistic(T z) {
    if (z >= T(0)) {
        return T(1) / (T(1) + std::exp(-z));
    }
    const T e = std::exp(z);
    return e / (T(1) + e);
}

// Rectifier and its derivative as used between convolution layers.
template <typename T>
inline T relu(T z) {
    return z > T(0) ? z : T(0);
}

template <typename T>
inline T relu_grad(T z) {
    return z > T(0) ? T(1) : T(0);
}

}  // namespace evseg
