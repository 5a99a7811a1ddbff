#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pim {

/// Dense real vector. Every value flowing through the machine (variables,
/// parameters, action arguments) is one of these; scalars have size 1.
using Vec = std::vector<double>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace vec {

inline void require_same_dim(const Vec& a, const Vec& b, const char* op)
{
    if (a.size() != b.size()) {
        throw Error(std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) + " vs "
                    + std::to_string(b.size()) + ")");
    }
}

inline Vec add(const Vec& a, const Vec& b)
{
    require_same_dim(a, b, "add");
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
    return r;
}

inline Vec sub(const Vec& a, const Vec& b)
{
    require_same_dim(a, b, "sub");
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
    return r;
}

inline Vec scale(double c, const Vec& v)
{
    Vec r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) r[i] = c * v[i];
    return r;
}

inline void axpy(double a, const Vec& x, Vec& y)
{
    require_same_dim(x, y, "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline double dot(const Vec& a, const Vec& b)
{
    require_same_dim(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double distance(const Vec& a, const Vec& b) { return norm(sub(a, b)); }

inline bool all_finite(const Vec& a)
{
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace vec
} // namespace pim
