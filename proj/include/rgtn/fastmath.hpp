#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

namespace rgtn {
namespace fastmath {

// Vectorized exp for array processing, written with GCC vector extensions so
// it compiles to packed instructions regardless of how timid the
// auto-vectorizer feels about bit punning. ~2 ulp over the finite range.
//
// Scheme: Cody-Waite range reduction x = n*ln2 + r with |r| <= ln2/2, then a
// division-free Taylor/Horner tail for exp(r), then a 2^n scale assembled in
// the exponent bits (split in two halves so the boundary cases stay normal).
// The remainder tail of every array runs through the same 8-wide kernel via
// a padded buffer, so results do not depend on where in the array a value
// sits.

namespace detail {

typedef double vf8 __attribute__((vector_size(64), aligned(8)));
typedef std::int64_t vi8 __attribute__((vector_size(64), aligned(8)));

inline vf8 splat(double v) { return vf8{v, v, v, v, v, v, v, v}; }

inline vf8 exp8(vf8 x) {
    const vf8 log2e = splat(1.4426950408889634073599);
    const vf8 c1 = splat(6.93145751953125e-1);        // ln2 high
    const vf8 c2 = splat(1.42860682030941723212e-6);  // ln2 low
    const vf8 magic = splat(6755399441055744.0);      // 1.5 * 2^52
    const vf8 hi = splat(709.0), lo = splat(-709.0);

    x = x > hi ? hi : x;
    x = x < lo ? lo : x;
    const vf8 shifted = x * log2e + magic;
    const vf8 pn = shifted - magic;
    vf8 r = x - pn * c1;
    r = r - pn * c2;

    // exp(r) = sum r^k / k!, |r| <= 0.3466
    vf8 p = splat(2.08767569878681e-9);    // 1/12!
    p = p * r + splat(2.50521083854417e-8);    // 1/11!
    p = p * r + splat(2.75573192239859e-7);    // 1/10!
    p = p * r + splat(2.75573192239859e-6);    // 1/9!
    p = p * r + splat(2.48015873015873e-5);    // 1/8!
    p = p * r + splat(1.98412698412698e-4);    // 1/7!
    p = p * r + splat(1.38888888888889e-3);    // 1/6!
    p = p * r + splat(8.33333333333333e-3);    // 1/5!
    p = p * r + splat(4.16666666666667e-2);    // 1/4!
    p = p * r + splat(1.66666666666667e-1);    // 1/3!
    p = p * r + splat(5.0e-1);                 // 1/2!
    p = p * r + splat(1.0);
    p = p * r + splat(1.0);

    const vi8 n = __builtin_convertvector(pn, vi8);
    const vi8 n1 = n >> 1;  // arithmetic shift: floor halves
    const vi8 n2 = n - n1;
    const vi8 bias = vi8{1023, 1023, 1023, 1023, 1023, 1023, 1023, 1023};
    const vi8 e1 = (bias + n1) << 52;
    const vi8 e2 = (bias + n2) << 52;
    vf8 s1, s2;
    std::memcpy(&s1, &e1, 64);
    std::memcpy(&s2, &e2, 64);
    return p * s1 * s2;
}

template <typename Transform>
inline void apply8(double* dst, const double* src, std::size_t n, Transform&& t) {
    std::size_t i = 0;
    // four independent lanes per iteration keep the polynomial's dependency
    // chain off the critical path
    for (; i + 32 <= n; i += 32) {
        vf8 v0, v1, v2, v3;
        std::memcpy(&v0, src + i, 64);
        std::memcpy(&v1, src + i + 8, 64);
        std::memcpy(&v2, src + i + 16, 64);
        std::memcpy(&v3, src + i + 24, 64);
        v0 = t(v0);
        v1 = t(v1);
        v2 = t(v2);
        v3 = t(v3);
        std::memcpy(dst + i, &v0, 64);
        std::memcpy(dst + i + 8, &v1, 64);
        std::memcpy(dst + i + 16, &v2, 64);
        std::memcpy(dst + i + 24, &v3, 64);
    }
    for (; i + 8 <= n; i += 8) {
        vf8 v;
        std::memcpy(&v, src + i, 64);
        v = t(v);
        std::memcpy(dst + i, &v, 64);
    }
    if (i < n) {
        double buf[8] = {0, 0, 0, 0, 0, 0, 0, 0};
        std::memcpy(buf, src + i, (n - i) * sizeof(double));
        vf8 v;
        std::memcpy(&v, buf, 64);
        v = t(v);
        std::memcpy(buf, &v, 64);
        std::memcpy(dst + i, buf, (n - i) * sizeof(double));
    }
}

}  // namespace detail

inline void exp_array(double* dst, const double* src, std::size_t n) {
    detail::apply8(dst, src, n, [](detail::vf8 v) { return detail::exp8(v); });
}

inline void sigmoid_array(double* dst, const double* src, std::size_t n) {
    detail::apply8(dst, src, n, [](detail::vf8 v) {
        return detail::splat(1.0) / (detail::splat(1.0) + detail::exp8(-v));
    });
}

// tanh(x) = 1 - 2 / (exp(2x) + 1)
inline void tanh_array(double* dst, const double* src, std::size_t n) {
    detail::apply8(dst, src, n, [](detail::vf8 v) {
        return detail::splat(1.0) -
               detail::splat(2.0) / (detail::exp8(v + v) + detail::splat(1.0));
    });
}

inline double exp_one(double x) {
    double out;
    exp_array(&out, &x, 1);
    return out;
}

}  // namespace fastmath
}  // namespace rgtn
