#pragma once

#include <hsplat/math.hpp>

#include <array>

// Real spherical harmonics up to degree 3, with the band constants and the
// 0.5 color offset used by the reference splatting implementations.
namespace hsplat {

inline constexpr double kSh0 = 0.28209479177387814;
inline constexpr double kSh1 = 0.4886025119029199;
inline constexpr double kSh2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                   -1.0925484305920792, 0.5462742152960396};
inline constexpr double kSh3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                   0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                   -0.5900435899266435};

// Basis values for a unit direction, listed band by band.
template <class T>
std::array<T, kShCoeffs> sh_basis(const Vec3<T>& d) {
    const T x = d.x(), y = d.y(), z = d.z();
    const T xx = x * x, yy = y * y, zz = z * z;
    std::array<T, kShCoeffs> b;
    b[0] = T(kSh0);
    b[1] = T(-kSh1) * y;
    b[2] = T(kSh1) * z;
    b[3] = T(-kSh1) * x;
    b[4] = T(kSh2[0]) * x * y;
    b[5] = T(kSh2[1]) * y * z;
    b[6] = T(kSh2[2]) * (T(2) * zz - xx - yy);
    b[7] = T(kSh2[3]) * x * z;
    b[8] = T(kSh2[4]) * (xx - yy);
    b[9] = T(kSh3[0]) * y * (T(3) * xx - yy);
    b[10] = T(kSh3[1]) * x * y * z;
    b[11] = T(kSh3[2]) * y * (T(4) * zz - xx - yy);
    b[12] = T(kSh3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    b[13] = T(kSh3[4]) * x * (T(4) * zz - xx - yy);
    b[14] = T(kSh3[5]) * z * (xx - yy);
    b[15] = T(kSh3[6]) * x * (xx - T(3) * yy);
    return b;
}

// d(basis_k)/d(direction) for a unit direction (no projection applied here).
template <class T>
std::array<Vec3<T>, kShCoeffs> sh_basis_grad(const Vec3<T>& d) {
    const T x = d.x(), y = d.y(), z = d.z();
    const T xx = x * x, yy = y * y, zz = z * z;
    std::array<Vec3<T>, kShCoeffs> g;
    g[0] = Vec3<T>::Zero();
    g[1] = Vec3<T>(T(0), T(-kSh1), T(0));
    g[2] = Vec3<T>(T(0), T(0), T(kSh1));
    g[3] = Vec3<T>(T(-kSh1), T(0), T(0));
    g[4] = T(kSh2[0]) * Vec3<T>(y, x, T(0));
    g[5] = T(kSh2[1]) * Vec3<T>(T(0), z, y);
    g[6] = T(kSh2[2]) * Vec3<T>(T(-2) * x, T(-2) * y, T(4) * z);
    g[7] = T(kSh2[3]) * Vec3<T>(z, T(0), x);
    g[8] = T(kSh2[4]) * Vec3<T>(T(2) * x, T(-2) * y, T(0));
    g[9] = T(kSh3[0]) * Vec3<T>(T(6) * x * y, T(3) * xx - T(3) * yy, T(0));
    g[10] = T(kSh3[1]) * Vec3<T>(y * z, x * z, x * y);
    g[11] = T(kSh3[2]) * Vec3<T>(T(-2) * x * y, T(4) * zz - xx - T(3) * yy, T(8) * y * z);
    g[12] = T(kSh3[3]) *
            Vec3<T>(T(-6) * x * z, T(-6) * y * z, T(6) * zz - T(3) * xx - T(3) * yy);
    g[13] = T(kSh3[4]) * Vec3<T>(T(4) * zz - T(3) * xx - yy, T(-2) * x * y, T(8) * x * z);
    g[14] = T(kSh3[5]) * Vec3<T>(T(2) * x * z, T(-2) * y * z, xx - yy);
    g[15] = T(kSh3[6]) * Vec3<T>(T(3) * xx - T(3) * yy, T(-6) * x * y, T(0));
    return g;
}

// Color before the non-negativity clamp: 0.5 + sum_k basis_k * sh_k.
template <class T>
Vec3<T> eval_sh(const Vec3<T>& dir, const std::array<T, kShValues>& sh) {
    auto b = sh_basis(dir);
    Vec3<T> c(T(0.5), T(0.5), T(0.5));
    for (int k = 0; k < kShCoeffs; ++k)
        for (int ch = 0; ch < 3; ++ch) c[ch] += b[k] * sh[k * 3 + ch];
    return c;
}

// Accumulates gradients of an upstream per-channel color gradient into the
// coefficients and the (unit) view direction.
template <class T>
void eval_sh_backward(const Vec3<T>& dir, const std::array<T, kShValues>& sh,
                      const Vec3<T>& color_grad, std::array<T, kShValues>& sh_grad,
                      Vec3<T>& dir_grad) {
    auto b = sh_basis(dir);
    auto gb = sh_basis_grad(dir);
    for (int k = 0; k < kShCoeffs; ++k) {
        T w = T(0);
        for (int ch = 0; ch < 3; ++ch) {
            sh_grad[k * 3 + ch] += b[k] * color_grad[ch];
            w += sh[k * 3 + ch] * color_grad[ch];
        }
        dir_grad += w * gb[k];
    }
}

}  // namespace hsplat
