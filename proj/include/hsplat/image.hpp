#pragma once

#include <hsplat/errors.hpp>
#include <hsplat/math.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

// Planar image container plus the photometric metrics used for optimization:
// L1, PSNR, single-scale SSIM (11x11 Gaussian window, sigma 1.5, zero-padded)
// with an analytic backward pass, and the combined 0.8*L1 + 0.2*D-SSIM loss.
namespace hsplat {

template <class T>
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<T> data;  // plane-major: data[(c*height + y)*width + x]

    Image() = default;
    Image(int w, int h, int c, T fill = T(0))
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    T& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    const T& at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    template <class U>
    Image<U> cast() const {
        Image<U> out(width, height, channels);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Imagef = Image<float>;

namespace detail {

inline void check_pair_shape(int aw, int ah, int ac, int bw, int bh, int bc) {
    require(aw == bw && ah == bh && ac == bc, Errc::DimensionMismatch,
            "images must have identical shapes");
    require(aw > 0 && ah > 0 && ac > 0, Errc::InvalidArgument, "images must be non-empty");
}

// 11-tap Gaussian, sigma 1.5, normalized.
template <class T>
const std::array<T, 11>& ssim_window() {
    static const std::array<T, 11> w = [] {
        std::array<T, 11> k;
        double sum = 0.0;
        for (int i = 0; i < 11; ++i) {
            double d = i - 5;
            double v = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            k[i] = static_cast<T>(v);
            sum += v;
        }
        for (auto& v : k) v = static_cast<T>(v / sum);
        return k;
    }();
    return w;
}

// Separable same-size convolution of one plane, zero padding outside.
template <class T>
void conv_same(const T* src, T* dst, T* scratch, int w, int h) {
    const auto& k = ssim_window<T>();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T acc = T(0);
            for (int i = -5; i <= 5; ++i) {
                int xi = x + i;
                if (xi < 0 || xi >= w) continue;
                acc += k[i + 5] * src[y * w + xi];
            }
            scratch[y * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T acc = T(0);
            for (int i = -5; i <= 5; ++i) {
                int yi = y + i;
                if (yi < 0 || yi >= h) continue;
                acc += k[i + 5] * scratch[yi * w + x];
            }
            dst[y * w + x] = acc;
        }
}

}  // namespace detail

template <class T>
T l1_loss(const Image<T>& a, const Image<T>& b) {
    detail::check_pair_shape(a.width, a.height, a.channels, b.width, b.height, b.channels);
    T sum = T(0);
    for (std::size_t i = 0; i < a.data.size(); ++i) sum += std::abs(a.data[i] - b.data[i]);
    return sum / static_cast<T>(a.data.size());
}

// Peak signal-to-noise ratio for [0,1]-range images, capped at 99 db.
template <class T>
T psnr(const Image<T>& a, const Image<T>& b) {
    detail::check_pair_shape(a.width, a.height, a.channels, b.width, b.height, b.channels);
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return T(99);
    return static_cast<T>(std::min(99.0, -10.0 * std::log10(mse)));
}

// Mean single-scale SSIM over pixels and channels. If grad is non-null it
// receives d(mean SSIM)/d(a), derived analytically from the windowed moments.
template <class T>
T ssim(const Image<T>& a, const Image<T>& b, Image<T>* grad = nullptr) {
    detail::check_pair_shape(a.width, a.height, a.channels, b.width, b.height, b.channels);
    const int w = a.width, h = a.height;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
    const T n_total = static_cast<T>(a.data.size());

    if (grad) *grad = Image<T>(w, h, a.channels);

    std::vector<T> mu_x(plane), mu_y(plane), m_xx(plane), m_yy(plane), m_xy(plane);
    std::vector<T> tmp(plane), scratch(plane), fmu(plane), fxx(plane), fxy(plane);
    double total = 0.0;

    for (int c = 0; c < a.channels; ++c) {
        const T* x = a.data.data() + c * plane;
        const T* y = b.data.data() + c * plane;
        detail::conv_same(x, mu_x.data(), scratch.data(), w, h);
        detail::conv_same(y, mu_y.data(), scratch.data(), w, h);
        for (std::size_t i = 0; i < plane; ++i) tmp[i] = x[i] * x[i];
        detail::conv_same(tmp.data(), m_xx.data(), scratch.data(), w, h);
        for (std::size_t i = 0; i < plane; ++i) tmp[i] = y[i] * y[i];
        detail::conv_same(tmp.data(), m_yy.data(), scratch.data(), w, h);
        for (std::size_t i = 0; i < plane; ++i) tmp[i] = x[i] * y[i];
        detail::conv_same(tmp.data(), m_xy.data(), scratch.data(), w, h);

        for (std::size_t i = 0; i < plane; ++i) {
            T sxx = m_xx[i] - mu_x[i] * mu_x[i];
            T syy = m_yy[i] - mu_y[i] * mu_y[i];
            T sxy = m_xy[i] - mu_x[i] * mu_y[i];
            T a1 = T(2) * mu_x[i] * mu_y[i] + c1;
            T a2 = T(2) * sxy + c2;
            T b1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1;
            T b2 = sxx + syy + c2;
            T s = (a1 * a2) / (b1 * b2);
            total += static_cast<double>(s);
            if (grad) {
                // Partials w.r.t. the windowed moments (mu_x, E[x^2], E[xy]).
                // At the maximum s = 1 (identical windows) the true gradient
                // is zero; writing it as such avoids rounding residue there.
                if (s < T(1)) {
                    fxx[i] = -s / b2;
                    fxy[i] = T(2) * a1 / (b1 * b2);
                    fmu[i] = T(2) * mu_y[i] * (a2 - a1) / (b1 * b2) -
                             T(2) * mu_x[i] * s * (T(1) / b1 - T(1) / b2);
                } else {
                    fxx[i] = fxy[i] = fmu[i] = T(0);
                }
            }
        }

        if (grad) {
            // Convolving the partials back distributes each window's
            // contribution to the pixels it covered (kernel is symmetric).
            T* g = grad->data.data() + c * plane;
            detail::conv_same(fmu.data(), tmp.data(), scratch.data(), w, h);
            for (std::size_t i = 0; i < plane; ++i) g[i] = tmp[i];
            detail::conv_same(fxx.data(), tmp.data(), scratch.data(), w, h);
            for (std::size_t i = 0; i < plane; ++i) g[i] += T(2) * x[i] * tmp[i];
            detail::conv_same(fxy.data(), tmp.data(), scratch.data(), w, h);
            for (std::size_t i = 0; i < plane; ++i) g[i] += y[i] * tmp[i];
            for (std::size_t i = 0; i < plane; ++i) g[i] /= n_total;
        }
    }
    return static_cast<T>(total / static_cast<double>(n_total));
}

// 0.8*L1 + 0.2*(1 - SSIM)/2. If grad is non-null it receives d(loss)/d(pred).
template <class T>
T photometric_loss(const Image<T>& pred, const Image<T>& target, Image<T>* grad = nullptr) {
    T s = ssim(pred, target, grad);
    T loss = T(0.8) * l1_loss(pred, target) + T(0.2) * (T(1) - s) / T(2);
    if (grad) {
        const T inv_n = T(1) / static_cast<T>(pred.data.size());
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            T sign = pred.data[i] > target.data[i] ? T(1)
                     : pred.data[i] < target.data[i] ? T(-1)
                                                     : T(0);
            grad->data[i] = T(0.8) * sign * inv_n - T(0.1) * grad->data[i];
        }
    }
    return loss;
}

}  // namespace hsplat
