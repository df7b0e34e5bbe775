#include "gtgm/layers.hpp"

#include "gtgm/error.hpp"

#include <algorithm>

namespace gtgm::layers {

namespace {

// Valid output range along one axis for kernel offset o in [-r, r].
struct Range {
    std::size_t lo;
    std::size_t hi;  // exclusive
};

Range valid(std::size_t n, std::ptrdiff_t o) {
    const auto sn = static_cast<std::ptrdiff_t>(n);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -o);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(sn, sn - o);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

void check_kernel(std::size_t kernel) {
    require(kernel == 1 || kernel == 3, ErrorKind::config, "kernel size must be 1 or 3");
}

} // namespace

FeatureMap conv3d(const FeatureMap& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_channels,
                  std::size_t kernel) {
    check_kernel(kernel);
    const std::size_t k3 = kernel * kernel * kernel;
    require(weight.size() == out_channels * x.channels * k3, ErrorKind::dimension,
            "conv weight holds " + std::to_string(weight.size()) + " values, expected " +
                std::to_string(out_channels * x.channels * k3));
    require(bias.empty() || bias.size() == out_channels, ErrorKind::dimension, "conv bias width mismatch");
    const Dims3 d = x.dims;
    const auto r = static_cast<std::ptrdiff_t>(kernel / 2);
    FeatureMap out(out_channels, d);
    for (std::size_t oc = 0; oc < out_channels; ++oc) {
        auto o = out.channel(oc);
        if (!bias.empty()) std::fill(o.begin(), o.end(), bias[oc]);
        for (std::size_t ic = 0; ic < x.channels; ++ic) {
            const auto in = x.channel(ic);
            const double* w = &weight[(oc * x.channels + ic) * k3];
            for (std::ptrdiff_t kz = -r; kz <= r; ++kz) {
                const Range rz = valid(d.z, kz);
                for (std::ptrdiff_t ky = -r; ky <= r; ++ky) {
                    const Range ry = valid(d.y, ky);
                    for (std::ptrdiff_t kx = -r; kx <= r; ++kx) {
                        const Range rx = valid(d.x, kx);
                        const double wv = *w++;
                        if (wv == 0.0) continue;
                        for (std::size_t z = rz.lo; z < rz.hi; ++z)
                            for (std::size_t y = ry.lo; y < ry.hi; ++y) {
                                double* dst = &o[d.index(z, y, 0)];
                                const double* src = in.data() + d.index(z + kz, y + ky, 0);
                                for (std::size_t xx = rx.lo; xx < rx.hi; ++xx) dst[xx] += wv * src[static_cast<std::ptrdiff_t>(xx) + kx];
                            }
                    }
                }
            }
        }
    }
    return out;
}

FeatureMap conv3d_backward(const FeatureMap& x, const FeatureMap& grad_out, std::span<const double> weight,
                           std::span<double> grad_weight, std::span<double> grad_bias, std::size_t kernel, bool want_input) {
    check_kernel(kernel);
    const std::size_t k3 = kernel * kernel * kernel;
    const std::size_t out_channels = grad_out.channels;
    require(grad_out.dims == x.dims, ErrorKind::dimension, "conv gradient dims mismatch");
    require(grad_weight.size() == out_channels * x.channels * k3 && weight.size() == grad_weight.size(), ErrorKind::dimension,
            "conv weight gradient width mismatch");
    const Dims3 d = x.dims;
    const auto r = static_cast<std::ptrdiff_t>(kernel / 2);
    FeatureMap gx;
    if (want_input) gx = FeatureMap(x.channels, d);
    for (std::size_t oc = 0; oc < out_channels; ++oc) {
        const auto g = grad_out.channel(oc);
        if (!grad_bias.empty()) {
            double s = 0.0;
            for (double v : g) s += v;
            grad_bias[oc] += s;
        }
        for (std::size_t ic = 0; ic < x.channels; ++ic) {
            const auto in = x.channel(ic);
            const std::size_t base = (oc * x.channels + ic) * k3;
            std::size_t widx = base;
            for (std::ptrdiff_t kz = -r; kz <= r; ++kz) {
                const Range rz = valid(d.z, kz);
                for (std::ptrdiff_t ky = -r; ky <= r; ++ky) {
                    const Range ry = valid(d.y, ky);
                    for (std::ptrdiff_t kx = -r; kx <= r; ++kx, ++widx) {
                        const Range rx = valid(d.x, kx);
                        const double wv = weight[widx];
                        double acc = 0.0;
                        for (std::size_t z = rz.lo; z < rz.hi; ++z)
                            for (std::size_t y = ry.lo; y < ry.hi; ++y) {
                                const double* gp = &g[d.index(z, y, 0)];
                                const std::size_t src_off = d.index(z + kz, y + ky, 0);
                                const double* src = in.data() + src_off;
                                for (std::size_t xx = rx.lo; xx < rx.hi; ++xx) acc += gp[xx] * src[static_cast<std::ptrdiff_t>(xx) + kx];
                                if (want_input && wv != 0.0) {
                                    double* dst = gx.channel(ic).data() + src_off;
                                    for (std::size_t xx = rx.lo; xx < rx.hi; ++xx) dst[static_cast<std::ptrdiff_t>(xx) + kx] += wv * gp[xx];
                                }
                            }
                        grad_weight[widx] += acc;
                    }
                }
            }
        }
    }
    return gx;
}

FeatureMap relu(const FeatureMap& x) {
    FeatureMap out = x;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

FeatureMap relu_backward(const FeatureMap& pre_activation, const FeatureMap& grad_out) {
    require(pre_activation.data.size() == grad_out.data.size(), ErrorKind::dimension, "relu gradient shape mismatch");
    FeatureMap g = grad_out;
    for (std::size_t i = 0; i < g.data.size(); ++i)
        if (!(pre_activation.data[i] > 0.0)) g.data[i] = 0.0;
    return g;
}

FeatureMap avgpool2(const FeatureMap& x) {
    const Dims3 d = x.dims;
    require(d.z % 2 == 0 && d.y % 2 == 0 && d.x % 2 == 0, ErrorKind::dimension, "avgpool2 needs even dims, got " + d.str());
    const Dims3 h{d.z / 2, d.y / 2, d.x / 2};
    FeatureMap out(x.channels, h);
    for (std::size_t c = 0; c < x.channels; ++c) {
        const auto in = x.channel(c);
        auto o = out.channel(c);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t xx = 0; xx < d.x; ++xx) o[h.index(z / 2, y / 2, xx / 2)] += 0.125 * in[d.index(z, y, xx)];
    }
    return out;
}

FeatureMap avgpool2_backward(const FeatureMap& grad_out, Dims3 d) {
    const Dims3 h = grad_out.dims;
    require(h.z * 2 == d.z && h.y * 2 == d.y && h.x * 2 == d.x, ErrorKind::dimension, "avgpool2 gradient dims mismatch");
    FeatureMap g(grad_out.channels, d);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const auto go = grad_out.channel(c);
        auto gi = g.channel(c);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t xx = 0; xx < d.x; ++xx) gi[d.index(z, y, xx)] = 0.125 * go[h.index(z / 2, y / 2, xx / 2)];
    }
    return g;
}

FeatureMap upsample2(const FeatureMap& x) {
    const Dims3 h = x.dims;
    const Dims3 d{h.z * 2, h.y * 2, h.x * 2};
    FeatureMap out(x.channels, d);
    for (std::size_t c = 0; c < x.channels; ++c) {
        const auto in = x.channel(c);
        auto o = out.channel(c);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t xx = 0; xx < d.x; ++xx) o[d.index(z, y, xx)] = in[h.index(z / 2, y / 2, xx / 2)];
    }
    return out;
}

FeatureMap upsample2_backward(const FeatureMap& grad_out) {
    const Dims3 d = grad_out.dims;
    require(d.z % 2 == 0 && d.y % 2 == 0 && d.x % 2 == 0, ErrorKind::dimension, "upsample gradient needs even dims");
    const Dims3 h{d.z / 2, d.y / 2, d.x / 2};
    FeatureMap g(grad_out.channels, h);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const auto go = grad_out.channel(c);
        auto gi = g.channel(c);
        for (std::size_t z = 0; z < d.z; ++z)
            for (std::size_t y = 0; y < d.y; ++y)
                for (std::size_t xx = 0; xx < d.x; ++xx) gi[h.index(z / 2, y / 2, xx / 2)] += go[d.index(z, y, xx)];
    }
    return g;
}

FeatureMap concat(const FeatureMap& a, const FeatureMap& b) {
    require(a.dims == b.dims, ErrorKind::dimension, "concat dims " + a.dims.str() + " and " + b.dims.str() + " differ");
    FeatureMap out(a.channels + b.channels, a.dims);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
}

std::pair<FeatureMap, FeatureMap> split(const FeatureMap& g, std::size_t channels_a) {
    require(channels_a <= g.channels, ErrorKind::dimension, "split point beyond channel count");
    FeatureMap a(channels_a, g.dims), b(g.channels - channels_a, g.dims);
    const auto cut = g.data.begin() + static_cast<std::ptrdiff_t>(a.data.size());
    std::copy(g.data.begin(), cut, a.data.begin());
    std::copy(cut, g.data.end(), b.data.begin());
    return {std::move(a), std::move(b)};
}

std::vector<double> global_average(const FeatureMap& x) {
    std::vector<double> out(x.channels, 0.0);
    const double inv = 1.0 / static_cast<double>(x.plane());
    for (std::size_t c = 0; c < x.channels; ++c) {
        double s = 0.0;
        for (double v : x.channel(c)) s += v;
        out[c] = s * inv;
    }
    return out;
}

FeatureMap global_average_backward(std::span<const double> grad_out, Dims3 dims) {
    FeatureMap g(grad_out.size(), dims);
    const double inv = 1.0 / static_cast<double>(dims.count());
    for (std::size_t c = 0; c < grad_out.size(); ++c) {
        auto gc = g.channel(c);
        std::fill(gc.begin(), gc.end(), grad_out[c] * inv);
    }
    return g;
}

} // namespace gtgm::layers
