#include "gtgm/projection.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace gtgm::projection {

Eigen symmetric_eigen(const Matrix& input, double tol, std::size_t max_sweeps) {
    const std::size_t n = input.rows();
    require(n == input.cols(), ErrorKind::dimension, "eigen-decomposition needs a square matrix");
    Matrix a = input;
    Matrix v = Matrix::identity(n);
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0, total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                total += a(i, j) * a(i, j);
                if (i != j) off += a(i, j) * a(i, j);
            }
        if (off <= tol * tol * std::max(total, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    Eigen e;
    e.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        e.values.push_back(a(order[j], order[j]));
        for (std::size_t k = 0; k < n; ++k) e.vectors(k, j) = v(k, order[j]);
    }
    return e;
}

Matrix covariance(const Matrix& x) {
    require(x.rows() >= 1, ErrorKind::degeneracy, "covariance needs at least one row");
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j) / static_cast<double>(n);
    Matrix c(d, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) c(a, b) += (x(i, a) - mean[a]) * (x(i, b) - mean[b]) / static_cast<double>(n);
    return c;
}

Projection principal_components(const Matrix& x, std::size_t components) {
    require(components >= 1 && components <= x.cols(), ErrorKind::dimension,
            "cannot take " + std::to_string(components) + " components of width " + std::to_string(x.cols()));
    const std::size_t n = x.rows(), d = x.cols();
    const auto eig = symmetric_eigen(covariance(x));
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j) / static_cast<double>(n);
    Projection p;
    p.components = Matrix(d, components);
    for (std::size_t c = 0; c < components; ++c) {
        std::size_t big = 0;
        for (std::size_t k = 1; k < d; ++k)
            if (std::abs(eig.vectors(k, c)) > std::abs(eig.vectors(big, c))) big = k;
        const double sign = eig.vectors(big, c) < 0.0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < d; ++k) p.components(k, c) = sign * eig.vectors(k, c);
        p.variances.push_back(std::max(eig.values[c], 0.0));
    }
    p.coords = Matrix(n, components);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < components; ++c)
            for (std::size_t k = 0; k < d; ++k) p.coords(i, c) += (x(i, k) - mean[k]) * p.components(k, c);
    return p;
}

std::string scatter_svg(const Matrix& coords, const std::vector<std::string>& tags, const std::string& title) {
    require(coords.cols() >= 2 && coords.rows() == tags.size(), ErrorKind::dimension, "scatter needs 2D coords and one tag per row");
    static const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};
    std::vector<std::string> groups;
    for (const auto& t : tags)
        if (std::find(groups.begin(), groups.end(), t) == groups.end()) groups.push_back(t);
    const auto color = [&](const std::string& t) {
        const auto g = static_cast<std::size_t>(std::find(groups.begin(), groups.end(), t) - groups.begin());
        return palette[g % std::size(palette)];
    };
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    for (std::size_t i = 0; i < coords.rows(); ++i) {
        x0 = std::min(x0, coords(i, 0));
        x1 = std::max(x1, coords(i, 0));
        y0 = std::min(y0, coords(i, 1));
        y1 = std::max(y1, coords(i, 1));
    }
    const double w = 480, h = 480, m = 40;
    const double sx = (w - 2 * m) / std::max(x1 - x0, 1e-12), sy = (h - 2 * m) / std::max(y1 - y0, 1e-12);
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w + 160 << "\" height=\"" << h << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << m << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    out << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << w - 2 * m << "\" height=\"" << h - 2 * m
        << "\" fill=\"none\" stroke=\"#999\"/>\n";
    for (std::size_t i = 0; i < coords.rows(); ++i) {
        out << "<circle cx=\"" << m + (coords(i, 0) - x0) * sx << "\" cy=\"" << h - m - (coords(i, 1) - y0) * sy
            << "\" r=\"4\" fill=\"" << color(tags[i]) << "\" fill-opacity=\"0.8\"/>\n";
    }
    out << "<g class=\"legend\">\n";
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double y = m + 20.0 * static_cast<double>(g);
        out << "<circle cx=\"" << w + 10 << "\" cy=\"" << y << "\" r=\"5\" fill=\"" << color(groups[g]) << "\"/>";
        out << "<text x=\"" << w + 22 << "\" y=\"" << y + 4 << "\" font-family=\"sans-serif\" font-size=\"12\">" << groups[g]
            << "</text>\n";
    }
    out << "</g>\n</svg>\n";
    return out.str();
}

} // namespace gtgm::projection
