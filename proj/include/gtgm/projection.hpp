#pragma once

// Linear 2D projection of embeddings by principal components, and a static
// SVG scatter plot grouped by tag.

#include "gtgm/tensor.hpp"

#include <string>
#include <vector>

namespace gtgm::projection {

struct Eigen {
    std::vector<double> values;  // descending
    Matrix vectors;              // column j pairs with values[j]
};

// Cyclic Jacobi rotations on a symmetric matrix.
Eigen symmetric_eigen(const Matrix& a, double tol = 1e-13, std::size_t max_sweeps = 100);

// Population covariance of the rows.
Matrix covariance(const Matrix& x);

struct Projection {
    Matrix coords;                   // n x components, centered
    std::vector<double> variances;   // per component, descending
    Matrix components;               // d x components
};

// Projects onto the leading `components` eigenvectors of the covariance. The sign
// of each component is fixed so its largest-magnitude loading is positive.
Projection principal_components(const Matrix& x, std::size_t components = 2);

// One circle per row, colored by tag, with a legend of the distinct tags in first-seen order.
std::string scatter_svg(const Matrix& coords, const std::vector<std::string>& tags, const std::string& title);

} // namespace gtgm::projection
