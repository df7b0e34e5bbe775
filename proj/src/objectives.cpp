#include "gtgm/objectives.hpp"

#include "gtgm/error.hpp"

#include <algorithm>
#include <cmath>

namespace gtgm::objectives {

const char* side_name(Side side) noexcept {
    switch (side) {
    case Side::image_view1: return "image_view1";
    case Side::image_view2: return "image_view2";
    case Side::image_vlp: return "image_vlp";
    case Side::text: return "text";
    }
    return "unknown";
}

void EmbeddingBatch::validate() const {
    require(values.rows() >= 1 && values.cols() >= 1, ErrorKind::dimension,
            std::string("embedding batch ") + side_name(side) + " must be at least 1x1");
    require(values.all_finite(), ErrorKind::numeric, std::string("non-finite entry in embedding batch ") + side_name(side));
}

void LossWeights::validate() const {
    require(lambda_vlp >= 0.0 && lambda_vr >= 0.0 && lambda_offdiag >= 0.0, ErrorKind::config,
            "loss weights must be non-negative");
    require(sigma1 > 0.0, ErrorKind::config, "temperature sigma1 must be positive, got " + std::to_string(sigma1));
}

const Matrix& LossReport::gradient(Side side) const {
    const auto it = gradients.find(side_name(side));
    require(it != gradients.end(), ErrorKind::config, std::string("no gradient for input ") + side_name(side));
    return it->second;
}

nlohmann::json LossReport::to_json() const {
    nlohmann::json j;
    j["total"] = total;
    j["terms"] = terms;
    nlohmann::json norms = nlohmann::json::object();
    for (const auto& [name, g] : gradients) {
        norms[name] = g.frobenius_norm();
    }
    j["grad_norms"] = norms;
    return j;
}

namespace {

struct ColumnStats {
    double mean = 0.0;
    double sd = 0.0;      // population standard deviation
    double sd_eff = 0.0;  // sd, or sd + eps for a degenerate column
};

std::vector<ColumnStats> column_stats(const Matrix& v, const NormalizeOptions& options) {
    const std::size_t k = v.rows();
    std::vector<ColumnStats> stats(v.cols());
    for (std::size_t j = 0; j < v.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            mean += v(i, j);
        }
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double c = v(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(k);
        const double sd = std::sqrt(var);
        if (sd < options.eps && options.strict) {
            fail(ErrorKind::degeneracy, "feature " + std::to_string(j) + " has zero variance across the batch");
        }
        stats[j] = {mean, sd, sd < options.eps ? sd + options.eps : sd};
    }
    return stats;
}

} // namespace

Matrix batch_normalize(const Matrix& v, const NormalizeOptions& options) {
    require(v.rows() >= 1, ErrorKind::dimension, "batch_normalize needs at least one row");
    const auto stats = column_stats(v, options);
    const double root_k = std::sqrt(static_cast<double>(v.rows()));
    Matrix out(v.rows(), v.cols());
    for (std::size_t i = 0; i < v.rows(); ++i) {
        for (std::size_t j = 0; j < v.cols(); ++j) {
            out(i, j) = (v(i, j) - stats[j].mean) / (stats[j].sd_eff * root_k);
        }
    }
    return out;
}

Matrix batch_normalize_backward(const Matrix& v, const Matrix& grad_normalized, const NormalizeOptions& options) {
    require(v.rows() == grad_normalized.rows() && v.cols() == grad_normalized.cols(), ErrorKind::dimension,
            "batch_normalize_backward shape mismatch");
    const auto stats = column_stats(v, options);
    const std::size_t k = v.rows();
    const double kd = static_cast<double>(k);
    const double root_k = std::sqrt(kd);
    Matrix grad(k, v.cols());
    for (std::size_t j = 0; j < v.cols(); ++j) {
        const auto& st = stats[j];
        // out = c / (sd_eff * sqrt K) with c = v - mean; d sd / d v_i = c_i / (K sd).
        double mean_g = 0.0;
        double dot_gc = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            mean_g += grad_normalized(i, j);
            dot_gc += grad_normalized(i, j) * (v(i, j) - st.mean);
        }
        mean_g /= kd;
        for (std::size_t i = 0; i < k; ++i) {
            const double c = v(i, j) - st.mean;
            double g = (grad_normalized(i, j) - mean_g) / (st.sd_eff * root_k);
            if (st.sd > 0.0) {
                g -= dot_gc * c / (kd * st.sd * st.sd_eff * st.sd_eff * root_k);
            }
            grad(i, j) = g;
        }
    }
    return grad;
}

SimilarityMatrix similarity(const Matrix& vhat, const Matrix& that, double sigma1) {
    require(vhat.rows() == that.rows() && vhat.cols() == that.cols(), ErrorKind::dimension,
            "similarity inputs must share shape");
    require(sigma1 > 0.0, ErrorKind::config, "temperature sigma1 must be positive");
    return {matmul_nt(vhat, that), sigma1};
}

namespace {

constexpr double kNormFloor = 1e-12;

Matrix l2_normalize_rows_backward(const Matrix& m, const Matrix& grad_out) {
    Matrix grad(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto r = m.row(i);
        double n2 = 0.0;
        for (double v : r) {
            n2 += v * v;
        }
        const double norm = std::sqrt(n2);
        const auto g = grad_out.row(i);
        if (norm <= kNormFloor) {
            for (std::size_t j = 0; j < m.cols(); ++j) {
                grad(i, j) = g[j] / kNormFloor;
            }
            continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            dot += g[j] * r[j];
        }
        for (std::size_t j = 0; j < m.cols(); ++j) {
            grad(i, j) = (g[j] - r[j] * dot / n2) / norm;
        }
    }
    return grad;
}

void check_pair(const EmbeddingBatch& a, const EmbeddingBatch& b, const char* what) {
    a.validate();
    b.validate();
    require(a.batch() == b.batch() && a.width() == b.width(), ErrorKind::dimension,
            std::string(what) + " inputs differ in shape: " + std::to_string(a.batch()) + "x" + std::to_string(a.width()) +
                " vs " + std::to_string(b.batch()) + "x" + std::to_string(b.width()));
}

void accumulate(std::map<std::string, Matrix>& into, Side side, const Matrix& grad, double scale) {
    const std::string key = side_name(side);
    auto it = into.find(key);
    if (it == into.end()) {
        into.emplace(key, scale * grad);
    } else {
        it->second += scale * grad;
    }
}

} // namespace

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto r = m.row(i);
        double n2 = 0.0;
        for (double v : r) {
            n2 += v * v;
        }
        const double norm = std::max(std::sqrt(n2), kNormFloor);
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(i, j) = r[j] / norm;
        }
    }
    return out;
}

LossReport vr_loss(const EmbeddingBatch& v1, const EmbeddingBatch& v2, const LossWeights& weights,
                   const NormalizeOptions& options) {
    check_pair(v1, v2, "vr_loss");
    weights.validate();
    require(v1.batch() >= 2, ErrorKind::degeneracy, "vr_loss needs a batch of at least 2 (variance undefined for K=1)");

    const std::size_t d = v1.width();
    const Matrix n1 = batch_normalize(v1.values, options);
    const Matrix n2 = batch_normalize(v2.values, options);
    const Matrix c = matmul_tn(n1, n2);

    const double inv_d = 1.0 / static_cast<double>(d);
    double on_diag = 0.0;
    double off_diag = 0.0;
    Matrix grad_c(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (i == j) {
                const double r = 1.0 - c(i, i);
                on_diag += r * r;
                grad_c(i, i) = -2.0 * r * inv_d;
            } else {
                off_diag += c(i, j) * c(i, j);
                grad_c(i, j) = 2.0 * weights.lambda_offdiag * c(i, j) * inv_d;
            }
        }
    }
    const double loss = inv_d * (on_diag + weights.lambda_offdiag * off_diag);

    // C = N1^T N2: dN1 = N2 G^T, dN2 = N1 G.
    const Matrix grad_n1 = matmul_nt(n2, grad_c);
    const Matrix grad_n2 = matmul(n1, grad_c);

    LossReport report;
    report.total = loss;
    report.terms["vr"] = loss;
    accumulate(report.gradients, v1.side, batch_normalize_backward(v1.values, grad_n1, options), 1.0);
    accumulate(report.gradients, v2.side, batch_normalize_backward(v2.values, grad_n2, options), 1.0);
    return report;
}

LossReport vlp_loss(const EmbeddingBatch& vhat, const EmbeddingBatch& that, double sigma1, bool l2_normalize) {
    check_pair(vhat, that, "vlp_loss");
    require(sigma1 > 0.0, ErrorKind::config, "temperature sigma1 must be positive, got " + std::to_string(sigma1));

    const std::size_t k = vhat.batch();
    const Matrix vn = l2_normalize ? l2_normalize_rows(vhat.values) : vhat.values;
    const Matrix tn = l2_normalize ? l2_normalize_rows(that.values) : that.values;
    const SimilarityMatrix sim = similarity(vn, tn, sigma1);
    const Matrix& s = sim.s;

    // Row softmax of s / sigma (image->text) and column softmax (text->image).
    Matrix p_v2t(k, k);
    Matrix p_t2v(k, k);  // p_t2v(i, j): probability that text i matches image j
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double m_row = -INFINITY;
        double m_col = -INFINITY;
        for (std::size_t j = 0; j < k; ++j) {
            m_row = std::max(m_row, s(i, j) / sigma1);
            m_col = std::max(m_col, s(j, i) / sigma1);
        }
        double z_row = 0.0;
        double z_col = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p_v2t(i, j) = std::exp(s(i, j) / sigma1 - m_row);
            p_t2v(i, j) = std::exp(s(j, i) / sigma1 - m_col);
            z_row += p_v2t(i, j);
            z_col += p_t2v(i, j);
        }
        for (std::size_t j = 0; j < k; ++j) {
            p_v2t(i, j) /= z_row;
            p_t2v(i, j) /= z_col;
        }
        const double lse_row = m_row + std::log(z_row);
        const double lse_col = m_col + std::log(z_col);
        loss_sum += (lse_row - s(i, i) / sigma1) + (lse_col - s(i, i) / sigma1);
    }
    const double scale = 1.0 / (2.0 * static_cast<double>(k));
    const double loss = scale * loss_sum;

    Matrix grad_s(k, k);
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
            const double delta = a == b ? 1.0 : 0.0;
            grad_s(a, b) = scale / sigma1 * ((p_v2t(a, b) - delta) + (p_t2v(b, a) - delta));
        }
    }
    Matrix grad_vn = matmul(grad_s, tn);
    Matrix grad_tn = matmul_tn(grad_s, vn);

    LossReport report;
    report.total = loss;
    report.terms["vlp"] = loss;
    accumulate(report.gradients, vhat.side, l2_normalize ? l2_normalize_rows_backward(vhat.values, grad_vn) : grad_vn,
               1.0);
    accumulate(report.gradients, that.side, l2_normalize ? l2_normalize_rows_backward(that.values, grad_tn) : grad_tn,
               1.0);
    return report;
}

LossReport total_loss(const EmbeddingBatch* vhat_vlp, const EmbeddingBatch* that, const EmbeddingBatch* v1,
                      const EmbeddingBatch* v2, const LossWeights& weights, TermMask mask, bool l2_normalize) {
    weights.validate();
    require(mask.vlp || mask.vr, ErrorKind::config, "total_loss needs at least one enabled term");

    LossReport report;
    if (mask.vlp) {
        require(vhat_vlp != nullptr && that != nullptr, ErrorKind::config, "vlp term enabled without its inputs");
        const LossReport vlp = vlp_loss(*vhat_vlp, *that, weights.sigma1, l2_normalize);
        report.terms["vlp"] = vlp.total;
        report.total += weights.lambda_vlp * vlp.total;
        for (const auto& [name, g] : vlp.gradients) {
            auto it = report.gradients.find(name);
            if (it == report.gradients.end()) {
                report.gradients.emplace(name, weights.lambda_vlp * g);
            } else {
                it->second += weights.lambda_vlp * g;
            }
        }
    }
    if (mask.vr) {
        require(v1 != nullptr && v2 != nullptr, ErrorKind::config, "vr term enabled without its inputs");
        if (mask.vlp && vhat_vlp->side == v1->side) {
            require(vhat_vlp->values == v1->values, ErrorKind::config,
                    "inputs tagged with the same side must hold identical embeddings");
        }
        const LossReport vr = vr_loss(*v1, *v2, weights);
        report.terms["vr"] = vr.total;
        report.total += weights.lambda_vr * vr.total;
        for (const auto& [name, g] : vr.gradients) {
            auto it = report.gradients.find(name);
            if (it == report.gradients.end()) {
                report.gradients.emplace(name, weights.lambda_vr * g);
            } else {
                it->second += weights.lambda_vr * g;
            }
        }
    }
    return report;
}

} // namespace gtgm::objectives
