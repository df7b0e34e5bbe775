#pragma once

// Loss algebra for pretraining: symmetric InfoNCE between image and text
// embeddings, the cross-correlation decorrelation loss between two augmented
// views, and their weighted combination. Every loss returns its value together
// with exact gradients with respect to each input embedding matrix.

#include "gtgm/tensor.hpp"

#include <map>
#include <string>

#include "json.hpp"

namespace gtgm::objectives {

enum class Side { image_view1, image_view2, image_vlp, text };

const char* side_name(Side side) noexcept;

// K x d matrix of embeddings for one batch, tagged with the branch it came from.
// Gradients in a LossReport are keyed by side name, so two inputs carrying the
// same side are treated as one shared input.
struct EmbeddingBatch {
    Matrix values;
    Side side = Side::image_view1;

    std::size_t batch() const noexcept { return values.rows(); }
    std::size_t width() const noexcept { return values.cols(); }
    void validate() const;
};

struct LossWeights {
    double lambda_vlp = 1.0;
    double lambda_vr = 0.01;
    double lambda_offdiag = 5e-3;
    double sigma1 = 0.07;

    void validate() const;
};

struct TermMask {
    bool vlp = true;
    bool vr = true;
};

struct LossReport {
    double total = 0.0;
    std::map<std::string, double> terms;
    std::map<std::string, Matrix> gradients;

    const Matrix& gradient(Side side) const;
    // {total, terms, grad_norms}; full gradients are never serialized.
    nlohmann::json to_json() const;
};

struct NormalizeOptions {
    double eps = 1e-8;
    bool strict = false;
};

// Columnwise (v - mean) / (std * sqrt(K)) with population std. Columns whose std
// falls below eps use std + eps, or raise a degeneracy error in strict mode.
Matrix batch_normalize(const Matrix& v, const NormalizeOptions& options = {});

// Vector-Jacobian product of batch_normalize at `v`.
Matrix batch_normalize_backward(const Matrix& v, const Matrix& grad_normalized, const NormalizeOptions& options = {});

struct SimilarityMatrix {
    Matrix s;
    double sigma1 = 1.0;

    // s^{t2v}, which is the transpose of s^{v2t}.
    Matrix text_to_image() const { return s.transpose(); }
};

// Raw dot products s_ij = <vhat_i, that_j>; temperature is applied inside the loss.
SimilarityMatrix similarity(const Matrix& vhat, const Matrix& that, double sigma1);

Matrix l2_normalize_rows(const Matrix& m);

LossReport vr_loss(const EmbeddingBatch& v1, const EmbeddingBatch& v2, const LossWeights& weights,
                   const NormalizeOptions& options = {});

// Symmetric InfoNCE. With `l2_normalize` set, rows are projected onto the unit
// sphere before the similarity so the temperature acts on cosine logits.
LossReport vlp_loss(const EmbeddingBatch& vhat, const EmbeddingBatch& that, double sigma1, bool l2_normalize = true);

// lambda_vlp * L_vlp + lambda_vr * L_vr over the enabled terms. Disabled terms
// may pass nullptr for inputs they alone use.
LossReport total_loss(const EmbeddingBatch* vhat_vlp, const EmbeddingBatch* that, const EmbeddingBatch* v1,
                      const EmbeddingBatch* v2, const LossWeights& weights, TermMask mask = {},
                      bool l2_normalize = true);

} // namespace gtgm::objectives
