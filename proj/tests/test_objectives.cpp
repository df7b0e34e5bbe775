#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gtgm/error.hpp"
#include "gtgm/objectives.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numeric>

using namespace gtgm;
using namespace gtgm::objectives;
using test_support::numeric_gradient;
using test_support::random_matrix;
using test_support::relative_error;

namespace {

// Independent evaluators written straight from the loss definitions. They share
// no code with the library and serve as the finite-difference targets.

Matrix oracle_normalize(const Matrix& v) {
    const std::size_t k = v.rows();
    Matrix out(k, v.cols());
    for (std::size_t j = 0; j < v.cols(); ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < k; ++i) mu += v(i, j);
        mu /= static_cast<double>(k);
        double var = 0.0;
        for (std::size_t i = 0; i < k; ++i) var += (v(i, j) - mu) * (v(i, j) - mu);
        const double sd = std::sqrt(var / static_cast<double>(k));
        for (std::size_t i = 0; i < k; ++i) out(i, j) = (v(i, j) - mu) / (sd * std::sqrt(static_cast<double>(k)));
    }
    return out;
}

double oracle_vr(const Matrix& v1, const Matrix& v2, double lambda_off) {
    const Matrix a = oracle_normalize(v1);
    const Matrix b = oracle_normalize(v2);
    const std::size_t d = v1.cols();
    double loss = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double c = 0.0;
            for (std::size_t k = 0; k < v1.rows(); ++k) c += a(k, i) * b(k, j);
            loss += i == j ? (1.0 - c) * (1.0 - c) : lambda_off * c * c;
        }
    }
    return loss / static_cast<double>(d);
}

std::vector<double> unit(std::span<const double> r) {
    double n = 0.0;
    for (double v : r) n += v * v;
    n = std::sqrt(n);
    std::vector<double> out(r.begin(), r.end());
    for (double& v : out) v /= n;
    return out;
}

double oracle_vlp(const Matrix& v, const Matrix& t, double sigma) {
    const std::size_t k = v.rows();
    std::vector<std::vector<double>> s(k, std::vector<double>(k));
    for (std::size_t i = 0; i < k; ++i) {
        const auto a = unit(v.row(i));
        for (std::size_t j = 0; j < k; ++j) {
            const auto b = unit(t.row(j));
            s[i][j] = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double zr = 0.0;
        double zc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            zr += std::exp(s[i][j] / sigma);
            zc += std::exp(s[j][i] / sigma);
        }
        total += -std::log(std::exp(s[i][i] / sigma) / zr) - std::log(std::exp(s[i][i] / sigma) / zc);
    }
    return total / (2.0 * static_cast<double>(k));
}

EmbeddingBatch batch(Matrix m, Side side) { return {std::move(m), side}; }

} // namespace

TEST_CASE("batch_normalize two-row column") {
    const Matrix v = Matrix::from_rows({{1.0}, {-1.0}});
    const Matrix n = batch_normalize(v);
    CHECK(n(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(n(1, 0) == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("batch_normalize columns are zero-mean unit-norm") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto k = static_cast<std::size_t>(rng.range(2, 9));
        const auto d = static_cast<std::size_t>(rng.range(1, 7));
        const Matrix n = batch_normalize(random_matrix(rng, k, d, 3.0));
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            double norm = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                mean += n(i, j);
                norm += n(i, j) * n(i, j);
            }
            CHECK(std::abs(mean / static_cast<double>(k)) < 1e-12);
            CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("batch_normalize strict mode rejects a constant column") {
    const Matrix v = Matrix::from_rows({{2.0, 1.0}, {2.0, 3.0}, {2.0, 5.0}});
    try {
        (void)batch_normalize(v, {1e-8, true});
        FAIL("expected degeneracy error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degeneracy);
        CHECK(std::string(e.what()).find("feature 0") != std::string::npos);
    }
    // Lenient mode maps the constant column to zeros.
    const Matrix n = batch_normalize(v);
    CHECK(n(0, 0) == 0.0);
    CHECK(n(2, 0) == 0.0);
}

TEST_CASE("batch_normalize is invariant to per-feature positive affine maps") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix v = random_matrix(rng, 6, 4);
        Matrix w = v;
        for (std::size_t j = 0; j < 4; ++j) {
            const double a = rng.uniform(0.1, 5.0);
            const double b = rng.uniform(-3.0, 3.0);
            for (std::size_t i = 0; i < 6; ++i) w(i, j) = a * v(i, j) + b;
        }
        CHECK(max_abs_diff(batch_normalize(v), batch_normalize(w)) < 1e-12);
    }
}

TEST_CASE("vr_loss worked examples") {
    const Matrix eye = Matrix::from_rows({{1, 0}, {0, 1}});
    LossWeights w;
    const LossReport same = vr_loss(batch(eye, Side::image_view1), batch(eye, Side::image_view2), w);
    CHECK(same.total == doctest::Approx(0.005).epsilon(1e-13));

    const Matrix neg = -1.0 * eye;
    const LossReport flipped = vr_loss(batch(eye, Side::image_view1), batch(neg, Side::image_view2), w);
    CHECK(flipped.total == doctest::Approx(4.005).epsilon(1e-13));

    w.lambda_offdiag = 0.25;
    CHECK(vr_loss(batch(eye, Side::image_view1), batch(eye, Side::image_view2), w).total ==
          doctest::Approx(0.25).epsilon(1e-13));
}

TEST_CASE("vr_loss is zero for orthonormal normalized columns") {
    const Matrix v = Matrix::from_rows({{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}});
    const LossReport r = vr_loss(batch(v, Side::image_view1), batch(v, Side::image_view2), LossWeights{});
    CHECK(r.total < 1e-24);
}

TEST_CASE("vr_loss error paths") {
    const Matrix one = Matrix::from_rows({{1.0, 2.0}});
    CHECK_THROWS_AS(vr_loss(batch(one, Side::image_view1), batch(one, Side::image_view2), LossWeights{}), Error);
    try {
        (void)vr_loss(batch(one, Side::image_view1), batch(one, Side::image_view2), LossWeights{});
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degeneracy);
    }
    const Matrix a(3, 2, 1.0);
    const Matrix b(3, 4, 1.0);
    try {
        (void)vr_loss(batch(a, Side::image_view1), batch(b, Side::image_view2), LossWeights{});
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
    }
}

TEST_CASE("similarity matrix shapes and transpose") {
    const Matrix eye = Matrix::identity(3);
    CHECK(similarity(eye, eye, 0.07).s == eye);

    Rng rng(5);
    const Matrix v = random_matrix(rng, 4, 3);
    const Matrix t = random_matrix(rng, 4, 3);
    const auto st = similarity(v, t, 1.0);
    const auto ts = similarity(t, v, 1.0);
    CHECK(max_abs_diff(st.s.transpose(), ts.s) == 0.0);
    CHECK(st.text_to_image() == ts.s);

    const Matrix a = Matrix::from_rows({{1.0, 2.0}});
    const Matrix b = Matrix::from_rows({{3.0, -1.0}});
    const auto single = similarity(a, b, 1.0);
    CHECK(single.s.rows() == 1);
    CHECK(single.s(0, 0) == 1.0);
    CHECK_THROWS_AS(similarity(a, Matrix(2, 2), 1.0), Error);
}

TEST_CASE("vlp_loss worked examples") {
    const Matrix a = Matrix::from_rows({{0.3, -1.2, 2.0}});
    const Matrix b = Matrix::from_rows({{1.0, 0.5, 0.0}});
    CHECK(vlp_loss(batch(a, Side::image_vlp), batch(b, Side::text), 0.07).total == 0.0);

    // K = 2 with identity similarities: every row is log(1 + exp(-1/sigma)).
    const Matrix eye = Matrix::identity(2);
    const double direct_one = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(0.0)));
    CHECK(direct_one == doctest::Approx(0.31326168751822286).epsilon(1e-15));
    CHECK(std::abs(vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), 1.0).total - direct_one) < 1e-12);

    const double sigma = 0.07;
    const double direct_default = -std::log(std::exp(1.0 / sigma) / (std::exp(1.0 / sigma) + 1.0));
    const double got = vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), sigma).total;
    CHECK(got == doctest::Approx(direct_default).epsilon(1e-9));
    CHECK(got == doctest::Approx(6.2e-7).epsilon(0.01));

    CHECK_THROWS_AS(vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), 0.0), Error);
}

TEST_CASE("vlp_loss matches the direct softmax enumeration") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const auto k = static_cast<std::size_t>(rng.range(1, 8));
        const auto d = static_cast<std::size_t>(rng.range(2, 10));
        const Matrix v = random_matrix(rng, k, d);
        const Matrix t = random_matrix(rng, k, d);
        const double sigma = rng.uniform(0.05, 2.0);
        const double expect = oracle_vlp(v, t, sigma);
        CHECK(vlp_loss(batch(v, Side::image_vlp), batch(t, Side::text), sigma).total ==
              doctest::Approx(expect).epsilon(1e-11));
    }
}

TEST_CASE("total_loss composition") {
    const Matrix eye = Matrix::identity(2);
    LossWeights w;
    w.sigma1 = 1.0;
    const EmbeddingBatch vi = batch(eye, Side::image_vlp);
    const EmbeddingBatch tx = batch(eye, Side::text);
    const EmbeddingBatch v1 = batch(eye, Side::image_view1);
    const EmbeddingBatch v2 = batch(eye, Side::image_view2);
    const LossReport r = total_loss(&vi, &tx, &v1, &v2, w);
    CHECK(r.terms.at("vlp") == doctest::Approx(0.31326168751822286).epsilon(1e-12));
    CHECK(r.terms.at("vr") == doctest::Approx(0.005).epsilon(1e-12));
    CHECK(r.total == doctest::Approx(0.31331168751822286).epsilon(1e-12));
    CHECK(std::abs(r.total - (w.lambda_vlp * r.terms.at("vlp") + w.lambda_vr * r.terms.at("vr"))) <= 1e-10 * r.total);

    const Matrix h = Matrix::from_rows({{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}});
    const EmbeddingBatch hv = batch(h, Side::image_view1);
    const EmbeddingBatch hv2 = batch(h, Side::image_view2);
    const LossReport zero = total_loss(nullptr, nullptr, &hv, &hv2, w, {false, true});
    CHECK(zero.total < 1e-24);

    CHECK_THROWS_AS(total_loss(&vi, &tx, &v1, &v2, w, {false, false}), Error);
}

TEST_CASE("total_loss with lambda_vr = 0 reduces to the vlp gradients") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix a = random_matrix(rng, 5, 4);
        const Matrix b = random_matrix(rng, 5, 4);
        const Matrix t = random_matrix(rng, 5, 4);
        LossWeights w;
        w.lambda_vr = 0.0;
        const EmbeddingBatch v1 = batch(a, Side::image_view1);
        const EmbeddingBatch v2 = batch(b, Side::image_view2);
        const EmbeddingBatch tx = batch(t, Side::text);
        const LossReport total = total_loss(&v1, &tx, &v1, &v2, w);
        const LossReport vlp = vlp_loss(v1, tx, w.sigma1);
        CHECK(max_abs_diff(total.gradient(Side::image_view1), vlp.gradient(Side::image_view1)) == 0.0);
        CHECK(max_abs_diff(total.gradient(Side::text), vlp.gradient(Side::text)) == 0.0);
        CHECK(total.gradient(Side::image_view2).frobenius_norm() == 0.0);
    }
}

TEST_CASE("total_loss rejects shared sides with different values") {
    const Matrix a = Matrix::identity(3);
    const Matrix b = 2.0 * Matrix::identity(3);
    const EmbeddingBatch vi = batch(a, Side::image_view1);
    const EmbeddingBatch v1 = batch(b, Side::image_view1);
    const EmbeddingBatch v2 = batch(b, Side::image_view2);
    const EmbeddingBatch tx = batch(a, Side::text);
    CHECK_THROWS_AS(total_loss(&vi, &tx, &v1, &v2, LossWeights{}), Error);
}

TEST_CASE("gradients match central finite differences of the independent evaluators") {
    Rng rng(2024);
    const double step = 1e-6;
    double worst_vr = 0.0;
    double worst_vlp = 0.0;
    double worst_total = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto k = static_cast<std::size_t>(rng.range(2, 8));
        const auto d = static_cast<std::size_t>(rng.range(3, 16));
        Matrix a = random_matrix(rng, k, d);
        Matrix b = random_matrix(rng, k, d);
        Matrix t = random_matrix(rng, k, d);
        LossWeights w;
        w.lambda_offdiag = rng.uniform(0.0, 1.0);
        w.sigma1 = rng.uniform(0.07, 1.5);

        const LossReport vr = vr_loss(batch(a, Side::image_view1), batch(b, Side::image_view2), w);
        CHECK(vr.total == doctest::Approx(oracle_vr(a, b, w.lambda_offdiag)).epsilon(1e-10));
        const auto f_vr = [&] { return oracle_vr(a, b, w.lambda_offdiag); };
        worst_vr = std::max(worst_vr, relative_error(vr.gradient(Side::image_view1), numeric_gradient(a, f_vr, step)));
        worst_vr = std::max(worst_vr, relative_error(vr.gradient(Side::image_view2), numeric_gradient(b, f_vr, step)));

        const LossReport vlp = vlp_loss(batch(a, Side::image_vlp), batch(t, Side::text), w.sigma1);
        const auto f_vlp = [&] { return oracle_vlp(a, t, w.sigma1); };
        worst_vlp = std::max(worst_vlp, relative_error(vlp.gradient(Side::image_vlp), numeric_gradient(a, f_vlp, step)));
        worst_vlp = std::max(worst_vlp, relative_error(vlp.gradient(Side::text), numeric_gradient(t, f_vlp, step)));

        // The vlp image branch shares view 1, so both terms flow into one gradient.
        const EmbeddingBatch e1 = batch(a, Side::image_view1);
        const EmbeddingBatch e2 = batch(b, Side::image_view2);
        const EmbeddingBatch et = batch(t, Side::text);
        const LossReport tot = total_loss(&e1, &et, &e1, &e2, w);
        const auto f_tot = [&] {
            return w.lambda_vlp * oracle_vlp(a, t, w.sigma1) + w.lambda_vr * oracle_vr(a, b, w.lambda_offdiag);
        };
        worst_total = std::max(worst_total, relative_error(tot.gradient(Side::image_view1), numeric_gradient(a, f_tot, step)));
        worst_total = std::max(worst_total, relative_error(tot.gradient(Side::image_view2), numeric_gradient(b, f_tot, step)));
        worst_total = std::max(worst_total, relative_error(tot.gradient(Side::text), numeric_gradient(t, f_tot, step)));
    }
    MESSAGE("max relative error vr=" << worst_vr << " vlp=" << worst_vlp << " total=" << worst_total);
    CHECK(worst_vr < 1e-5);
    CHECK(worst_vlp < 1e-5);
    CHECK(worst_total < 1e-5);
}

TEST_CASE("vlp_loss is invariant to a shared batch permutation and to swapping sides") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const auto k = static_cast<std::size_t>(rng.range(2, 8));
        const Matrix v = random_matrix(rng, k, 6);
        const Matrix t = random_matrix(rng, k, 6);
        std::vector<std::size_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Matrix pv(k, 6);
        Matrix pt(k, 6);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < 6; ++j) {
                pv(i, j) = v(perm[i], j);
                pt(i, j) = t(perm[i], j);
            }
        }
        const double base = vlp_loss(batch(v, Side::image_vlp), batch(t, Side::text), 0.07).total;
        CHECK(vlp_loss(batch(pv, Side::image_vlp), batch(pt, Side::text), 0.07).total == doctest::Approx(base).epsilon(1e-12));
        CHECK(vlp_loss(batch(t, Side::image_vlp), batch(v, Side::text), 0.07).total == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("vr_loss is invariant to shared per-feature affine maps and non-negative") {
    Rng rng(37);
    for (int trial = 0; trial < 100; ++trial) {
        const auto k = static_cast<std::size_t>(rng.range(2, 8));
        const auto d = static_cast<std::size_t>(rng.range(2, 8));
        const Matrix a = random_matrix(rng, k, d);
        const Matrix b = random_matrix(rng, k, d);
        Matrix a2 = a;
        Matrix b2 = b;
        for (std::size_t j = 0; j < d; ++j) {
            const double s = rng.uniform(0.2, 4.0);
            const double o = rng.uniform(-2.0, 2.0);
            for (std::size_t i = 0; i < k; ++i) {
                a2(i, j) = s * a(i, j) + o;
                b2(i, j) = s * b(i, j) + o;
            }
        }
        const LossWeights w;
        const double base = vr_loss(batch(a, Side::image_view1), batch(b, Side::image_view2), w).total;
        CHECK(base > 0.0);
        CHECK(vr_loss(batch(a2, Side::image_view1), batch(b2, Side::image_view2), w).total ==
              doctest::Approx(base).epsilon(1e-10));
    }
}

TEST_CASE("vr_loss minimization drives C to the identity") {
    Rng rng(41);
    for (int start = 0; start < 3; ++start) {
        Matrix a = random_matrix(rng, 8, 3);
        Matrix b = random_matrix(rng, 8, 3);
        LossWeights w;
        w.lambda_offdiag = 1.0;
        double loss = 0.0;
        for (int it = 0; it < 20000; ++it) {
            const LossReport r = vr_loss(batch(a, Side::image_view1), batch(b, Side::image_view2), w);
            loss = r.total;
            if (loss < 1e-7) break;
            a += -0.5 * r.gradient(Side::image_view1);
            b += -0.5 * r.gradient(Side::image_view2);
        }
        CHECK(loss < 1e-6);
        const Matrix c = matmul_tn(batch_normalize(a), batch_normalize(b));
        CHECK(max_abs_diff(c, Matrix::identity(3)) < 1e-3);
    }
}

TEST_CASE("vlp_loss does not increase as the temperature falls for identity similarities") {
    const Matrix eye = Matrix::identity(4);
    double previous = INFINITY;
    for (double sigma = 2.0; sigma >= 0.05; sigma *= 0.8) {
        const double loss = vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), sigma).total;
        CHECK(loss <= previous);
        previous = loss;
    }
}

TEST_CASE("LossReport json carries totals, terms and gradient norms only") {
    const Matrix eye = Matrix::identity(2);
    const LossReport r = vlp_loss(batch(eye, Side::image_vlp), batch(eye, Side::text), 1.0);
    const auto j = r.to_json();
    CHECK(j.contains("total"));
    CHECK(j["terms"].contains("vlp"));
    CHECK(j["grad_norms"].contains("text"));
    CHECK(j.size() == 3);
}
