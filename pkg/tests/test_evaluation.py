import json

import numpy as np
import pytest
import mpmath
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdut.data import scan_dataset
from mcdut.errors import AssetError, InvalidInputError, NumericalError
from mcdut.evaluation import (EmbeddingSet, IdentityExtractor, RandomProjectionExtractor, evaluate_translations,
                              extract_embeddings, fid, get_extractor, kid, kid_x100, load_eval_images,
                              mmd2_unbiased)


def emb(m):
    return EmbeddingSet(np.asarray(m, dtype=np.float64), "test")


def brute_fid(a, b):
    """Means and covariances by explicit loops in 50-digit arithmetic; the cross term from the
    eigenvalues of the covariance product."""
    with mpmath.workdps(50):
        def stats(x):
            n, d = len(x), len(x[0])
            mu = [mpmath.fsum(mpmath.mpf(x[i][k]) for i in range(n)) / n for k in range(d)]
            cov = mpmath.matrix(d, d)
            for p in range(d):
                for q in range(d):
                    cov[p, q] = mpmath.fsum((x[i][p] - mu[p]) * (x[i][q] - mu[q]) for i in range(n)) / (n - 1)
            return mu, cov

        (mu_a, ca), (mu_b, cb) = stats(a), stats(b)
        d = len(mu_a)
        mean_term = mpmath.fsum((p - q) ** 2 for p, q in zip(mu_a, mu_b))
        eig = mpmath.eig(ca * cb)[0]
        cross = mpmath.fsum(mpmath.sqrt(max(mpmath.re(e), 0)) for e in eig)
        trace = mpmath.fsum(ca[k, k] + cb[k, k] for k in range(d))
        return float(mean_term + trace - 2 * cross)


def brute_mmd2(x, y):
    m, d = len(x), len(x[0])

    def k(a, b):
        return (sum(a[t] * b[t] for t in range(d)) / d + 1) ** 3

    total = 0.0
    for i in range(m):
        for j in range(m):
            if i != j:
                total += k(x[i], x[j]) + k(y[i], y[j]) - k(x[i], y[j]) - k(x[j], y[i])
    return total / (m * (m - 1))


class TestFid:
    def test_self_is_zero(self, rng):
        a = emb(rng.standard_normal((30, 5)))
        assert abs(fid(a, a)) < 1e-6

    def test_one_dimensional_mean_shift(self):
        a = np.array([[-1.0], [1.0]]) / np.sqrt(2)  # sample variance 1 with the n - 1 denominator
        assert fid(emb(a), emb(a + 1)) == pytest.approx(1.0, abs=1e-6)

    def test_rotation_invariance(self, rng):
        a, b = rng.standard_normal((40, 4)), rng.standard_normal((40, 4)) * 1.5 + 0.3
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        assert fid(emb(a @ q), emb(b @ q)) == pytest.approx(fid(emb(a), emb(b)), abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            fid(emb(np.zeros((3, 2))), emb(np.zeros((3, 3))))

    def test_needs_two_rows(self):
        with pytest.raises(InvalidInputError):
            fid(emb(np.zeros((1, 2))), emb(np.zeros((3, 2))))

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            emb([[np.nan, 0.0], [1.0, 1.0]])

    def test_singular_covariances_closed_form(self):
        # two points per set: rank-1 covariances u u' and v v', so the cross term is |u . v|
        a, b = np.array([[0.3, -1.2], [1.1, 0.4]]), np.array([[2.0, 0.5], [-0.7, 1.9]])
        u, v = (a[0] - a[1]) / np.sqrt(2), (b[0] - b[1]) / np.sqrt(2)
        exact = ((a.mean(0) - b.mean(0)) ** 2).sum() + u @ u + v @ v - 2 * abs(u @ v)
        assert fid(emb(a), emb(b)) == pytest.approx(exact, abs=1e-12)

    def test_solver_failure_reported(self, monkeypatch):
        import mcdut.evaluation as ev

        def broken(*a, **k):
            raise np.linalg.LinAlgError("SVD did not converge")

        monkeypatch.setattr(ev.np.linalg, "svd", broken)
        with pytest.raises(NumericalError):
            fid(emb(np.eye(3)), emb(np.eye(3)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 20), m=st.integers(2, 20), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_fid_matches_brute_force_and_is_symmetric(n, m, d, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, d)), r.standard_normal((m, d)) * r.uniform(0.5, 2) + r.uniform(-1, 1)
    value = fid(emb(a), emb(b))
    assert value >= 0
    assert value == pytest.approx(fid(emb(b), emb(a)), abs=1e-8)
    assert value == pytest.approx(brute_fid(a.tolist(), b.tolist()), abs=1e-8)


class TestKid:
    def test_identical_sets(self, rng):
        a = emb(rng.standard_normal((20, 4)))
        assert abs(kid(a, a, num_subsets=3, subset_size=20)) < 1e-8

    def test_hand_two_by_two(self):
        # 1-D, two points per set: k(a, b) = (a * b + 1) ** 3
        x, y = [1.0, 2.0], [0.0, -1.0]
        k = lambda a, b: (a * b + 1) ** 3
        by_hand = (2 * k(x[0], x[1]) + 2 * k(y[0], y[1]) - 2 * k(x[0], y[1]) - 2 * k(x[1], y[0])) / 2
        assert by_hand == (2 * 27 + 2 * 1 - 2 * 0 - 2 * 1) / 2
        got = kid(emb([[v] for v in x]), emb([[v] for v in y]), num_subsets=1, subset_size=2)
        assert got == pytest.approx(by_hand, abs=1e-12)

    def test_reporting_scale(self, monkeypatch):
        import mcdut.evaluation as ev

        monkeypatch.setattr(ev, "kid", lambda *a, **k: 0.00385)
        assert ev.kid_x100(emb(np.zeros((2, 1))), emb(np.zeros((2, 1)))) == pytest.approx(0.385, abs=1e-12)

    def test_scaled_matches_raw(self, rng):
        a, b = emb(rng.standard_normal((10, 3))), emb(rng.standard_normal((10, 3)) + 0.5)
        assert kid_x100(a, b) == pytest.approx(100 * kid(a, b), rel=1e-12)

    def test_too_few(self):
        with pytest.raises(InvalidInputError):
            mmd2_unbiased(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_unbiased_on_same_distribution(self):
        r = np.random.default_rng(2024)
        vals = [kid(emb(r.standard_normal((20, 3))), emb(r.standard_normal((20, 3))), num_subsets=1,
                    subset_size=20) for _ in range(100)]
        se = np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(np.mean(vals)) < 3 * se

    def test_subsets_seeded(self, rng):
        a, b = emb(rng.standard_normal((150, 3))), emb(rng.standard_normal((150, 3)))
        assert kid(a, b, seed=4) == kid(a, b, seed=4)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 20), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_mmd_matches_brute_force(n, d, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((n, d)), r.standard_normal((n, d)) + r.uniform(-1, 1)
    assert mmd2_unbiased(x, y) == pytest.approx(brute_mmd2(x.tolist(), y.tolist()), abs=1e-8)
    assert kid(emb(x), emb(y), num_subsets=2, subset_size=n) == pytest.approx(brute_mmd2(x.tolist(), y.tolist()),
                                                                              abs=1e-8)


class TestExtractors:
    def test_identity_rows_are_pixels(self):
        imgs = torch.tensor([[[[0.0, 0.5], [1.0, -1.0]]], [[[0.25, 0.25], [0.0, 1.0]]]])
        got = extract_embeddings(imgs, IdentityExtractor())
        assert got.matrix.tolist() == [[0.0, 0.5, 1.0, -1.0], [0.25, 0.25, 0.0, 1.0]]

    def test_deterministic_and_one_row_per_image(self):
        imgs = torch.rand(5, 3, 32, 32)
        a = extract_embeddings(imgs, RandomProjectionExtractor(dim=8))
        b = extract_embeddings(imgs, RandomProjectionExtractor(dim=8))
        assert a.matrix.shape == (5, 8) and np.array_equal(a.matrix, b.matrix)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            extract_embeddings(torch.zeros(0, 3, 4, 4), IdentityExtractor())

    def test_unknown(self):
        with pytest.raises(AssetError):
            get_extractor("vgg")


def test_identity_generator_on_real_b_scores_zero(shapes_root, tmp_path):
    m = scan_dataset(shapes_root, "test")
    real_b = load_eval_images(m.domain_b_files, 24)
    # the "generator" ignores its input and hands back the real B images
    report = evaluate_translations(lambda x: real_b[:len(x)], m, RandomProjectionExtractor(dim=4), 24,
                                   batch_size=len(m.domain_a_files), grid_path=tmp_path / "grid.png")
    assert abs(report.fid) < 1e-6 and abs(report.kid_x100) < 1e-6
    assert (report.n_gen, report.n_real) == (4, 4)
    assert (tmp_path / "grid.png").is_file()
    report.write(tmp_path / "metrics.json")
    assert set(json.loads((tmp_path / "metrics.json").read_text())) == {"fid", "kid_x100", "n_gen", "n_real",
                                                                        "extractor_id"}
