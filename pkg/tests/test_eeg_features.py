from __future__ import annotations

import numpy as np
import pytest

from attnpipe.data_model import Condition
from attnpipe.eeg_features import (
    CSP_RIDGE,
    LOG_FLOOR,
    CspFilters,
    FbcspModel,
    FeatureVector,
    epoch_covariance,
    fbcsp_features,
    fit_csp,
    fit_fbcsp,
)
from attnpipe.epoching import EpochWindow
from attnpipe.errors import DegenerateEpoch, DimensionMismatch, NameMismatch, SingleClassTraining
from attnpipe.montage import DEFAULT_LABELS
from attnpipe.signal import BandDefinition

FS = 500.0
N = 1500


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """巡回 Jacobi 法による対称行列の固有値（降順）."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    for _ in range(max_sweeps):
        if np.sqrt(np.sum(np.tril(a, -1) ** 2)) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = 1.0 if theta == 0.0 else np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1.0))
                c = 1.0 / np.sqrt(t**2 + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def _random_spd(rng: np.random.Generator, d: int, floor: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T / d + floor * np.eye(d)


def _noise_windows(rng: np.random.Generator, per_class: int, plant: bool = False) -> list[EpochWindow]:
    t = np.arange(N) / FS
    rows = [DEFAULT_LABELS.index("C3"), DEFAULT_LABELS.index("Fp1")]
    out = []
    for k in range(2 * per_class):
        cond = Condition.REAL if k % 2 == 0 else Condition.VIRTUAL
        eeg = rng.standard_normal((16, N))
        if plant and cond is Condition.REAL:
            for r in rows:
                eeg[r] += np.sin(2 * np.pi * 10.0 * t + rng.uniform(0, 2 * np.pi))
        out.append(EpochWindow("P01", k + 1, cond, 0, 10.0 * k, eeg, fs=FS))
    return out


@pytest.fixture(scope="module")
def noise_windows():
    return _noise_windows(np.random.default_rng(11), per_class=6)


@pytest.fixture(scope="module")
def noise_model(noise_windows):
    return fit_fbcsp(noise_windows)


# ---------- 共分散 ----------


def test_covariance_of_uncorrelated_channels():
    t = np.arange(1000) / 1000.0
    x = np.stack([np.sin(2 * np.pi * 5 * t), np.cos(2 * np.pi * 5 * t)])
    np.testing.assert_allclose(epoch_covariance(x), np.diag([0.5, 0.5]), atol=1e-12)


def test_covariance_of_correlated_pair_is_rank_one(rng):
    s = rng.standard_normal(500)
    cov = epoch_covariance(np.stack([s, s]))
    assert cov[0, 1] == pytest.approx(cov[0, 0])
    assert np.linalg.matrix_rank(cov, tol=1e-10) == 1


def test_covariance_matches_direct_summation(rng):
    x = rng.standard_normal((16, N))
    xc = x - x.mean(axis=1, keepdims=True)
    acc = np.zeros((16, 16))
    for n in range(N):
        acc += np.outer(xc[:, n], xc[:, n])
    expected = acc / N
    expected /= np.trace(expected)
    np.testing.assert_allclose(epoch_covariance(x), expected, atol=1e-10)


def test_degenerate_epochs():
    with pytest.raises(DegenerateEpoch):
        epoch_covariance(np.zeros((4, 100)))
    with pytest.raises(DegenerateEpoch):
        epoch_covariance(np.ones((4, 3)))


# ---------- CSP ----------


def test_csp_on_diagonal_covariances():
    filters = fit_csp(np.diag([2.0, 1.0]) / 3, np.diag([1.0, 2.0]) / 3, m_pairs=1)
    np.testing.assert_allclose(filters.eigenvalues, [2 / 3, 1 / 3], atol=1e-7)
    directions = filters.projection / np.linalg.norm(filters.projection, axis=1, keepdims=True)
    np.testing.assert_allclose(directions, np.eye(2), atol=1e-6)


def test_csp_equal_covariances_give_half(rng):
    c = _random_spd(rng, 6, floor=10.0)
    filters = fit_csp(c, c, m_pairs=3)
    np.testing.assert_allclose(filters.eigenvalues, 0.5, atol=1e-9)


def test_csp_whitens_and_matches_jacobi_oracle(rng):
    d = 16
    c1, c2 = _random_spd(rng, d), _random_spd(rng, d)
    filters = fit_csp(c1, c2, m_pairs=d // 2)
    w = filters.projection
    np.testing.assert_allclose(w @ (c1 + c2) @ w.T, np.eye(d), atol=1e-8)

    chol = np.linalg.cholesky(c1 + c2 + CSP_RIDGE * np.eye(d))
    inv = np.linalg.inv(chol)
    oracle = jacobi_eigenvalues(inv @ c1 @ inv.T)
    np.testing.assert_allclose(np.sort(filters.eigenvalues)[::-1], oracle, atol=1e-8)
    assert np.all(np.diff(filters.eigenvalues) <= 0)


def test_csp_sign_convention(rng):
    filters = fit_csp(_random_spd(rng, 8), _random_spd(rng, 8), m_pairs=2)
    for row in filters.projection:
        assert row[np.argmax(np.abs(row))] > 0


def test_csp_dimension_checks(rng):
    c = _random_spd(rng, 4)
    with pytest.raises(DimensionMismatch):
        fit_csp(c, c, m_pairs=3)
    with pytest.raises(DimensionMismatch):
        fit_csp(c, _random_spd(rng, 5), m_pairs=1)


# ---------- FBCSP ----------


def test_fbcsp_feature_dimension(noise_model, noise_windows):
    assert noise_model.n_features == 24
    assert noise_model.feature_names[0] == "Theta/csp0"
    features = fbcsp_features(noise_model, noise_windows[0])
    assert len(features) == 24
    assert features.names == noise_model.feature_names


def test_fbcsp_single_band_single_pair(noise_windows):
    model = fit_fbcsp(noise_windows, bands=[BandDefinition("Alpha", 8.0, 14.0)], m_pairs=1)
    assert model.n_features == 2


def test_fbcsp_planted_alpha_difference():
    windows = _noise_windows(np.random.default_rng(5), per_class=6, plant=True)
    model = fit_fbcsp(windows, m_pairs=2)
    alpha = [b.name for b in model.bands].index("Alpha")
    assert model.per_band[alpha].eigenvalues[0] > 0.6


def test_fbcsp_needs_both_classes(noise_windows):
    real_only = [w for w in noise_windows if w.condition is Condition.REAL]
    with pytest.raises(SingleClassTraining):
        fit_fbcsp(real_only)


def test_features_of_zero_window(noise_model):
    features = fbcsp_features(noise_model, np.zeros((16, N)))
    np.testing.assert_allclose(features.values, np.log(LOG_FLOOR))


def test_identity_projection_unit_variance():
    alpha = BandDefinition("Alpha", 8.0, 14.0)
    model = FbcspModel(
        bands=(alpha,),
        per_band=(CspFilters(projection=np.array([[1.0]]), eigenvalues=np.array([1.0])),),
        m_pairs=1,
        feature_names=("Alpha/csp0",),
    )
    t = np.arange(N) / FS
    x = np.sqrt(2.0) * np.cos(2 * np.pi * 10.0 * t)
    assert abs(fbcsp_features(model, x[None, :]).values[0]) < 0.05


def test_doubling_amplitude_shifts_features(noise_model, noise_windows):
    eeg = noise_windows[1].eeg
    base = fbcsp_features(noise_model, eeg).values
    doubled = fbcsp_features(noise_model, 2.0 * eeg).values
    np.testing.assert_allclose(doubled - base, np.log(4.0), atol=0.01)


def test_channel_mismatch(noise_model):
    with pytest.raises(DimensionMismatch):
        fbcsp_features(noise_model, np.zeros((8, N)))


def test_model_serialization_keeps_features(noise_model, noise_windows):
    restored = FbcspModel.from_dict(noise_model.to_dict())
    np.testing.assert_allclose(
        fbcsp_features(restored, noise_windows[2]).values, fbcsp_features(noise_model, noise_windows[2]).values
    )


# ---------- FeatureVector ----------


def test_feature_vector_reorders_by_name():
    f = FeatureVector(np.array([1.0, 2.0, 3.0]), ("a", "b", "c"))
    np.testing.assert_array_equal(f.ordered(["c", "a", "b"]), [3.0, 1.0, 2.0])
    with pytest.raises(NameMismatch):
        f.ordered(["a", "b", "d"])
