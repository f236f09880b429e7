"""Dense numeric helpers shared by every other module.

Everything runs in float64. The random generator is a thin wrapper over
numpy's PCG64 bit generator so that a single integer seed pins every draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_JACOBI_MAX_SWEEPS = 100
_SIGN_TIE_RTOL = 1e-9


def softmax(logits):
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ValueError("empty logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def tanh_prime_from_output(y):
    return 1.0 - y * y


class Rng:
    """Seeded pseudorandom stream (PCG64, 128-bit state, 64-bit output).

    Two instances built from the same seed produce identical draws in the
    same call order. ``derive`` makes independent child seeds without
    consuming draws from the parent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @staticmethod
    def derive(seed: int, *keys: int) -> int:
        ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
        return int(ss.generate_state(1, np.uint64)[0])

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(len(seq)))]

    def raw64(self, size: int) -> np.ndarray:
        """Raw 64-bit outputs of the bit generator."""
        return self._gen.bit_generator.random_raw(size)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns, in
    the diagonal order the rotations leave them (unsorted).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def pca_fit(data, k: int) -> PcaModel:
    """Fit a k-component PCA on the rows of ``data``.

    Covariance uses the n-1 divisor. Components come out sorted by
    eigenvalue (stable, so equal eigenvalues keep their diagonal order) and
    each is flipped so that its largest-magnitude entry (the first one on a
    tie) is non-negative.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be a 2-D matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError("insufficient samples")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} out of range [1, {min(n, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = jacobi_eigh(cov)
    evals = np.clip(evals, 0.0, None)
    order = np.argsort(-evals, kind="stable")[:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        # Magnitudes equal up to rounding count as a tie; the lower index wins.
        mag = np.abs(row)
        j = int(np.argmax(mag >= mag.max() * (1.0 - _SIGN_TIE_RTOL)))
        if row[j] < 0:
            row *= -1.0
    total = float(np.trace(cov))
    ev = evals[order]
    ratio = ev / total if total > 0 else np.zeros(k)
    return PcaModel(mean=mean, components=comps, explained_variance=ev, explained_variance_ratio=ratio)


def pca_project(model: PcaModel, point):
    p = np.asarray(point, dtype=np.float64)
    if p.shape[-1] != model.mean.shape[0]:
        raise ValueError(f"dimension mismatch: got {p.shape[-1]}, model has {model.mean.shape[0]}")
    return (p - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, coords):
    return np.asarray(coords, dtype=np.float64) @ model.components + model.mean
