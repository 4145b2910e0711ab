"""Linear subspace for 2D poses: PCA fit, projection and reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray       # (D,)
    basis: np.ndarray      # (D, M), orthonormal columns
    variances: np.ndarray  # (M,), descending
    total_variance: float

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def torch_params(self, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = dtype or torch.get_default_dtype()
        return (torch.as_tensor(self.mean, dtype=dtype), torch.as_tensor(self.basis, dtype=dtype))


def fit_pca(data, n_components: int) -> PcaModel:
    """Mean-centered PCA via SVD.

    Each basis vector is sign-fixed so that its largest-magnitude entry is
    positive.
    """
    X = np.asarray(data, dtype=np.float64)
    n, D = X.shape
    if not 1 <= n_components <= D:
        raise ValueError(f"n_components must be in [1, {D}], got {n_components}")
    if n <= n_components:
        raise ValueError(f"need more than {n_components} samples, got {n}")
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    var = S ** 2 / (n - 1)
    basis = Vt[:n_components].T.copy()
    idx = np.abs(basis).argmax(axis=0)
    signs = np.sign(basis[idx, np.arange(n_components)])
    signs[signs == 0] = 1.0
    basis *= signs
    return PcaModel(mean=mean, basis=basis, variances=var[:n_components].copy(), total_variance=float(var.sum()))


def coordinate_subspace(data, drop: list[int] | tuple[int, ...] = ()) -> PcaModel:
    """Axis-aligned "subspace" keeping every coordinate except ``drop``.

    Used when the flow should see the raw (mean-centered) pose rather than
    PCA coefficients; columns are ordered by decreasing variance so the
    model still satisfies the PcaModel contract.
    """
    X = np.asarray(data, dtype=np.float64)
    D = X.shape[1]
    mean = X.mean(axis=0)
    var = X.var(axis=0, ddof=1)
    keep = [i for i in range(D) if i not in set(drop)]
    keep.sort(key=lambda i: -var[i])
    basis = np.zeros((D, len(keep)))
    basis[keep, np.arange(len(keep))] = 1.0
    return PcaModel(mean=mean, basis=basis, variances=var[keep], total_variance=float(var.sum()))


def to_subspace(x, pca: PcaModel):
    """``c = B^T (x - mean)``; works on numpy arrays and (differentiably) on tensors."""
    if torch.is_tensor(x):
        mean, basis = pca.torch_params(x.dtype)
        return (x - mean) @ basis
    return (np.asarray(x, dtype=np.float64) - pca.mean) @ pca.basis


def from_subspace(c, pca: PcaModel):
    if torch.is_tensor(c):
        mean, basis = pca.torch_params(c.dtype)
        return c @ basis.T + mean
    return np.asarray(c, dtype=np.float64) @ pca.basis.T + pca.mean


def variance_coverage(pca: PcaModel, m: int) -> float:
    """Fraction of total variance captured by the top ``m`` components."""
    if m < 0 or m > pca.n_components:
        raise ValueError(f"m must be in [0, {pca.n_components}], got {m}")
    if pca.total_variance == 0:
        return 1.0
    return float(min(1.0, pca.variances[:m].sum() / pca.total_variance))
