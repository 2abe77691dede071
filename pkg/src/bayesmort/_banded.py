"""Cholesky factorization of sparse SPD matrices stored as a permuted band."""

from __future__ import annotations

import numpy as np
from scipy import linalg, sparse

from .errors import NumericalError


def upper_band(mat, perm=None, bw=None) -> np.ndarray:
    """LAPACK upper-band storage of ``mat[perm][:, perm]``.

    ``bw`` forces a common bandwidth so several matrices with nested
    patterns can be combined linearly in band storage.
    """
    mat = sparse.csr_matrix(mat)
    if perm is not None:
        mat = mat[perm][:, perm]
    coo = sparse.triu(mat).tocoo()
    if bw is None:
        bw = int(np.max(coo.col - coo.row)) if coo.nnz else 0
    ab = np.zeros((bw + 1, mat.shape[0]))
    ab[bw + coo.row - coo.col, coo.col] = coo.data
    return ab


class BandedSPD:
    """Upper Cholesky factor ``U`` (``A = U'U``) of a permuted banded SPD matrix."""

    def __init__(self, ab_upper: np.ndarray, perm=None):
        try:
            self.cb = linalg.cholesky_banded(ab_upper, lower=False, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"banded Cholesky failed: {exc}") from None
        n = ab_upper.shape[1]
        self.bw = ab_upper.shape[0] - 1
        self.perm = np.arange(n) if perm is None else np.asarray(perm)
        self.inv = np.argsort(self.perm)

    @classmethod
    def from_sparse(cls, mat, perm=None) -> "BandedSPD":
        return cls(upper_band(mat, perm), perm)

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = linalg.cho_solve_banded((self.cb, False), b[self.perm], check_finite=False)
        return y[self.inv]

    def noise(self, rng: np.random.Generator) -> np.ndarray:
        """A draw from N(0, A^{-1})."""
        z = rng.standard_normal(self.cb.shape[1])
        w = linalg.solve_banded((0, self.bw), self.cb, z, check_finite=False)
        return w[self.inv]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.cb[-1])))
