"""Cubic regression splines, penalised smoothing and a partially linear additive model.

The basis is the natural cubic regression spline parameterised by the function
values at ``q`` knots (continuous to second order, zero curvature at the
boundary knots, linear beyond them).  The roughness penalty ``P`` satisfies
``theta' P theta = integral of s''(t)^2``.

Because the basis functions sum to one, a smooth's level is not identified
once an intercept is present.  Smooth coefficients are therefore constrained
to sum to zero; the fitted *function* is unaffected, and the constraint pins
down the coefficient vector used by the nonlinearity statistic.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, RankError, ShapeError, UnsupportedOutcomeError

# relative log10 grid for generalised cross-validation, scaled per problem
GCV_GRID = np.logspace(-6, 3, 20)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    knots: np.ndarray
    q: int
    centered: bool = False
    column_means: Optional[np.ndarray] = None

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 3:
            raise InvalidInputError("need at least 3 knots")
        if not np.all(np.diff(k) > 0):
            raise InvalidInputError("knots must be strictly increasing")
        if int(self.q) != k.size:
            raise InvalidInputError("q must equal the number of knots")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "q", int(self.q))
        if self.centered:
            if self.column_means is None or np.shape(self.column_means) != (k.size,):
                raise InvalidInputError("centred basis needs q column means")
            object.__setattr__(self, "column_means", np.asarray(self.column_means, float))
        F, P = _cr_matrices(k)
        object.__setattr__(self, "_F", F)
        object.__setattr__(self, "_P", P)

    @property
    def lower(self):
        return self.knots[0]

    @property
    def upper(self):
        return self.knots[-1]

    def penalty(self):
        """Roughness penalty matrix, ``theta' P theta = int s''^2``."""
        return self._P.copy()

    def evaluate_raw(self, t):
        """Uncentred basis matrix (n, q); linear beyond the boundary knots."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x, F, q = self.knots, self._F, self.q
        h = np.diff(x)
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, q - 2)
        hj, xl, xr = h[j], x[j], x[j + 1]
        inside = (t >= x[0]) & (t <= x[-1])
        tt = np.clip(t, x[0], x[-1])
        am = (xr - tt) / hj
        ap = (tt - xl) / hj
        cm = ((xr - tt) ** 3 / hj - hj * (xr - tt)) / 6.0
        cp = ((tt - xl) ** 3 / hj - hj * (tt - xl)) / 6.0
        rows = np.arange(t.size)
        B = cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        B[rows, j] += am
        B[rows, j + 1] += ap
        if not inside.all():
            lo, hi = t < x[0], t > x[-1]
            d_lo = -h[0] / 3.0 * F[0] - h[0] / 6.0 * F[1]
            d_lo[0] -= 1.0 / h[0]
            d_lo[1] += 1.0 / h[0]
            d_hi = h[-1] / 6.0 * F[q - 2] + h[-1] / 3.0 * F[q - 1]
            d_hi[q - 1] += 1.0 / h[-1]
            d_hi[q - 2] -= 1.0 / h[-1]
            B[lo] += (t[lo] - x[0])[:, None] * d_lo
            B[hi] += (t[hi] - x[-1])[:, None] * d_hi
        return B

    def evaluate(self, t):
        B = self.evaluate_raw(t)
        return B - self.column_means if self.centered else B

    def second_derivative(self, t):
        """Matrix mapping coefficients to ``s''(t)``; zero outside the knots."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x, F, q = self.knots, self._F, self.q
        h = np.diff(x)
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, q - 2)
        w_r = (t - x[j]) / h[j]
        D2 = (1.0 - w_r)[:, None] * F[j] + w_r[:, None] * F[j + 1]
        D2[(t < x[0]) | (t > x[-1])] = 0.0
        return D2

    def centered_on(self, sample):
        """Copy whose columns are mean-centred over ``sample``."""
        means = self.evaluate_raw(sample).mean(axis=0)
        return SplineBasis(self.knots, self.q, True, means)

    def outside(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (t < self.lower) | (t > self.upper)


def _cr_matrices(x):
    """``F`` maps knot values to knot second derivatives; ``P`` is the penalty."""
    k = x.size
    h = np.diff(x)
    D = np.zeros((k - 2, k))
    Bm = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        Bm[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            Bm[i, i + 1] = Bm[i + 1, i] = h[i + 1] / 6.0
    BinvD = linalg.solve(Bm, D, assume_a="sym")
    F = np.zeros((k, k))
    F[1:-1] = BinvD
    P = D.T @ BinvD
    return F, (P + P.T) / 2.0


def make_basis(sample, q):
    """Cubic regression spline basis with ``q`` knots at evenly spaced sample quantiles.

    Boundary knots sit at the sample extremes.  Heavily tied samples fall back
    to quantiles of the distinct values.
    """
    sample = np.asarray(sample, dtype=np.float64).ravel()
    q = int(q)
    if q < 3:
        raise InvalidInputError("basis dimension q must be at least 3")
    uniq = np.unique(sample)
    if uniq.size < q:
        raise RankError(f"{uniq.size} distinct values cannot support a {q}-knot basis")
    probs = np.linspace(0.0, 1.0, q)
    knots = np.quantile(sample, probs)
    if not np.all(np.diff(knots) > 0):
        knots = np.quantile(uniq, probs)
    return SplineBasis(knots, q)


def _sum_to_zero(q):
    """Orthonormal (q, q-1) basis of the complement of the ones vector."""
    Q, _ = np.linalg.qr(np.ones((q, 1)), mode="complete")
    return Q[:, 1:]


@dataclass(frozen=True, eq=False)
class SmoothFit:
    basis: SplineBasis
    theta: np.ndarray
    penalty_lambda: float
    intercept: float = 0.0
    edf: float = float("nan")

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.basis.q,) or not np.isfinite(theta).all():
            raise InvalidInputError("theta must be a finite vector of length q")
        object.__setattr__(self, "theta", theta)

    def __call__(self, t):
        return self.intercept + self.basis.evaluate(t) @ self.theta

    def curvature(self, t):
        return self.basis.second_derivative(t) @ self.theta

    def roughness(self):
        return float(self.theta @ self.basis.penalty() @ self.theta)


class _PenalisedLS:
    """Penalised least squares ``|r - Z c|^2 + lam * c' S c`` for a fixed design.

    Precomputes a Demmler-Reinsch decomposition so that many responses and
    many smoothing parameters are cheap.  ``Z`` must have full column rank.
    """

    def __init__(self, Z, S):
        self.Z, self.S = Z, S
        n, k = Z.shape
        if n <= k:
            raise RankError(f"{n} observations cannot identify {k} coefficients")
        Q, R = np.linalg.qr(Z)
        d = np.abs(np.diag(R))
        if d.min() <= 1e-10 * d.max():
            raise RankError("design matrix is rank deficient; use a positive penalty "
                            "or fewer basis functions")
        self.Q, self.R = Q, R
        Rinv = linalg.solve_triangular(R, np.eye(k))
        M = Rinv.T @ S @ Rinv
        s, U = np.linalg.eigh((M + M.T) / 2.0)
        self.s = np.clip(s, 0.0, None)
        self.U = U
        self.RinvU = Rinv @ U
        self.n, self.k = n, k

    def scale(self):
        """Typical ratio of data to penalty curvature; anchors the GCV grid."""
        pos = self.s[self.s > 1e-12 * max(self.s.max(), 1e-300)]
        return 1.0 / np.median(pos) if pos.size else 1.0

    def fit(self, r, lam):
        """Coefficients, fitted values and effective degrees of freedom."""
        qr_ = self.Q.T @ r
        u = self.U.T @ qr_
        shrink = 1.0 / (1.0 + lam * self.s)
        coef = self.RinvU @ (shrink * u)
        fitted = self.Z @ coef
        return coef, fitted, float(shrink.sum())

    def gcv(self, r, lams):
        """Pick ``lam`` from ``lams`` minimising n * RSS / (n - edf)^2."""
        qr_ = self.Q.T @ r
        u = self.U.T @ qr_
        base = float(r @ r - qr_ @ qr_)
        lams = np.asarray(lams, dtype=np.float64)
        ls = lams[:, None] * self.s[None, :]
        rss = base + ((ls / (1.0 + ls)) ** 2 * u ** 2).sum(axis=1)
        edf = (1.0 / (1.0 + ls)).sum(axis=1)
        score = self.n * rss / (self.n - edf) ** 2
        return float(lams[int(np.argmin(score))])


class SmoothFitter:
    """Fits smooths of many response vectors against one fixed covariate.

    ``penalty_lambda=None`` selects the smoothing parameter by generalised
    cross-validation for each response separately.
    """

    def __init__(self, t, q=10, penalty_lambda=None):
        t = np.asarray(t, dtype=np.float64).ravel()
        if t.size <= q:
            raise RankError(f"need more than q={q} observations, got {t.size}")
        if penalty_lambda is not None and penalty_lambda < 0:
            raise InvalidInputError("penalty_lambda must be non-negative")
        self.t = t
        self.basis = make_basis(t, q).centered_on(t)
        self.N = _sum_to_zero(q)
        Bc = self.basis.evaluate(t) @ self.N
        Z = np.column_stack([np.ones(t.size), Bc])
        S = np.zeros((q, q))
        S[1:, 1:] = self.N.T @ self.basis.penalty() @ self.N
        try:
            self._pls = _PenalisedLS(Z, S)
        except RankError as exc:
            raise RankError(f"{exc} (try penalty_lambda > 0)") from None
        self.penalty_lambda = penalty_lambda
        self.grid = GCV_GRID * self._pls.scale()

    def fit(self, r):
        r = np.asarray(r, dtype=np.float64).ravel()
        if r.shape != self.t.shape:
            raise ShapeError("response length does not match the covariate")
        lam = self.penalty_lambda
        if lam is None:
            lam = self._pls.gcv(r, self.grid)
        coef, _, edf = self._pls.fit(r, lam)
        return SmoothFit(self.basis, self.N @ coef[1:], float(lam), float(coef[0]), edf)


def fit_smooth(t, r, q=10, penalty_lambda=None):
    """Penalised cubic regression spline fit of ``r`` on ``t``.

    Minimises ``|r - c - B theta|^2 + penalty_lambda * theta' P theta`` over the
    intercept ``c`` and sum-to-zero ``theta``, with ``B`` the centred basis.
    """
    return SmoothFitter(t, q, penalty_lambda).fit(r)


@dataclass(frozen=True, eq=False)
class AdditiveFit:
    linear_index: int
    linear_coef: float
    smooth_components: dict
    intercept: float
    fitted: np.ndarray
    residuals: np.ndarray
    penalty_lambda: float = 0.0
    n_features: int = 0
    diagnostics: dict = field(default_factory=dict)


def _design_blocks(X, j, q):
    n, p = X.shape
    blocks, bases = [], {}
    N = _sum_to_zero(q)
    for k in range(p):
        if k == j:
            continue
        basis = make_basis(X[:, k], q).centered_on(X[:, k])
        bases[k] = basis
        blocks.append(basis.evaluate(X[:, k]) @ N)
    return blocks, bases, N


def fit_additive(data, j, q=10, penalty_lambda=None):
    """Additive model ``y ~ 1 + beta * X_j + sum_{k != j} s_k(X_k)``.

    Solved jointly by penalised least squares.  Each smooth's roughness
    penalty is normalised to the scale of its own design block so a single
    ``penalty_lambda`` is comparable across features; ``None`` selects it by
    generalised cross-validation.
    """
    X, y = data.X, data.y
    n, p = X.shape
    j = data.feature_index(j)
    if data.is_binary():
        raise UnsupportedOutcomeError("additive fit supports continuous outcomes only")
    if n <= p * q:
        raise RankError(f"n={n} too small for {p} features with q={q} (need n > p*q)")
    blocks, bases, N = _design_blocks(X, j, q)
    Z = np.column_stack([np.ones(n), X[:, j], *blocks])
    width = q - 1
    S = np.zeros((Z.shape[1], Z.shape[1]))
    col = 2
    scales = {}
    for k, block in zip(bases, blocks):
        Pk = N.T @ bases[k].penalty() @ N
        scales[k] = np.linalg.norm(block.T @ block) / np.linalg.norm(Pk)
        S[col:col + width, col:col + width] = Pk * scales[k]
        col += width
    sv = np.linalg.svd(Z, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankError("additive design is rank deficient")
    pls = _PenalisedLS(Z, S)
    if penalty_lambda is None:
        lam = pls.gcv(y, GCV_GRID) if bases else 0.0
    else:
        if penalty_lambda < 0:
            raise InvalidInputError("penalty_lambda must be non-negative")
        lam = float(penalty_lambda)
    coef, fitted, edf = pls.fit(y, lam)
    comps = {}
    col = 2
    for k in bases:
        comps[k] = SmoothFit(bases[k], N @ coef[col:col + width], lam * scales[k])
        col += width
    # route fitted values through the components so prediction matches exactly
    fitted = _additive_sum(coef[0], coef[1], j, comps, X)
    return AdditiveFit(j, float(coef[1]), comps, float(coef[0]), fitted, y - fitted,
                       float(lam), p, {"edf": edf})


def _additive_sum(intercept, slope, j, comps, X):
    out = intercept + slope * X[:, j]
    for k, s in comps.items():
        out = out + s.basis.evaluate(X[:, k]) @ s.theta
    return out


def predict_additive(fit, X, return_extrapolated=False):
    """Evaluate the additive fit at the rows of ``X``.

    Outside a smooth's boundary knots the component continues linearly; pass
    ``return_extrapolated=True`` to also get a per-row flag of such rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fit.n_features:
        raise ShapeError(f"expected {fit.n_features} columns, got shape {X.shape}")
    pred = _additive_sum(fit.intercept, fit.linear_coef, fit.linear_index,
                         fit.smooth_components, X)
    if not return_extrapolated:
        return pred
    flag = np.zeros(X.shape[0], dtype=bool)
    for k, s in fit.smooth_components.items():
        flag |= s.basis.outside(X[:, k])
    return pred, flag
