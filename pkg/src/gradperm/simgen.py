"""Simulation generators, the linear-model baseline and rejection-rate studies.

Noise and coefficient-jitter distributions are written ``N(mean, x)`` in the
original study designs; by default the second argument of the outcome noise is
read as a standard deviation (``noise_scale="sd"``), with ``"variance"``
available for the alternative reading.
"""

import csv
import io
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import nn_core, permtests, seeding
from .errors import InvalidConfigError, InvalidInputError, RankError

log = logging.getLogger(__name__)

KINDS = ("nonlin5", "linear", "smooth", "nonsmooth", "correlated")
DIMENSIONS = {"nonlin5": 5, "linear": 4, "smooth": 4, "nonsmooth": 4, "correlated": 8}
PAPER_M = {
    "linear": (0.24, 0.27, 0.30, 0.33, 0.36),
    "smooth": (0.24, 0.27, 0.30, 0.33, 0.36),
    "nonsmooth": (0.12, 0.24, 0.36, 0.48, 0.60),
}
NULL_MEAN = {"linear": 0.3, "smooth": 0.3, "nonsmooth": 0.18}
NOISE = {"nonlin5": 0.2, "linear": 0.3, "smooth": 0.3, "nonsmooth": 0.3, "correlated": 0.1}
BETA_SD = 0.01


def _noise_sd(value, noise_scale):
    if noise_scale == "sd":
        return value
    if noise_scale == "variance":
        return float(np.sqrt(value))
    raise InvalidConfigError(f"noise_scale must be 'sd' or 'variance', got {noise_scale!r}")


def _names(p):
    return tuple(f"X{k + 1}" for k in range(p))


def gen_nonlin5(n, seed, beta=0.2, noise_sd=None, noise_scale="sd"):
    """Five independent N(0,1) features; linear, quadratic, cubic, sine, |x| effects."""
    if int(n) < 1:
        raise InvalidInputError("n must be positive")
    g = np.random.default_rng(seeding.check_seed(seed))
    X = g.standard_normal((int(n), 5))
    sd = _noise_sd(NOISE["nonlin5"] if noise_sd is None else noise_sd, noise_scale)
    y = beta * (-X[:, 0] + X[:, 1] ** 2 - X[:, 2] ** 3 + np.sin(2 * X[:, 3])
                - np.abs(X[:, 4]))
    y = y + g.normal(0.0, sd, int(n))
    return nn_core.Dataset(X, y, _names(5))


def nonsmooth_z(X):
    """Sign-gated pairwise products used by the nonsmooth generator."""
    x1, x2, x3, x4 = X.T
    p12, p23, p34, p41 = x1 * x2, x2 * x3, x3 * x4, x4 * x1
    return np.column_stack([
        np.where(p12 < 0, p12, 0.0),
        np.where(p23 > 0, p23, 0.0),
        np.where(p34 < 0, p34, 0.0),
        np.where(p41 > 0, p41, 0.0),
    ])


def gen_assoc(kind, n, m, hypothesis, seed, noise_sd=None, noise_scale="sd"):
    """Four N(0,1) features, outcome linear / smooth / nonsmooth in them.

    Under ``"null"`` the fourth coefficient is zero and the others are drawn
    around the kind's null mean; under ``"alternative"`` all four are drawn
    around ``m``.  Coefficients jitter with SD 0.01.
    """
    if kind not in PAPER_M:
        raise InvalidConfigError(f"unknown association kind {kind!r}")
    if hypothesis not in ("null", "alternative"):
        raise InvalidConfigError("hypothesis must be 'null' or 'alternative'")
    if m is not None and hypothesis == "alternative" and not np.any(
            np.isclose(m, PAPER_M[kind])):
        log.info("m=%s is not one of the published signal levels for %s", m, kind)
    n = int(n)
    g = np.random.default_rng(seeding.check_seed(seed))
    X = g.standard_normal((n, 4))
    if hypothesis == "null":
        beta = np.append(g.normal(NULL_MEAN[kind], BETA_SD, 3), 0.0)
    else:
        if m is None:
            raise InvalidConfigError("alternative hypothesis needs a signal mean m")
        beta = g.normal(m, BETA_SD, 4)
    if kind == "linear":
        F = X
    elif kind == "smooth":
        F = np.column_stack([X[:, 0] ** 3, np.cos(X[:, 1]), np.tanh(X[:, 2]),
                             np.sin(3 * X[:, 3])])
    else:
        F = nonsmooth_z(X)
    sd = _noise_sd(NOISE[kind] if noise_sd is None else noise_sd, noise_scale)
    y = F @ beta + g.normal(0.0, sd, n)
    return nn_core.Dataset(X, y, _names(4))


def validate_correlation(sigma, p=None):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidInputError("correlation matrix must be square")
    if p is not None and sigma.shape[0] != p:
        raise InvalidInputError(f"correlation matrix must be {p}x{p}")
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise InvalidInputError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(sigma), 1.0, atol=1e-12):
        raise InvalidInputError("correlation matrix must have a unit diagonal")
    return sigma


def mvn_sqrt(sigma):
    """Symmetric square root via eigendecomposition; rejects non-PD input."""
    sigma = validate_correlation(sigma)
    w, V = np.linalg.eigh(sigma)
    if w.min() <= 1e-10:
        raise np.linalg.LinAlgError(
            f"correlation matrix is not positive definite (min eigenvalue {w.min():.3g})")
    return (V * np.sqrt(w)) @ V.T


def gen_correlated(n, sigma, seed, noise_sd=None, noise_scale="sd"):
    """Eight MVN(0, sigma) features; feature 1 carries no signal."""
    root = mvn_sqrt(validate_correlation(sigma, 8))
    n = int(n)
    g = np.random.default_rng(seeding.check_seed(seed))
    X = g.standard_normal((n, 8)) @ root
    beta = g.normal(0.1, BETA_SD)
    sd = _noise_sd(NOISE["correlated"] if noise_sd is None else noise_sd, noise_scale)
    y = beta * (X[:, 1] ** 2 + np.cos(X[:, 2]) + np.sin(2 * X[:, 3])
                + X[:, 4] + X[:, 5] + X[:, 6] + X[:, 7])
    y = y + g.normal(0.0, sd, n)
    return nn_core.Dataset(X, y, _names(8))


def synthetic_correlation(mean_abs, p=8, seed=2023):
    """One-factor correlation matrix with a prescribed mean |off-diagonal|.

    Loadings ``c * u_k`` with ``u_k ~ U(0.7, 1)`` and random signs; ``c`` is set
    in closed form so that the mean absolute correlation equals ``mean_abs``.
    A stand-in for the unpublished empirical matrices of the original study.
    """
    g = np.random.default_rng(seed)
    u = g.uniform(0.7, 1.0, p) * g.choice([-1.0, 1.0], p)
    iu = np.triu_indices(p, 1)
    base = np.abs(np.outer(u, u))[iu].mean()
    c = np.sqrt(mean_abs / base)
    lam = c * u
    if np.max(np.abs(lam)) >= 1:
        raise InvalidInputError(f"mean |corr| {mean_abs} not reachable with this recipe")
    sigma = np.outer(lam, lam)
    np.fill_diagonal(sigma, 1.0)
    return sigma


CORRELATIONS = {
    "identity": lambda: np.eye(8),
    "low": lambda: synthetic_correlation(0.13),
    "high": lambda: synthetic_correlation(0.60),
}


def lm_t_test(data, j):
    """Two-sided OLS t-test p-value for the coefficient of feature ``j``."""
    X, y = data.X, data.y
    n, p = X.shape
    j = data.feature_index(j)
    if n <= p + 1:
        raise RankError(f"need n > p + 1 for the t-test, got n={n}, p={p}")
    Z = np.column_stack([np.ones(n), X])
    Q, R = np.linalg.qr(Z)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * d.max():
        raise RankError("design matrix is singular")
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - Z @ coef
    df = n - p - 1
    sigma2 = resid @ resid / df
    Rinv = np.linalg.inv(R)
    var = sigma2 * (Rinv[j + 1] @ Rinv[j + 1])
    if var == 0:
        return 0.0 if coef[j + 1] != 0 else 1.0
    t = coef[j + 1] / np.sqrt(var)
    return float(2.0 * stats.t.sf(abs(t), df))


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

TESTS = ("assoc", "nonlin", "lm")
DEFAULT_FEATURE = {"nonlin5": 0, "linear": 3, "smooth": 3, "nonsmooth": 3, "correlated": 0}


@dataclass(frozen=True)
class SimSetting:
    kind: str
    n: int = 200
    beta_mean: Optional[float] = None
    hypothesis: str = "null"
    correlation: Optional[str] = None  # name in CORRELATIONS, or None
    noise_sd: Optional[float] = None
    noise_scale: str = "sd"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown kind {self.kind!r}; choose from {KINDS}")
        if int(self.n) < 2:
            raise InvalidConfigError("n must be at least 2")
        if self.hypothesis not in ("null", "alternative"):
            raise InvalidConfigError("hypothesis must be 'null' or 'alternative'")
        if self.kind == "correlated":
            validate_correlation(self.sigma(), 8)
        _noise_sd(1.0, self.noise_scale)
        seeding.check_seed(self.seed)

    @property
    def p(self):
        return DIMENSIONS[self.kind]

    def sigma(self):
        if self.kind != "correlated":
            return None
        name = self.correlation or "identity"
        if name not in CORRELATIONS:
            raise InvalidConfigError(f"unknown correlation {name!r}")
        return CORRELATIONS[name]()

    def generate(self, seed):
        kw = {"noise_sd": self.noise_sd, "noise_scale": self.noise_scale}
        if self.kind == "nonlin5":
            return gen_nonlin5(self.n, seed, **kw)
        if self.kind == "correlated":
            return gen_correlated(self.n, self.sigma(), seed, **kw)
        return gen_assoc(self.kind, self.n, self.beta_mean, self.hypothesis, seed, **kw)

    def to_dict(self):
        return {
            "kind": self.kind, "n": int(self.n), "beta_mean": self.beta_mean,
            "hypothesis": self.hypothesis, "correlation": self.correlation,
            "noise_sd": self.noise_sd, "noise_scale": self.noise_scale,
            "seed": int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class StudyReport:
    setting: SimSetting
    test: str
    feature: int
    n_sims: int
    alpha: float
    rejection_rate: float
    p_values: np.ndarray
    failed_sims: tuple = ()
    wall_time: float = 0.0
    test_config: dict = field(default_factory=dict)

    def to_dict(self, include_timing=True):
        out = {
            "schema_version": permtests.SCHEMA_VERSION,
            "setting": self.setting.to_dict(),
            "test": self.test,
            "feature": int(self.feature),
            "n_sims": int(self.n_sims),
            "alpha": float(self.alpha),
            "rejection_rate": float(self.rejection_rate),
            "p_values": [float(v) for v in self.p_values],
            "failed_sims": [int(s) for s in self.failed_sims],
            "test_config": self.test_config,
        }
        if include_timing:
            out["wall_time"] = float(self.wall_time)
        return out

    def to_csv(self):
        """One row per successful simulation: index, seed-free p-value and decision."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sim", "p_value", "reject"])
        ok = [s for s in range(self.n_sims) if s not in set(self.failed_sims)]
        for s, p in zip(ok, self.p_values):
            w.writerow([s, repr(float(p)), int(p <= self.alpha)])
        return buf.getvalue()


def rejection_rate(p_values, alpha):
    p_values = np.asarray(p_values, dtype=np.float64)
    if p_values.size == 0:
        return float("nan")
    return float(np.mean(p_values <= alpha))


def _one_sim(args):
    setting, test, feature, cfg, s = args
    data = setting.generate(seeding.derive_seed(setting.seed, s))
    if test == "lm":
        return lm_t_test(data, feature)
    sim_cfg = cfg.with_(master_seed=seeding.derive_seed(setting.seed, s, 1), workers=1)
    with warnings.catch_warnings():
        # correlated designs are studied on purpose
        warnings.simplefilter("ignore", permtests.CorrelatedPredictorWarning)
        if test == "assoc":
            return permtests.association_test(data, feature, sim_cfg).p_value
        return permtests.nonlinearity_test(data, feature, sim_cfg).p_value


def run_study(setting, test, n_sims, alpha=0.05, cfg=None, feature=None, workers=1,
              progress=None):
    """Simulate ``n_sims`` datasets, test each, and report the rejection rate.

    Simulations run in parallel across ``workers`` processes; each uses seeds
    derived from ``setting.seed`` and its index, so the report does not depend
    on the worker count.  Failed simulations are excluded and listed.
    """
    if test not in TESTS:
        raise InvalidConfigError(f"unknown test {test!r}; choose from {TESTS}")
    if int(n_sims) < 1:
        raise InvalidConfigError("n_sims must be at least 1")
    if not 0 < alpha <= 1:
        raise InvalidConfigError("alpha must lie in (0, 1]")
    cfg = cfg or permtests.TestConfig()
    feature = DEFAULT_FEATURE[setting.kind] if feature is None else int(feature)
    if not 0 <= feature < setting.p:
        raise InvalidConfigError(f"feature {feature} out of range for kind {setting.kind}")
    jobs = [(setting, test, feature, cfg, s) for s in range(int(n_sims))]
    start = time.perf_counter()
    pvals, failed = [], []

    def collect(s, outcome):
        if isinstance(outcome, Exception):
            log.warning("simulation %d failed: %s", s, outcome)
            failed.append(s)
        else:
            pvals.append(outcome)
        if progress:
            progress(s + 1, int(n_sims))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_one_sim, job) for job in jobs]
            for s, fut in enumerate(futures):
                try:
                    collect(s, fut.result())
                except Exception as exc:  # noqa: BLE001 - reported per simulation
                    collect(s, exc)
    else:
        for s, job in enumerate(jobs):
            try:
                collect(s, _one_sim(job))
            except Exception as exc:  # noqa: BLE001 - reported per simulation
                collect(s, exc)
    pvals = np.asarray(pvals, dtype=np.float64)
    return StudyReport(
        setting=setting, test=test, feature=feature, n_sims=int(n_sims), alpha=float(alpha),
        rejection_rate=rejection_rate(pvals, alpha), p_values=pvals,
        failed_sims=tuple(failed), wall_time=time.perf_counter() - start,
        test_config=cfg.to_dict() if test != "lm" else {},
    )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# chosen by holdout validation loss (nn_core.select_config) on pilot datasets
_NET_COMMON = dict(epochs=150, batch_size=8, init_scale=0.5, lr_decay_per_epoch=0.005)
_NET_PRESETS = {
    "nonlin5": dict(hidden_sizes=(40,), initial_learning_rate=0.1, l2_lambda=1e-4),
    "linear": dict(hidden_sizes=(20,), initial_learning_rate=0.2, l2_lambda=1e-4),
    "smooth": dict(hidden_sizes=(20,), initial_learning_rate=0.2, l2_lambda=1e-4),
    "nonsmooth": dict(hidden_sizes=(20,), initial_learning_rate=0.2, l2_lambda=1e-4),
    "correlated": dict(hidden_sizes=(30,), initial_learning_rate=0.1, l2_lambda=1e-4),
}
SECOND_LAYER = 10

SCALES = {
    # (n, B, n_sims)
    "desk": {k: (200, 199, 100) for k in KINDS},
    "paper": {"nonlin5": (500, 500, 300), "linear": (500, 500, 500),
              "smooth": (500, 500, 500), "nonsmooth": (500, 500, 500),
              "correlated": (500, 500, 300)},
}


def network_preset(kind, layers=1):
    """Tuned network settings per simulation kind; ``layers=2`` adds a 10-unit layer."""
    if kind not in _NET_PRESETS:
        raise InvalidConfigError(f"unknown kind {kind!r}")
    if layers not in (1, 2):
        raise InvalidConfigError("layers must be 1 or 2")
    kw = {**_NET_COMMON, **_NET_PRESETS[kind]}
    if layers == 2:
        kw["hidden_sizes"] = (*kw["hidden_sizes"], SECOND_LAYER)
    return nn_core.NetworkConfig(**kw)


def scale_preset(kind, scale):
    if scale not in SCALES:
        raise InvalidConfigError(f"unknown scale {scale!r}; choose desk or paper")
    return SCALES[scale][kind]
