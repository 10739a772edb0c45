"""Permutation tests of feature association and nonlinearity built on input gradients.

Both tests train a network on the observed data, summarise the partial
derivatives of its output with respect to the tested feature, and compare that
summary to the same quantity from networks retrained on permuted data:

* association: statistic is the mean squared derivative; the null is generated
  by permuting the tested column.
* nonlinearity: statistic is the mean squared coefficient of a spline smooth
  of the centred derivatives against the feature; the null is generated by
  permuting the residuals of an additive model in which the feature enters
  linearly.

Replicates are trained in fixed-size chunks, each replicate from its own
derived seed, so results are identical for any worker count.
"""

import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn_core, seeding
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    ShapeError,
    UnsupportedOutcomeError,
)
from .splines import SmoothFitter, fit_additive

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
ASSOCIATION, NONLINEARITY = "association", "nonlinearity"
_TAGS = {ASSOCIATION: 1, NONLINEARITY: 2}
CORRELATION_WARN = 0.3


class CorrelatedPredictorWarning(UserWarning):
    pass


class ReplicateFailureError(DivergenceError):
    """Too many permutation replicates diverged during training."""

    def __init__(self, n_failed, B, epochs):
        self.n_failed, self.B = n_failed, B
        RuntimeError.__init__(
            self, f"{n_failed} of {B} permutation replicates diverged "
                  f"(first failing epochs: {epochs[:5]}); lower the learning rate")
        self.epoch = epochs[0] if epochs else None


@dataclass(frozen=True)
class TestConfig:
    B: int = 500
    network: nn_core.NetworkConfig = field(default_factory=nn_core.NetworkConfig)
    q: int = 10
    penalty_lambda: Optional[float] = None  # None: GCV
    master_seed: int = 0
    workers: int = 1
    add_one: bool = False
    level: float = 0.05
    max_failure_rate: float = 0.05
    share_observed_fit: bool = True
    chunk_size: int = 50

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if int(self.B) < 1:
            raise InvalidConfigError("B must be at least 1")
        if int(self.q) < 3:
            raise InvalidConfigError("q must be at least 3")
        if self.penalty_lambda is not None and self.penalty_lambda < 0:
            raise InvalidConfigError("penalty_lambda must be non-negative")
        if int(self.workers) < 1 or int(self.chunk_size) < 1:
            raise InvalidConfigError("workers and chunk_size must be positive")
        if not 0 < self.level < 1:
            raise InvalidConfigError("level must lie in (0, 1)")
        if not 0 <= self.max_failure_rate < 1:
            raise InvalidConfigError("max_failure_rate must lie in [0, 1)")
        seeding.check_seed(self.master_seed)

    def with_(self, **changes):
        return replace(self, **changes)

    def observed_seed(self):
        return seeding.derive_seed(self.master_seed, 0)

    def to_dict(self):
        return {
            "B": int(self.B),
            "network": self.network.to_dict(),
            "q": int(self.q),
            "penalty_lambda": self.penalty_lambda,
            "master_seed": int(self.master_seed),
            "add_one": bool(self.add_one),
            "level": float(self.level),
            "max_failure_rate": float(self.max_failure_rate),
            "share_observed_fit": bool(self.share_observed_fit),
            "chunk_size": int(self.chunk_size),
        }


@dataclass(frozen=True, eq=False)
class TestResult:
    kind: str
    feature_index: int
    feature_name: str
    T_observed: float
    T_null: np.ndarray
    p_value: float
    B: int
    settings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    __test__ = False

    def to_dict(self, include_gradients=True):
        diag = dict(self.diagnostics)
        if not include_gradients:
            diag.pop("observed_gradients", None)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "feature": {"index": self.feature_index, "name": self.feature_name},
            "T_observed": float(self.T_observed),
            "p_value": float(self.p_value),
            "B": int(self.B),
            "T_null": [float(v) for v in self.T_null],
            "settings": self.settings,
            "diagnostics": _jsonable(diag),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(**kw), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class CombinedResult:
    association: TestResult
    nonlinearity: Optional[TestResult]
    verdict: str  # "none" | "linear" | "nonlinear"

    def to_dict(self, include_gradients=True):
        return {
            "schema_version": SCHEMA_VERSION,
            "verdict": self.verdict,
            "association": self.association.to_dict(include_gradients),
            "nonlinearity": (None if self.nonlinearity is None
                             else self.nonlinearity.to_dict(include_gradients)),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# statistics and resampling primitives
# ---------------------------------------------------------------------------

def assoc_statistic(grads):
    """Mean squared partial derivative."""
    g = np.asarray(grads, dtype=np.float64).ravel()
    if g.size == 0:
        raise InvalidInputError("gradient vector is empty")
    return float(np.mean(g * g))


def nonlin_statistic(fit):
    """Mean squared spline coefficient of a :class:`SmoothFit` (intercept excluded)."""
    theta = np.asarray(fit.theta if hasattr(fit, "theta") else fit, dtype=np.float64)
    return float(np.mean(theta * theta))


def permute_column(X, j, seed):
    """Copy of X with column j randomly permuted; other columns untouched."""
    X = np.array(X, dtype=np.float64)
    if not 0 <= j < X.shape[1]:
        raise ShapeError(f"column {j} out of range")
    perm = seeding.rng(seed, seeding.STREAM_PERMUTE).permutation(X.shape[0])
    X[:, j] = X[perm, j]
    return X


def permute_residual_response(fitted, residuals, seed):
    """``fitted + permuted(residuals)``."""
    fitted = np.asarray(fitted, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    if fitted.shape != residuals.shape or fitted.ndim != 1:
        raise ShapeError("fitted and residuals must be vectors of equal length")
    perm = seeding.rng(seed, seeding.STREAM_PERMUTE).permutation(residuals.size)
    return fitted + residuals[perm]


def p_value(T_observed, T_null, add_one=False):
    """Share of null statistics at least as large as the observed one.

    ``add_one`` switches to ``(1 + #) / (B + 1)``.
    """
    T_null = np.asarray(T_null, dtype=np.float64)
    if T_null.size == 0:
        raise InvalidInputError("need at least one null statistic")
    hits = int(np.count_nonzero(T_null >= T_observed))
    if add_one:
        return (1 + hits) / (T_null.size + 1)
    return hits / T_null.size


# ---------------------------------------------------------------------------
# replicate engine
# ---------------------------------------------------------------------------

def _assoc_chunk(X, y, j, net_cfg, seeds):
    R = len(seeds)
    Xs = np.repeat(X[None], R, axis=0)
    for r, s in enumerate(seeds):
        perm = seeding.rng(s, seeding.STREAM_PERMUTE).permutation(X.shape[0])
        Xs[r, :, j] = X[perm, j]
    res = nn_core.train_replicates(Xs, np.repeat(y[None], R, axis=0), net_cfg, seeds)
    grads = nn_core._input_gradients_stack(res.stack, Xs, j)
    stats = np.mean(grads * grads, axis=1)
    return stats, res.losses[:, -1] if res.losses.shape[1] else np.zeros(R), res.failed_epoch


def _nonlin_chunk(X, fitted, residuals, j, net_cfg, seeds, q, lam):
    R = len(seeds)
    Y = np.empty((R, fitted.size))
    for r, s in enumerate(seeds):
        Y[r] = permute_residual_response(fitted, residuals, s)
    res = nn_core.train_replicates(X, Y, net_cfg, seeds)
    grads = nn_core._input_gradients_stack(res.stack, X, j)
    smoother = SmoothFitter(X[:, j], q, lam)
    stats = np.full(R, np.nan)
    for r in range(R):
        if res.failed_epoch[r] < 0 and np.isfinite(grads[r]).all():
            stats[r] = nonlin_statistic(smoother.fit(grads[r] - grads[r].mean()))
    return stats, res.losses[:, -1] if res.losses.shape[1] else np.zeros(R), res.failed_epoch


def _run_chunk(args):
    kind, payload, seeds = args
    if kind == ASSOCIATION:
        return _assoc_chunk(*payload, seeds)
    return _nonlin_chunk(*payload[:5], seeds, *payload[5:])


def default_workers():
    env = os.environ.get("GRADPERM_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_replicates(kind, payload, seeds, cfg):
    chunks = [seeds[i:i + cfg.chunk_size] for i in range(0, len(seeds), cfg.chunk_size)]
    jobs = [(kind, payload, c) for c in chunks]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(job) for job in jobs]
    stats = np.concatenate([p[0] for p in parts])
    losses = np.concatenate([p[1] for p in parts])
    failed_epoch = np.concatenate([p[2] for p in parts])
    return stats, losses, failed_epoch


def _finish(kind, data, j, cfg, T_obs, stats, losses, failed_epoch, diag):
    failed = (failed_epoch >= 0) | ~np.isfinite(stats)
    n_failed = int(failed.sum())
    if n_failed > cfg.max_failure_rate * cfg.B:
        raise ReplicateFailureError(n_failed, cfg.B, failed_epoch[failed].tolist())
    if n_failed:
        log.warning("%d of %d replicates diverged and were excluded", n_failed, cfg.B)
    T_null = stats[~failed]
    diag = dict(diag)
    diag.update({
        "replicate_final_losses": losses,
        "failed_replicates": np.flatnonzero(failed).tolist(),
    })
    return TestResult(
        kind=kind,
        feature_index=j,
        feature_name=data.feature_names[j],
        T_observed=float(T_obs),
        T_null=T_null,
        p_value=p_value(T_obs, T_null, cfg.add_one),
        B=int(cfg.B),
        settings=cfg.to_dict(),
        diagnostics=diag,
    )


def fit_observed(data, cfg):
    """The observed-data network, seeded from the master seed."""
    net_cfg = cfg.network.with_(seed=cfg.observed_seed())
    return nn_core.fit_network(data, net_cfg)


def _check_correlation(data, j):
    if data.p < 2:
        return 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.corrcoef(data.X, rowvar=False)[j]
    c = np.nan_to_num(np.delete(c, j))
    worst = float(np.max(np.abs(c)))
    if worst > CORRELATION_WARN:
        warnings.warn(
            f"feature {data.feature_names[j]!r} has |correlation| {worst:.2f} with another "
            "predictor; permuting it breaks that dependence and can inflate Type-I error",
            CorrelatedPredictorWarning, stacklevel=3)
    return worst


def association_test(data, j, cfg, observed=None):
    """Permutation test of any association between feature ``j`` and the outcome."""
    j = data.feature_index(j)
    max_corr = _check_correlation(data, j)
    net = observed if observed is not None else fit_observed(data, cfg)
    grads = nn_core.input_gradients(net, data.X, j)
    T_obs = assoc_statistic(grads)
    seeds = seeding.replicate_seeds(cfg.master_seed, _TAGS[ASSOCIATION], cfg.B)
    stats, losses, failed = _run_replicates(
        ASSOCIATION, (data.X, data.y, j, cfg.network), seeds, cfg)
    diag = {
        "observed_gradients": grads,
        "observed_final_loss": float(net.loss_history[-1]) if net.loss_history.size else None,
        "max_abs_correlation": max_corr,
    }
    return _finish(ASSOCIATION, data, j, cfg, T_obs, stats, losses, failed, diag)


def nonlinearity_test(data, j, cfg, observed=None):
    """Permutation test of a nonlinear (versus linear) effect of feature ``j``."""
    j = data.feature_index(j)
    if cfg.network.output_activation != "identity" or data.is_binary():
        raise UnsupportedOutcomeError(
            "the nonlinearity test needs a continuous outcome and identity output")
    gam = fit_additive(data, j, cfg.q, cfg.penalty_lambda)
    net = observed if observed is not None else fit_observed(data, cfg)
    grads = nn_core.input_gradients(net, data.X, j)
    smooth = SmoothFitter(data.X[:, j], cfg.q, cfg.penalty_lambda).fit(grads - grads.mean())
    T_obs = nonlin_statistic(smooth)
    seeds = seeding.replicate_seeds(cfg.master_seed, _TAGS[NONLINEARITY], cfg.B)
    payload = (data.X, gam.fitted, gam.residuals, j, cfg.network, cfg.q, cfg.penalty_lambda)
    stats, losses, failed = _run_replicates(NONLINEARITY, payload, seeds, cfg)
    diag = {
        "observed_gradients": grads,
        "observed_final_loss": float(net.loss_history[-1]) if net.loss_history.size else None,
        "observed_theta": smooth.theta,
        "smooth_penalty_lambda": smooth.penalty_lambda,
        "additive_penalty_lambda": gam.penalty_lambda,
        "additive_linear_coef": gam.linear_coef,
    }
    return _finish(NONLINEARITY, data, j, cfg, T_obs, stats, losses, failed, diag)


def combined_protocol(data, j, cfg):
    """Association test first; the nonlinearity test only when association is found.

    Verdict is ``"none"``, ``"linear"`` or ``"nonlinear"`` at ``cfg.level``.
    """
    j = data.feature_index(j)
    net = fit_observed(data, cfg) if cfg.share_observed_fit else None
    assoc = association_test(data, j, cfg, observed=net)
    if assoc.p_value >= cfg.level:
        return CombinedResult(assoc, None, "none")
    nonlin = nonlinearity_test(data, j, cfg, observed=net)
    verdict = "nonlinear" if nonlin.p_value < cfg.level else "linear"
    return CombinedResult(assoc, nonlin, verdict)
