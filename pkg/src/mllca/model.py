"""Types and likelihood kernels for simple and multilevel latent class models.

A unit-level latent class X with T categories drives K binary indicators
through class-conditional Bernoulli probabilities parametrized as logits.
An optional group-level latent class W with M categories shifts the
distribution of X, and covariates may enter the class-membership models at
either level through multinomial-logit regressions. Class 0 is the reference
category at both levels (its logits are identically zero and never stored).
Every likelihood evaluation is carried out in log space with log-sum-exp
reductions over both latent layers, so underflow cannot occur even for large
groups or extreme logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DataError

# Linear predictors are clipped to this range before exponentiation.
# Estimates sitting at the bound are surfaced as boundary estimates rather
# than treated as fatal.
LOGIT_BOUND = 25.0

Stage = Literal["step1", "step2a", "step2b", "step3"]


def clip_logits(eta: np.ndarray) -> np.ndarray:
    return np.clip(eta, -LOGIT_BOUND, LOGIT_BOUND)


def stable_log_softmax(eta: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-softmax of clipped linear predictors along ``axis``."""
    eta = clip_logits(np.asarray(eta, dtype=float))
    return eta - logsumexp(eta, axis=axis, keepdims=True)


def stable_softmax(eta: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(stable_log_softmax(eta, axis=axis))


@dataclass(frozen=True)
class ResponseData:
    """Binary response matrix with group structure and optional covariates.

    Attributes:
        y: (n_units, n_items) array with entries in {0, 1}. Complete cases
            only; the CSV loader enforces this contract.
        group_of: (n_units,) integer array mapping each unit to its group,
            with values covering 0..n_groups-1 and every group non-empty.
        z_low: optional (n_units, p_low) unit-level covariate matrix.
        z_high: optional (n_groups, p_high) group-level covariate matrix,
            one row per group.
        item_names / group_labels / z_low_names / z_high_names: optional
            labels used in reports; generated defaults otherwise.
    """

    y: np.ndarray
    group_of: np.ndarray
    z_low: np.ndarray | None = None
    z_high: np.ndarray | None = None
    item_names: tuple[str, ...] | None = None
    group_labels: tuple[str, ...] | None = None
    z_low_names: tuple[str, ...] | None = None
    z_high_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        y = np.ascontiguousarray(self.y)
        if y.ndim != 2 or y.shape[1] < 1:
            raise DataError("response matrix must be two-dimensional with at least one item")
        if not np.isin(y, (0, 1)).all():
            raise DataError("response matrix entries must all be 0 or 1")
        object.__setattr__(self, "y", y.astype(np.int8))

        group_of = np.ascontiguousarray(self.group_of, dtype=np.int64)
        if group_of.shape != (y.shape[0],):
            raise DataError("group_of must assign exactly one group per unit")
        if y.shape[0] == 0:
            raise DataError("at least one unit is required")
        n_groups = int(group_of.max()) + 1
        if group_of.min() < 0 or np.bincount(group_of, minlength=n_groups).min() == 0:
            raise DataError("group indices must cover 0..n_groups-1 with no empty group")
        object.__setattr__(self, "group_of", group_of)

        if self.z_low is not None:
            z_low = np.atleast_2d(np.asarray(self.z_low, dtype=float))
            if z_low.shape[0] != y.shape[0]:
                raise DataError("z_low must have one row per unit")
            object.__setattr__(self, "z_low", z_low)
        if self.z_high is not None:
            z_high = np.atleast_2d(np.asarray(self.z_high, dtype=float))
            if z_high.shape[0] != n_groups:
                raise DataError("z_high must have exactly one row per group")
            object.__setattr__(self, "z_high", z_high)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_items(self) -> int:
        return self.y.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.group_of.max()) + 1

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    @property
    def n_covariates_low(self) -> int:
        return 0 if self.z_low is None else self.z_low.shape[1]

    @property
    def n_covariates_high(self) -> int:
        return 0 if self.z_high is None else self.z_high.shape[1]

    def take_units(self, indices: np.ndarray) -> "ResponseData":
        """Subset units while keeping the existing group layout.

        Every group must remain non-empty; intended for within-group
        resampling where the index multiset preserves group membership.
        """
        indices = np.asarray(indices, dtype=np.int64)
        return ResponseData(
            y=self.y[indices],
            group_of=self.group_of[indices],
            z_low=None if self.z_low is None else self.z_low[indices],
            z_high=self.z_high,
            item_names=self.item_names,
            group_labels=self.group_labels,
            z_low_names=self.z_low_names,
            z_high_names=self.z_high_names,
        )

    def take_groups(self, group_indices: np.ndarray) -> "ResponseData":
        """Assemble a new dataset from a (multi)set of groups.

        Each occurrence of a group index becomes its own new group carrying
        copies of all member units, as in a cluster bootstrap resample.
        """
        group_indices = np.asarray(group_indices, dtype=np.int64)
        members = [np.flatnonzero(self.group_of == j) for j in range(self.n_groups)]
        unit_idx = np.concatenate([members[j] for j in group_indices])
        new_group = np.concatenate(
            [np.full(members[j].size, pos, dtype=np.int64) for pos, j in enumerate(group_indices)]
        )
        labels = None
        if self.group_labels is not None:
            labels = tuple(self.group_labels[j] for j in group_indices)
        return ResponseData(
            y=self.y[unit_idx],
            group_of=new_group,
            z_low=None if self.z_low is None else self.z_low[unit_idx],
            z_high=None if self.z_high is None else self.z_high[group_indices],
            item_names=self.item_names,
            group_labels=labels,
            z_low_names=self.z_low_names,
            z_high_names=self.z_high_names,
        )


@dataclass(frozen=True)
class MeasurementParams:
    """Item-class logits defining the conditional response probabilities.

    ``beta[t, k]`` is the logit of P(Y_k = 1 | X = t); rows index classes.
    """

    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if not np.isfinite(clip_logits(beta)).all():
            raise DataError("measurement logits must be finite after clipping")
        object.__setattr__(self, "beta", beta)

    @property
    def n_classes(self) -> int:
        return self.beta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[1]

    def item_probs(self) -> np.ndarray:
        """(T, K) matrix of P(Y_k = 1 | X = t)."""
        return expit(clip_logits(self.beta))


@dataclass(frozen=True)
class StructuralParams:
    """Class-membership model parameters at both latent levels.

    Attributes:
        gamma0: (M, T-1) intercepts of the low-level multinomial logit, one
            row per high-level class; low-level class 0 is the reference.
        delta0: (M-1,) intercepts of the high-level multinomial logit with
            class 0 as reference.
        gamma1: optional (T-1, p_high) slopes of group-level covariates on X.
        gamma2: optional (T-1, p_low) slopes of unit-level covariates on X,
            shared across high-level classes.
        random_slopes: optional (M, T-1, p_low) per-high-class slopes that
            replace ``gamma2`` when present.
        delta1: optional (M-1, p_high) slopes of group-level covariates on W.
    """

    gamma0: np.ndarray
    delta0: np.ndarray
    gamma1: np.ndarray | None = None
    gamma2: np.ndarray | None = None
    random_slopes: np.ndarray | None = None
    delta1: np.ndarray | None = None

    def __post_init__(self) -> None:
        gamma0 = np.asarray(self.gamma0, dtype=float)
        if gamma0.ndim != 2:
            raise DataError("gamma0 must be an (M, T-1) matrix")
        object.__setattr__(self, "gamma0", gamma0)
        m = gamma0.shape[0]
        if m < 1:
            raise DataError("at least one high-level class is required")

        delta0 = np.asarray(self.delta0, dtype=float).reshape(-1)
        if delta0.shape != (m - 1,):
            raise DataError("delta0 must have length n_classes_high - 1")
        object.__setattr__(self, "delta0", delta0)

        t_minus_1 = gamma0.shape[1]
        if self.gamma1 is not None:
            gamma1 = np.atleast_2d(np.asarray(self.gamma1, dtype=float))
            if gamma1.shape[0] != t_minus_1:
                raise DataError("gamma1 must have one row per non-reference low class")
            object.__setattr__(self, "gamma1", gamma1)
        if self.gamma2 is not None and self.random_slopes is not None:
            raise DataError("gamma2 and random_slopes are mutually exclusive")
        if self.gamma2 is not None:
            gamma2 = np.atleast_2d(np.asarray(self.gamma2, dtype=float))
            if gamma2.shape[0] != t_minus_1:
                raise DataError("gamma2 must have one row per non-reference low class")
            object.__setattr__(self, "gamma2", gamma2)
        if self.random_slopes is not None:
            rs = np.asarray(self.random_slopes, dtype=float)
            if rs.ndim != 3 or rs.shape[:2] != (m, t_minus_1):
                raise DataError("random_slopes must have shape (M, T-1, p_low)")
            object.__setattr__(self, "random_slopes", rs)
        if self.delta1 is not None:
            delta1 = np.atleast_2d(np.asarray(self.delta1, dtype=float))
            if delta1.shape[0] != m - 1:
                raise DataError("delta1 must have one row per non-reference high class")
            object.__setattr__(self, "delta1", delta1)

    @property
    def n_classes_high(self) -> int:
        return self.gamma0.shape[0]

    @property
    def n_classes_low(self) -> int:
        return self.gamma0.shape[1] + 1


@dataclass(frozen=True)
class PosteriorTables:
    """Posterior class-membership probabilities from a single E-step.

    Attributes:
        joint: (n_units, T, M) joint posterior P(X=t, W=m | Y, Z) per unit.
        high: (n_groups, M) posterior P(W=m | Y_j, Z) per group.
        low_marginal: (n_units, T) marginal posterior over X, equal to the
            joint summed over the high-level classes.
    """

    joint: np.ndarray
    high: np.ndarray
    low_marginal: np.ndarray


@dataclass(frozen=True)
class FitSummary:
    """Fit-quality summary attached to every estimation result."""

    loglik: float
    npar: int
    bic: float
    bic_group: float
    entropy_r2_low: float
    entropy_r2_high: float | None
    n_iterations: int
    converged: bool
    best_start_index: int
    tic: float | None = None
    flags: tuple[str, ...] = ()


def item_response_prob(beta: MeasurementParams, t: int, k: int) -> float:
    """P(Y_k = 1 | X = t) for 0-based class index t and item index k."""
    n_classes, n_items = beta.beta.shape
    if not 0 <= t < n_classes:
        raise ValueError(f"class index {t} out of range [0, {n_classes})")
    if not 0 <= k < n_items:
        raise ValueError(f"item index {k} out of range [0, {n_items})")
    return float(expit(clip_logits(beta.beta[t, k])))


def _check_row(z: np.ndarray | None, width: int, what: str) -> np.ndarray:
    if width == 0:
        return np.zeros(0)
    if z is None:
        raise ValueError(f"{what} covariate row of length {width} required")
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != width:
        raise ValueError(f"{what} covariate row has length {z.shape[0]}, expected {width}")
    return z


def class_prob_low(
    params: StructuralParams,
    m: int,
    z_high_row: np.ndarray | None = None,
    z_low_row: np.ndarray | None = None,
) -> np.ndarray:
    """Length-T probability vector P(X = t | W = m, covariates).

    Reduces to the intercept-only mixture weights when the slope blocks are
    absent; covariate rows are then ignored and may be omitted.
    """
    if not 0 <= m < params.n_classes_high:
        raise ValueError(f"high-level class index {m} out of range")
    eta = params.gamma0[m].copy()
    if params.gamma1 is not None:
        z1 = _check_row(z_high_row, params.gamma1.shape[1], "group-level")
        eta += params.gamma1 @ z1
    if params.gamma2 is not None:
        z2 = _check_row(z_low_row, params.gamma2.shape[1], "unit-level")
        eta += params.gamma2 @ z2
    if params.random_slopes is not None:
        z2 = _check_row(z_low_row, params.random_slopes.shape[2], "unit-level")
        eta += params.random_slopes[m] @ z2
    return stable_softmax(np.concatenate(([0.0], eta)))


def class_prob_high(
    params: StructuralParams,
    z_high_row: np.ndarray | None = None,
) -> np.ndarray:
    """Length-M probability vector P(W = m | covariates)."""
    eta = params.delta0.copy()
    if params.delta1 is not None:
        z1 = _check_row(z_high_row, params.delta1.shape[1], "group-level")
        eta += params.delta1 @ z1
    return stable_softmax(np.concatenate(([0.0], eta)))


def _require_covariates(data: ResponseData, params: StructuralParams) -> None:
    if (params.gamma1 is not None or params.delta1 is not None) and data.z_high is None:
        raise ValueError("parameters carry group-level slopes but data has no z_high")
    if (params.gamma2 is not None or params.random_slopes is not None) and data.z_low is None:
        raise ValueError("parameters carry unit-level slopes but data has no z_low")
    if params.gamma1 is not None and params.gamma1.shape[1] != data.n_covariates_high:
        raise ValueError("gamma1 width does not match z_high")
    if params.delta1 is not None and params.delta1.shape[1] != data.n_covariates_high:
        raise ValueError("delta1 width does not match z_high")
    if params.gamma2 is not None and params.gamma2.shape[1] != data.n_covariates_low:
        raise ValueError("gamma2 width does not match z_low")
    if params.random_slopes is not None and params.random_slopes.shape[2] != data.n_covariates_low:
        raise ValueError("random_slopes width does not match z_low")


def low_class_logits(data: ResponseData, params: StructuralParams) -> np.ndarray:
    """(n_units, T, M) linear predictors of the low-level class model."""
    _require_covariates(data, params)
    n = data.n_units
    m, t_minus_1 = params.gamma0.shape
    eta = np.broadcast_to(params.gamma0.T[None, :, :], (n, t_minus_1, m)).copy()
    if params.gamma1 is not None:
        eta += (data.z_high @ params.gamma1.T)[data.group_of][:, :, None]
    if params.gamma2 is not None:
        eta += (data.z_low @ params.gamma2.T)[:, :, None]
    if params.random_slopes is not None:
        eta += np.einsum("np,mtp->ntm", data.z_low, params.random_slopes)
    return np.concatenate([np.zeros((n, 1, m)), eta], axis=1)


def high_class_logits(data: ResponseData, params: StructuralParams) -> np.ndarray:
    """(n_groups, M) linear predictors of the high-level class model."""
    _require_covariates(data, params)
    j = data.n_groups
    eta = np.broadcast_to(params.delta0[None, :], (j, params.n_classes_high - 1)).copy()
    if params.delta1 is not None:
        eta += data.z_high @ params.delta1.T
    return np.concatenate([np.zeros((j, 1)), eta], axis=1)


def measurement_logmass(beta: MeasurementParams, y: np.ndarray) -> np.ndarray:
    """(n_units, T) class-conditional log-mass of each unit's response row.

    Cached once per E-step; the dominant cost of every likelihood pass.
    """
    logits = clip_logits(beta.beta)
    log_p1 = -np.logaddexp(0.0, -logits)
    log_p0 = -np.logaddexp(0.0, logits)
    return y @ log_p1.T + (1 - y) @ log_p0.T


@dataclass(frozen=True)
class EStepResult:
    """Everything a single E-step produces, shared by all estimator steps."""

    loglik_by_group: np.ndarray  # (J,)
    q_high: np.ndarray           # (J, M) posterior P(W=m | Y_j, Z)
    joint: np.ndarray            # (N, T, M) posterior P(X=t, W=m | Y, Z)

    @property
    def loglik(self) -> float:
        return float(self.loglik_by_group.sum())

    @property
    def low_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=2)

    def tables(self) -> PosteriorTables:
        return PosteriorTables(joint=self.joint, high=self.q_high, low_marginal=self.low_marginal)


def e_step(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
    logmass: np.ndarray | None = None,
) -> EStepResult:
    """Exact posteriors and per-group log-likelihoods, all in log space.

    ``logmass`` optionally supplies a precomputed measurement log-mass
    matrix; callers that hold the measurement model fixed across many
    evaluations cache it once.
    """
    if beta.n_items != data.n_items:
        raise ValueError("measurement parameters do not match the number of items")
    if beta.n_classes != structural.n_classes_low:
        raise ValueError("measurement and structural class counts disagree")
    n, j = data.n_units, data.n_groups
    m = structural.n_classes_high
    group_of = data.group_of

    if logmass is None:
        logmass = measurement_logmass(beta, data.y)                  # (N, T)
    log_alpha = stable_log_softmax(low_class_logits(data, structural), axis=1)
    scored = logmass[:, :, None] + log_alpha                         # (N, T, M)
    unit_given_w = logsumexp(scored, axis=1)                         # (N, M)

    group_given_w = np.empty((j, m))
    for w in range(m):
        group_given_w[:, w] = np.bincount(group_of, weights=unit_given_w[:, w], minlength=j)

    log_omega = stable_log_softmax(high_class_logits(data, structural), axis=1)
    joint_high = group_given_w + log_omega                           # (J, M)
    loglik_by_group = logsumexp(joint_high, axis=1)
    q_high = np.exp(joint_high - loglik_by_group[:, None])

    cond_low = np.exp(scored - unit_given_w[:, None, :])             # P(X=t | W=m, Y)
    joint = cond_low * q_high[group_of][:, None, :]
    return EStepResult(loglik_by_group=loglik_by_group, q_high=q_high, joint=joint)


def loglik_by_group(data: ResponseData, beta: MeasurementParams, structural: StructuralParams) -> np.ndarray:
    """(n_groups,) vector of log P(Y_j | Z_j)."""
    return e_step(data, beta, structural).loglik_by_group


def total_loglik(data: ResponseData, beta: MeasurementParams, structural: StructuralParams) -> float:
    """Observed-data log-likelihood summed over groups."""
    return float(loglik_by_group(data, beta, structural).sum())


def group_loglik(data: ResponseData, j: int, beta: MeasurementParams, structural: StructuralParams) -> float:
    """log P(Y_j | Z_j) for a single 0-based group index j."""
    if not 0 <= j < data.n_groups:
        raise ValueError(f"group index {j} out of range [0, {data.n_groups})")
    mask = data.group_of == j
    sub = ResponseData(
        y=data.y[mask],
        group_of=np.zeros(int(mask.sum()), dtype=np.int64),
        z_low=None if data.z_low is None else data.z_low[mask],
        z_high=None if data.z_high is None else data.z_high[j : j + 1],
    )
    return total_loglik(sub, beta, structural)


def posterior_tables(data: ResponseData, beta: MeasurementParams, structural: StructuralParams) -> PosteriorTables:
    """Joint, high-level, and low-marginal posteriors via Bayes' rule."""
    return e_step(data, beta, structural).tables()


def count_parameters(
    n_classes_low: int,
    n_classes_high: int,
    n_items: int,
    n_covariates_low: int = 0,
    n_covariates_high: int = 0,
    stage: Stage = "step1",
    random_slopes: bool = False,
) -> int:
    """Free-parameter count of each estimation stage.

    Frozen blocks are excluded: step1 counts pooled class logits plus the
    measurement logits; step2a counts only the high-level mixture and the
    conditional class intercepts; step2b counts the full unconditional
    multilevel model; step3 counts the structural model (measurement logits
    stay fixed), with the high-level covariate block present only when
    group-level covariates are loaded.
    """
    t, m, k = n_classes_low, n_classes_high, n_items
    if t < 1 or m < 1:
        raise ValueError("class counts must be at least 1")
    if stage == "step1":
        return (t - 1) + t * k
    if stage == "step2a":
        return (m - 1) + m * (t - 1)
    if stage == "step2b":
        return (m - 1) + m * (t - 1) + t * k
    if stage == "step3":
        low_slopes = m * (t - 1) * n_covariates_low if random_slopes else (t - 1) * n_covariates_low
        return (
            (m - 1)
            + m * (t - 1)
            + (t - 1) * n_covariates_high
            + low_slopes
            + (m - 1) * n_covariates_high
        )
    raise ValueError(f"unknown stage {stage!r}")
