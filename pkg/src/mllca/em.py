"""EM estimation for every step of the two-stage procedure.

One EM engine serves all steps. A freeze set names parameter blocks that are
held fixed throughout a fit, which is the whole pseudo-ML mechanism: the
pooled model, the high-level-only step, the measurement re-update, and the
covariate step are the same engine run with different freezes and starting
strategies. M-steps are exact (closed form where the block is intercept-only
or Bernoulli, Newton-Raphson with ascent guards otherwise), so the
observed-data log-likelihood is non-decreasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .criteria import bic, entropy_r2
from .errors import ConfigError, DataError
from .model import (
    LOGIT_BOUND,
    EStepResult,
    FitSummary,
    MeasurementParams,
    PosteriorTables,
    ResponseData,
    StructuralParams,
    clip_logits,
    count_parameters,
    e_step,
    stable_log_softmax,
)

FREEZABLE_BLOCKS = frozenset(
    {"beta", "gamma0", "gamma1", "gamma2", "delta0", "delta1", "random_slopes"}
)

_BOUNDARY_EPS = 1e-9
_DEGENERATE_FRACTION = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """Knobs shared by every estimation step.

    ``freeze`` names parameter blocks held fixed in addition to whatever the
    step itself freezes; ``seed`` drives the whole chain of random starts, so
    a fixed seed reproduces a fit bit for bit.
    """

    max_iterations: int = 2000
    loglik_tolerance: float = 1e-8
    relative_tolerance: bool = False
    n_random_starts: int = 16
    seed: int = 0
    m_step_newton_tolerance: float = 1e-10
    m_step_max_newton: int = 50
    freeze: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.loglik_tolerance <= 0:
            raise ConfigError("loglik_tolerance must be positive")
        if self.n_random_starts < 1:
            raise ConfigError("n_random_starts must be at least 1")
        unknown = set(self.freeze) - FREEZABLE_BLOCKS
        if unknown:
            raise ConfigError(f"unknown freeze blocks: {sorted(unknown)}")
        object.__setattr__(self, "freeze", frozenset(self.freeze))


@dataclass(frozen=True)
class FitResult:
    """Estimates, posteriors, and bookkeeping from one fit."""

    beta: MeasurementParams
    structural: StructuralParams
    summary: FitSummary
    posteriors: PosteriorTables
    per_start_logliks: tuple[float, ...]
    loglik_history: np.ndarray
    stage: str
    free_blocks: tuple[str, ...]

    @property
    def n_classes_low(self) -> int:
        return self.beta.n_classes

    @property
    def n_classes_high(self) -> int:
        return self.structural.n_classes_high


# ---------------------------------------------------------------------------
# Generic weighted multinomial-logit maximization (soft labels, reference 0)


def _multinomial_q(x: np.ndarray, counts: np.ndarray, theta: np.ndarray) -> tuple[float, np.ndarray]:
    n = x.shape[0]
    eta = np.concatenate([np.zeros((n, 1)), x @ theta.T], axis=1)
    logpi = stable_log_softmax(eta, axis=1)
    return float((counts * logpi).sum()), np.exp(logpi)


def _multinomial_newton(
    x: np.ndarray,
    counts: np.ndarray,
    theta0: np.ndarray,
    free: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, bool]:
    """Maximize sum_i sum_c counts[i,c] log softmax([0, x_i theta'])_c.

    ``free`` masks the coordinates of theta allowed to move; candidates are
    clipped to the logit bound and accepted only when the objective does not
    decrease (step halving otherwise), which keeps the surrounding EM
    monotone. Returns the new theta and a convergence flag.
    """
    theta = theta0.copy()
    free_idx = np.flatnonzero(free.ravel())
    if free_idx.size == 0:
        return theta, True
    w = counts.sum(axis=1)
    q, pi = _multinomial_q(x, counts, theta)
    n_minus1, n_cols = theta.shape
    converged = False
    for _ in range(max_iter):
        resid = counts[:, 1:] - w[:, None] * pi[:, 1:]
        grad = (resid.T @ x).ravel()[free_idx]
        hess = np.empty((n_minus1 * n_cols, n_minus1 * n_cols))
        for a in range(n_minus1):
            pa = pi[:, a + 1]
            for b in range(a, n_minus1):
                pb = pi[:, b + 1]
                wab = w * pa * ((1.0 if a == b else 0.0) - pb)
                block = (x * wab[:, None]).T @ x
                hess[a * n_cols : (a + 1) * n_cols, b * n_cols : (b + 1) * n_cols] = block
                if a != b:
                    hess[b * n_cols : (b + 1) * n_cols, a * n_cols : (a + 1) * n_cols] = block.T
        info = hess[np.ix_(free_idx, free_idx)]
        try:
            step = np.linalg.solve(info, grad)
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]

        scale = 1.0
        accepted = False
        for _ in range(30):
            flat = theta.ravel().copy()
            flat[free_idx] += scale * step
            candidate = clip_logits(flat).reshape(theta.shape)
            q_new, pi_new = _multinomial_q(x, counts, candidate)
            if q_new >= q:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break
        improvement = q_new - q
        theta, q, pi = candidate, q_new, pi_new
        if improvement < tol:
            converged = True
            break
    return theta, converged


def multinomial_info(x: np.ndarray, counts: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Observed information (negative Hessian) of the multinomial objective."""
    w = counts.sum(axis=1)
    _, pi = _multinomial_q(x, counts, theta)
    n_minus1, n_cols = theta.shape
    info = np.empty((n_minus1 * n_cols, n_minus1 * n_cols))
    for a in range(n_minus1):
        pa = pi[:, a + 1]
        for b in range(a, n_minus1):
            pb = pi[:, b + 1]
            wab = w * pa * ((1.0 if a == b else 0.0) - pb)
            block = (x * wab[:, None]).T @ x
            info[a * n_cols : (a + 1) * n_cols, b * n_cols : (b + 1) * n_cols] = block
            if a != b:
                info[b * n_cols : (b + 1) * n_cols, a * n_cols : (a + 1) * n_cols] = block.T
    return info


# ---------------------------------------------------------------------------
# M-step


@dataclass(frozen=True)
class _LowDesign:
    """Pseudo-observation design for the low-level class model.

    Rows are (unit, high-class) pairs in high-class-major order; columns are
    per-class intercept dummies followed by the covariate blocks present in
    the template parameters.
    """

    x: np.ndarray
    columns: dict[str, np.ndarray]


def _build_low_design(data: ResponseData, template: StructuralParams) -> _LowDesign:
    n, m = data.n_units, template.n_classes_high
    blocks: list[np.ndarray] = []
    columns: dict[str, np.ndarray] = {}
    offset = 0

    dummies = np.zeros((n * m, m))
    for w in range(m):
        dummies[w * n : (w + 1) * n, w] = 1.0
    blocks.append(dummies)
    columns["gamma0"] = np.arange(m)
    offset += m

    if template.gamma1 is not None:
        p = template.gamma1.shape[1]
        blocks.append(np.tile(data.z_high[data.group_of], (m, 1)))
        columns["gamma1"] = np.arange(offset, offset + p)
        offset += p
    if template.gamma2 is not None:
        p = template.gamma2.shape[1]
        blocks.append(np.tile(data.z_low, (m, 1)))
        columns["gamma2"] = np.arange(offset, offset + p)
        offset += p
    if template.random_slopes is not None:
        p = template.random_slopes.shape[2]
        block = np.zeros((n * m, m * p))
        for w in range(m):
            block[w * n : (w + 1) * n, w * p : (w + 1) * p] = data.z_low
        blocks.append(block)
        columns["random_slopes"] = np.arange(offset, offset + m * p)
        offset += m * p
    return _LowDesign(x=np.hstack(blocks), columns=columns)


def _low_theta_from_params(structural: StructuralParams, design: _LowDesign) -> np.ndarray:
    m, t_minus_1 = structural.gamma0.shape
    theta = np.zeros((t_minus_1, design.x.shape[1]))
    theta[:, design.columns["gamma0"]] = structural.gamma0.T
    if structural.gamma1 is not None:
        theta[:, design.columns["gamma1"]] = structural.gamma1
    if structural.gamma2 is not None:
        theta[:, design.columns["gamma2"]] = structural.gamma2
    if structural.random_slopes is not None:
        p = structural.random_slopes.shape[2]
        theta[:, design.columns["random_slopes"]] = (
            structural.random_slopes.transpose(1, 0, 2).reshape(t_minus_1, m * p)
        )
    return theta


def _low_params_from_theta(
    structural: StructuralParams, design: _LowDesign, theta: np.ndarray
) -> StructuralParams:
    m, t_minus_1 = structural.gamma0.shape
    updates: dict[str, np.ndarray | None] = {
        "gamma0": theta[:, design.columns["gamma0"]].T.copy()
    }
    if structural.gamma1 is not None:
        updates["gamma1"] = theta[:, design.columns["gamma1"]].copy()
    if structural.gamma2 is not None:
        updates["gamma2"] = theta[:, design.columns["gamma2"]].copy()
    if structural.random_slopes is not None:
        p = structural.random_slopes.shape[2]
        updates["random_slopes"] = (
            theta[:, design.columns["random_slopes"]]
            .reshape(t_minus_1, m, p)
            .transpose(1, 0, 2)
            .copy()
        )
    return replace(structural, **updates)


def _intercept_logits_from_mass(mass: np.ndarray) -> np.ndarray:
    """Reference-class logits of a mass vector; log(0) clips to the bound."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logits = np.log(mass[1:]) - np.log(mass[0])
    return clip_logits(np.nan_to_num(logits, nan=0.0, posinf=LOGIT_BOUND, neginf=-LOGIT_BOUND))


def _intercept_q(mass: np.ndarray, logits: np.ndarray) -> float:
    full = np.concatenate([[0.0], logits])
    return float(mass @ stable_log_softmax(full))


def _update_beta(data: ResponseData, es: EStepResult, beta: MeasurementParams) -> MeasurementParams:
    r = es.low_marginal
    totals = r.sum(axis=0)
    s1 = r.T @ data.y
    new = beta.beta.copy()
    ok = totals > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p = s1[ok] / totals[ok, None]
        logits = np.log(p) - np.log1p(-p)
    new[ok] = clip_logits(np.nan_to_num(logits, nan=0.0, posinf=LOGIT_BOUND, neginf=-LOGIT_BOUND))
    return MeasurementParams(beta=new)


def _update_high(
    data: ResponseData,
    es: EStepResult,
    structural: StructuralParams,
    freeze: frozenset[str],
    config: FitConfig,
    design_high: np.ndarray | None,
) -> StructuralParams:
    m = structural.n_classes_high
    if m == 1:
        return structural
    delta0_free = "delta0" not in freeze
    delta1_free = structural.delta1 is not None and "delta1" not in freeze
    if not delta0_free and not delta1_free:
        return structural
    if structural.delta1 is None:
        # Intercept-only: the weighted class shares maximize the block.
        mass = es.q_high.sum(axis=0)
        candidate = _intercept_logits_from_mass(mass)
        if _intercept_q(mass, candidate) >= _intercept_q(mass, structural.delta0):
            return replace(structural, delta0=candidate)
        return structural
    theta = np.concatenate([structural.delta0[:, None], structural.delta1], axis=1)
    free = np.zeros_like(theta, dtype=bool)
    free[:, 0] = delta0_free
    free[:, 1:] = delta1_free
    theta, _ = _multinomial_newton(
        design_high, es.q_high, theta, free,
        config.m_step_newton_tolerance, config.m_step_max_newton,
    )
    return replace(structural, delta0=theta[:, 0].copy(), delta1=theta[:, 1:].copy())


def _update_low(
    data: ResponseData,
    es: EStepResult,
    structural: StructuralParams,
    freeze: frozenset[str],
    config: FitConfig,
    design_low: _LowDesign | None,
) -> StructuralParams:
    if structural.n_classes_low == 1:
        return structural
    has_slopes = (
        structural.gamma1 is not None
        or structural.gamma2 is not None
        or structural.random_slopes is not None
    )
    if not has_slopes:
        if "gamma0" in freeze:
            return structural
        mass = es.joint.sum(axis=0)  # (T, M)
        gamma0 = structural.gamma0.copy()
        for w in range(structural.n_classes_high):
            candidate = _intercept_logits_from_mass(mass[:, w])
            if _intercept_q(mass[:, w], candidate) >= _intercept_q(mass[:, w], gamma0[w]):
                gamma0[w] = candidate
        return replace(structural, gamma0=gamma0)

    free_any = False
    theta = _low_theta_from_params(structural, design_low)
    free = np.zeros_like(theta, dtype=bool)
    for name, cols in design_low.columns.items():
        block_free = name not in freeze
        free[:, cols] = block_free
        free_any = free_any or block_free
    if not free_any:
        return structural
    m = structural.n_classes_high
    counts = es.joint.transpose(2, 0, 1).reshape(m * data.n_units, structural.n_classes_low)
    theta, _ = _multinomial_newton(
        design_low.x, counts, theta, free,
        config.m_step_newton_tolerance, config.m_step_max_newton,
    )
    return _low_params_from_theta(structural, design_low, theta)


# ---------------------------------------------------------------------------
# EM loop and the multi-start driver


@dataclass
class _EmRun:
    beta: MeasurementParams
    structural: StructuralParams
    estep: EStepResult
    history: np.ndarray
    converged: bool
    flags: set[str]

    @property
    def loglik(self) -> float:
        return float(self.history[-1])


def _run_em(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
    config: FitConfig,
    freeze: frozenset[str],
    design_low: _LowDesign | None,
    design_high: np.ndarray | None,
    frozen_logmass: np.ndarray | None = None,
) -> _EmRun:
    flags: set[str] = set()
    history = [0.0] * 0
    es = e_step(data, beta, structural, logmass=frozen_logmass)
    history.append(es.loglik)
    converged = False
    for _ in range(config.max_iterations):
        if "beta" not in freeze:
            beta = _update_beta(data, es, beta)
        structural = _update_high(data, es, structural, freeze, config, design_high)
        structural = _update_low(data, es, structural, freeze, config, design_low)
        es = e_step(data, beta, structural, logmass=frozen_logmass)
        history.append(es.loglik)
        if history[-1] < history[-2] - 1e-10:
            flags.add("monotonicity_violation")
        delta = abs(history[-1] - history[-2])
        if config.relative_tolerance:
            delta /= max(1.0, abs(history[-2]))
        if delta < config.loglik_tolerance:
            converged = True
            break
    return _EmRun(
        beta=beta,
        structural=structural,
        estep=es,
        history=np.asarray(history),
        converged=converged,
        flags=flags,
    )


def _is_degenerate(data: ResponseData, es: EStepResult) -> bool:
    low_mass = es.low_marginal.sum(axis=0)
    if low_mass.size > 1 and low_mass.min() < _DEGENERATE_FRACTION * data.n_units:
        return True
    high_mass = es.q_high.sum(axis=0)
    if high_mass.size > 1 and high_mass.min() < _DEGENERATE_FRACTION * data.n_groups:
        return True
    return False


def _random_structural(
    rng: np.random.Generator, template: StructuralParams, freeze: frozenset[str]
) -> StructuralParams:
    def draw(name: str, current: np.ndarray | None) -> np.ndarray | None:
        if current is None:
            return None
        if name in freeze:
            return current.copy()
        return rng.uniform(-0.5, 0.5, size=current.shape)

    return StructuralParams(
        gamma0=draw("gamma0", template.gamma0),
        delta0=draw("delta0", template.delta0),
        gamma1=draw("gamma1", template.gamma1),
        gamma2=draw("gamma2", template.gamma2),
        random_slopes=draw("random_slopes", template.random_slopes),
        delta1=draw("delta1", template.delta1),
    )


def _random_start(
    rng: np.random.Generator,
    template_beta: MeasurementParams,
    template: StructuralParams,
    freeze: frozenset[str],
) -> tuple[MeasurementParams, StructuralParams]:
    if "beta" in freeze:
        beta = MeasurementParams(beta=template_beta.beta.copy())
    else:
        beta = MeasurementParams(beta=rng.uniform(-1.5, 1.5, size=template_beta.beta.shape))
    return beta, _random_structural(rng, template, freeze)


def _zero_structural(template: StructuralParams, freeze: frozenset[str]) -> StructuralParams:
    def zero(name: str, current: np.ndarray | None) -> np.ndarray | None:
        if current is None:
            return None
        return current.copy() if name in freeze else np.zeros_like(current)

    return StructuralParams(
        gamma0=zero("gamma0", template.gamma0),
        delta0=zero("delta0", template.delta0),
        gamma1=zero("gamma1", template.gamma1),
        gamma2=zero("gamma2", template.gamma2),
        random_slopes=zero("random_slopes", template.random_slopes),
        delta1=zero("delta1", template.delta1),
    )


def _permute_low(
    beta: MeasurementParams, structural: StructuralParams, perm: np.ndarray
) -> tuple[MeasurementParams, StructuralParams]:
    """Relabel low-level classes; an exact reparametrization of the model."""
    new_beta = MeasurementParams(beta=beta.beta[perm])

    def re_reference(block: np.ndarray) -> np.ndarray:
        full = np.vstack([np.zeros((1, block.shape[1])), block])[perm]
        return full[1:] - full[:1]

    m = structural.n_classes_high
    full0 = np.concatenate([np.zeros((m, 1)), structural.gamma0], axis=1)[:, perm]
    updates: dict[str, np.ndarray | None] = {"gamma0": full0[:, 1:] - full0[:, :1]}
    if structural.gamma1 is not None:
        updates["gamma1"] = re_reference(structural.gamma1)
    if structural.gamma2 is not None:
        updates["gamma2"] = re_reference(structural.gamma2)
    if structural.random_slopes is not None:
        updates["random_slopes"] = np.stack(
            [re_reference(structural.random_slopes[w]) for w in range(m)]
        )
    return new_beta, replace(structural, **updates)


def _permute_high(structural: StructuralParams, perm: np.ndarray) -> StructuralParams:
    updates: dict[str, np.ndarray | None] = {"gamma0": structural.gamma0[perm]}
    if structural.random_slopes is not None:
        updates["random_slopes"] = structural.random_slopes[perm]
    full = np.concatenate([[0.0], structural.delta0])[perm]
    updates["delta0"] = full[1:] - full[0]
    if structural.delta1 is not None:
        fulld = np.vstack([np.zeros((1, structural.delta1.shape[1])), structural.delta1])[perm]
        updates["delta1"] = fulld[1:] - fulld[:1]
    return replace(structural, **updates)


def _size_permutation(sizes: np.ndarray, tiebreak_rows: np.ndarray) -> np.ndarray:
    """Descending-size order; equal sizes break on lexicographic parameter rows."""
    order = sorted(
        range(sizes.size),
        key=lambda idx: (-sizes[idx], tuple(np.asarray(tiebreak_rows[idx]).ravel())),
    )
    return np.asarray(order, dtype=np.int64)


def _relabel_run(run: _EmRun, mode: str) -> _EmRun:
    beta, structural, es = run.beta, run.structural, run.estep
    joint, q_high = es.joint, es.q_high
    if mode in ("low", "both") and beta.n_classes > 1:
        perm = _size_permutation(es.low_marginal.sum(axis=0), beta.beta)
        if not np.array_equal(perm, np.arange(perm.size)):
            beta, structural = _permute_low(beta, structural, perm)
            joint = joint[:, perm, :]
    if mode in ("high", "both") and structural.n_classes_high > 1:
        perm = _size_permutation(q_high.sum(axis=0), structural.gamma0)
        if not np.array_equal(perm, np.arange(perm.size)):
            structural = _permute_high(structural, perm)
            joint = joint[:, :, perm]
            q_high = q_high[:, perm]
    es = EStepResult(loglik_by_group=es.loglik_by_group, q_high=q_high, joint=joint)
    return _EmRun(beta, structural, es, run.history, run.converged, run.flags)


def _boundary_flag(
    beta: MeasurementParams, structural: StructuralParams, freeze: frozenset[str]
) -> bool:
    blocks = {
        "beta": beta.beta,
        "gamma0": structural.gamma0,
        "gamma1": structural.gamma1,
        "gamma2": structural.gamma2,
        "random_slopes": structural.random_slopes,
        "delta0": structural.delta0,
        "delta1": structural.delta1,
    }
    for name, arr in blocks.items():
        if arr is None or name in freeze or arr.size == 0:
            continue
        if np.abs(arr).max() >= LOGIT_BOUND - _BOUNDARY_EPS:
            return True
    return False


def _fit_model(
    data: ResponseData,
    config: FitConfig,
    freeze: frozenset[str],
    stage: str,
    template_beta: MeasurementParams,
    template_structural: StructuralParams,
    warm_start: tuple[MeasurementParams, StructuralParams] | None,
    relabel: str,
    npar: int,
    free_blocks: tuple[str, ...],
    report_high_entropy: bool,
) -> FitResult:
    n_starts = 1 if template_beta.n_classes == 1 else config.n_random_starts
    seeds = np.random.SeedSequence(config.seed).spawn(2 * n_starts)
    start_rngs = [np.random.default_rng(s) for s in seeds[:n_starts]]
    restart_rngs = [np.random.default_rng(s) for s in seeds[n_starts:]]

    design_low = None
    if (
        template_structural.gamma1 is not None
        or template_structural.gamma2 is not None
        or template_structural.random_slopes is not None
    ):
        design_low = _build_low_design(data, template_structural)
    design_high = None
    if template_structural.delta1 is not None:
        design_high = np.concatenate(
            [np.ones((data.n_groups, 1)), data.z_high], axis=1
        )

    starts: list[tuple[MeasurementParams, StructuralParams]] = []
    if warm_start is not None:
        starts.append(warm_start)
    if template_beta.n_classes == 1:
        starts.append(
            (
                MeasurementParams(beta=template_beta.beta.copy() if "beta" in freeze
                                  else np.zeros_like(template_beta.beta)),
                _zero_structural(template_structural, freeze),
            )
        )
    else:
        starts.extend(
            _random_start(rng, template_beta, template_structural, freeze) for rng in start_rngs
        )

    runs: list[_EmRun] = []
    driver_flags: set[str] = set()
    restart_budget = n_starts
    queue = list(starts)
    idx = 0
    while idx < len(queue):
        beta0, structural0 = queue[idx]
        run = _run_em(data, beta0, structural0, config, freeze, design_low, design_high)
        runs.append(run)
        if _is_degenerate(data, run.estep) and restart_budget > 0 and restart_rngs:
            driver_flags.add("degenerate_restart")
            queue.append(
                _random_start(restart_rngs.pop(0), template_beta, template_structural, freeze)
            )
            restart_budget -= 1
        idx += 1

    logliks = np.asarray([run.loglik for run in runs])
    best_idx = int(np.argmax(logliks))
    best = _relabel_run(runs[best_idx], relabel)

    flags = set(best.flags) | driver_flags
    if not best.converged:
        flags.add("not_converged")
    if _is_degenerate(data, best.estep):
        flags.add("degenerate_class")
    if _boundary_flag(best.beta, best.structural, freeze):
        flags.add("boundary")
    if npar >= data.n_units:
        flags.add("insufficient_data")

    posteriors = best.estep.tables()
    summary = FitSummary(
        loglik=best.loglik,
        npar=npar,
        bic=bic(best.loglik, npar, data.n_units),
        bic_group=bic(best.loglik, npar, data.n_groups),
        entropy_r2_low=entropy_r2(posteriors, "low"),
        entropy_r2_high=entropy_r2(posteriors, "high") if report_high_entropy else None,
        n_iterations=len(best.history) - 1,
        converged=best.converged,
        best_start_index=best_idx,
        flags=tuple(sorted(flags)),
    )
    return FitResult(
        beta=best.beta,
        structural=best.structural,
        summary=summary,
        posteriors=posteriors,
        per_start_logliks=tuple(float(v) for v in logliks),
        loglik_history=best.history,
        stage=stage,
        free_blocks=free_blocks,
    )


# ---------------------------------------------------------------------------
# Public estimation steps


def _as_measurement(obj) -> MeasurementParams:
    if isinstance(obj, MeasurementParams):
        return obj
    if isinstance(obj, FitResult):
        return obj.beta
    raise ConfigError("expected a FitResult or MeasurementParams")


def _as_structural(obj) -> StructuralParams | None:
    if isinstance(obj, FitResult):
        return obj.structural
    if isinstance(obj, StructuralParams):
        return obj
    return None


def fit_step1(data: ResponseData, n_classes: int, config: FitConfig) -> FitResult:
    """Pooled simple latent class model; the grouping plays no role.

    Runs EM from ``n_random_starts`` random draws, keeps the best final
    log-likelihood, and relabels classes by descending size.
    """
    if n_classes < 1:
        raise ConfigError("n_classes must be at least 1")
    t, k = n_classes, data.n_items
    template_beta = MeasurementParams(beta=np.zeros((t, k)))
    template_structural = StructuralParams(gamma0=np.zeros((1, t - 1)), delta0=np.zeros(0))
    return _fit_model(
        data,
        config,
        freeze=config.freeze,
        stage="step1",
        template_beta=template_beta,
        template_structural=template_structural,
        warm_start=None,
        relabel="low",
        npar=count_parameters(t, 1, k, stage="step1"),
        free_blocks=("gamma0", "beta"),
        report_high_entropy=False,
    )


def fit_step2a(data: ResponseData, step1_result, n_classes_high: int, config: FitConfig) -> FitResult:
    """High-level mixture with the measurement model frozen at step-1 values.

    Only the high-level mixing logits and the conditional low-class
    intercepts move. One deterministic start is seeded from the step-1
    class shares (with a tiny jitter across high-level classes, since the
    exactly symmetric start is a stationary point of EM).
    """
    if n_classes_high < 1:
        raise ConfigError("n_classes_high must be at least 1")
    beta = _as_measurement(step1_result)
    t, m = beta.n_classes, n_classes_high
    template_structural = StructuralParams(gamma0=np.zeros((m, t - 1)), delta0=np.zeros(m - 1))

    warm = None
    step1_structural = _as_structural(step1_result)
    if step1_structural is not None and step1_structural.gamma0.shape[1] == t - 1:
        gamma0 = np.tile(step1_structural.gamma0[0], (m, 1))
        if m > 1 and t > 1:
            # The exactly symmetric warm start is a stationary point of EM;
            # a deterministic jitter across high-level classes breaks the tie.
            # The spawn key is outside the range used for random starts.
            jitter_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(2**31,))
            )
            gamma0 = gamma0 + jitter_rng.uniform(-0.1, 0.1, size=gamma0.shape)
        warm = (
            MeasurementParams(beta=beta.beta.copy()),
            StructuralParams(gamma0=gamma0, delta0=np.zeros(m - 1)),
        )

    return _fit_model(
        data,
        config,
        freeze=config.freeze | {"beta"},
        stage="step2a",
        template_beta=beta,
        template_structural=template_structural,
        warm_start=warm,
        relabel="high",
        npar=count_parameters(t, m, data.n_items, stage="step2a"),
        free_blocks=("delta0", "gamma0"),
        report_high_entropy=True,
    )


def fit_step2b(
    data: ResponseData,
    n_classes_low: int,
    n_classes_high: int,
    config: FitConfig,
    variant: str = "full",
    step2a_result: FitResult | None = None,
) -> FitResult:
    """Re-estimate the measurement model under the multilevel structure.

    ``variant="full"`` re-estimates everything jointly (this is also the
    one-stage estimator of the unconditional model); ``variant="fix_w"``
    keeps the high-level mixing logits fixed at their step-2a values and
    re-estimates the rest, which requires ``step2a_result``.
    """
    if variant not in ("full", "fix_w"):
        raise ConfigError(f"unknown step-2b variant {variant!r}")
    t, m, k = n_classes_low, n_classes_high, data.n_items
    if t < 1 or m < 1:
        raise ConfigError("class counts must be at least 1")

    npar = count_parameters(t, m, k, stage="step2b")
    freeze = config.freeze
    relabel = "both"
    template_structural = StructuralParams(gamma0=np.zeros((m, t - 1)), delta0=np.zeros(m - 1))
    template_beta = MeasurementParams(beta=np.zeros((t, k)))
    free_blocks: tuple[str, ...] = ("delta0", "gamma0", "beta")

    if variant == "fix_w":
        if step2a_result is None:
            raise ConfigError("variant='fix_w' requires the step-2a result")
        if step2a_result.structural.n_classes_high != m:
            raise ConfigError("step-2a result has a different number of high-level classes")
        freeze = freeze | {"delta0"}
        relabel = "low"
        npar -= m - 1
        free_blocks = ("gamma0", "beta")
        template_structural = StructuralParams(
            gamma0=np.zeros((m, t - 1)), delta0=step2a_result.structural.delta0.copy()
        )

    warm = None
    if (
        step2a_result is not None
        and step2a_result.beta.n_classes == t
        and step2a_result.structural.gamma0.shape == (m, t - 1)
    ):
        warm = (
            MeasurementParams(beta=step2a_result.beta.beta.copy()),
            StructuralParams(
                gamma0=step2a_result.structural.gamma0.copy(),
                delta0=step2a_result.structural.delta0.copy(),
            ),
        )

    return _fit_model(
        data,
        config,
        freeze=freeze,
        stage="step2b",
        template_beta=template_beta,
        template_structural=template_structural,
        warm_start=warm,
        relabel=relabel,
        npar=npar,
        free_blocks=free_blocks,
        report_high_entropy=True,
    )


def _rank_deficient_columns(matrix: np.ndarray, names: Sequence[str]) -> list[str]:
    """Names of columns that add no rank on top of an intercept."""
    n = matrix.shape[0]
    base = np.ones((n, 1))
    offenders = []
    current = base
    for col, name in zip(matrix.T, names):
        candidate = np.column_stack([current, col])
        if np.linalg.matrix_rank(candidate) == np.linalg.matrix_rank(current):
            offenders.append(name)
        else:
            current = candidate
    return offenders


def _check_covariate_rank(data: ResponseData) -> None:
    if data.z_low is not None:
        names = data.z_low_names or tuple(f"z_low[{i}]" for i in range(data.z_low.shape[1]))
        bad = _rank_deficient_columns(data.z_low, names)
        if bad:
            raise DataError(f"rank-deficient unit-level covariates: {', '.join(bad)}")
    if data.z_high is not None:
        names = data.z_high_names or tuple(f"z_high[{i}]" for i in range(data.z_high.shape[1]))
        bad = _rank_deficient_columns(data.z_high, names)
        if bad:
            raise DataError(f"rank-deficient group-level covariates: {', '.join(bad)}")


def _covariate_template(
    base: StructuralParams,
    t: int,
    m: int,
    p_low: int,
    p_high: int,
    include_low: bool,
    include_high: bool,
) -> StructuralParams:
    return StructuralParams(
        gamma0=base.gamma0.copy(),
        delta0=base.delta0.copy(),
        gamma1=np.zeros((t - 1, p_high)) if include_high and p_high else None,
        gamma2=np.zeros((t - 1, p_low)) if include_low and p_low else None,
        delta1=np.zeros((m - 1, p_high)) if include_high and p_high and m > 1 else None,
    )


def fit_step3(
    data: ResponseData,
    step2b_result,
    config: FitConfig,
    split: bool = False,
) -> FitResult:
    """Structural model with covariates, measurement model kept fixed.

    Loads whatever covariates the data carries: unit-level columns enter the
    low-level class regression, group-level columns enter both class
    regressions. ``split=True`` adds unit-level covariates first and then,
    with those slopes frozen, the group-level ones.
    """
    beta = _as_measurement(step2b_result)
    base = _as_structural(step2b_result)
    if base is None:
        raise ConfigError("step2b_result must supply structural parameters")
    t, m = beta.n_classes, base.n_classes_high
    p_low, p_high = data.n_covariates_low, data.n_covariates_high
    _check_covariate_rank(data)

    def run_pass(
        template: StructuralParams,
        warm_structural: StructuralParams,
        freeze: frozenset[str],
        free_blocks: tuple[str, ...],
    ) -> FitResult:
        return _fit_model(
            data,
            config,
            freeze=freeze,
            stage="step3",
            template_beta=beta,
            template_structural=template,
            warm_start=(MeasurementParams(beta=beta.beta.copy()), warm_structural),
            relabel="none",
            npar=count_parameters(t, m, data.n_items, p_low, p_high, stage="step3"),
            free_blocks=free_blocks,
            report_high_entropy=True,
        )

    if not split or p_low == 0 or p_high == 0:
        template = _covariate_template(base, t, m, p_low, p_high, True, True)
        blocks = ["delta0", "gamma0"]
        if template.delta1 is not None:
            blocks.insert(1, "delta1")
        if template.gamma1 is not None:
            blocks.append("gamma1")
        if template.gamma2 is not None:
            blocks.append("gamma2")
        warm = _covariate_template(base, t, m, p_low, p_high, True, True)
        return run_pass(template, warm, config.freeze | {"beta"}, tuple(blocks))

    # Split route: unit-level covariates first, then group-level covariates
    # with the unit-level slopes frozen.
    template_a = _covariate_template(base, t, m, p_low, 0, True, False)
    pass_a = run_pass(
        template_a,
        _covariate_template(base, t, m, p_low, 0, True, False),
        config.freeze | {"beta"},
        ("delta0", "gamma0", "gamma2"),
    )
    template_b = _covariate_template(pass_a.structural, t, m, p_low, p_high, True, True)
    template_b = replace(template_b, gamma2=pass_a.structural.gamma2.copy())
    blocks_b = ["delta0", "gamma0", "gamma1"]
    if template_b.delta1 is not None:
        blocks_b.insert(1, "delta1")
    return run_pass(
        template_b,
        replace(template_b, gamma2=pass_a.structural.gamma2.copy()),
        config.freeze | {"beta", "gamma2"},
        tuple(blocks_b),
    )


def fit_one_stage(
    data: ResponseData,
    n_classes_low: int,
    n_classes_high: int,
    config: FitConfig,
) -> FitResult:
    """Simultaneous maximum likelihood over measurement and structural models.

    Loads covariates when present; the comparison baseline for the two-stage
    route.
    """
    t, m, k = n_classes_low, n_classes_high, data.n_items
    if t < 1 or m < 1:
        raise ConfigError("class counts must be at least 1")
    p_low, p_high = data.n_covariates_low, data.n_covariates_high
    if p_low or p_high:
        _check_covariate_rank(data)
    base = StructuralParams(gamma0=np.zeros((m, t - 1)), delta0=np.zeros(m - 1))
    template = _covariate_template(base, t, m, p_low, p_high, True, True)
    blocks = ["delta0", "gamma0", "beta"]
    if template.delta1 is not None:
        blocks.insert(1, "delta1")
    if template.gamma1 is not None:
        blocks.append("gamma1")
    if template.gamma2 is not None:
        blocks.append("gamma2")
    npar = count_parameters(t, m, k, p_low, p_high, stage="step3") + t * k
    return _fit_model(
        data,
        config,
        freeze=config.freeze,
        stage="one_stage",
        template_beta=MeasurementParams(beta=np.zeros((t, k))),
        template_structural=template,
        warm_start=None,
        relabel="both",
        npar=npar,
        free_blocks=tuple(blocks),
        report_high_entropy=True,
    )
