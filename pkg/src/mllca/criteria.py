"""Information criteria, entropy-based class separation, and TIC machinery.

The TIC penalty is computed from pseudo-ML theory: per-group score vectors
build the outer-product information, a finite-difference Hessian of the
analytic score builds the curvature matrix, and the trace of their ratio
replaces the parameter count of AIC. The parameter-vector packing used here
fixes a canonical flattening order for all free blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import (
    EStepResult,
    MeasurementParams,
    PosteriorTables,
    ResponseData,
    StructuralParams,
    e_step,
    high_class_logits,
    loglik_by_group,
    low_class_logits,
    stable_softmax,
)

# Canonical flattening order of parameter blocks; row-major within blocks.
BLOCK_ORDER = ("delta0", "delta1", "gamma0", "gamma1", "gamma2", "random_slopes", "beta")


def bic(loglik: float, npar: int, sample_size: int) -> float:
    """Bayesian information criterion with an explicit penalty sample size.

    Pass the unit count for the standard criterion or the group count for
    the group-level variant used when selecting high-level classes.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be at least 1")
    return -2.0 * loglik + npar * float(np.log(sample_size))


def aic(loglik: float, npar: int) -> float:
    return -2.0 * loglik + 2.0 * npar


def entropy_r2(posteriors: PosteriorTables, level: str = "low") -> float:
    """Proportional reduction of classification entropy at either level.

    Computes 1 - (mean posterior entropy) / (entropy of the mean posterior),
    using the convention 0*log(0) = 0. Returns 1.0 when the marginal
    distribution is degenerate (single populated class).
    """
    if level == "low":
        post = posteriors.low_marginal
    elif level == "high":
        post = posteriors.high
    else:
        raise ValueError(f"unknown level {level!r}")
    post = np.asarray(post, dtype=float)

    def _neg_xlogx(p: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(p > 0.0, -p * np.log(p), 0.0)
        return out

    marginal = post.mean(axis=0)
    e_tot = float(_neg_xlogx(marginal).sum())
    if e_tot <= 0.0:
        return 1.0
    e_bar = float(_neg_xlogx(post).sum(axis=1).mean())
    return float(np.clip((e_tot - e_bar) / e_tot, 0.0, 1.0))


def _block_arrays(
    beta: MeasurementParams, structural: StructuralParams
) -> dict[str, np.ndarray | None]:
    return {
        "delta0": structural.delta0,
        "delta1": structural.delta1,
        "gamma0": structural.gamma0,
        "gamma1": structural.gamma1,
        "gamma2": structural.gamma2,
        "random_slopes": structural.random_slopes,
        "beta": beta.beta,
    }


def _ordered(blocks: Iterable[str]) -> tuple[str, ...]:
    requested = set(blocks)
    unknown = requested - set(BLOCK_ORDER)
    if unknown:
        raise ValueError(f"unknown parameter blocks: {sorted(unknown)}")
    return tuple(b for b in BLOCK_ORDER if b in requested)


def pack_params(
    beta: MeasurementParams, structural: StructuralParams, blocks: Sequence[str]
) -> np.ndarray:
    """Flatten the requested parameter blocks into one vector."""
    arrays = _block_arrays(beta, structural)
    parts = []
    for name in _ordered(blocks):
        arr = arrays[name]
        if arr is None:
            raise ValueError(f"block {name!r} is absent from the parameters")
        parts.append(np.asarray(arr, dtype=float).ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unpack_params(
    vector: np.ndarray,
    beta: MeasurementParams,
    structural: StructuralParams,
    blocks: Sequence[str],
) -> tuple[MeasurementParams, StructuralParams]:
    """Rebuild parameter objects with the requested blocks replaced."""
    arrays = {k: (None if v is None else v.copy()) for k, v in _block_arrays(beta, structural).items()}
    offset = 0
    for name in _ordered(blocks):
        arr = arrays[name]
        if arr is None:
            raise ValueError(f"block {name!r} is absent from the parameters")
        size = arr.size
        arrays[name] = np.asarray(vector[offset : offset + size], dtype=float).reshape(arr.shape)
        offset += size
    if offset != len(vector):
        raise ValueError("vector length does not match the requested blocks")
    new_beta = MeasurementParams(beta=arrays["beta"])
    new_structural = StructuralParams(
        gamma0=arrays["gamma0"],
        delta0=arrays["delta0"],
        gamma1=arrays["gamma1"],
        gamma2=arrays["gamma2"],
        random_slopes=arrays["random_slopes"],
        delta1=arrays["delta1"],
    )
    return new_beta, new_structural


def observed_score(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
    blocks: Sequence[str],
    estep: EStepResult | None = None,
) -> np.ndarray:
    """Score of the observed-data log-likelihood over the requested blocks.

    Uses the identity that the observed score equals the posterior
    expectation of the complete-data score, so everything falls out of a
    single E-step.
    """
    es = estep if estep is not None else e_step(data, beta, structural)
    group_of = data.group_of
    q_high = es.q_high
    joint = es.joint

    omega = stable_softmax(high_class_logits(data, structural), axis=1)      # (J, M)
    alpha = stable_softmax(low_class_logits(data, structural), axis=1)       # (N, T, M)

    resid_high = q_high - omega                                              # (J, M)
    resid_low = joint - q_high[group_of][:, None, :] * alpha                 # (N, T, M)

    pieces: dict[str, np.ndarray] = {}
    wanted = _ordered(blocks)
    if "delta0" in wanted:
        pieces["delta0"] = resid_high[:, 1:].sum(axis=0)
    if "delta1" in wanted:
        if structural.delta1 is None:
            raise ValueError("block 'delta1' is absent from the parameters")
        pieces["delta1"] = resid_high[:, 1:].T @ data.z_high
    if "gamma0" in wanted:
        pieces["gamma0"] = resid_low[:, 1:, :].sum(axis=0).T                 # (M, T-1)
    if "gamma1" in wanted:
        if structural.gamma1 is None:
            raise ValueError("block 'gamma1' is absent from the parameters")
        z1_units = data.z_high[group_of]
        pieces["gamma1"] = np.einsum("ntm,np->tp", resid_low[:, 1:, :], z1_units)
    if "gamma2" in wanted:
        if structural.gamma2 is None:
            raise ValueError("block 'gamma2' is absent from the parameters")
        pieces["gamma2"] = np.einsum("ntm,np->tp", resid_low[:, 1:, :], data.z_low)
    if "random_slopes" in wanted:
        if structural.random_slopes is None:
            raise ValueError("block 'random_slopes' is absent from the parameters")
        pieces["random_slopes"] = np.einsum("ntm,np->mtp", resid_low[:, 1:, :], data.z_low)
    if "beta" in wanted:
        probs = beta.item_probs()
        r_low = es.low_marginal                                              # (N, T)
        pieces["beta"] = r_low.T @ data.y - (r_low.sum(axis=0)[:, None] * probs)
    return np.concatenate([np.asarray(pieces[name], dtype=float).ravel() for name in wanted])


def group_scores_fd(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
    blocks: Sequence[str],
    rel_step: float = 1e-5,
) -> np.ndarray:
    """(n_groups, n_free) per-group score matrix by central finite differences.

    Each coordinate perturbation re-evaluates the vectorized per-group
    log-likelihood, so the cost is two likelihood passes per free parameter.
    """
    theta = pack_params(beta, structural, blocks)
    scores = np.empty((data.n_groups, theta.size))
    for c in range(theta.size):
        h = rel_step * max(1.0, abs(theta[c]))
        plus = theta.copy()
        plus[c] += h
        minus = theta.copy()
        minus[c] -= h
        b_p, s_p = unpack_params(plus, beta, structural, blocks)
        b_m, s_m = unpack_params(minus, beta, structural, blocks)
        scores[:, c] = (loglik_by_group(data, b_p, s_p) - loglik_by_group(data, b_m, s_m)) / (2 * h)
    return scores


def _hessian_from_score(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
    blocks: Sequence[str],
    rel_step: float = 1e-5,
) -> np.ndarray:
    """Hessian of the total log-likelihood via central differences of the analytic score."""
    theta = pack_params(beta, structural, blocks)
    p = theta.size
    hess = np.empty((p, p))
    for c in range(p):
        h = rel_step * max(1.0, abs(theta[c]))
        plus = theta.copy()
        plus[c] += h
        minus = theta.copy()
        minus[c] -= h
        b_p, s_p = unpack_params(plus, beta, structural, blocks)
        b_m, s_m = unpack_params(minus, beta, structural, blocks)
        hess[:, c] = (
            observed_score(data, b_p, s_p, blocks) - observed_score(data, b_m, s_m, blocks)
        ) / (2 * h)
    return 0.5 * (hess + hess.T)


@dataclass(frozen=True)
class TicDetails:
    """TIC value with the penalty-trace diagnostics behind it."""

    value: float
    loglik: float
    trace: float
    condition_number: float
    used_pinv: bool


def tic_details(data: ResponseData, fit, free_blocks: Sequence[str]) -> TicDetails:
    """Misspecification-robust information criterion for a pseudo-ML fit.

    ``fit`` needs ``beta`` and ``structural`` attributes; ``free_blocks``
    names the parameter blocks that were free in the step being scored.
    Builds R as the sum of per-group score outer products and F as the
    negative Hessian, then penalizes with 2*trace(F^-1 R). A singular F
    falls back to the pseudo-inverse and flags the result.
    """
    beta, structural = fit.beta, fit.structural
    scores = group_scores_fd(data, beta, structural, free_blocks)
    outer = scores.T @ scores
    fisher = -_hessian_from_score(data, beta, structural, free_blocks)
    loglik = float(loglik_by_group(data, beta, structural).sum())
    if fisher.size == 0:
        return TicDetails(value=-2.0 * loglik, loglik=loglik, trace=0.0,
                          condition_number=0.0, used_pinv=False)
    cond = float(np.linalg.cond(fisher))
    used_pinv = False
    try:
        ratio = np.linalg.solve(fisher, outer)
        if not np.isfinite(ratio).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        ratio = np.linalg.pinv(fisher) @ outer
        used_pinv = True
    trace = float(np.trace(ratio))
    return TicDetails(
        value=-2.0 * loglik + 2.0 * trace,
        loglik=loglik,
        trace=trace,
        condition_number=cond,
        used_pinv=used_pinv,
    )


def tic(data: ResponseData, fit, free_blocks: Sequence[str]) -> float:
    """TIC value only; see :func:`tic_details` for diagnostics."""
    return tic_details(data, fit, free_blocks).value
