"""Generative simulator and the exhaustive-enumeration likelihood oracle.

The simulator draws data directly from the multilevel latent class model with
known parameters, which makes it the independent ground truth for recovery,
coverage, and selection tests. The enumeration likelihood sums every latent
configuration of a group explicitly in plain probability space, providing an
oracle for the log-space likelihood kernels on tiny instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import (
    MeasurementParams,
    ResponseData,
    StructuralParams,
    class_prob_high,
    class_prob_low,
    high_class_logits,
    low_class_logits,
    stable_softmax,
)

_COVARIATE_KINDS = ("normal", "bernoulli")

# Refuse enumeration beyond this many latent configurations per group.
MAX_ENUMERATION_CONFIGS = 100_000


@dataclass(frozen=True)
class GenerativeSpec:
    """True parameters and sampling layout for a simulated dataset.

    ``group_size`` is either a single size shared by all groups or one size
    per group. Covariate columns are generated from the named distributions
    (standard normal or Bernoulli(0.5)); the corresponding slope blocks must
    be supplied whenever covariates are requested.
    """

    beta: np.ndarray                       # (T, K) measurement logits
    gamma0: np.ndarray                     # (M, T-1) conditional class intercepts
    delta0: np.ndarray                     # (M-1,) high-level mixture logits
    n_groups: int
    group_size: int | Sequence[int]
    gamma1: np.ndarray | None = None       # (T-1, p_high)
    gamma2: np.ndarray | None = None       # (T-1, p_low)
    delta1: np.ndarray | None = None       # (M-1, p_high)
    z_low_dists: tuple[str, ...] = ()
    z_high_dists: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        for kind in self.z_low_dists + self.z_high_dists:
            if kind not in _COVARIATE_KINDS:
                raise ConfigError(f"unknown covariate distribution {kind!r}")
        if self.n_groups < 1:
            raise ConfigError("n_groups must be at least 1")
        sizes = self.group_sizes
        if sizes.min() < 1:
            raise ConfigError("every group must contain at least one unit")
        p_low, p_high = len(self.z_low_dists), len(self.z_high_dists)
        if p_low > 0 and self.gamma2 is None:
            raise ConfigError("unit-level covariates requested without gamma2 slopes")
        if p_high > 0 and (self.gamma1 is None and self.delta1 is None):
            raise ConfigError("group-level covariates requested without gamma1 or delta1 slopes")
        # Structural params validate the dimension cross-checks.
        self.structural()

    @property
    def group_sizes(self) -> np.ndarray:
        if np.isscalar(self.group_size):
            return np.full(self.n_groups, int(self.group_size), dtype=np.int64)
        sizes = np.asarray(self.group_size, dtype=np.int64)
        if sizes.shape != (self.n_groups,):
            raise ConfigError("group_size must be a scalar or one entry per group")
        return sizes

    def measurement(self) -> MeasurementParams:
        return MeasurementParams(beta=np.asarray(self.beta, dtype=float))

    def structural(self) -> StructuralParams:
        return StructuralParams(
            gamma0=np.asarray(self.gamma0, dtype=float),
            delta0=np.asarray(self.delta0, dtype=float),
            gamma1=None if self.gamma1 is None else np.asarray(self.gamma1, dtype=float),
            gamma2=None if self.gamma2 is None else np.asarray(self.gamma2, dtype=float),
            delta1=None if self.delta1 is None else np.asarray(self.delta1, dtype=float),
        )


@dataclass(frozen=True)
class SimulatedData:
    """A simulated dataset together with its latent ground truth."""

    data: ResponseData
    true_low: np.ndarray   # (n_units,) true low-level class per unit
    true_high: np.ndarray  # (n_groups,) true high-level class per group


def _draw_covariates(rng: np.random.Generator, dists: tuple[str, ...], n: int) -> np.ndarray | None:
    if not dists:
        return None
    cols = [
        rng.standard_normal(n) if kind == "normal" else rng.binomial(1, 0.5, n).astype(float)
        for kind in dists
    ]
    return np.column_stack(cols)


def _categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of a (n, c) probability matrix."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return (u[:, None] >= cum).sum(axis=1)


def simulate(spec: GenerativeSpec) -> SimulatedData:
    """Draw a dataset from the generative model; bit-reproducible per seed."""
    rng = np.random.default_rng(spec.seed)
    sizes = spec.group_sizes
    n_units = int(sizes.sum())
    group_of = np.repeat(np.arange(spec.n_groups), sizes)

    z_high = _draw_covariates(rng, spec.z_high_dists, spec.n_groups)
    z_low = _draw_covariates(rng, spec.z_low_dists, n_units)

    measurement = spec.measurement()
    structural = spec.structural()

    shell = ResponseData(
        y=np.zeros((n_units, measurement.n_items), dtype=np.int8),
        group_of=group_of,
        z_low=z_low,
        z_high=z_high,
    )
    omega = stable_softmax(high_class_logits(shell, structural), axis=1)   # (J, M)
    true_high = _categorical_rows(rng, omega)

    alpha = stable_softmax(low_class_logits(shell, structural), axis=1)    # (N, T, M)
    alpha_given_w = np.take_along_axis(
        alpha, true_high[group_of][:, None, None], axis=2
    )[:, :, 0]
    true_low = _categorical_rows(rng, alpha_given_w)

    item_probs = measurement.item_probs()
    y = (rng.random((n_units, measurement.n_items)) < item_probs[true_low]).astype(np.int8)

    data = ResponseData(
        y=y,
        group_of=group_of,
        z_low=z_low,
        z_high=z_high,
        item_names=tuple(f"item{k + 1:02d}" for k in range(measurement.n_items)),
        group_labels=tuple(f"g{j + 1:03d}" for j in range(spec.n_groups)),
        z_low_names=tuple(f"zlow{p + 1}" for p in range(len(spec.z_low_dists))),
        z_high_names=tuple(f"zhigh{p + 1}" for p in range(len(spec.z_high_dists))),
    )
    return SimulatedData(data=data, true_low=true_low, true_high=true_high)


def enumeration_loglik(
    data: ResponseData,
    beta: MeasurementParams,
    structural: StructuralParams,
) -> float:
    """Exact log-likelihood by explicit summation over latent configurations.

    Sums P(W=m) * prod_i P(X=t_i | W=m, Z) * prod_k P(y | t_i) over every
    (m, t_1..t_n) configuration of each group, entirely in plain probability
    space. Refuses instances with more than ``MAX_ENUMERATION_CONFIGS``
    configurations in any group; intended for tests only.
    """
    t = beta.n_classes
    m = structural.n_classes_high
    sizes = data.group_sizes
    worst = m * t ** int(sizes.max())
    if worst > MAX_ENUMERATION_CONFIGS:
        raise ValueError(
            f"instance too large for enumeration: {worst} configurations in the largest group"
        )

    item_probs = beta.item_probs()
    # Plain-space response mass per (unit, class); items multiply directly.
    response_mass = np.ones((data.n_units, t))
    for klass in range(t):
        p = item_probs[klass]
        response_mass[:, klass] = np.prod(np.where(data.y == 1, p, 1.0 - p), axis=1)

    total = 0.0
    for j in range(data.n_groups):
        units = np.flatnonzero(data.group_of == j)
        z1 = None if data.z_high is None else data.z_high[j]
        omega = class_prob_high(structural, z1)
        group_prob = 0.0
        for w in range(m):
            alpha_rows = np.stack(
                [
                    class_prob_low(
                        structural,
                        w,
                        z1,
                        None if data.z_low is None else data.z_low[i],
                    )
                    for i in units
                ]
            )
            config_sum = 0.0
            for assignment in itertools.product(range(t), repeat=units.size):
                weight = 1.0
                for row, klass in enumerate(assignment):
                    weight *= alpha_rows[row, klass] * response_mass[units[row], klass]
                config_sum += weight
            group_prob += omega[w] * config_sum
        total += float(np.log(group_prob))
    return total
