"""Exact Expected-Max Q backups on tabular MDPs.

The inner expectation ``E[max_{a_1..a_N ~ mu} Q(s, a_i)]`` has a closed form
through order statistics: sort the distinct values ascending, let ``c_k`` be
the cumulative behavior mass up to the k-th value, then

    E[max] = sum_k v_k * (c_k**N - c_{k-1}**N).

No sampling happens anywhere in this module, so every property check built on
it is deterministic.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import PreconditionError, StructuralError, ValidationError
from .tabular import (
    DEFAULT_TOL,
    DiscretePolicy,
    QTable,
    TabularMDP,
    evaluate_policy,
    iterate_to_fixed_point,
    optimality_backup,
    q_learning_fixed_point,
    random_mdp,
    random_policy,
)


@dataclass(frozen=True)
class ExpectedMaxSpec:
    n_samples: int
    behavior: DiscretePolicy

    def __post_init__(self):
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ValidationError(f"n_samples must be a positive integer, got {self.n_samples}")
        object.__setattr__(self, "n_samples", int(self.n_samples))


def _pow(c: np.ndarray, n: int) -> np.ndarray:
    """``c**n`` through exp(n log c), with c == 0 mapped to 0."""
    with np.errstate(divide="ignore"):
        logc = np.log(np.clip(c, 0.0, 1.0))
    return np.where(c > 0, np.exp(n * logc), 0.0)


def _check_inputs(values, probs, n):
    values = np.asarray(values, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if values.ndim != 1 or values.shape != probs.shape:
        raise StructuralError("values and probs must be 1-D and the same length")
    if values.size == 0:
        raise StructuralError("empty support")
    if int(n) != n or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValidationError("probs must be non-negative and sum to 1")
    if not np.all(np.isfinite(values)):
        raise ValidationError("values must be finite")
    return values, probs, int(n)


def exact_expected_max(values, probs, n: int) -> float:
    """Expected maximum of ``n`` i.i.d. draws of ``values`` weighted by ``probs``."""
    values, probs, n = _check_inputs(values, probs, n)
    if n == 1:
        return float(probs @ values)
    distinct, inverse = np.unique(values, return_inverse=True)
    mass = np.zeros(distinct.size)
    np.add.at(mass, inverse, probs)
    c = np.cumsum(mass)
    c[-1] = 1.0
    cn = _pow(c, n)
    prev = np.concatenate(([0.0], cn[:-1]))
    return float(np.sum(distinct * (cn - prev)))


def exact_argmax_distribution(values, probs, n: int) -> np.ndarray:
    """Probability that each action is the one picked by sample-``n``-then-argmax.

    Ties go to the lowest action index, so inside a group of equal values the
    lower index ranks above the higher one.
    """
    values, probs, n = _check_inputs(values, probs, n)
    if n == 1:
        return probs.copy()
    idx = np.arange(values.size)
    order = np.lexsort((-idx, values))  # ascending value, then descending index
    p = probs[order]
    c = np.cumsum(p)
    c[-1] = 1.0
    c_prev = np.concatenate(([0.0], c[:-1]))
    selected = _pow(c, n) - _pow(c_prev, n)
    out = np.empty_like(selected)
    out[order] = selected
    return out


def expected_max_rows(q: np.ndarray, mu: np.ndarray, n: int) -> np.ndarray:
    """Row-wise exact expected max over the last axis; leading axes broadcast."""
    if n == 1:
        return np.einsum("...a,...a->...", mu, q)
    mu = np.broadcast_to(mu, q.shape)
    order = np.argsort(q, axis=-1, kind="stable")
    v = np.take_along_axis(q, order, axis=-1)
    c = np.cumsum(np.take_along_axis(mu, order, axis=-1), axis=-1)
    c[..., -1] = 1.0
    cn = _pow(c, n)
    prev = np.concatenate((np.zeros(cn.shape[:-1] + (1,)), cn[..., :-1]), axis=-1)
    return np.sum(v * (cn - prev), axis=-1)


def _check_spec(mdp: TabularMDP, spec: ExpectedMaxSpec):
    if spec.behavior.probs.shape != (mdp.num_states, mdp.num_actions):
        raise StructuralError("behavior policy shape does not match the MDP")


def _backup_array(mdp: TabularMDP, spec: ExpectedMaxSpec, q: np.ndarray) -> np.ndarray:
    v = expected_max_rows(q, spec.behavior.probs, spec.n_samples)
    # v may carry leading batch axes: [..., S]
    return mdp.reward + mdp.gamma * np.einsum("sat,...t->...sa", mdp.transition, v)


def emaq_backup(mdp: TabularMDP, spec: ExpectedMaxSpec, q: QTable) -> QTable:
    _check_spec(mdp, spec)
    if q.values.shape != (mdp.num_states, mdp.num_actions):
        raise StructuralError("Q table shape does not match the MDP")
    return QTable(_backup_array(mdp, spec, q.values))


def induced_policy(q: QTable, spec: ExpectedMaxSpec) -> DiscretePolicy:
    """The sample-N-take-argmax policy for ``q`` as an explicit table."""
    rows = [
        exact_argmax_distribution(q.values[s], spec.behavior.probs[s], spec.n_samples)
        for s in range(q.values.shape[0])
    ]
    probs = np.array(rows)
    probs /= probs.sum(axis=1, keepdims=True)
    return DiscretePolicy(probs)


def solve_emaq_fixed_point(mdp: TabularMDP, spec: ExpectedMaxSpec, tol: float = DEFAULT_TOL):
    """Return ``(Q^N_mu, pi^N_mu)``."""
    _check_spec(mdp, spec)
    q0 = np.zeros((mdp.num_states, mdp.num_actions))
    q = QTable(iterate_to_fixed_point(lambda x: _backup_array(mdp, spec, x), q0, mdp.gamma, tol))
    return q, induced_policy(q, spec)


def verify_contraction(mdp: TabularMDP, spec: ExpectedMaxSpec, trials: int, rng_seed: int) -> float:
    """Largest observed ``||TQ1 - TQ2|| / ||Q1 - Q2||`` over random pairs."""
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    _check_spec(mdp, spec)
    rng = np.random.default_rng(rng_seed)
    shape = (trials, mdp.num_states, mdp.num_actions)
    scale = 1.0 / (1.0 - mdp.gamma)
    # mix of dense noise and sparse perturbations so ties and near-ties show up
    q1 = rng.normal(scale=scale, size=shape)
    q2 = q1 + rng.normal(size=shape) * rng.exponential(size=(trials, 1, 1))
    q2[::2] = rng.normal(scale=scale, size=q2[::2].shape)
    num = np.max(np.abs(_backup_array(mdp, spec, q1) - _backup_array(mdp, spec, q2)), axis=(1, 2))
    den = np.max(np.abs(q1 - q2), axis=(1, 2))
    keep = den > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(num[keep] / den[keep]))


def verify_monotonicity(mdp: TabularMDP, behavior: DiscretePolicy, n_list, tol: float = DEFAULT_TOL) -> float:
    """Max of ``Q^M - Q^N`` over consecutive ``M < N`` in ``n_list`` and all (s, a)."""
    n_list = [int(n) for n in n_list]
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be strictly ascending with at least two entries")
    qs = [solve_emaq_fixed_point(mdp, ExpectedMaxSpec(n, behavior), tol)[0].values for n in n_list]
    return float(max(np.max(lo - hi) for lo, hi in zip(qs, qs[1:])))


def optimal_action_mass(q_star: np.ndarray, behavior: DiscretePolicy, atol: float) -> np.ndarray:
    """mu*(s): behavior mass on the greedy argmax set of ``q_star`` per state."""
    best = q_star.max(axis=1, keepdims=True)
    return np.sum(np.where(q_star >= best - atol, behavior.probs, 0.0), axis=1)


def limit_envelope(mdp: TabularMDP, n: int, p: float) -> float:
    """gamma/(1-gamma) * (1-p)^N * (beta - alpha) with alpha, beta the discounted reward bounds."""
    lo, hi = float(mdp.reward.min()), float(mdp.reward.max())
    spread = (hi - lo) / (1.0 - mdp.gamma)
    return mdp.gamma / (1.0 - mdp.gamma) * float(_pow(np.array(1.0 - p), n)) * spread


@dataclass
class BoundReport:
    n_samples: int
    lhs: float
    rhs_expectation: float
    rhs_max: float
    bound_slack: float
    mu_star_min: float
    delta: list
    delta_source: str
    advantage_bound: float | None = None


def suboptimality_bound_report(
    mdp: TabularMDP,
    spec: ExpectedMaxSpec,
    tol: float = DEFAULT_TOL,
    delta_source: str = "optimal",
) -> BoundReport:
    """Measure ``||Q^N - Q*||`` against both right-hand sides of the gap bound.

    ``delta_source="optimal"`` builds the per-state gap from Q*;
    ``delta_source="emaq"`` builds it from Q^N instead.  With N == 1 the
    advantage-function form ``gamma/(1-gamma) * max A_mu`` is reported too.
    """
    _check_spec(mdp, spec)
    if not spec.behavior.full_support:
        raise PreconditionError("behavior policy must have full support in tabular mode")
    if delta_source not in ("optimal", "emaq"):
        raise ValidationError(f"unknown delta_source {delta_source!r}")
    q_star = q_learning_fixed_point(mdp, tol).values
    q_n, _ = solve_emaq_fixed_point(mdp, spec, tol)
    q_n = q_n.values
    base = q_star if delta_source == "optimal" else q_n
    delta = base.max(axis=1) - expected_max_rows(base, spec.behavior.probs, spec.n_samples)
    factor = mdp.gamma / (1.0 - mdp.gamma)
    rhs_exp = factor * float(np.max(mdp.transition @ delta))
    rhs_max = factor * float(np.max(delta))
    lhs = float(np.max(np.abs(q_n - q_star)))
    advantage_form = None
    if spec.n_samples == 1:
        q_mu = evaluate_policy(mdp, spec.behavior, tol).values
        advantage = q_mu - np.einsum("sa,sa->s", spec.behavior.probs, q_mu)[:, None]
        advantage_form = factor * float(np.max(advantage))
    mu_star = optimal_action_mass(q_star, spec.behavior, atol=10 * tol)
    return BoundReport(
        n_samples=spec.n_samples,
        lhs=lhs,
        rhs_expectation=rhs_exp,
        rhs_max=rhs_max,
        bound_slack=min(rhs_exp, rhs_max) - lhs,
        mu_star_min=float(mu_star.min()),
        delta=delta.tolist(),
        delta_source=delta_source,
        advantage_bound=advantage_form,
    )


@dataclass
class TheoremReport:
    contraction_ratio: float
    monotonicity_violation: float
    bound_slack: float
    mu_star_min: float
    gamma: float = 0.0
    n_list: list = field(default_factory=list)
    bounds: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def verify_theorems(
    mdp: TabularMDP,
    behavior: DiscretePolicy,
    n_list,
    trials: int,
    seed: int,
    tol: float = DEFAULT_TOL,
) -> TheoremReport:
    """Run every executable check over ``n_list`` and aggregate the worst case."""
    n_list = sorted({int(n) for n in n_list})
    ratio = max(
        verify_contraction(mdp, ExpectedMaxSpec(n, behavior), trials, seed + i)
        for i, n in enumerate(n_list)
    )
    violation = verify_monotonicity(mdp, behavior, n_list, tol) if len(n_list) > 1 else 0.0
    bounds = [suboptimality_bound_report(mdp, ExpectedMaxSpec(n, behavior), tol) for n in n_list]
    return TheoremReport(
        contraction_ratio=ratio,
        monotonicity_violation=violation,
        bound_slack=min(b.bound_slack for b in bounds),
        mu_star_min=bounds[0].mu_star_min,
        gamma=mdp.gamma,
        n_list=n_list,
        bounds=[asdict(b) for b in bounds],
    )


def random_instance(num_states, num_actions, gamma, rng, smoothing=0.0):
    """A random MDP with a random full-support behavior policy."""
    mdp = random_mdp(num_states, num_actions, gamma, rng)
    return mdp, random_policy(num_states, num_actions, rng, smoothing=smoothing)
