"""Self-contained Hamiltonian Monte Carlo engine.

No-U-turn trajectory doubling with dual-averaging step-size adaptation and
a diagonal mass matrix estimated from the second half of warmup, plus a
fixed-trajectory fallback for debugging.  Targets are callables
``q -> (log density, gradient)`` over an unconstrained vector.

Reproducibility: chain ``c`` draws from a counter-based Philox generator
seeded with ``SeedSequence(entropy=config.seed, spawn_key=(c,))``, so an
alternate implementation can reproduce the exact streams.  Chains may run
in parallel; results are merged by chain index, which keeps outputs
bitwise identical for a fixed seed regardless of scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

# Energy error beyond which a trajectory is declared divergent.
DIVERGENCE_ENERGY = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 10_000
    warmup: int = 5_000
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    init_radius: float = 2.0
    algorithm: str = "nuts"        # "nuts" or "static"
    static_steps: int = 32
    step_size: float | None = None  # pin the step size, disabling adaptation
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.algorithm not in ("nuts", "static"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive when given")


@dataclass
class PosteriorDraws:
    """Post-warmup draws, (chains, iterations - warmup, dim).

    ``divergence_count`` counts post-warmup divergent trajectories per
    chain; ``mass_diag`` is the kinetic-energy mass diagonal (the inverse
    of the adapted metric variances).
    """

    draws: np.ndarray
    parameter_names: list[str]
    divergence_count: np.ndarray
    step_size: np.ndarray
    mass_diag: np.ndarray
    config: SamplerConfig

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def stacked(self) -> np.ndarray:
        """All chains concatenated, (chains * kept, dim)."""
        return self.draws.reshape(-1, self.dim)

    def column(self, index) -> np.ndarray:
        """Per-chain values of one parameter, (chains, kept)."""
        if isinstance(index, str):
            index = self.parameter_names.index(index)
        return self.draws[:, :, index]


def _as_target(target):
    def fn(q):
        out = target(q)
        if hasattr(out, "value"):
            return float(out.value), np.asarray(out.gradient, dtype=float)
        value, grad = out
        return float(value), np.asarray(grad, dtype=float)

    return fn


def leapfrog(target, q, r, grad, eps, inv_mass, steps=1):
    """Leapfrog integration of Hamilton's equations with a diagonal metric.

    Returns ``(q, r, logp, grad)``; positions that leave the finite domain
    yield ``logp = -inf`` without calling the target.
    """
    logp = -np.inf
    for _ in range(steps):
        r = r + 0.5 * eps * grad
        q = q + eps * inv_mass * r
        if not np.all(np.isfinite(q)):
            return q, r, -np.inf, np.zeros_like(q)
        logp, grad = target(q)
        if not np.isfinite(logp):
            return q, r, -np.inf, grad
        r = r + 0.5 * eps * grad
    return q, r, logp, grad


class _DualAveraging:
    """Nesterov dual averaging of the log step size (Hoffman-Gelman schedule)."""

    def __init__(self, eps0, target_accept, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.delta = target_accept

    def update(self, accept_prob):
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - accept_prob)
        self.log_eps = self.mu - np.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** (-self.kappa)
        self.log_eps_bar = (1.0 - w) * self.log_eps_bar + w * self.log_eps
        return np.exp(self.log_eps)

    @property
    def adapted(self):
        return np.exp(self.log_eps_bar)


def _find_reasonable_eps(target, q, logp, grad, inv_mass, rng):
    """Double/halve the step size until one leapfrog crosses 50% acceptance."""
    eps = 1.0
    r = rng.standard_normal(len(q)) / np.sqrt(inv_mass)
    joint0 = logp - 0.5 * np.dot(inv_mass * r, r)
    _, r1, logp1, _ = leapfrog(target, q, r, grad, eps, inv_mass)
    ratio = (logp1 - 0.5 * np.dot(inv_mass * r1, r1)) - joint0
    if not np.isfinite(ratio):
        ratio = -np.inf
    direction = 1.0 if ratio > np.log(0.5) else -1.0
    while direction * ratio > -direction * np.log(2.0):
        eps *= 2.0**direction
        if not 1e-10 < eps < 1e10:
            break
        _, r1, logp1, _ = leapfrog(target, q, r, grad, eps, inv_mass)
        ratio = (logp1 - 0.5 * np.dot(inv_mass * r1, r1)) - joint0
        if not np.isfinite(ratio):
            ratio = -np.inf
    return eps


class _Tree:
    """Subtree state for the recursive no-U-turn doubling.

    Trajectory states are selected multinomially: ``log_w`` accumulates
    the log sum of Boltzmann weights ``joint - joint0`` over the subtree.
    Ends (``*_minus``/``*_plus``) are kept in trajectory orientation, and
    ``rho`` is the momentum sum over the subtree for the u-turn checks.
    """

    __slots__ = (
        "q_minus", "r_minus", "grad_minus", "q_plus", "r_plus", "grad_plus",
        "q_prop", "logp_prop", "grad_prop", "log_w", "rho", "keep_going",
        "alpha", "n_alpha", "divergent",
    )


def _no_uturn(r_begin, r_end, rho, inv_mass) -> bool:
    """Momentum-sum termination criterion: both end velocities must keep a
    positive projection on the trajectory's net momentum."""
    return (
        np.dot(inv_mass * r_begin, rho) > 0.0
        and np.dot(inv_mass * r_end, rho) > 0.0
    )


def _merge_ok(left, right, inv_mass) -> bool:
    """U-turn checks across a merged span and both subtree boundaries."""
    rho = left.rho + right.rho
    if not _no_uturn(left.r_minus, right.r_plus, rho, inv_mass):
        return False
    # cross checks around the inner boundary (catch turns the outer span
    # check misses on discrete trajectories)
    if not _no_uturn(left.r_minus, right.r_minus, left.rho + right.r_minus, inv_mass):
        return False
    return _no_uturn(left.r_plus, right.r_plus, right.rho + left.r_plus, inv_mass)


def _build_tree(target, q, r, grad, direction, depth, eps, inv_mass, joint0, rng):
    if depth == 0:
        q1, r1, logp1, grad1 = leapfrog(target, q, r, grad, direction * eps, inv_mass)
        joint = logp1 - 0.5 * np.dot(inv_mass * r1, r1) if np.isfinite(logp1) else -np.inf
        tree = _Tree()
        tree.q_minus = tree.q_plus = tree.q_prop = q1
        tree.r_minus = tree.r_plus = r1
        tree.grad_minus = tree.grad_plus = tree.grad_prop = grad1
        tree.logp_prop = logp1
        tree.rho = r1
        tree.divergent = (not np.isfinite(joint)) or (joint0 - joint > DIVERGENCE_ENERGY)
        tree.log_w = joint - joint0
        tree.keep_going = not tree.divergent
        tree.alpha = min(1.0, np.exp(min(joint - joint0, 0.0))) if np.isfinite(joint) else 0.0
        tree.n_alpha = 1
        return tree

    tree = _build_tree(target, q, r, grad, direction, depth - 1, eps, inv_mass, joint0, rng)
    if tree.keep_going:
        if direction == -1:
            sub = _build_tree(
                target, tree.q_minus, tree.r_minus, tree.grad_minus,
                direction, depth - 1, eps, inv_mass, joint0, rng,
            )
            left, right = sub, tree
            tree.q_minus, tree.r_minus, tree.grad_minus = sub.q_minus, sub.r_minus, sub.grad_minus
        else:
            sub = _build_tree(
                target, tree.q_plus, tree.r_plus, tree.grad_plus,
                direction, depth - 1, eps, inv_mass, joint0, rng,
            )
            left, right = tree, sub
            tree.q_plus, tree.r_plus, tree.grad_plus = sub.q_plus, sub.r_plus, sub.grad_plus
        total = np.logaddexp(tree.log_w, sub.log_w)
        if sub.log_w > -np.inf and np.log(rng.random()) < sub.log_w - total:
            tree.q_prop, tree.logp_prop, tree.grad_prop = sub.q_prop, sub.logp_prop, sub.grad_prop
        tree.keep_going = sub.keep_going and _merge_ok(left, right, inv_mass)
        tree.log_w = total
        tree.rho = left.rho + right.rho
        tree.alpha += sub.alpha
        tree.n_alpha += sub.n_alpha
        tree.divergent |= sub.divergent
    return tree


class _Trajectory:
    __slots__ = ("rho", "r_minus", "r_plus")


def _nuts_transition(target, q, logp, grad, eps, inv_mass, max_depth, rng):
    r0 = rng.standard_normal(len(q)) / np.sqrt(inv_mass)
    joint0 = logp - 0.5 * np.dot(inv_mass * r0, r0)

    q_minus = q_plus = q
    grad_minus = grad_plus = grad
    trajectory = _Trajectory()
    trajectory.rho = r0
    trajectory.r_minus = trajectory.r_plus = r0
    q_cur, logp_cur, grad_cur = q, logp, grad
    log_w, depth = 0.0, 0
    divergent = False
    alpha, n_alpha = 0.0, 0

    while depth < max_depth:
        direction = -1 if rng.random() < 0.5 else 1
        if direction == -1:
            tree = _build_tree(
                target, q_minus, trajectory.r_minus, grad_minus, direction, depth,
                eps, inv_mass, joint0, rng,
            )
            q_minus, grad_minus = tree.q_minus, tree.grad_minus
            left, right = tree, trajectory
        else:
            tree = _build_tree(
                target, q_plus, trajectory.r_plus, grad_plus, direction, depth,
                eps, inv_mass, joint0, rng,
            )
            q_plus, grad_plus = tree.q_plus, tree.grad_plus
            left, right = trajectory, tree
        alpha, n_alpha = tree.alpha, tree.n_alpha
        divergent |= tree.divergent
        # biased progressive sampling: favor the fresh half of the trajectory
        if tree.keep_going and np.log(rng.random()) < tree.log_w - log_w:
            q_cur, logp_cur, grad_cur = tree.q_prop, tree.logp_prop, tree.grad_prop
        log_w = np.logaddexp(log_w, tree.log_w)
        persist = tree.keep_going and _merge_ok(left, right, inv_mass)
        trajectory.rho = trajectory.rho + tree.rho
        if direction == -1:
            trajectory.r_minus = tree.r_minus
        else:
            trajectory.r_plus = tree.r_plus
        if not persist:
            break
        depth += 1

    accept_stat = alpha / max(n_alpha, 1)
    return q_cur, logp_cur, grad_cur, accept_stat, divergent


def _static_transition(target, q, logp, grad, eps, inv_mass, steps, rng):
    r0 = rng.standard_normal(len(q)) / np.sqrt(inv_mass)
    joint0 = logp - 0.5 * np.dot(inv_mass * r0, r0)
    q1, r1, logp1, grad1 = leapfrog(target, q, r0, grad, eps, inv_mass, steps=steps)
    joint1 = logp1 - 0.5 * np.dot(inv_mass * r1, r1) if np.isfinite(logp1) else -np.inf
    divergent = (not np.isfinite(joint1)) or (joint0 - joint1 > DIVERGENCE_ENERGY)
    accept = 0.0 if divergent else min(1.0, np.exp(min(joint1 - joint0, 0.0)))
    if rng.random() < accept:
        return q1, logp1, grad1, accept, divergent
    return q, logp, grad, accept, divergent


def _chain_rng(seed, chain_index):
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(chain_index,)))
    )


def _run_chain(target, dim, config: SamplerConfig, chain_index: int):
    rng = _chain_rng(config.seed, chain_index)

    q = logp = grad = None
    for _ in range(100):
        cand = rng.uniform(-config.init_radius, config.init_radius, dim)
        value, g = target(cand)
        if np.isfinite(value) and np.all(np.isfinite(g)):
            q, logp, grad = cand, value, g
            break
    if q is None:
        raise SamplerError("cannot initialize: no finite starting point in 100 tries")

    inv_mass = np.ones(dim)
    if config.step_size is not None:
        eps, adapt = config.step_size, None
    else:
        eps = _find_reasonable_eps(target, q, logp, grad, inv_mass, rng)
        adapt = _DualAveraging(eps, config.target_accept)
    max_depth = max(1, int(np.floor(np.log2(max(config.max_leapfrog, 2)))))

    warmup, kept_n = config.warmup, config.iterations - config.warmup
    # Mass matrix estimated from second-half warmup draws; the final 10%
    # of warmup re-tunes the step size under the new metric.
    if warmup >= 40:
        window_start, window_end = warmup // 2, int(0.9 * warmup)
    else:
        window_start = window_end = warmup + 1
    window: list[np.ndarray] = []

    kept = np.empty((kept_n, dim))
    divergences = 0

    for it in range(config.iterations):
        if config.algorithm == "nuts":
            q, logp, grad, accept, divergent = _nuts_transition(
                target, q, logp, grad, eps, inv_mass, max_depth, rng
            )
        else:
            q, logp, grad, accept, divergent = _static_transition(
                target, q, logp, grad, eps, inv_mass, config.static_steps, rng
            )

        if it < warmup:
            if adapt is not None:
                eps = adapt.update(accept)
                if window_start <= it < window_end:
                    window.append(q.copy())
                if it == window_end - 1 and len(window) >= 10:
                    arr = np.asarray(window)
                    n_w = len(arr)
                    var = np.var(arr, axis=0, ddof=1)
                    # shrink toward a small constant as Stan does, guarding
                    # against zero-variance coordinates
                    inv_mass = (n_w / (n_w + 5.0)) * var + 1e-3 * (5.0 / (n_w + 5.0))
                    inv_mass = np.maximum(inv_mass, 1e-10)
                    eps = _find_reasonable_eps(target, q, logp, grad, inv_mass, rng)
                    adapt = _DualAveraging(eps, config.target_accept)
                if it == warmup - 1:
                    eps = adapt.adapted
        else:
            kept[it - warmup] = q
            divergences += divergent

    if divergences == kept_n:
        raise SamplerError(
            f"chain {chain_index}: every post-warmup trajectory diverged "
            f"(step size {eps:.3g}); the target may be ill-conditioned"
        )
    return kept, divergences, eps, 1.0 / inv_mass


def sample(target, dim: int, config: SamplerConfig, parameter_names=None) -> PosteriorDraws:
    """Run ``config.chains`` independent chains against a log-density target.

    ``target`` maps a length-``dim`` vector to ``(value, gradient)`` (a
    ``LogDensityResult`` also works).  Identical seed, config, and target
    give bitwise-identical draws.
    """
    fn = _as_target(target)
    if parameter_names is None:
        parameter_names = [f"p{j}" for j in range(dim)]
    if len(parameter_names) != dim:
        raise ValueError("parameter_names length must equal dim")

    indices = range(config.chains)
    if config.threads > 1 and config.chains > 1:
        with ThreadPoolExecutor(max_workers=min(config.threads, config.chains)) as pool:
            results = list(pool.map(lambda c: _run_chain(fn, dim, config, c), indices))
    else:
        results = [_run_chain(fn, dim, config, c) for c in indices]

    return PosteriorDraws(
        draws=np.stack([r[0] for r in results]),
        parameter_names=list(parameter_names),
        divergence_count=np.array([r[1] for r in results]),
        step_size=np.array([r[2] for r in results]),
        mass_diag=np.stack([r[3] for r in results]),
        config=config,
    )


@dataclass
class GradientCheckReport:
    max_rel_error: float
    point_index: int
    coordinate: int
    per_point: np.ndarray = field(repr=False, default=None)


def gradient_check(target, points, step: float = 1e-5) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    The reported error for a coordinate is ``|analytic - fd| / (1 + |fd|)``,
    which behaves as a relative error for large gradients and an absolute
    one near zero.
    """
    fn = _as_target(target)
    worst = (0.0, -1, -1)
    per_point = []
    for idx, point in enumerate(points):
        point = np.asarray(point, dtype=float)
        _, grad = fn(point)
        fd = np.empty_like(grad)
        for j in range(len(point)):
            shift = np.zeros_like(point)
            shift[j] = step
            up, _ = fn(point + shift)
            down, _ = fn(point - shift)
            fd[j] = (up - down) / (2.0 * step)
        rel = np.abs(grad - fd) / (1.0 + np.abs(fd))
        per_point.append(rel.max())
        j_worst = int(np.argmax(rel))
        if rel[j_worst] > worst[0]:
            worst = (float(rel[j_worst]), idx, j_worst)
    return GradientCheckReport(worst[0], worst[1], worst[2], np.asarray(per_point))
