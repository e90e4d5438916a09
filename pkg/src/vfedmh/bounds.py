"""Convergence-bound tracking for the strongly convex calibration problem.

The tracked recursion bounds the expected optimality gap of full-batch
gradient descent on an L-smooth, mu-strongly-convex objective:

    b[t+1] = (1 - mu * sigma^2 * eta) * b[t] + 0.5 * eta^2 * L * G

with b[0] the initial gap.  Constants are estimated conservatively from the
problem instance (smoothness via power iteration on the feature Gram matrix,
G from observed gradient norms with a safety factor); sigma^2 is 1 because
the calibration runs deterministic full-batch gradients, where the gradient
estimator equals the gradient itself.

The calibration problem is the protocol itself with embedding stacks frozen
and a single L2-regularized dense decision layer per party, which makes each
party's objective convex in its trainable parameters.  The reference optimum
comes from an offline high-precision solve of the same objective.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import nn
from .data import vertical_split
from .protocol import PartyConfig, SessionConfig, run_training


class ConvexityError(ValueError):
    """Raised when constants are requested for a non-convex instance."""


@dataclass(frozen=True)
class BoundParams:
    smoothness: float  # L
    strong_convexity: float  # mu
    grad_bound: float  # G
    sigma_sq: float
    eta: float
    initial_gap: float  # b[0]

    def __post_init__(self):
        if not self.smoothness >= self.strong_convexity > 0:
            raise ValueError("need L >= mu > 0")
        if self.grad_bound < 0 or self.eta <= 0:
            raise ValueError("need G >= 0 and eta > 0")

    @property
    def contraction(self) -> float:
        return 1.0 - self.strong_convexity * self.sigma_sq * self.eta

    @property
    def fixed_point(self) -> float:
        drive = 0.5 * self.eta**2 * self.smoothness * self.grad_bound
        denom = self.strong_convexity * self.sigma_sq * self.eta
        return drive / denom if denom > 0 else math.inf

    @property
    def informative(self) -> bool:
        # contraction factor must sit in [0, 1) for the recursion to bound a
        # non-negative, shrinking gap
        return 0.0 <= self.contraction < 1.0


def bound_trajectory(params: BoundParams, steps: int) -> np.ndarray:
    """Evaluate the recursion exactly in double precision; b[0..steps]."""
    if not params.informative:
        warnings.warn(
            f"contraction factor {params.contraction} outside (0, 1); "
            "the bound is non-informative but still computed",
            stacklevel=2,
        )
    drive = 0.5 * params.eta**2 * params.smoothness * params.grad_bound
    b = np.empty(steps + 1)
    b[0] = params.initial_gap
    for t in range(steps):
        b[t + 1] = params.contraction * b[t] + drive
    return b


# ---------------------------------------------------------------------------
# Problem instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticProblem:
    """f(theta) = 0.5 * a * theta^2; both curvature constants equal a."""

    a: float

    def value(self, theta: float) -> float:
        return 0.5 * self.a * theta * theta

    def grad(self, theta: float) -> float:
        return self.a * theta


@dataclass
class SoftmaxRegressionProblem:
    """L2-regularized softmax regression over fixed features.

    ``features`` excludes the bias column; a constant 1 column is appended
    internally so the bias is regularized like every other coordinate.
    """

    features: np.ndarray  # N x d
    labels: np.ndarray  # N ints
    n_classes: int
    l2: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.l2 <= 0:
            raise ConvexityError("l2 must be positive for strong convexity")
        self._phi = np.hstack([self.features, np.ones((self.features.shape[0], 1))])

    @property
    def dim(self) -> int:
        return self._phi.shape[1] * self.n_classes

    def value(self, w: np.ndarray) -> float:
        w = w.reshape(self._phi.shape[1], self.n_classes)
        loss, _ = nn.softmax_cross_entropy(self._phi @ w, self.labels)
        return loss + 0.5 * self.l2 * float(np.sum(w * w))

    def grad(self, w: np.ndarray) -> np.ndarray:
        w = w.reshape(self._phi.shape[1], self.n_classes)
        _, glog = nn.softmax_cross_entropy(self._phi @ w, self.labels)
        return (self._phi.T @ glog + self.l2 * w).reshape(-1)

    def solve_reference(self, grad_tol: float = 1e-10) -> tuple[np.ndarray, float]:
        """Offline optimum by L-BFGS, polished by gradient steps if needed."""
        w0 = np.zeros(self.dim)
        res = minimize(
            self.value,
            w0,
            jac=self.grad,
            method="L-BFGS-B",
            options={"maxiter": 20000, "ftol": 1e-18, "gtol": 1e-14},
        )
        w = res.x
        lr = 1.0 / self.smoothness_bound()
        for _ in range(200000):
            g = self.grad(w)
            if np.linalg.norm(g) <= grad_tol:
                break
            w = w - lr * g
        return w, self.value(w)

    def smoothness_bound(self) -> float:
        top = power_iteration_gram(self._phi)
        curvature = 0.25 if self.n_classes == 2 else 0.5
        return curvature * top / self._phi.shape[0] + self.l2


def power_iteration_gram(phi: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of phi^T phi (the squared operator norm of phi)."""
    small = phi if phi.shape[0] >= phi.shape[1] else phi.T
    gram_dim = small.shape[1]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(gram_dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = small.T @ (small @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def estimate_constants(
    problem,
    eta: float,
    initial_gap: float,
    observed_grad_sq=None,
    calibration_steps: int = 50,
    grad_safety: float = 1.5,
) -> BoundParams:
    """Conservative constants for the recursion.

    For a quadratic the curvature constants are analytic.  For softmax
    regression, smoothness comes from the Gram spectrum and G is the largest
    squared gradient norm seen either in ``observed_grad_sq`` (a completed
    run) or in a short internal gradient-descent pass, inflated by a safety
    factor.  Deterministic full-batch gradients make sigma^2 exactly 1.
    """
    if isinstance(problem, QuadraticProblem):
        smooth = mu = problem.a
        if observed_grad_sq is None:
            theta, grads = math.sqrt(2.0 * initial_gap / problem.a), []
            for _ in range(calibration_steps):
                g = problem.grad(theta)
                grads.append(g * g)
                theta -= eta * g
            observed_grad_sq = grads
    elif isinstance(problem, SoftmaxRegressionProblem):
        smooth = problem.smoothness_bound()
        mu = problem.l2
        if observed_grad_sq is None:
            w, grads = np.zeros(problem.dim), []
            for _ in range(calibration_steps):
                g = problem.grad(w)
                grads.append(float(np.sum(g * g)))
                w = w - eta * g
            observed_grad_sq = grads
    else:
        raise ConvexityError(f"cannot certify convexity of {type(problem).__name__}")
    grad_bound = grad_safety * float(max(observed_grad_sq, default=0.0))
    return BoundParams(
        smoothness=smooth,
        strong_convexity=mu,
        grad_bound=grad_bound,
        sigma_sq=1.0,
        eta=eta,
        initial_gap=initial_gap,
    )


# ---------------------------------------------------------------------------
# Protocol calibration harness
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    violations: int
    checked: int
    per_party_gaps: dict[int, np.ndarray]
    per_party_bounds: dict[int, np.ndarray]
    params: BoundParams
    eta: float
    informative: bool

    @property
    def violation_rate(self) -> float:
        return self.violations / self.checked if self.checked else 0.0


def run_convex_calibration(
    dataset,
    n_passive: int = 2,
    d_emb: int = 8,
    epochs: int = 40,
    eta: float = 0.05,
    l2: float = 0.1,
    seed: int = 0,
    clamp_lr: bool = True,
) -> CalibrationReport:
    """Train the frozen-embedding convex problem inside the protocol and
    compare each party's empirical gap against the recursion.

    By default the step size is clamped to 0.9 / L so gradient descent stays
    inside the regime where the contraction argument applies; disabling the
    clamp allows exploring non-informative configurations.
    """
    from .protocol import build_party_model  # local import to keep module load light

    n_parties = n_passive + 1
    shards, labels = vertical_split(dataset, n_parties)

    def make_session(lr: float) -> SessionConfig:
        return SessionConfig(
            n_passive=n_passive,
            epochs=epochs,
            batch_size=dataset.n_samples,  # full batch: one step per epoch
            d_emb=d_emb,
            seed=seed,
            parties=[PartyConfig(model="linear", optimizer="sgd", lr=lr)] * n_parties,
            freeze_embedding=True,
            decision_l2=l2,
        )

    def make_models(session: SessionConfig):
        return {
            k: build_party_model(session, k, shards[k].shape[1], dataset.n_classes)
            for k in range(n_parties)
        }

    # frozen embedding stacks fix the decision features once and for all;
    # probe them first so the step size can be clamped below 1/L
    models = make_models(make_session(eta))
    emb = sum(
        nn.forward_embedding(models[k].state, models[k].spec, shards[k])[0]
        for k in range(n_parties)
    ) / float(n_parties)
    problem = SoftmaxRegressionProblem(emb, labels, dataset.n_classes, l2)
    eta_used = min(eta, 0.9 / problem.smoothness_bound()) if clamp_lr else eta
    session = make_session(eta_used)
    models = make_models(session)  # rebind optimizers to the clamped step size
    _, f_star = problem.solve_reference()
    result = run_training(session, shards, labels, models=models, n_classes=dataset.n_classes)
    grad_sq = [g for k in result.grad_norm_history for g in result.grad_norm_history[k]]
    gaps, bounds = {}, {}
    violations = checked = 0
    params = None
    for k in range(n_parties):
        f_series = np.asarray(result.objective_history[k])
        gap = f_series - f_star
        pk = estimate_constants(
            problem, eta_used, initial_gap=float(gap[0]), observed_grad_sq=grad_sq
        )
        params = params or pk
        b = bound_trajectory(pk, len(gap) - 1)
        gaps[k], bounds[k] = gap, b
        violations += int(np.sum(gap > b + 1e-12))
        checked += len(gap)
    return CalibrationReport(
        violations=violations,
        checked=checked,
        per_party_gaps=gaps,
        per_party_bounds=bounds,
        params=params,
        eta=eta_used,
        informative=params.informative,
    )
