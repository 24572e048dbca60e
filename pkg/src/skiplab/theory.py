"""Numerical checks of the risk-gap, second-moment, one-step and detach results.

Each check pairs a closed form with a Monte-Carlo estimate on a model family
where every conditional expectation is available in closed form, and reports
agreement in units of standard error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

Z = 3.0  # standard errors allowed for Monte-Carlo agreement
NEAR_TIE = 0.05  # relative margin excluded from the detach-winner tournament


@dataclass
class CheckReport:
    check: str
    params: dict
    target: float
    estimate: float
    stderr: float
    passed: bool
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = {"check": self.check, "params": self.params, "target": self.target,
               "estimate": self.estimate, "stderr": self.stderr, "pass": bool(self.passed)}
        rec.update(self.extra)
        return rec


@dataclass(frozen=True)
class GaussianTriplet:
    """Y = alpha A + beta B + noise, (A, B) standard normal with correlation ``corr``."""

    alpha: float
    beta: float
    sigma_noise: float = 1.0
    corr: float = 0.0

    def __post_init__(self):
        if not -1.0 < self.corr < 1.0:
            raise ValueError(f"|corr| must be < 1, got {self.corr}")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")

    def predict_main(self, a: np.ndarray) -> np.ndarray:
        """E[Y | A]."""
        return (self.alpha + self.beta * self.corr) * a

    def predict_fused(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """E[Y | A, B]."""
        return self.alpha * a + self.beta * b


def bayes_gap_analytic(model: GaussianTriplet) -> float:
    """E[(E[Y|A,B] - E[Y|A])²] = beta² (1 - corr²)."""
    return model.beta**2 * (1.0 - model.corr**2)


@dataclass
class BayesGapEstimate:
    risk_difference: float
    risk_difference_se: float
    predictor_gap: float
    predictor_gap_se: float
    cross_term: float
    cross_term_se: float
    risk_main: float
    risk_fused: float

    def agree(self, z: float = Z) -> bool:
        combined = np.hypot(self.risk_difference_se, self.predictor_gap_se)
        return abs(self.risk_difference - self.predictor_gap) <= z * combined


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def bayes_gap_monte_carlo(model: GaussianTriplet, n: int, seed: int) -> BayesGapEstimate:
    if n <= 0:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n)
    b = model.corr * a + np.sqrt(1.0 - model.corr**2) * rng.standard_normal(n)
    y = model.alpha * a + model.beta * b + model.sigma_noise * rng.standard_normal(n)
    f_main, f_fused = model.predict_main(a), model.predict_fused(a, b)
    loss_main, loss_fused = (y - f_main) ** 2, (y - f_fused) ** 2
    diff = loss_main - loss_fused
    gap = (f_fused - f_main) ** 2
    cross = 2.0 * (y - f_fused) * (f_fused - f_main)
    rd, rd_se = _mean_se(diff)
    pg, pg_se = _mean_se(gap)
    ct, ct_se = _mean_se(cross)
    return BayesGapEstimate(rd, rd_se, pg, pg_se, ct, ct_se, float(loss_main.mean()),
                            float(loss_fused.mean()))


def bayes_gap_check(model: GaussianTriplet, n: int = 200_000, seed: int = 0) -> CheckReport:
    target = bayes_gap_analytic(model)
    est = bayes_gap_monte_carlo(model, n, seed)
    ok = (abs(est.risk_difference - target) <= Z * est.risk_difference_se + 1e-12
          and abs(est.predictor_gap - target) <= Z * est.predictor_gap_se + 1e-12
          and est.agree())
    return CheckReport("bayes_gap", {**asdict(model), "n": n, "seed": seed}, target,
                       est.risk_difference, est.risk_difference_se, ok,
                       {"predictor_gap": est.predictor_gap, "predictor_gap_se": est.predictor_gap_se,
                        "cross_term": est.cross_term, "risk_main": est.risk_main,
                        "risk_fused": est.risk_fused})


@dataclass
class PathGradModel:
    """Joint Gaussian law of (g_main, g_skip)."""

    m: np.ndarray
    s: np.ndarray
    sigma_m: np.ndarray
    sigma_s: np.ndarray
    sigma_ms: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        d = self.m.size
        for name in ("sigma_m", "sigma_s", "sigma_ms"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim == 1:
                v = np.diag(v)
            if v.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
            setattr(self, name, v)
        eig = np.linalg.eigvalsh(self.block_cov)
        if eig.min() < -1e-9 * max(1.0, abs(eig.max())):
            raise ValueError("block covariance is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.m.size

    @property
    def block_cov(self) -> np.ndarray:
        return np.block([[self.sigma_m, self.sigma_ms], [self.sigma_ms.T, self.sigma_s]])

    def second_moment_full(self) -> float:
        ms = self.m + self.s
        return float(ms @ ms + np.trace(self.sigma_m + self.sigma_s + self.sigma_ms + self.sigma_ms.T))

    def second_moment_main(self) -> float:
        return float(self.m @ self.m + np.trace(self.sigma_m))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        w, v = np.linalg.eigh(self.block_cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        z = rng.standard_normal((n, 2 * self.dim)) @ root.T
        return self.m + z[:, :self.dim], self.s + z[:, self.dim:]

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int = 3, correlated: bool = True,
               mean_scale: float = 1.0) -> "PathGradModel":
        a = rng.standard_normal((2 * dim, 2 * dim)) * rng.uniform(0.3, 1.5)
        cov = a @ a.T / (2 * dim)
        if not correlated:
            cov[:dim, dim:] = 0.0
            cov[dim:, :dim] = 0.0
        return cls(mean_scale * rng.standard_normal(dim), mean_scale * rng.standard_normal(dim),
                   cov[:dim, :dim], cov[dim:, dim:], cov[:dim, dim:])


def second_moment_check(model: PathGradModel, n: int = 100_000, seed: int = 0) -> CheckReport:
    if n <= 0:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    gm, gs = model.sample(n, rng)
    g = gm + gs
    est, se = _mean_se(np.einsum("ij,ij->i", g, g))
    target = model.second_moment_full()
    z = abs(est - target) / se if se > 0 else (0.0 if abs(est - target) < 1e-9 else np.inf)
    return CheckReport("second_moment", {"dim": model.dim, "n": n, "seed": seed}, target, est, se,
                       bool(z <= Z), {"z": float(z)})


@dataclass(frozen=True)
class QuadraticProblem:
    """Loss (L/2)‖θ‖², Hessian L·I."""

    smoothness: float
    theta0: tuple

    def __post_init__(self):
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")

    @property
    def theta(self) -> np.ndarray:
        return np.asarray(self.theta0, dtype=np.float64)

    def loss(self, theta: np.ndarray) -> np.ndarray:
        return 0.5 * self.smoothness * np.einsum("...i,...i->...", theta, theta)

    def grad(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return self.smoothness * (self.theta if theta is None else theta)


@dataclass(frozen=True)
class GradientEstimator:
    """g = bias + ∇L(θ0) + N(0, cov); ``exact`` means bias = 0 and cov = 0."""

    bias: Optional[tuple] = None
    cov: Optional[np.ndarray] = None

    def moments(self, problem: QuadraticProblem) -> tuple[np.ndarray, float]:
        mean = problem.grad() + (0.0 if self.bias is None else np.asarray(self.bias))
        tr = 0.0 if self.cov is None else float(np.trace(np.atleast_2d(self.cov)))
        return mean, float(mean @ mean + tr)

    def sample(self, problem: QuadraticProblem, n: int, rng: np.random.Generator) -> np.ndarray:
        mean, _ = self.moments(problem)
        if self.cov is None:
            return np.broadcast_to(mean, (n, mean.size))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape[0] == 1 and mean.size > 1:
            cov = np.eye(mean.size) * cov[0, 0]
        return rng.multivariate_normal(mean, cov, size=n, method="eigh")


def one_step_bound(problem: QuadraticProblem, estimator: GradientEstimator, gamma: float) -> float:
    """L(θ) - γ<∇L, E g> + (Lγ²/2) E‖g‖²."""
    mean, second = estimator.moments(problem)
    th = problem.theta
    return float(problem.loss(th) - gamma * problem.grad() @ mean
                 + 0.5 * problem.smoothness * gamma**2 * second)


def one_step_check(problem: QuadraticProblem, estimator: GradientEstimator, gamma: float,
                   n: int = 100_000, seed: int = 0) -> CheckReport:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    rng = np.random.default_rng(seed)
    g = estimator.sample(problem, n, rng)
    losses = problem.loss(problem.theta - gamma * g)
    est, se = _mean_se(np.asarray(losses, dtype=np.float64))
    bound = one_step_bound(problem, estimator, gamma)
    if estimator.cov is None:
        ok = abs(est - bound) <= 1e-12 * max(1.0, abs(bound))
    else:
        ok = est <= bound + Z * se
    return CheckReport("one_step", {"L": problem.smoothness, "gamma": gamma, "n": n, "seed": seed},
                       bound, est, se, bool(ok))


@dataclass
class DetachDecision:
    lhs: float
    rhs: float
    condition_holds: bool
    predicted_winner: str
    empirical_winner: str
    loss_detach: float
    loss_full: float
    diff_se: float
    near_tie: bool

    @property
    def agree(self) -> bool:
        return self.predicted_winner == self.empirical_winner


def detach_condition_check(problem: QuadraticProblem, model: PathGradModel, gamma: float,
                           n: int = 100_000, seed: int = 0, hessian=None) -> DetachDecision:
    """Compare the sufficient detach condition with a Monte-Carlo one-step race.

    The main path is unbiased: model.m must equal ∇L(θ0). Both estimators share
    the same draws, so the loss difference has small variance.
    """
    if hessian is not None:
        h = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        if not np.allclose(h, problem.smoothness * np.eye(h.shape[0])):
            raise ValueError("detach check needs an isotropic Hessian L·I")
    if not np.allclose(model.m, problem.grad()):
        raise ValueError("main-path mean must equal the true gradient")
    lhs = float(problem.grad() @ model.s)
    rhs = 0.5 * problem.smoothness * gamma * (model.second_moment_full() - model.second_moment_main())
    holds = lhs <= rhs
    rng = np.random.default_rng(seed)
    gm, gs = model.sample(n, rng)
    th = problem.theta
    l_det = problem.loss(th - gamma * gm)
    l_full = problem.loss(th - gamma * (gm + gs))
    d_mean, d_se = _mean_se(l_full - l_det)
    return DetachDecision(
        lhs=lhs, rhs=rhs, condition_holds=bool(holds),
        predicted_winner="detach" if holds else "full",
        empirical_winner="detach" if d_mean >= 0 else "full",
        loss_detach=float(l_det.mean()), loss_full=float(l_full.mean()), diff_se=d_se,
        near_tie=bool(abs(lhs - rhs) <= NEAR_TIE * abs(rhs)),
    )


def random_detach_case(rng: np.random.Generator, dim: int = 4) -> tuple[QuadraticProblem, PathGradModel, float]:
    """A random isotropic quadratic, path-gradient law with unbiased main path, and step size."""
    L = float(rng.uniform(0.5, 2.0))
    theta = rng.standard_normal(dim)
    base = PathGradModel.random(rng, dim, correlated=True)
    s = rng.standard_normal(dim) * rng.uniform(0.0, 1.5)
    model = PathGradModel(L * theta, s, base.sigma_m, base.sigma_s, base.sigma_ms)
    gamma = float(rng.uniform(0.2, 1.0)) / L
    return QuadraticProblem(L, tuple(theta)), model, gamma
