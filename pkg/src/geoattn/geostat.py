"""Latent-Gaussian-model engine.

Covariance kernels, the binomial observation model, Laplace-approximation
fitting of the combined latent field, empirical-Bayes hyperparameter
optimization by Nelder-Mead on the approximate log marginal likelihood, and
posterior prediction with Monte Carlo intervals.

The fit works on the combined zero-mean latent u = D beta + S + A (only the
blocks a model kind declares). The likelihood touches the latent state only
through eta = offset + u, so fixed effects and both random fields can be
marginalized into a single n-dimensional Gaussian prior with covariance
Sigma_u = sd^2 D D' + Sigma_S + Q^{-1}. The inner Newton solver follows the
standard B = I + W^{1/2} Sigma W^{1/2} reformulation, which stays stable
when Sigma_u is nearly singular. Component posteriors (beta, S, A) are
recovered exactly afterwards by Gaussian conditioning on u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import blas as _blas
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln

from .attnfield import AttentionField, AttnHyper, precision
from .errors import (
    AllRestartsFailed,
    NewtonDivergence,
    NotPositiveDefinite,
    UnsupportedSmoothness,
)
from .numkit import DEFAULT_KERNEL_JITTER, RngStream, cholesky, solve_chol
from .simgen import Dataset, gneiting_cov, logistic

DEFAULT_FIXED_EFFECT_SD = math.sqrt(1000.0)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
NEWTON_GRAD_TOL = 1e-6

_STREAM_PREDICT = 201  # stream id reserved for predictive draws


# ---------------------------------------------------------------------------
# Covariance kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """Covariance family with its parameters.

    ``matern`` is a purely spatial kernel (variance sigma2, range rho,
    half-integer smoothness nu). ``gneiting`` is the space-time exponential
    family with ranges (phi_s, phi_t) and interaction gamma; gamma = 0 is
    the separable product.
    """

    family: str = "gneiting"
    sigma2: float = 1.0
    rho: float = 0.25
    nu: float = 1.5
    phi_s: float = 0.25
    phi_t: float = 0.25
    gamma: float = 0.0

    def __post_init__(self):
        if self.family not in ("matern", "gneiting"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.family == "matern" and self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.family == "gneiting" and (self.phi_s <= 0 or self.phi_t <= 0 or self.gamma < 0):
            raise ValueError("need phi_s, phi_t > 0 and gamma >= 0")


_MATERN_SCALE = {0.5: 1.0, 1.5: math.sqrt(3.0), 2.5: math.sqrt(5.0)}


def matern_cov(d, sigma2: float, rho: float, nu: float):
    """Matern covariance with half-integer smoothness.

    Uses the range convention with scaled argument s = sqrt(2 nu) d / rho,
    so nu = 0.5 is sigma2 * exp(-d / rho) and nu = 1.5 evaluates to
    sigma2 * (1 + sqrt(3) d / rho) * exp(-sqrt(3) d / rho). Only
    nu in {0.5, 1.5, 2.5} is supported.
    """
    if sigma2 <= 0 or rho <= 0:
        raise ValueError("sigma2 and rho must be positive")
    if nu not in _MATERN_SCALE:
        raise UnsupportedSmoothness(f"no closed form for nu={nu}; use 0.5, 1.5 or 2.5")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    s = _MATERN_SCALE[nu] * d / rho
    if nu == 0.5:
        poly = 1.0
    elif nu == 1.5:
        poly = 1.0 + s
    else:
        poly = 1.0 + s + s * s / 3.0
    out = sigma2 * poly * np.exp(-s)
    return out if out.ndim else float(out)


def separable_cov(d_s, d_t, spatial_kernel, temporal_kernel):
    """Product of a spatial and a temporal covariance evaluated at the lags."""
    return np.asarray(spatial_kernel(d_s)) * np.asarray(temporal_kernel(d_t))


def _pair_distances(xa, ya, ta, xb=None, yb=None, tb=None):
    if xb is None:
        xb, yb, tb = xa, ya, ta
    dx = xa[:, None] - xb[None, :]
    dy = ya[:, None] - yb[None, :]
    d_s = np.sqrt(dx * dx + dy * dy)
    d_t = np.abs(ta[:, None].astype(float) - tb[None, :])
    return d_s, d_t


class CovarianceBuilder:
    """Kernel matrices over fixed point sets with cached distances.

    Rebuilding the matrix for new kernel parameters is O(n^2) exp calls,
    which keeps hyperparameter search cheap.
    """

    def __init__(self, xa, ya, ta, xb=None, yb=None, tb=None):
        self.d_s, self.d_t = _pair_distances(
            np.asarray(xa, float), np.asarray(ya, float), np.asarray(ta),
            None if xb is None else np.asarray(xb, float),
            None if xb is None else np.asarray(yb, float),
            None if xb is None else np.asarray(tb),
        )

    def __call__(self, kernel: KernelSpec) -> np.ndarray:
        if kernel.family == "matern":
            return matern_cov(self.d_s, kernel.sigma2, kernel.rho, kernel.nu)
        return kernel.sigma2 * gneiting_cov(
            self.d_s, self.d_t, kernel.phi_s, kernel.phi_t, kernel.gamma
        )


def kernel_matrix(kernel: KernelSpec, data_a: Dataset, data_b: Dataset | None = None) -> np.ndarray:
    """Covariance matrix between two record sets (or one with itself)."""
    if data_b is None:
        builder = CovarianceBuilder(data_a.x, data_a.y, data_a.t)
    else:
        builder = CovarianceBuilder(data_a.x, data_a.y, data_a.t, data_b.x, data_b.y, data_b.t)
    return builder(kernel)


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

MODEL_KINDS = ("mbg", "gat_only", "hybrid")


@dataclass
class ModelSpec:
    """Which latent blocks a model carries and their prior parameters."""

    kind: str
    kernel: KernelSpec | None = None
    design: np.ndarray | None = None          # (n, q) incl. intercept column; mbg only
    offset: np.ndarray | None = None          # logit-scale fixed offset; hybrid only
    attention: tuple[AttentionField, AttnHyper] | None = None  # hybrid only
    fixed_effect_sd: float = DEFAULT_FIXED_EFFECT_SD

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mbg":
            if self.design is None or self.kernel is None:
                raise ValueError("mbg needs a design matrix and a kernel")
            if self.offset is not None or self.attention is not None:
                raise ValueError("mbg takes neither offset nor attention")
        elif self.kind == "hybrid":
            if self.offset is None or self.attention is None or self.kernel is None:
                raise ValueError("hybrid needs offset, attention and a kernel")
            if self.design is not None:
                raise ValueError("hybrid carries no design matrix")
        else:  # gat_only is scored directly; nothing to fit
            if any(v is not None for v in (self.kernel, self.design, self.offset, self.attention)):
                raise ValueError("gat_only takes no latent structure")


def build_design(data: Dataset) -> np.ndarray:
    """Intercept column plus the standardized covariates."""
    return np.column_stack([np.ones(len(data)), data.covariates])


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def _binom_loglik(eta, z, n):
    # z*eta - n*log(1 + e^eta) + log C(n, z), stable for large |eta|
    softplus = np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))
    const = gammaln(n + 1) - gammaln(z + 1) - gammaln(n - z + 1)
    return float(np.sum(z * eta - n * softplus + const))


def _binom_grad_w(eta, z, n):
    p = logistic(eta)
    return z - n * p, n * p * (1.0 - p)


def _syrk(a: np.ndarray) -> np.ndarray:
    """a @ a.T via dsyrk, symmetrized from the computed triangle."""
    c = _blas.dsyrk(1.0, a, lower=0)
    return c + np.triu(c, 1).T


def _attention_cov(field: AttentionField, hyper: AttnHyper) -> np.ndarray:
    """Q(tau, beta)^{-1} via the cached eigendecomposition of C."""
    if field.lam_max <= 0.0 or field.degenerate:
        return (1.0 / hyper.tau) * np.eye(field.n_nodes)
    eig = getattr(field, "_eig_cache", None)
    if eig is None:
        eig = np.linalg.eigh(field.c)
        field._eig_cache = eig
    lam, vec = eig
    q_eigs = hyper.tau * (1.0 - hyper.beta * lam / field.lam_max)
    return _syrk(vec * np.sqrt(1.0 / q_eigs))


# ---------------------------------------------------------------------------
# Laplace fit
# ---------------------------------------------------------------------------

@dataclass
class FitOperators:
    """Dense operators kept for posterior recovery and prediction."""

    sigma_u: np.ndarray
    sigma_s: np.ndarray
    chol_b: np.ndarray
    sq_w: np.ndarray
    offset: np.ndarray
    design: np.ndarray | None
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    ids: np.ndarray
    chol_sigma_u: np.ndarray | None = None

    def chol_su(self) -> np.ndarray:
        if self.chol_sigma_u is None:
            self.chol_sigma_u = cholesky(self.sigma_u, jitter=1e-10)
        return self.chol_sigma_u


@dataclass
class FitResult:
    """Gaussian approximation at the posterior mode of the combined latent."""

    kind: str
    u_mode: np.ndarray
    a_mode: np.ndarray           # Sigma_u^{-1} u_mode
    logml: float
    converged: bool
    newton_iterations: int
    kernel: KernelSpec | None = None
    attn_hyper: AttnHyper | None = None
    fixed_effect_sd: float = DEFAULT_FIXED_EFFECT_SD
    beta_hat: np.ndarray | None = None
    beta_sd: np.ndarray | None = None
    psi_trace: list[float] = field(default_factory=list, repr=False)
    ops: FitOperators | None = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "kind": self.kind,
            "log_marginal_likelihood": self.logml,
            "converged": bool(self.converged),
            "newton_iterations": self.newton_iterations,
        }
        if self.kernel is not None:
            k = self.kernel
            out["kernel"] = {"family": k.family, "sigma2": k.sigma2}
            if k.family == "matern":
                out["kernel"].update({"rho": k.rho, "nu": k.nu})
            else:
                out["kernel"].update({"phi_s": k.phi_s, "phi_t": k.phi_t, "gamma": k.gamma})
        if self.attn_hyper is not None:
            h = self.attn_hyper
            out["attention"] = {
                "theta1": h.theta1, "theta2": h.theta2, "tau": h.tau, "beta": h.beta,
            }
        if self.beta_hat is not None:
            out["beta_hat"] = [float(v) for v in self.beta_hat]
            out["beta_sd"] = [float(v) for v in self.beta_sd]
        return out


def _build_sigma_u(data: Dataset, spec: ModelSpec, sigma_s: np.ndarray) -> np.ndarray:
    sigma_u = sigma_s.copy()
    if spec.kind == "mbg":
        d = spec.design
        sigma_u += spec.fixed_effect_sd ** 2 * _syrk(d)
    elif spec.kind == "hybrid":
        fld, hyper = spec.attention
        sigma_u += _attention_cov(fld, hyper)
    # numerical nugget: kernel matrices on near-duplicate points are singular
    sigma_u[np.diag_indices_from(sigma_u)] += DEFAULT_KERNEL_JITTER
    return sigma_u


def laplace_fit(
    data: Dataset,
    spec: ModelSpec,
    *,
    gaussian_response: np.ndarray | None = None,
    gaussian_obs_sd: float | None = None,
    warm_u: np.ndarray | None = None,
    want_operators: bool = False,
    sigma_builder: CovarianceBuilder | None = None,
) -> FitResult:
    """Posterior mode and Gaussian approximation at fixed hyperparameters.

    The observation model is z_i ~ Binomial(n_i, logistic(offset_i + u_i))
    with u ~ N(0, Sigma_u). Passing ``gaussian_response`` (with
    ``gaussian_obs_sd``) swaps in y_i ~ N(offset_i + u_i, sd^2), which is a
    test hook: the mode then has the closed GLS/kriging form.

    Newton iterations stop when the largest update falls below 1e-8 (or at
    100 iterations); the objective is kept non-decreasing by step halving.
    """
    if spec.kind == "gat_only":
        raise ValueError("gat_only is scored directly; nothing to fit")
    if np.any(data.n_tested < 1):
        raise ValueError("all records need n_tested >= 1")

    n = len(data)
    if sigma_builder is None:
        sigma_builder = CovarianceBuilder(data.x, data.y, data.t)
    sigma_s = sigma_builder(spec.kernel)
    sigma_u = _build_sigma_u(data, spec, sigma_s)
    offset = np.zeros(n) if spec.offset is None else np.asarray(spec.offset, float)

    gaussian = gaussian_response is not None
    if gaussian:
        if gaussian_obs_sd is None or gaussian_obs_sd <= 0:
            raise ValueError("gaussian_response requires a positive gaussian_obs_sd")
        y = np.asarray(gaussian_response, float)
        inv_var = 1.0 / gaussian_obs_sd ** 2

        def loglik(eta):
            r = y - eta
            return float(-0.5 * inv_var * r @ r - n * math.log(gaussian_obs_sd * math.sqrt(2 * math.pi)))

        def grad_w(eta):
            return (y - eta) * inv_var, np.full(n, inv_var)
    else:
        z = data.n_pos.astype(float)
        trials = data.n_tested.astype(float)

        def loglik(eta):
            return _binom_loglik(eta, z, trials)

        def grad_w(eta):
            return _binom_grad_w(eta, z, trials)

    chol_su_warm = None
    if warm_u is not None and np.any(warm_u):
        u = np.asarray(warm_u, float).copy()
        chol_su_warm = cholesky(sigma_u, jitter=1e-10)
        a = solve_chol(chol_su_warm, u)
    else:
        u = np.zeros(n)
        a = np.zeros(n)

    psi = loglik(offset + u) - 0.5 * a @ u
    if not np.isfinite(psi):
        raise NewtonDivergence("objective non-finite at the starting point")
    psi_trace = [float(psi)]

    converged = False
    it = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        eta = offset + u
        g, w = grad_w(eta)
        sq_w = np.sqrt(w)
        b_mat = sq_w[:, None] * sigma_u * sq_w[None, :]
        b_mat[np.diag_indices_from(b_mat)] += 1.0
        chol_b = cholesky(b_mat)
        rhs = w * u + g
        t_vec = sigma_u @ rhs
        a_new = rhs - sq_w * solve_chol(chol_b, sq_w * t_vec)
        u_new = sigma_u @ a_new

        # step halving keeps the objective non-decreasing
        step = 1.0
        accepted = False
        slack = 1e-10 * max(1.0, abs(psi))
        for _ in range(31):
            u_try = u + step * (u_new - u)
            a_try = a + step * (a_new - a)
            psi_try = loglik(offset + u_try) - 0.5 * a_try @ u_try
            if np.isfinite(psi_try) and psi_try >= psi - slack:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not np.isfinite(psi_try):
                raise NewtonDivergence(f"non-finite objective at iteration {it}")
            break  # no ascent direction left; treat current point as the mode

        last_step = float(np.max(np.abs(u_try - u)))
        u, a, psi = u_try, a_try, psi_try
        psi_trace.append(float(psi))
        if last_step <= NEWTON_TOL:
            converged = True
            break

    eta = offset + u
    g, w = grad_w(eta)
    if converged and np.max(np.abs(g - a)) > NEWTON_GRAD_TOL:
        converged = False
    sq_w = np.sqrt(w)
    b_mat = sq_w[:, None] * sigma_u * sq_w[None, :]
    b_mat[np.diag_indices_from(b_mat)] += 1.0
    chol_b = cholesky(b_mat)
    logml = psi - float(np.sum(np.log(np.diag(chol_b))))

    result = FitResult(
        kind=spec.kind,
        u_mode=u,
        a_mode=a,
        logml=logml,
        converged=converged,
        newton_iterations=it,
        kernel=spec.kernel,
        attn_hyper=None if spec.attention is None else spec.attention[1],
        fixed_effect_sd=spec.fixed_effect_sd,
        psi_trace=psi_trace,
    )
    if spec.kind == "mbg":
        result.beta_hat = spec.fixed_effect_sd ** 2 * (spec.design.T @ a)
    if want_operators:
        ops = FitOperators(
            sigma_u=sigma_u,
            sigma_s=sigma_s,
            chol_b=chol_b,
            sq_w=sq_w,
            offset=offset,
            design=spec.design,
            x=data.x.copy(),
            y=data.y.copy(),
            t=data.t.copy(),
            ids=data.ids.copy(),
        )
        if chol_su_warm is not None:
            ops.chol_sigma_u = chol_su_warm
        result.ops = ops
        if spec.kind == "mbg":
            # Var(beta | z) = C_beta + R V_u R' with R = sd2 D' Sigma_u^{-1}
            sd2 = spec.fixed_effect_sd ** 2
            d = spec.design
            siu_d = solve_chol(ops.chol_su(), d)
            c_beta = sd2 * np.eye(d.shape[1]) - sd2 ** 2 * (d.T @ siu_d)
            r_mat = sd2 * siu_d.T
            v_u = _posterior_cov_u(ops)
            post = c_beta + r_mat @ v_u @ r_mat.T
            result.beta_sd = np.sqrt(np.maximum(np.diag(post), 0.0))
    return result


def _posterior_cov_u(ops: FitOperators) -> np.ndarray:
    """V_u = Sigma_u - Sigma_u W^1/2 B^{-1} W^1/2 Sigma_u."""
    t_mat = ops.sq_w[:, None] * ops.sigma_u
    return ops.sigma_u - t_mat.T @ solve_chol(ops.chol_b, t_mat)


# ---------------------------------------------------------------------------
# Hyperparameter optimization
# ---------------------------------------------------------------------------

DEFAULT_BOUNDS = {
    "log_sigma2": (math.log(1e-4), math.log(25.0)),
    "log_rho": (math.log(0.01), math.log(10.0)),
    "log_phi_s": (math.log(0.01), math.log(10.0)),
    "log_phi_t": (math.log(0.01), math.log(10.0)),
    "theta1": (-6.0, 10.0),
    "theta2": (-15.0, 15.0),
}

_PENALTY = 1e12


def _param_names(spec: ModelSpec) -> list[str]:
    if spec.kernel.family == "matern":
        names = ["log_sigma2", "log_rho"]
    else:
        names = ["log_sigma2", "log_phi_s", "log_phi_t"]
    if spec.kind == "hybrid":
        names += ["theta1", "theta2"]
    return names


def _spec_from_params(spec: ModelSpec, names: list[str], values: np.ndarray) -> ModelSpec:
    mapping = dict(zip(names, values))
    kernel = spec.kernel
    updates = {}
    if "log_sigma2" in mapping:
        updates["sigma2"] = math.exp(mapping["log_sigma2"])
    if "log_rho" in mapping:
        updates["rho"] = math.exp(mapping["log_rho"])
    if "log_phi_s" in mapping:
        updates["phi_s"] = math.exp(mapping["log_phi_s"])
    if "log_phi_t" in mapping:
        updates["phi_t"] = math.exp(mapping["log_phi_t"])
    if updates:
        kernel = replace(kernel, **updates)
    out = replace(spec, kernel=kernel)
    if spec.kind == "hybrid" and ("theta1" in mapping or "theta2" in mapping):
        fld, hyper = spec.attention
        hyper = AttnHyper(
            theta1=mapping.get("theta1", hyper.theta1),
            theta2=mapping.get("theta2", hyper.theta2),
        )
        out.attention = (fld, hyper)
    return out


def _start_values(spec: ModelSpec, names: list[str]) -> np.ndarray:
    k = spec.kernel
    defaults = {
        "log_sigma2": math.log(k.sigma2),
        "log_rho": math.log(k.rho),
        "log_phi_s": math.log(k.phi_s),
        "log_phi_t": math.log(k.phi_t),
    }
    if spec.kind == "hybrid":
        hyper = spec.attention[1]
        defaults["theta1"] = hyper.theta1
        defaults["theta2"] = hyper.theta2
    return np.array([defaults[n] for n in names])


@dataclass
class OptimizeResult:
    spec: ModelSpec
    fit: FitResult
    trace: list[dict]
    best_restart: int
    n_evaluations: int


def optimize_hyperparameters(
    data: Dataset,
    spec_template: ModelSpec,
    bounds: dict[str, tuple[float, float]] | None = None,
    restarts: int = 1,
    seed: int = 0,
    max_iter: int = 200,
    gaussian_response: np.ndarray | None = None,
    gaussian_obs_sd: float | None = None,
) -> OptimizeResult:
    """Maximize the Laplace log marginal likelihood over the free parameters.

    Free parameters are the keys of ``bounds`` (all the model's natural
    parameters when ``bounds`` is None): logs of the kernel parameters plus
    the attention (theta1, theta2) for hybrid fits. Runs Nelder-Mead from
    the template values and ``restarts - 1`` additional seeded starts drawn
    uniformly inside the bounds; every evaluation lands in the trace.
    """
    if spec_template.kind == "gat_only":
        raise ValueError("gat_only has no hyperparameters")
    all_names = _param_names(spec_template)
    if bounds is None:
        names = all_names
        box = {n: DEFAULT_BOUNDS[n] for n in names}
    else:
        unknown = set(bounds) - set(all_names)
        if unknown:
            raise ValueError(f"not parameters of this model: {sorted(unknown)}")
        names = [n for n in all_names if n in bounds]
        box = dict(bounds)
    lo = np.array([box[n][0] for n in names])
    hi = np.array([box[n][1] for n in names])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
        raise ValueError("bounds must be finite with lo < hi")

    builder = CovarianceBuilder(data.x, data.y, data.t)
    trace: list[dict] = []
    warm: dict = {"u": None}

    def objective(theta: np.ndarray) -> float:
        spec = _spec_from_params(spec_template, names, theta)
        try:
            fit = laplace_fit(
                data, spec,
                gaussian_response=gaussian_response,
                gaussian_obs_sd=gaussian_obs_sd,
                warm_u=warm["u"],
                sigma_builder=builder,
            )
            value = fit.logml
            warm["u"] = fit.u_mode
        except (NotPositiveDefinite, NewtonDivergence):
            value = -_PENALTY
        trace.append({"params": dict(zip(names, map(float, theta))), "logml": float(value)})
        return -value

    best = None
    for restart in range(max(1, restarts)):
        if restart == 0:
            x0 = np.clip(_start_values(spec_template, names), lo + 1e-6, hi - 1e-6)
        else:
            rng = RngStream(seed, 1000 + restart)
            x0 = rng.uniform(lo, hi)
        warm["u"] = None
        res = minimize(
            objective, x0,
            method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"maxiter": max_iter, "xatol": 2e-3, "fatol": 1e-2},
        )
        if np.isfinite(res.fun) and -res.fun > -_PENALTY / 2:
            if best is None or res.fun < best[0]:
                best = (res.fun, res.x.copy(), restart)
    if best is None:
        raise AllRestartsFailed("no restart produced a finite marginal likelihood")

    _, x_best, best_restart = best
    best_spec = _spec_from_params(spec_template, names, x_best)
    fit = laplace_fit(
        data, best_spec,
        gaussian_response=gaussian_response,
        gaussian_obs_sd=gaussian_obs_sd,
        want_operators=True,
        sigma_builder=builder,
    )
    return OptimizeResult(
        spec=best_spec,
        fit=fit,
        trace=trace,
        best_restart=best_restart,
        n_evaluations=len(trace),
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """Per-record predictive summaries of prevalence."""

    ids: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sd_linpred: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _summarize_draws(ids, eta_draws: np.ndarray, level: float) -> Prediction:
    p_draws = logistic(eta_draws)
    alpha = 1.0 - level
    lo, hi = np.quantile(p_draws, [alpha / 2, 1.0 - alpha / 2], axis=1)
    return Prediction(
        ids=np.asarray(ids),
        mean=p_draws.mean(axis=1),
        lo=lo,
        hi=hi,
        sd_linpred=eta_draws.std(axis=1),
    )


def _draw_u(fit: FitResult, n_draws: int, rng: RngStream) -> np.ndarray:
    ops = fit.ops
    v_u = _posterior_cov_u(ops)
    chol_v = cholesky(v_u, jitter=1e-10)
    z = rng.standard_normal((len(fit.u_mode), n_draws))
    return fit.u_mode[:, None] + chol_v @ z


def predict_insample(
    fit: FitResult,
    n_draws: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> Prediction:
    """Predictive summaries at the fitted records themselves."""
    if fit.ops is None:
        raise ValueError("fit was run without operators; refit with want_operators=True")
    rng = RngStream(seed, _STREAM_PREDICT)
    u_draws = _draw_u(fit, n_draws, rng)
    eta = fit.ops.offset[:, None] + u_draws
    return _summarize_draws(fit.ops.ids, eta, level)


def predict(
    fit: FitResult,
    new_data: Dataset,
    n_draws: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    new_offsets: np.ndarray | None = None,
    joint_field: AttentionField | None = None,
    obs_nodes: np.ndarray | None = None,
    new_nodes: np.ndarray | None = None,
) -> Prediction:
    """Joint-conditioning prediction at new records.

    The spatial field is kriged from its posterior draws at the observed
    records; for hybrid fits the attention process is conditioned through
    the precision of the joint observed+new graph (``joint_field`` with
    ``obs_nodes`` / ``new_nodes`` giving each record's row in that field),
    and ``new_offsets`` supplies the new records' logit-scale offsets.
    """
    if fit.ops is None:
        raise ValueError("fit was run without operators; refit with want_operators=True")
    ops = fit.ops
    n_obs = len(fit.u_mode)
    n_new = len(new_data)
    rng = RngStream(seed, _STREAM_PREDICT)

    u_draws = _draw_u(fit, n_draws, rng)

    # spatial field: component draws at observed points, then kriging
    obs_like = Dataset(
        ids=ops.ids, x=ops.x, y=ops.y, t=ops.t,
        n_tested=np.ones(n_obs, dtype=int), n_pos=np.zeros(n_obs, dtype=int),
        covariates=np.zeros((n_obs, 0)),
    )
    k_cross = kernel_matrix(fit.kernel, new_data, obs_like)
    k_new = kernel_matrix(fit.kernel, new_data)
    sigma_s_obs = ops.sigma_s.copy()
    sigma_s_obs[np.diag_indices_from(sigma_s_obs)] += DEFAULT_KERNEL_JITTER
    chol_s_obs = cholesky(sigma_s_obs)
    krig = solve_chol(chol_s_obs, k_cross.T).T            # (n_new, n_obs)
    cond_cov = k_new - krig @ k_cross.T
    chol_cond = cholesky(cond_cov, jitter=DEFAULT_KERNEL_JITTER)

    chol_su = ops.chol_su()
    if fit.kind == "mbg":
        d = ops.design
        sd2 = fit.fixed_effect_sd ** 2
        siu_d = solve_chol(chol_su, d)
        r_beta = sd2 * siu_d.T                             # (q, n_obs)
        c_beta = sd2 * np.eye(d.shape[1]) - sd2 ** 2 * (d.T @ siu_d)
        chol_cbeta = cholesky(c_beta, jitter=1e-12)
        beta_draws = r_beta @ u_draws + chol_cbeta @ rng.standard_normal((d.shape[1], n_draws))
        s_draws = u_draws - d @ beta_draws
        d_new = build_design(new_data)
        eta_new = d_new @ beta_draws
    elif fit.kind == "hybrid":
        if new_offsets is None or joint_field is None or obs_nodes is None or new_nodes is None:
            raise ValueError("hybrid prediction needs new_offsets, joint_field and node indices")
        r_s = solve_chol(chol_su, ops.sigma_s).T           # Sigma_S Sigma_u^{-1}
        c_s = ops.sigma_s - r_s @ ops.sigma_s
        chol_cs = cholesky(c_s, jitter=1e-10)
        s_draws = r_s @ u_draws + chol_cs @ rng.standard_normal((n_obs, n_draws))
        a_draws = u_draws - s_draws

        q_joint = precision(joint_field, fit.attn_hyper)
        q_nn = q_joint[np.ix_(new_nodes, new_nodes)]
        q_no = q_joint[np.ix_(new_nodes, obs_nodes)]
        chol_qnn = cholesky(q_nn)
        cond_mean = -solve_chol(chol_qnn, q_no @ a_draws)
        noise = solve_triangular(
            chol_qnn.T, rng.standard_normal((n_new, n_draws)), lower=False
        )
        eta_new = np.asarray(new_offsets, float)[:, None] + cond_mean + noise
    else:
        raise ValueError("gat_only predictions are produced directly from the network")

    s_new = krig @ s_draws + chol_cond @ rng.standard_normal((n_new, n_draws))
    eta_new = eta_new + s_new
    return _summarize_draws(new_data.ids, eta_new, level)


def gat_only_prediction(ids: np.ndarray, preds: np.ndarray) -> Prediction:
    """Degenerate-interval prediction for a bare network regressor."""
    from .gatv2 import clamp_prevalence

    p = clamp_prevalence(np.asarray(preds, float))
    return Prediction(
        ids=np.asarray(ids), mean=p, lo=p.copy(), hi=p.copy(),
        sd_linpred=np.zeros(len(p)),
    )


def write_prediction_csv(pred: Prediction, path: str | Path) -> None:
    lines = ["id,mean,lo95,hi95,sd_linpred"]
    for i in range(len(pred)):
        lines.append(
            f"{int(pred.ids[i])},{repr(float(pred.mean[i]))},{repr(float(pred.lo[i]))},"
            f"{repr(float(pred.hi[i]))},{repr(float(pred.sd_linpred[i]))}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_prediction_csv(path: str | Path) -> Prediction:
    rows = Path(path).read_text().strip().splitlines()
    if not rows or rows[0] != "id,mean,lo95,hi95,sd_linpred":
        raise ValueError("not a prediction CSV")
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]])
    return Prediction(
        ids=data[:, 0].astype(int), mean=data[:, 1], lo=data[:, 2],
        hi=data[:, 3], sd_linpred=data[:, 4],
    )
