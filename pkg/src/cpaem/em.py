"""Expectation-maximization with exact E-steps and closed-form M-steps.

The E-step freezes the posterior: per region (identified by its activation
code) it stores data-summed posterior statistics.  Every M-step update then
maximizes the frozen objective, in which each region keeps its code and hence
its activation-derivative diagonals while the weights, biases and noise vary.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gaussian
from .errors import InputError, NumericalError, StaleCacheError
from .geometry import Partition, default_radius, enumerate_partition
from .inference import ExactPosterior, PosteriorBatch, PosteriorSummary
from .network import (
    ActivationCode,
    GenerativeNetwork,
    NoiseModel,
    all_partial_affine,
    output_jacobians,
    slope_diagonals,
)

log = logging.getLogger(__name__)

UPDATE_NAMES = ("biases", "weights", "sigma_x", "sigma_z")
EIG_FLOOR = 1e-10


@dataclass
class EmConfig:
    max_iters: int = 50
    nll_tolerance: float = 1e-6
    updates: tuple = ("biases", "weights", "sigma_x")
    layer_order: str = "top-down"
    bounding_radius: float | None = None
    monotonicity_slack: float = 1e-8
    sigma_x_form: str = "isotropic"  # isotropic | diagonal | full
    ridge: float = 1e-9
    max_regions: int = 10**6
    safeguard: bool = True
    max_halvings: int = 10

    def __post_init__(self):
        self.updates = tuple(self.updates)
        unknown = set(self.updates) - set(UPDATE_NAMES)
        if unknown:
            raise InputError(f"unknown update flags {sorted(unknown)}")
        if self.sigma_x_form not in ("isotropic", "diagonal", "full"):
            raise InputError(f"unknown sigma_x form {self.sigma_x_form!r}")
        if self.layer_order not in ("top-down", "bottom-up"):
            raise InputError(f"unknown layer order {self.layer_order!r}")
        if self.max_iters < 0:
            raise InputError("max_iters must be non-negative")


def fingerprint(net: GenerativeNetwork, noise: NoiseModel) -> bytes:
    return net.parameters().tobytes() + noise.fingerprint()


# -- E-step ---------------------------------------------------------------------------

@dataclass
class EStepCache:
    """Frozen posterior of a dataset: per-datum summaries plus per-region sufficient statistics."""

    codes: tuple
    xs: np.ndarray
    batch: PosteriorBatch
    s0: np.ndarray  # (R,)      sum_n e0
    s1: np.ndarray  # (R, S)    sum_n e1
    s2: np.ndarray  # (R, S, S) sum_n E2
    sx0: np.ndarray  # (R, D)   sum_n e0 x
    sx1: np.ndarray  # (R, D, S) sum_n x e1^T
    sxx: np.ndarray  # (R, D, D) sum_n e0 x x^T
    token: bytes = field(repr=False)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def log_marginal(self) -> np.ndarray:
        return self.batch.log_marginal

    def summary(self, n: int) -> PosteriorSummary:
        return self.batch.summary(n, self.codes)

    def check_fresh(self, net: GenerativeNetwork, noise: NoiseModel) -> None:
        if fingerprint(net, noise) != self.token:
            raise StaleCacheError("posterior cache was computed under different parameters")

    def value(self, net: GenerativeNetwork, noise: NoiseModel) -> np.ndarray:
        """Per-datum expected complete log-likelihood under the parameters that produced the cache."""
        self.check_fresh(net, noise)
        return np.array([expected_complete_ll(x, self.summary(i), net, noise) for i, x in enumerate(self.xs)])


def e_step(xs, net: GenerativeNetwork, partition: Partition, noise: NoiseModel,
           posterior: ExactPosterior | None = None) -> EStepCache:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[0] == 0:
        raise InputError("dataset is empty")
    post = posterior or ExactPosterior(net, partition, noise)
    b = post.batch(xs)
    return EStepCache(
        codes=tuple(partition.codes()),
        xs=xs,
        batch=b,
        s0=b.e0.sum(axis=1),
        s1=b.e1.sum(axis=1),
        s2=b.E2.sum(axis=1),
        sx0=b.e0 @ xs,
        sx1=np.einsum("nd,rns->rds", xs, b.e1),
        sxx=np.einsum("rn,nd,ne->rde", b.e0, xs, xs),
        token=fingerprint(net, noise),
    )


def expected_complete_ll(x, summary: PosteriorSummary, net: GenerativeNetwork,
                         noise: NoiseModel) -> float:
    """``E_{z|x}[log p(x|z) + log p(z)]`` in closed form from per-region posterior moments.

    Region maps are rebuilt from the summary's codes with the given network,
    so evaluating with modified parameters yields the frozen-posterior objective.
    """
    x = np.asarray(x, dtype=float)
    s, d = net.latent_dim, net.output_dim
    p = noise.prec_x
    val = -0.5 * ((s + d) * gaussian.LOG_2PI + noise.logdet_x + noise.logdet_z)
    val -= 0.5 * float(np.trace(noise.prec_z @ summary.total_E2))
    val -= 0.5 * float(x @ p @ x)
    px = p @ x
    for code, w, e1, e2 in zip(summary.codes, summary.weights, summary.e1, summary.E2):
        if w == 0.0 and not np.any(e1):
            continue
        mats, vecs = all_partial_affine(net, code)
        a, b = mats[-1], vecs[-1]
        val += float(px @ (a @ e1 + b * w))
        val -= 0.5 * (float(np.sum((a.T @ p @ a) * e2)) + float((w * b + 2.0 * a @ e1) @ p @ b))
    return float(val)


def frozen_objective(cache: EStepCache, net: GenerativeNetwork, noise: NoiseModel) -> float:
    """Dataset sum of :func:`expected_complete_ll` with the cache's posterior held fixed."""
    return float(sum(expected_complete_ll(x, cache.summary(i), net, noise) for i, x in enumerate(cache.xs)))


# -- per-region factors ----------------------------------------------------------------

@dataclass
class _Factors:
    mats: list  # A^{1->l}
    vecs: list  # b^{1->l}
    diags: list  # D^1..D^{L-1}
    jac: list  # M_l = A^{l+1->L} D^l


def _factors(net: GenerativeNetwork, code: ActivationCode) -> _Factors:
    mats, vecs = all_partial_affine(net, code)
    return _Factors(mats, vecs, slope_diagonals(net, code), output_jacobians(net, code))


def _layer_input(f: _Factors, ell: int, s: int):
    """``(K, k)`` with the input of layer ``ell`` equal to ``K z + k`` on the region."""
    if ell == 1:
        return np.eye(s), np.zeros(s)
    dg = f.diags[ell - 2]
    return dg[:, None] * f.mats[ell - 2], dg * f.vecs[ell - 2]


def _live(cache: EStepCache):
    return [r for r in range(len(cache.codes)) if cache.s0[r] > 0.0 or np.any(cache.s1[r])]


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, old: np.ndarray, ridge: float) -> np.ndarray:
    """Solve ``G x = rhs`` with a proximal ridge pulling dead coordinates to ``old``.

    The ridge ``lam`` (scaled by the mean diagonal of ``G``) is applied only to coordinates
    with a zero diagonal, which leaves the live block exact. If the system is still
    singular the ridge is applied to every coordinate.
    """
    dim = gram.shape[0]
    lam = ridge * max(float(np.trace(gram)) / dim, 1.0)
    sym = 0.5 * (gram + gram.T)
    scale = np.max(np.abs(np.diag(sym)), initial=0.0)
    dead = np.abs(np.diag(sym)) <= 1e-300 + 1e-14 * scale
    for mask in (dead.astype(float), np.ones(dim)):
        sys = sym + lam * np.diag(mask)
        try:
            x = np.linalg.solve(sys, rhs + lam * mask * old)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(x)) and np.linalg.cond(sys) < 1e14:
            return x
    try:
        return np.linalg.solve(sym + lam * np.eye(dim), rhs + lam * old)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular M-step system; dead coordinates {np.flatnonzero(dead).tolist()}") from exc


def m_step_bias(ell: int, cache: EStepCache, net: GenerativeNetwork, noise: NoiseModel,
                ridge: float = 1e-9) -> np.ndarray:
    """Maximizer of the frozen objective over the bias of layer ``ell``."""
    p = noise.prec_x
    width = net.layers[ell - 1].width
    gram = np.zeros((width, width))
    rhs = np.zeros(width)
    v_old = net.layers[ell - 1].bias
    for r in _live(cache):
        f = _factors(net, cache.codes[r])
        m = f.jac[ell - 1]
        a, b = f.mats[-1], f.vecs[-1]
        rest = b - m @ v_old
        mp = m.T @ p
        gram += cache.s0[r] * (mp @ m)
        rhs += mp @ (cache.sx0[r] - cache.s0[r] * rest - a @ cache.s1[r])
    return _ridge_solve(gram, rhs, np.asarray(v_old), ridge)


def m_step_weight(ell: int, cache: EStepCache, net: GenerativeNetwork, noise: NoiseModel,
                  ridge: float = 1e-9) -> np.ndarray:
    """Maximizer of the frozen objective over the weight matrix of layer ``ell``."""
    p = noise.prec_x
    w_old = net.layers[ell - 1].weight
    rows, cols = w_old.shape
    s = net.latent_dim
    gram = np.zeros((rows * cols, rows * cols))
    rhs = np.zeros((rows, cols))
    for r in _live(cache):
        f = _factors(net, cache.codes[r])
        m = f.jac[ell - 1]
        kmat, kvec = _layer_input(f, ell, s)
        d = f.vecs[-1] - m @ (w_old @ kvec)
        s0, s1, s2 = cache.s0[r], cache.s1[r], cache.s2[r]
        ks1 = kmat @ s1
        u = kmat @ s2 @ kmat.T + np.outer(ks1, kvec) + np.outer(kvec, ks1) + s0 * np.outer(kvec, kvec)
        y1 = cache.sx1[r] @ kmat.T + np.outer(cache.sx0[r], kvec) - np.outer(d, ks1 + s0 * kvec)
        mp = m.T @ p
        gram += np.kron(u, mp @ m)
        rhs += mp @ y1
    vec = _ridge_solve(gram, rhs.ravel(order="F"), w_old.ravel(order="F"), ridge)
    return vec.reshape((rows, cols), order="F")


def _residual_scatter(cache: EStepCache, net: GenerativeNetwork) -> np.ndarray:
    d = net.output_dim
    out = np.zeros((d, d))
    for r in _live(cache):
        mats, vecs = all_partial_affine(net, cache.codes[r])
        a, b = mats[-1], vecs[-1]
        ax1 = a @ cache.sx1[r].T
        xb = np.outer(cache.sx0[r], b)
        as1b = np.outer(a @ cache.s1[r], b)
        out += (
            cache.sxx[r] - ax1 - ax1.T - xb - xb.T
            + a @ cache.s2[r] @ a.T + as1b + as1b.T + cache.s0[r] * np.outer(b, b)
        )
    return 0.5 * (out + out.T)


def _floor_spd(m: np.ndarray, name: str) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < EIG_FLOOR:
        warnings.warn(f"{name} update had eigenvalue {vals.min():.3g}; floored at {EIG_FLOOR}",
                      RuntimeWarning)
        vals = np.maximum(vals, EIG_FLOOR)
        m = (vecs * vals) @ vecs.T
        m = 0.5 * (m + m.T)
    return m


def m_step_sigma_x(cache: EStepCache, net: GenerativeNetwork, form: str = "full") -> np.ndarray:
    """Maximizer over the observation covariance (full, diagonal or isotropic)."""
    m = _residual_scatter(cache, net) / cache.n
    if form == "isotropic":
        m = float(np.trace(m)) / m.shape[0] * np.eye(m.shape[0])
    elif form == "diagonal":
        m = np.diag(np.diag(m))
    return _floor_spd(m, "sigma_x")


def m_step_sigma_z(cache: EStepCache) -> np.ndarray:
    """Maximizer over the prior covariance: the mean posterior second moment."""
    return _floor_spd(cache.batch.total_E2.sum(axis=0) / cache.n, "sigma_z")


def m_step(cache: EStepCache, net: GenerativeNetwork, noise: NoiseModel, config: EmConfig,
           layers=None):
    """One pass of the selected updates against a single frozen posterior.

    ``layers`` restricts the network updates to the given layer indices.
    """
    order = range(net.depth, 0, -1) if config.layer_order == "top-down" else range(1, net.depth + 1)
    layers = [ell for ell in order if layers is None or ell in layers]
    if "biases" in config.updates:
        for ell in layers:
            net = net.replace_layer(ell, bias=m_step_bias(ell, cache, net, noise, config.ridge))
    if "weights" in config.updates:
        for ell in layers:
            net = net.replace_layer(ell, weight=m_step_weight(ell, cache, net, noise, config.ridge))
    return net, _noise_step(cache, net, noise, config)


def _noise_step(cache, net, noise, config):
    if "sigma_x" in config.updates:
        noise = noise.replace(sigma_x=m_step_sigma_x(cache, net, config.sigma_x_form))
    if "sigma_z" in config.updates:
        noise = noise.replace(sigma_z=m_step_sigma_z(cache))
    return noise


# -- training loop -------------------------------------------------------------------------

@dataclass
class EmResult:
    net: GenerativeNetwork
    noise: NoiseModel
    nll_trace: list
    card_trace: list
    wall_ms: list
    step_sizes: list
    converged: bool


def _radius(config: EmConfig, noise: NoiseModel) -> float:
    return config.bounding_radius if config.bounding_radius is not None else default_radius(noise.sigma_z)


def _evaluate(xs, net, noise, config):
    part = enumerate_partition(net, bounding_radius=_radius(config, noise), max_regions=config.max_regions)
    post = ExactPosterior(net, part, noise)
    cache = e_step(xs, net, part, noise, post)
    return part, cache, float(-np.sum(cache.log_marginal))


def _blend(old: GenerativeNetwork, new: GenerativeNetwork, t: float) -> GenerativeNetwork:
    out = old
    for ell, (lo, ln) in enumerate(zip(old.layers, new.layers), start=1):
        out = out.replace_layer(ell, weight=lo.weight + t * (ln.weight - lo.weight),
                                bias=lo.bias + t * (ln.bias - lo.bias))
    return out


def em_fit(data, net: GenerativeNetwork, noise: NoiseModel, config: EmConfig | None = None,
           callback=None) -> EmResult:
    """Run EM; returns the fitted parameters and the dataset NLL after every iteration.

    The trace starts with the NLL of the initial parameters.  Hidden-layer
    updates maximize the objective with every region's code held fixed, which
    can move region boundaries enough to raise the NLL.  With ``safeguard`` on,
    such a step is halved up to ``max_halvings`` times; if the NLL still rises
    the iteration applies only the last-layer and noise updates, which leave
    every code unchanged and so cannot raise the NLL.  The step taken is
    recorded in ``step_sizes`` (0 marks the fallback).  Any remaining rise
    beyond ``monotonicity_slack`` raises :class:`NumericalError`.
    """
    config = config or EmConfig()
    xs = np.atleast_2d(np.asarray(data, dtype=float))
    if xs.shape[0] == 0:
        raise InputError("dataset is empty")
    if xs.shape[1] != net.output_dim:
        raise InputError(f"data has {xs.shape[1]} columns, network outputs {net.output_dim}")
    t0 = time.perf_counter()
    part, cache, nll = _evaluate(xs, net, noise, config)
    nll_trace, card_trace, wall, steps = [nll], [len(part)], [0.0], [1.0]
    if callback:
        callback(0, nll, len(part))
    converged = False
    slack = config.monotonicity_slack
    for it in range(1, config.max_iters + 1):
        new_net, new_noise = m_step(cache, net, noise, config)
        new_part, new_cache, new_nll = _evaluate(xs, new_net, new_noise, config)
        step = 1.0
        if new_nll > nll + slack and config.safeguard:
            target = new_net
            for _ in range(config.max_halvings):
                step *= 0.5
                new_net = _blend(net, target, step)
                new_noise = _noise_step(cache, new_net, noise, config)
                new_part, new_cache, new_nll = _evaluate(xs, new_net, new_noise, config)
                if new_nll <= nll + slack:
                    break
            else:
                step = 0.0
                new_net, new_noise = m_step(cache, net, noise, config, layers=(net.depth,))
                new_part, new_cache, new_nll = _evaluate(xs, new_net, new_noise, config)
            log.info("iteration %d: backtracked to step %g", it, step)
        if new_nll > nll + slack:
            raise NumericalError(
                f"NLL increased at iteration {it}: {nll!r} -> {new_nll!r} "
                f"(regions {len(part)} -> {len(new_part)}, step {step})"
            )
        delta = nll - new_nll
        net, noise, part, cache, nll = new_net, new_noise, new_part, new_cache, new_nll
        nll_trace.append(nll)
        card_trace.append(len(part))
        wall.append((time.perf_counter() - t0) * 1e3)
        steps.append(step)
        log.info("iteration %d nll %.12g regions %d", it, nll, len(part))
        if callback:
            callback(it, nll, len(part))
        if delta < config.nll_tolerance:
            converged = True
            break
    return EmResult(net, noise, nll_trace, card_trace, wall, steps, converged)
