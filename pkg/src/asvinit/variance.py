"""Pooling variance constants, signal-variance recursions, initialization methods.

Forward recursion (pre-activation variance, layer ell):

    q_ell = sigma_b^2 + sigma_w^2 * q_{ell-1} * tau_{ell-1} * eps_ell / M'_ell

Backward recursion (gradient variance at the pooled signal):

    r_{ell-1} = sigma_w^2 * r_ell * gamma_ell * eps_ell / M_{ell-1}

tau is the second moment of a ReLU+pool output relative to its pre-activation
variance; gamma the expected squared gradient of the pool+ReLU composite.
The input "layer 0" carries tau_0 = 1 by default: network inputs are raw
signals, not ReLU outputs, so their full second moment propagates.  Layers
with Identity activation use tau = gamma = 1 (no ReLU halving).
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import arch as arch_mod
from . import shapes as shapes_mod
from .errors import AsvinitError, QuadratureFailure

MAX = arch_mod.MAX
AVERAGE = arch_mod.AVERAGE
NO_POOL = "NoPool"

XAVIER = "xavier"
KAIMING_FORWARD = "kaiming-forward"
KAIMING_BACKWARD = "kaiming-backward"
ASV_FORWARD = "asv-forward"
ASV_BACKWARD = "asv-backward"
METHODS = (XAVIER, KAIMING_FORWARD, KAIMING_BACKWARD, ASV_FORWARD, ASV_BACKWARD)

_GAMMA_FLOOR = 1e-12


@dataclass(frozen=True)
class PoolConstants:
    kind: str
    t: int
    tau: float
    gamma: float


_tau_cache: dict[tuple[str, int], float] = {}
_tau_lock = threading.Lock()
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)

# integrand tail above 12 is below 1e-28 and dropped
_UPPER = 12.0


def _tau_max_integral(t):
    """T * integral_0^inf s^2 phi(s) Phi(s)^(T-1) ds by composite
    Gauss-Legendre on [0, 12], panels doubled until successive estimates
    agree to 1e-10."""
    prev = None
    diff = math.inf
    panels = 1
    while panels <= 4096:
        edges = np.linspace(0.0, _UPPER, panels + 1)
        half = (edges[1] - edges[0]) / 2.0
        mids = (edges[:-1] + edges[1:]) / 2.0
        x = (mids[:, None] + half * _GL_NODES[None, :]).ravel()
        phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        integrand = x * x * phi * ndtr(x) ** (t - 1)
        value = t * half * float(np.dot(np.tile(_GL_WEIGHTS, panels), integrand))
        if prev is not None:
            diff = abs(value - prev)
            if diff < 1e-10:
                return value
        prev = value
        panels *= 2
    if diff <= 1e-9:
        return prev
    raise QuadratureFailure(
        f"max-pool constant for T={t}: error estimate {diff:.2e} exceeds 1e-9"
    )


def tau(kind, t):
    """Forward second-moment factor of a ReLU+pool composite."""
    if t < 1:
        raise ValueError(f"pool cardinality must be >= 1, got {t}")
    if kind in (None, NO_POOL):
        return 0.5
    if kind == AVERAGE:
        return (1.0 / (2.0 * t)) * (1.0 + (t - 1) / math.pi)
    if kind == MAX:
        key = (MAX, t)
        with _tau_lock:
            if key in _tau_cache:
                return _tau_cache[key]
        value = _tau_max_integral(t)
        with _tau_lock:
            _tau_cache[key] = value
        return value
    raise ValueError(f"unknown pool kind {kind!r}")


def gamma(kind, t):
    """Backward squared-gradient factor of a ReLU+pool composite."""
    if t < 1:
        raise ValueError(f"pool cardinality must be >= 1, got {t}")
    if kind in (None, NO_POOL):
        return 0.5
    if kind == AVERAGE:
        return 1.0 / (2.0 * t * t)
    if kind == MAX:
        # (2^T - 1) / (T 2^T), computed without overflow for large T
        return (1.0 - 2.0 ** (-t)) / t
    raise ValueError(f"unknown pool kind {kind!r}")


def layer_constants(geo: shapes_mod.LayerShape) -> PoolConstants:
    """Constants of one layer's activation+pool composite.

    Identity activation drops the ReLU factor entirely: tau = gamma = 1.
    """
    if geo.activation == arch_mod.IDENTITY:
        return PoolConstants(kind=geo.pool_kind or NO_POOL, t=geo.t, tau=1.0, gamma=1.0)
    kind = geo.pool_kind or NO_POOL
    return PoolConstants(kind=kind, t=geo.t, tau=tau(kind, geo.t), gamma=gamma(kind, geo.t))


# ---------------------------------------------------------------------------
# Initialization plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanRow:
    ell: int
    sigma_w: float
    sigma_b: float
    tau: float          # this layer's own composite constant
    gamma: float
    epsilon: int
    m_prev: int
    m_prime: int
    m: int
    s_len: int
    j_len: int
    t: int
    clamped: bool
    q_pred: float
    r_pred: float


@dataclass(frozen=True)
class InitPlan:
    """Per-layer weight std deviations for one method, plus the variance
    levels the recursions predict under this plan."""

    method: str
    arch_name: str
    tau0: float
    clamp_factor: float | None
    rows: tuple[PlanRow, ...]

    @property
    def sigma_w(self):
        return np.array([r.sigma_w for r in self.rows])

    @property
    def sigma_b(self):
        return np.array([r.sigma_b for r in self.rows])

    def _row_dicts(self):
        out = []
        for r in self.rows:
            out.append({
                "layer": r.ell, "method": self.method,
                "sigma_w": repr(r.sigma_w), "sigma_b": repr(r.sigma_b),
                "tau": repr(r.tau), "gamma": repr(r.gamma),
                "epsilon": r.epsilon, "M": r.m, "M_prime": r.m_prime,
                "q_pred": repr(r.q_pred), "r_pred": repr(r.r_pred),
                "clamped": r.clamped,
            })
        return out

    def to_csv(self):
        buf = io.StringIO()
        cols = ("layer", "method", "sigma_w", "sigma_b", "tau", "gamma",
                "epsilon", "M", "M_prime", "q_pred", "r_pred", "clamped")
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self._row_dicts():
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self):
        rows = []
        for r in self.rows:
            rows.append({
                "layer": r.ell, "sigma_w": r.sigma_w, "sigma_b": r.sigma_b,
                "tau": r.tau, "gamma": r.gamma, "epsilon": r.epsilon,
                "M_prev": r.m_prev, "M": r.m, "M_prime": r.m_prime,
                "S": r.s_len, "J": r.j_len, "T": r.t,
                "q_pred": r.q_pred, "r_pred": r.r_pred, "clamped": r.clamped,
            })
        return json.dumps({
            "method": self.method, "arch": self.arch_name, "tau0": self.tau0,
            "clamp_factor": self.clamp_factor, "layers": rows,
        }, indent=2)


def _taus_before(geo, tau0):
    """tau_{ell-1} for each layer ell = 1..L."""
    out = [tau0]
    for row in geo[:-1]:
        out.append(layer_constants(row).tau)
    return out


def predict_forward(geo, sigma_w, sigma_b=None, q0=1.0, tau0=1.0):
    """Forward variance levels q[0..L] under per-layer weight std devs."""
    levels = [float(q0)]
    taus = _taus_before(geo, tau0)
    for i, row in enumerate(geo):
        sb2 = 0.0 if sigma_b is None else float(sigma_b[i]) ** 2
        q = sb2 + float(sigma_w[i]) ** 2 * levels[-1] * taus[i] * row.epsilon / row.m_prime
        levels.append(q)
    return np.array(levels)


def predict_backward(geo, sigma_w, rL=1.0):
    """Backward variance levels r[0..L] under per-layer weight std devs."""
    levels = [float(rL)]
    for i in range(len(geo) - 1, -1, -1):
        row = geo[i]
        g = layer_constants(row).gamma
        r = float(sigma_w[i]) ** 2 * levels[0] * g * row.epsilon / row.m_prev
        levels.insert(0, r)
    return np.array(levels)


def init_plan(method, arch, geo=None, clamp_factor=3.0, tau0=1.0,
              clamp_mode="variance", q0=1.0, rL=1.0) -> InitPlan:
    """Compute the per-layer weight variances for one initialization method.

    clamp_factor applies to asv-backward only: the variance is capped at
    clamp_factor times the value derived with the pooling factor replaced by
    the plain-ReLU 1/2.  Pass clamp_factor=None to disable.  clamp_mode
    chooses whether the cap multiplies variances ("variance", default) or
    std deviations ("stddev").
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if clamp_mode not in ("variance", "stddev"):
        raise ValueError(f"clamp_mode must be 'variance' or 'stddev', got {clamp_mode!r}")
    if geo is None:
        geo = shapes_mod.infer_shapes(arch)
    taus = _taus_before(geo, tau0)

    variances = []
    clamped_flags = []
    for i, row in enumerate(geo):
        consts = layer_constants(row)
        clamped = False
        if method == ASV_FORWARD:
            if taus[i] < _GAMMA_FLOOR:
                raise AsvinitError(f"layer {row.ell}: tau below {_GAMMA_FLOOR}")
            var = row.m_prime / (taus[i] * row.epsilon)
        elif method == ASV_BACKWARD:
            if consts.gamma < _GAMMA_FLOOR:
                raise AsvinitError(f"layer {row.ell}: gamma below {_GAMMA_FLOOR}")
            var = row.m_prev / (consts.gamma * row.epsilon)
            if clamp_factor is not None:
                no_pool = row.m_prev / (0.5 * row.epsilon)
                factor = clamp_factor if clamp_mode == "variance" else clamp_factor ** 2
                cap = factor * no_pool
                if var > cap:
                    var = cap
                    clamped = True
        elif method == KAIMING_FORWARD:
            var = 2.0 / row.s_len
        elif method == KAIMING_BACKWARD:
            var = 2.0 / row.j_len
        else:  # xavier
            var = 2.0 / (row.s_len + row.j_len)
        variances.append(var)
        clamped_flags.append(clamped)

    sigma_w = np.sqrt(variances)
    q = predict_forward(geo, sigma_w, q0=q0, tau0=tau0)
    r = predict_backward(geo, sigma_w, rL=rL)
    rows = []
    for i, row in enumerate(geo):
        consts = layer_constants(row)
        rows.append(PlanRow(
            ell=row.ell, sigma_w=float(sigma_w[i]), sigma_b=0.0,
            tau=consts.tau, gamma=consts.gamma, epsilon=row.epsilon,
            m_prev=row.m_prev, m_prime=row.m_prime, m=row.m,
            s_len=row.s_len, j_len=row.j_len, t=row.t,
            clamped=clamped_flags[i], q_pred=float(q[i + 1]), r_pred=float(r[i]),
        ))
    return InitPlan(
        method=method, arch_name=arch.name, tau0=tau0,
        clamp_factor=clamp_factor if method == ASV_BACKWARD else None,
        rows=tuple(rows),
    )


def plan_from_sigmas(arch, sigma_w, geo=None, tau0=1.0, q0=1.0, rL=1.0,
                     label="override") -> InitPlan:
    """Wrap explicit per-layer std devs in an InitPlan (for overrides)."""
    if geo is None:
        geo = shapes_mod.infer_shapes(arch)
    sigma_w = np.asarray(sigma_w, dtype=float)
    if sigma_w.shape != (len(geo),):
        raise ValueError(
            f"expected {len(geo)} sigma values, got shape {sigma_w.shape}"
        )
    if not np.all(np.isfinite(sigma_w)) or np.any(sigma_w < 0):
        raise ValueError("sigma values must be finite and non-negative")
    q = predict_forward(geo, sigma_w, q0=q0, tau0=tau0)
    r = predict_backward(geo, sigma_w, rL=rL)
    rows = []
    for i, row in enumerate(geo):
        consts = layer_constants(row)
        rows.append(PlanRow(
            ell=row.ell, sigma_w=float(sigma_w[i]), sigma_b=0.0,
            tau=consts.tau, gamma=consts.gamma, epsilon=row.epsilon,
            m_prev=row.m_prev, m_prime=row.m_prime, m=row.m,
            s_len=row.s_len, j_len=row.j_len, t=row.t,
            clamped=False, q_pred=float(q[i + 1]), r_pred=float(r[i]),
        ))
    return InitPlan(method=label, arch_name=arch.name, tau0=tau0,
                    clamp_factor=None, rows=tuple(rows))
