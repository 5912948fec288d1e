"""Differentiable forward model, surrogate loss and Adam calibration.

The differentiable path is closed-form exposure (``A = 0``), Mack rate and
vertical development.  Gradients are propagated by hand through each stage
(reverse mode), so no autodiff framework is needed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .develop import MackParams, inflection_a, vertical_front
from .errors import InvalidArgument, NumericalError
from .evalkit import best_threshold
from .exposure import ExposureParams
from .grids import BinaryImage, Field2D

log = logging.getLogger(__name__)

PARAM_NAMES = ("B", "C_eff", "m_th", "r_max", "r_min", "t_dev", "tau", "s")
DEFAULT_CALIBRATABLE = frozenset({"B", "C_eff", "m_th", "r_max", "r_min", "t_dev", "tau"})
BCE_EPS = 1e-7

# (lower, upper) projection bounds applied after every optimizer step
DOMAINS = {
    "B": (0.0, math.inf),
    "C_eff": (1e-6, math.inf),
    "m_th": (1e-4, 1.0 - 1e-4),
    "r_max": (1e-9, math.inf),
    "r_min": (0.0, math.inf),
    "t_dev": (1e-9, math.inf),
    "tau": (1e-4, 1.0 - 1e-4),
    "s": (1e-6, math.inf),
}

# rows per chunk keep the (nz, rows, width) temporaries near 4M elements
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class ResistParams:
    """Full parameter set: exposure, development, threshold and sharpness."""

    exposure: ExposureParams = field(default_factory=ExposureParams)
    mack: MackParams = field(default_factory=MackParams)
    tau: float = 0.5
    s: float = 6.0
    calibratable: frozenset = DEFAULT_CALIBRATABLE

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InvalidArgument(f"tau must lie in (0, 1), got {self.tau}")
        if not self.s > 0:
            raise InvalidArgument(f"sharpness s must be positive, got {self.s}")
        unknown = set(self.calibratable) - set(PARAM_NAMES)
        if unknown:
            raise InvalidArgument(f"unknown calibratable parameters: {sorted(unknown)}")
        object.__setattr__(self, "calibratable", frozenset(self.calibratable))

    def get(self, name: str) -> float:
        if name in ("B", "C_eff"):
            return getattr(self.exposure, name)
        if name in ("m_th", "r_max", "r_min", "t_dev"):
            return getattr(self.mack, name)
        if name in ("tau", "s"):
            return getattr(self, name)
        raise KeyError(name)

    def values(self) -> dict[str, float]:
        return {name: float(self.get(name)) for name in PARAM_NAMES}

    def with_values(self, updates: Mapping[str, float]) -> "ResistParams":
        exp_kw = {k: float(v) for k, v in updates.items() if k in ("B", "C_eff")}
        mack_kw = {k: float(v) for k, v in updates.items() if k in ("m_th", "r_max", "r_min", "t_dev")}
        top_kw = {k: float(v) for k, v in updates.items() if k in ("tau", "s")}
        unknown = set(updates) - set(PARAM_NAMES)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        return replace(self, exposure=replace(self.exposure, **exp_kw),
                       mack=replace(self.mack, **mack_kw), **top_kw)


def default_params(alpha_per_um: float = 6.186, t_dev: float = 60.0, **overrides) -> ResistParams:
    """Initial guess used when nothing better is known.

    ``r_max * t_dev`` is twice the film thickness and ``r_min`` one percent of
    ``r_max``, so the model can both clear and retain resist.
    """
    thickness = 75.0
    r_max = 2.0 * thickness / t_dev
    base = ResistParams(
        exposure=ExposureParams(A=0.0, B=alpha_per_um * 1e-3, C_eff=1.0, thickness_nm=thickness, nz=26),
        mack=MackParams(n=5, m_th=0.5, r_max=r_max, r_min=0.01 * r_max, t_dev=t_dev),
        tau=0.5,
        s=6.0,
    )
    return base.with_values(overrides) if overrides else base


@dataclass(frozen=True)
class CalibRecord:
    """One aerial/wafer training pair."""

    aerial: Field2D
    wafer: BinaryImage
    split: str = "calibration"
    tile_id: str = ""

    def __post_init__(self):
        if self.aerial.shape != self.wafer.shape or self.aerial.pitch_nm != self.wafer.pitch_nm:
            raise InvalidArgument("aerial and wafer must share shape and pitch")
        if self.split not in ("calibration", "test"):
            raise InvalidArgument(f"split must be 'calibration' or 'test', got {self.split!r}")


def _require_differentiable(params: ResistParams):
    if params.exposure.A != 0:
        raise InvalidArgument("the differentiable path requires A == 0")


def _depth_rows(r: np.ndarray, params: ResistParams) -> np.ndarray:
    ex, mk = params.exposure, params.mack
    atten = np.exp(-ex.B * ex.z_nm())[:, None, None]
    m = np.exp(-ex.C_eff * r[None] * atten)
    a = inflection_a(mk.n, mk.m_th)
    un = (1.0 - m) ** mk.n
    rate = mk.r_max * (a + 1.0) * un / (a + un) + mk.r_min
    return vertical_front(rate, ex.dz_nm, mk.t_dev).depth


def forward_depth(aerial: Field2D, params: ResistParams) -> Field2D:
    """Normalized developed depth for an aerial image (differentiable path)."""
    _require_differentiable(params)
    r = aerial.values
    if np.any(r < 0):
        raise InvalidArgument("aerial intensity must be non-negative")
    rows = max(1, _CHUNK_ELEMENTS // (params.exposure.nz * aerial.width))
    out = np.empty(r.shape)
    for start in range(0, aerial.height, rows):
        out[start:start + rows] = _depth_rows(r[start:start + rows], params)
    return Field2D(out, aerial.pitch_nm)


def _bce_terms(depth: np.ndarray, wafer: np.ndarray, tau: float, s: float):
    x = s * (depth - tau)
    p = expit(x)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -(wafer * np.log(pc) + (1.0 - wafer) * np.log1p(-pc))
    # clipping flattens the loss, so its derivative vanishes there
    dldx = np.where((p > BCE_EPS) & (p < 1.0 - BCE_EPS), p - wafer, 0.0)
    return per_pixel, dldx


def soft_loss(depth: Field2D, wafer: BinaryImage, tau: float, s: float) -> float:
    """Mean binary cross-entropy of ``sigmoid(s (depth - tau))`` against the wafer."""
    if depth.shape != wafer.shape:
        raise InvalidArgument(f"shape mismatch: depth {depth.shape} vs wafer {wafer.shape}")
    per_pixel, _ = _bce_terms(depth.values, wafer.values.astype(np.float64), tau, s)
    return float(per_pixel.mean())


def loss_and_grad(record: CalibRecord, params: ResistParams) -> tuple[float, dict[str, float]]:
    """Surrogate loss of one record and its gradient w.r.t. every parameter.

    Frozen parameters report a zero gradient.
    """
    _require_differentiable(params)
    ex, mk = params.exposure, params.mack
    r = record.aerial.values
    w = record.wafer.values.astype(np.float64)
    npix = r.size
    nz, dz, n = ex.nz, ex.dz_nm, mk.n
    thickness = (nz - 1) * dz

    # forward, keeping intermediates
    z = ex.z_nm()[:, None, None]
    atten = np.exp(-ex.B * z)
    dose = r[None] * atten
    m = np.exp(-ex.C_eff * dose)
    u = 1.0 - m
    un = u ** n
    a = inflection_a(n, mk.m_th)
    denom = a + un
    g = (a + 1.0) * un / denom
    rate = mk.r_max * g + mk.r_min
    sol = vertical_front(rate, dz, mk.t_dev)
    depth = sol.depth

    per_pixel, dldx = _bce_terms(depth, w, params.tau, params.s)
    loss = float(per_pixel.mean())
    dldx /= npix

    grads = {name: 0.0 for name in PARAM_NAMES}
    grads["tau"] = float(-params.s * dldx.sum())
    grads["s"] = float((dldx * (depth - params.tau)).sum())

    # cleared columns sit on the clamp at full depth: zero sensitivity
    active = sol.cell >= 0
    dldd = np.where(active, params.s * dldx, 0.0)
    k = np.maximum(sol.cell, 0)
    inv = np.where(active, 1.0 / (sol.front_slowness * thickness), 0.0)
    grads["t_dev"] = float((dldd * inv).sum())

    # d depth / d slowness_j, scaled by dL/d depth
    off = sol.offset_nm
    j = np.arange(nz)[:, None, None]
    kk = k[None]
    trap = np.where(j < kk, dz, 0.0)
    trap[0] *= 0.5
    trap += np.where((j == kk) & (kk > 0), 0.5 * dz, 0.0)
    local = np.where(j == kk, off - off * off / (2.0 * dz), 0.0)
    local += np.where(j == kk + 1, off * off / (2.0 * dz), 0.0)
    adj_q = -(trap + local) * (dldd * inv)[None]

    q = 1.0 / rate
    adj_r = -adj_q * q * q
    grads["r_max"] = float((adj_r * g).sum())
    grads["r_min"] = float(adj_r.sum())
    dr_da = mk.r_max * un * (un - 1.0) / (denom * denom)
    da_dmth = -(n + 1) / (n - 1) * n * (1.0 - mk.m_th) ** (n - 1)
    grads["m_th"] = float((adj_r * dr_da).sum() * da_dmth)
    dr_dm = -mk.r_max * (a + 1.0) * n * u ** (n - 1) * a / (denom * denom)
    adj_m = adj_r * dr_dm
    grads["C_eff"] = float(-(adj_m * m * dose).sum())
    grads["B"] = float((adj_m * m * ex.C_eff * dose * z).sum())

    for name in PARAM_NAMES:
        if name not in params.calibratable:
            grads[name] = 0.0
    return loss, grads


def grad_params(record: CalibRecord, params: ResistParams) -> dict[str, float]:
    """Gradient of the surrogate loss w.r.t. each parameter (zero if frozen)."""
    return loss_and_grad(record, params)[1]


@dataclass
class Schedule:
    """Adam settings and the step-decay learning-rate schedule."""

    lr: float = 1e-2
    decay: float = 0.3
    decay_every: int = 3
    epochs: int = 9
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        return self.lr * self.decay ** ((epoch - 1) // self.decay_every)


@dataclass
class AdamState:
    """Moment accumulators, kept in scaled coordinates ``value / scale``."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, float] = field(default_factory=dict)
    v: dict[str, float] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)


def adam_step(params: ResistParams, grads: Mapping[str, float],
              state: AdamState) -> tuple[ResistParams, AdamState]:
    """One bias-corrected Adam update followed by projection onto valid domains.

    Each parameter is stepped in units of its ``state.scales`` entry (1 when
    absent), which is a fixed diagonal preconditioner.
    """
    names = sorted(params.calibratable)
    for name in names:
        if not math.isfinite(grads.get(name, 0.0)):
            raise NumericalError(f"non-finite gradient for {name}: {grads[name]}")
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    updates = {}
    for name in names:
        scale = state.scales.get(name, 1.0)
        g = grads.get(name, 0.0) * scale
        m[name] = state.beta1 * m.get(name, 0.0) + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        delta = state.lr * (m[name] / bc1) / (math.sqrt(v[name] / bc2) + state.eps)
        lo, hi = DOMAINS[name]
        updates[name] = min(max(params.get(name) - delta * scale, lo), hi)
    new_state = replace(state, step=step, m=m, v=v)
    return params.with_values(updates), new_state


def batch_loss_and_grad(records: Sequence[CalibRecord],
                        params: ResistParams) -> tuple[float, dict[str, float]]:
    """Mean loss and mean gradient over a batch of records."""
    total = 0.0
    acc = {name: 0.0 for name in PARAM_NAMES}
    for rec in records:
        loss, grads = loss_and_grad(rec, params)
        total += loss
        for name, val in grads.items():
            acc[name] += val
    count = len(records)
    return total / count, {name: val / count for name, val in acc.items()}


def dataset_loss(records: Iterable[CalibRecord], params: ResistParams) -> float:
    losses = [soft_loss(forward_depth(r.aerial, params), r.wafer, params.tau, params.s)
              for r in records]
    return float(np.mean(losses))


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    batch: int
    loss: float
    lr: float


@dataclass(frozen=True)
class CalibrationResult:
    params: ResistParams
    trace: list[TraceRow]
    epoch_losses: list[float]
    best_epoch: int
    best_loss: float
    tau_adam: float | None = None


def default_scales(params: ResistParams) -> dict[str, float]:
    """Step scale per parameter: its own magnitude, or 1 for unit-interval ones."""
    scales = {}
    for name in params.calibratable:
        if name in ("m_th", "tau"):
            scales[name] = 1.0
        else:
            scales[name] = abs(params.get(name)) or 1.0
    return scales


def refine_tau(records: Sequence[CalibRecord], params: ResistParams) -> ResistParams:
    """Set ``tau`` to the exact minimizer of the pixel mismatch on ``records``.

    For fixed model parameters the thresholded objective is piecewise
    constant in ``tau``, so every cut between distinct depth values is tried.
    """
    depth = np.concatenate([forward_depth(r.aerial, params).values.ravel() for r in records])
    label = np.concatenate([r.wafer.values.ravel() for r in records])
    cut, _ = best_threshold(depth, label)
    lo, hi = DOMAINS["tau"]
    return params.with_values({"tau": min(max(cut, lo), hi)})


def calibrate(dataset: Sequence[CalibRecord], init: ResistParams,
              schedule: Schedule | None = None, seed: int = 0,
              scales: Mapping[str, float] | None = None,
              polish_tau: bool = True) -> CalibrationResult:
    """Mini-batch Adam over the calibration split.

    Keeps the parameters with the lowest epoch loss.  An epoch's loss is the
    mean of its batch losses, each measured before that batch's update; the
    parameters after the final update are scored on the whole split too.
    With ``polish_tau`` (and ``tau`` calibratable) the kept threshold is then
    replaced by the exact pixel-mismatch minimizer from :func:`refine_tau`.
    """
    schedule = schedule or Schedule()
    calib = [r for r in dataset if r.split == "calibration"]
    if not calib:
        raise InvalidArgument("calibration split is empty")
    if not init.calibratable:
        raise InvalidArgument("no calibratable parameters")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps,
                      scales=dict(scales) if scales is not None else default_scales(init))
    params = init
    trace: list[TraceRow] = []
    epoch_losses: list[float] = []
    candidates: list[tuple[float, int, ResistParams]] = []
    for epoch in range(1, schedule.epochs + 1):
        state.lr = schedule.lr_at(epoch)
        start = params
        order = rng.permutation(len(calib))
        batch_losses = []
        for b, lo in enumerate(range(0, len(calib), schedule.batch_size)):
            batch = [calib[i] for i in order[lo:lo + schedule.batch_size]]
            loss, grads = batch_loss_and_grad(batch, params)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            trace.append(TraceRow(epoch, b, loss, state.lr))
            batch_losses.append(loss)
            params, state = adam_step(params, grads, state)
        epoch_loss = float(np.mean(batch_losses))
        epoch_losses.append(epoch_loss)
        candidates.append((epoch_loss, epoch, start))
        log.info("epoch %d loss %.6f lr %.2e", epoch, epoch_loss, state.lr)
    final_loss = dataset_loss(calib, params)
    candidates.append((final_loss, schedule.epochs + 1, params))
    best_loss, best_epoch, best = min(candidates, key=lambda c: (c[0], c[1]))
    tau_adam = None
    if polish_tau and "tau" in best.calibratable and schedule.lr > 0:
        tau_adam = best.tau
        best = refine_tau(calib, best)
    return CalibrationResult(best, trace, epoch_losses, best_epoch, best_loss, tau_adam)
