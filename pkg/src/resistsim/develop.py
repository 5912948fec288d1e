"""Mack development rate and developer front propagation.

Two front solvers are provided.  :func:`develop_vertical` integrates the
slowness ``1/r`` straight down each column, which is cheap and
differentiable.  :func:`develop_fmm` solves the Eikonal equation
``|grad T| = 1/r`` by fast marching, letting the front undercut laterally.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import InvalidArgument
from .grids import Field2D, Field3D

M_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MackParams:
    """Development kinetics; rates in nm/s, time in s."""

    n: int = 5
    m_th: float = 0.5
    r_max: float = 2.5
    r_min: float = 0.025
    t_dev: float = 60.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise InvalidArgument(f"reaction order n must be an integer >= 2, got {self.n}")
        if not 0.0 < self.m_th < 1.0:
            raise InvalidArgument(f"m_th must lie in (0, 1), got {self.m_th}")
        if not self.r_max > 0:
            raise InvalidArgument(f"r_max must be positive, got {self.r_max}")
        if self.r_min < 0:
            raise InvalidArgument(f"r_min must be >= 0, got {self.r_min}")
        if not self.t_dev > 0:
            raise InvalidArgument(f"t_dev must be positive, got {self.t_dev}")


def inflection_a(n: int, m_th: float) -> float:
    """Rate-curve constant placing the inflection of r(M) at ``m_th``."""
    if int(n) != n or n < 2:
        raise InvalidArgument(f"n must be an integer >= 2, got {n}")
    if not 0.0 < m_th < 1.0:
        raise InvalidArgument(f"m_th must lie in (0, 1), got {m_th}")
    return (n + 1) / (n - 1) * (1.0 - m_th) ** n


def _clamped_inhibitor(m: np.ndarray) -> np.ndarray:
    if np.any(m < -M_TOLERANCE) or np.any(m > 1.0 + M_TOLERANCE):
        raise InvalidArgument("inhibitor concentration must lie in [0, 1]")
    return np.clip(m, 0.0, 1.0)


def mack_rate_values(m: np.ndarray, p: MackParams) -> np.ndarray:
    a = inflection_a(p.n, p.m_th)
    un = (1.0 - _clamped_inhibitor(m)) ** p.n
    return p.r_max * (a + 1.0) * un / (a + un) + p.r_min


def mack_rate(M: Field3D, p: MackParams) -> Field3D:
    """Pointwise development rate; ``r(1) = r_min`` and ``r(0) = r_max + r_min``."""
    return Field3D(mack_rate_values(M.values, p), M.pitch_nm, M.dz_nm)


class VerticalSolution(NamedTuple):
    """Per-column state of the vertical solver, kept for differentiation.

    ``cell`` is the slab holding the front (``-1`` where the column cleared),
    ``offset_nm`` the front position inside it and ``front_slowness`` the
    interpolated slowness at the front.
    """

    depth: np.ndarray
    arrival: np.ndarray
    cell: np.ndarray
    offset_nm: np.ndarray
    front_slowness: np.ndarray


def vertical_front(rate: np.ndarray, dz: float, t_dev: float) -> VerticalSolution:
    """Locate the developer front in every column of a rate volume.

    The slowness ``q = 1/r`` is interpolated linearly between slices, so the
    arrival time is the trapezoidal integral at the slices and a quadratic
    inside each slab.  The front offset solves that quadratic exactly, which
    keeps depth continuously differentiable in the inputs.
    """
    nz = rate.shape[0]
    thickness = (nz - 1) * dz
    q = 1.0 / rate
    arrival = np.zeros_like(q)
    np.cumsum(0.5 * dz * (q[1:] + q[:-1]), axis=0, out=arrival[1:])

    # slab k holds the front when arrival[k] <= t_dev < arrival[k + 1]
    reached = np.count_nonzero(arrival <= t_dev, axis=0)
    cleared = reached >= nz
    cell = np.where(cleared, -1, reached - 1)
    k = np.clip(cell, 0, nz - 2)[None]
    q0 = np.take_along_axis(q, k, 0)[0]
    q1 = np.take_along_axis(q, k + 1, 0)[0]
    t0 = np.take_along_axis(arrival, k, 0)[0]

    remaining = np.maximum(t_dev - t0, 0.0)
    front_q = np.sqrt(np.maximum(q0 * q0 + 2.0 * (q1 - q0) / dz * remaining, 0.0))
    offset = 2.0 * remaining / (q0 + front_q)
    offset = np.minimum(offset, dz)
    depth_nm = np.where(cleared, thickness, k[0] * dz + offset)
    depth = np.clip(depth_nm / thickness, 0.0, 1.0)
    return VerticalSolution(depth, arrival, cell, offset, front_q)


def _check_rate(rate: Field3D) -> np.ndarray:
    r = rate.values
    if not np.all(r > 0):
        raise InvalidArgument("development rate must be strictly positive")
    return r


def develop_vertical(rate: Field3D, t_dev: float) -> Field2D:
    """Normalized depth reached after ``t_dev`` developing straight down."""
    if not t_dev > 0:
        raise InvalidArgument(f"t_dev must be positive, got {t_dev}")
    sol = vertical_front(_check_rate(rate), rate.dz_nm, t_dev)
    return Field2D(sol.depth, rate.pitch_nm)


def envelope_depth(arrival: np.ndarray, dz: float, t_dev: float,
                   slowness: np.ndarray | None = None) -> np.ndarray:
    """Deepest point of each column with ``T <= t_dev``, normalized to [0, 1].

    Columns need not be monotone once the front can undercut, so the search
    runs from the bottom up.  Inside the last slab ``T`` is interpolated
    linearly, or, given the node ``slowness``, by the quadratic whose
    curvature matches linearly varying slowness (as in :func:`vertical_front`).
    A laterally uniform medium then yields exactly the vertical depth.
    """
    nz = arrival.shape[0]
    below = arrival <= t_dev
    # index of the last True along z (row 0 always holds T = 0)
    last = nz - 1 - np.argmax(below[::-1], axis=0)
    k = np.minimum(last, nz - 2)[None]
    t0 = np.take_along_axis(arrival, k, 0)[0]
    t1 = np.take_along_axis(arrival, k + 1, 0)[0]
    gap = np.maximum(t_dev - t0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if slowness is None:
            frac = np.where(t1 > t0, gap / (t1 - t0), 0.0)
        else:
            q0 = np.take_along_axis(slowness, k, 0)[0]
            q1 = np.take_along_axis(slowness, k + 1, 0)[0]
            # T(w) = t0 + b w + c w^2 through both slab ends
            c = 0.5 * (q1 - q0) / dz
            b = (t1 - t0) / dz - c * dz
            root = np.sqrt(np.maximum(b * b + 4.0 * c * gap, 0.0))
            # rationalized root, stable as c -> 0; the crossing in the slab is unique
            w = np.where(b + root > 0, 2.0 * gap / (b + root), 0.0)
            frac = np.where(t1 > t0, w / dz, 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    depth = np.where(last >= nz - 1, nz - 1, k[0] + frac)
    return depth / (nz - 1)


@njit(cache=True)
def _solve_upwind(ta, tb, tc, ha, hb, hc, f):
    """First-order upwind update from per-axis neighbour times and spacings.

    Axes without a frozen neighbour carry ``inf``.  Axes join in order of
    increasing neighbour time while the solution still exceeds that time.
    """
    # sort the three (time, spacing) pairs by time
    if tb < ta:
        ta, tb, ha, hb = tb, ta, hb, ha
    if tc < tb:
        tb, tc, hb, hc = tc, tb, hc, hb
    if tb < ta:
        ta, tb, ha, hb = tb, ta, hb, ha
    t = ta + ha * f
    if t <= tb:
        return t
    wa, wb = 1.0 / (ha * ha), 1.0 / (hb * hb)
    s_a = wa + wb
    s_b = wa * ta + wb * tb
    s_c = wa * ta * ta + wb * tb * tb
    disc = s_b * s_b - s_a * (s_c - f * f)
    if disc < 0.0:
        return t
    t = (s_b + math.sqrt(disc)) / s_a
    if t <= tc:
        return t
    wc = 1.0 / (hc * hc)
    s_a += wc
    s_b += wc * tc
    s_c += wc * tc * tc
    disc = s_b * s_b - s_a * (s_c - f * f)
    if disc < 0.0:
        return t
    return (s_b + math.sqrt(disc)) / s_a


@njit(cache=True)
def _axis_min(t, state, idx, step, has_lo, has_hi):
    best = np.inf
    if has_lo and state[idx - step] == 2:
        best = t[idx - step]
    if has_hi and state[idx + step] == 2 and t[idx + step] < best:
        best = t[idx + step]
    return best


@njit(cache=True)
def _update(t, state, f, idx, nz, ny, nx, hz, hy, hx):
    sz = ny * nx
    z = idx // sz
    rem = idx - z * sz
    y = rem // nx
    x = rem - y * nx
    tz = _axis_min(t, state, idx, sz, z > 0, z < nz - 1)
    ty = _axis_min(t, state, idx, nx, y > 0, y < ny - 1)
    tx = _axis_min(t, state, idx, 1, x > 0, x < nx - 1)
    return _solve_upwind(tz, ty, tx, hz, hy, hx, f[idx])


@njit(cache=True)
def _relax_neighbours(t, state, f, idx, heap, nz, ny, nx, hz, hy, hx):
    sz = ny * nx
    z = idx // sz
    rem = idx - z * sz
    y = rem // nx
    x = rem - y * nx
    for axis in range(6):
        if axis == 0:
            if z == 0:
                continue
            nb = idx - sz
        elif axis == 1:
            if z == nz - 1:
                continue
            nb = idx + sz
        elif axis == 2:
            if y == 0:
                continue
            nb = idx - nx
        elif axis == 3:
            if y == ny - 1:
                continue
            nb = idx + nx
        elif axis == 4:
            if x == 0:
                continue
            nb = idx - 1
        else:
            if x == nx - 1:
                continue
            nb = idx + 1
        if state[nb] == 2:
            continue
        tn = _update(t, state, f, nb, nz, ny, nx, hz, hy, hx)
        if tn < t[nb]:
            t[nb] = tn
            state[nb] = 1
            heapq.heappush(heap, (tn, nb))


@njit(cache=True)
def _march(f, t, state, order, nz, ny, nx, hz, hy, hx):
    heap = [(0.0, 0)]
    heap.pop()
    accepted = 0
    for idx in range(t.size):
        if state[idx] == 2:
            _relax_neighbours(t, state, f, idx, heap, nz, ny, nx, hz, hy, hx)
    while len(heap) > 0:
        tv, idx = heapq.heappop(heap)
        # stale entries: node already accepted or improved since the push
        if state[idx] == 2 or tv > t[idx]:
            continue
        state[idx] = 2
        order[idx] = accepted
        accepted += 1
        _relax_neighbours(t, state, f, idx, heap, nz, ny, nx, hz, hy, hx)
    return t


def fast_march(slowness: np.ndarray, spacing: tuple[float, float, float],
               frozen: np.ndarray, t_init: np.ndarray, return_order: bool = False):
    """Fast marching on a 3D grid with per-axis spacing ``(dz, dy, dx)``.

    ``frozen`` marks seed nodes whose times are taken from ``t_init``.  The
    narrow band is a binary heap with lazy deletion of stale entries.  With
    ``return_order`` the acceptance rank of every node is returned as well
    (``-1`` for seeds and unreachable nodes).
    """
    slowness = np.ascontiguousarray(slowness, dtype=np.float64)
    if slowness.ndim != 3 or frozen.shape != slowness.shape or t_init.shape != slowness.shape:
        raise InvalidArgument("slowness, frozen and t_init must be 3D arrays of equal shape")
    if not frozen.any():
        raise InvalidArgument("fast marching needs at least one seed node")
    if not np.all(np.isfinite(slowness) & (slowness > 0)):
        raise InvalidArgument("slowness must be finite and positive")
    nz, ny, nx = slowness.shape
    seeds = frozen.ravel()
    t = np.full(slowness.size, np.inf)
    t[seeds] = np.asarray(t_init, dtype=np.float64).ravel()[seeds]
    state = np.where(seeds, 2, 0).astype(np.int8)
    hz, hy, hx = (float(h) for h in spacing)
    order = np.full(slowness.size, -1, dtype=np.int64)
    _march(slowness.ravel(), t, state, order, nz, ny, nx, hz, hy, hx)
    if return_order:
        return t.reshape(nz, ny, nx), order.reshape(nz, ny, nx)
    return t.reshape(nz, ny, nx)


def staggered_slowness(rate: np.ndarray) -> np.ndarray:
    """Node slowness averaged with the node above it.

    A purely vertical march then reproduces the trapezoidal arrival times of
    :func:`vertical_front` exactly, so the Eikonal solution never lags it.
    """
    q = 1.0 / rate
    out = q.copy()
    out[1:] = 0.5 * (q[1:] + q[:-1])
    return out


def develop_fmm(rate: Field3D, t_dev: float) -> tuple[Field3D, Field2D]:
    """Eikonal arrival times from the top surface and the developed depth."""
    if not t_dev > 0:
        raise InvalidArgument(f"t_dev must be positive, got {t_dev}")
    r = _check_rate(rate)
    frozen = np.zeros(r.shape, dtype=bool)
    frozen[0] = True
    arrival = fast_march(staggered_slowness(r), (rate.dz_nm, rate.pitch_nm, rate.pitch_nm),
                         frozen, np.zeros(r.shape))
    depth = envelope_depth(arrival, rate.dz_nm, t_dev, 1.0 / r)
    return Field3D(arrival, rate.pitch_nm, rate.dz_nm), Field2D(depth, rate.pitch_nm)
