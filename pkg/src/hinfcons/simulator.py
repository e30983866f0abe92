"""Monte Carlo co-simulation of the plant, the switching topology and the node observers.

The state integrated is ``z = (x, e_1, ..., e_N)`` with ``e_i = x - xhat_i``;
estimates are recovered as ``xhat_i = x - e_i``.  Working with errors keeps
the observer dynamics free of cancellation when the plant is unstable.

Each global state k gives a linear system ``z' = F_k z + B_k u(t)``.  On a
uniform grid the classical RK4 step is the linear map
``z+ = Phi z + G0 u(t) + Gh u(t + h/2) + G1 u(t + h)``, cached per state.
Grid steps that contain a Markov jump are split at the jump times.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gains import GainSet, disagreement_matrix
from .network import MarkovPath, SwitchingNetwork, sample_ctmc_path
from .plant import EstimationModel

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Integration produced a non-finite state."""


class GainMismatchError(ValueError):
    """The gain tables do not cover the configuration."""


# ---------------------------------------------------------------------------
# disturbances


@dataclass(frozen=True)
class DisturbanceSpec:
    """One vector signal.

    kind: "zero", "damped-sine" (sin(a pi t + phi) exp(-b t) per component),
    "custom" (samples linearly interpolated, zero after the last sample) or
    "random-pc" (adapted piecewise-constant Gaussian values on intervals of
    length ``dt`` with envelope exp(-b t)).
    """

    kind: str = "zero"
    a: float | tuple = 0.0
    phi: float | tuple = 0.0
    b: float | tuple = 1.0
    amp: float | tuple = 1.0
    times: tuple = ()
    values: tuple = ()
    dt: float = 0.1

    def __post_init__(self):
        if self.kind not in ("zero", "damped-sine", "custom", "random-pc"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind in ("damped-sine", "random-pc") and np.any(np.asarray(self.b) <= 0):
            raise ValueError("decay rate b must be positive")
        if self.kind == "random-pc" and self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def random(self) -> bool:
        return self.kind == "random-pc"

    def evaluate(self, t, dim: int) -> np.ndarray:
        """Deterministic kinds only; returns (len(t), dim)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "zero":
            return np.zeros((len(t), dim))
        if self.kind == "damped-sine":
            a, ph, b, amp = (np.broadcast_to(np.asarray(v, dtype=float), (dim,))
                             for v in (self.a, self.phi, self.b, self.amp))
            tt = t[:, None]
            return amp * np.sin(a * np.pi * tt + ph) * np.exp(-b * tt)
        if self.kind == "custom":
            ts = np.asarray(self.times, dtype=float)
            vs = np.asarray(self.values, dtype=float).reshape(len(ts), -1)
            vs = np.broadcast_to(vs, (len(ts), dim)) if vs.shape[1] == 1 else vs
            out = np.stack([np.interp(t, ts, vs[:, c], left=0.0, right=0.0) for c in range(dim)], axis=1)
            return out
        raise ValueError("random signals must be realized first")

    def tail_bound(self, T: float, dim: int) -> float:
        """Upper bound on the energy of the signal beyond T."""
        if self.kind in ("damped-sine", "random-pc"):
            b = np.broadcast_to(np.asarray(self.b, dtype=float), (dim,))
            amp = np.broadcast_to(np.asarray(self.amp, dtype=float), (dim,))
            scale = 1.0 if self.kind == "damped-sine" else 9.0  # 3-sigma envelope
            return float(np.sum(scale * amp ** 2 * np.exp(-2 * b * T) / (2 * b)))
        if self.kind == "custom":
            return 0.0 if (len(self.times) and self.times[-1] <= T) else float("inf")
        return 0.0


@dataclass
class DisturbanceSet:
    """xi, xi_i per node and w_ij per channel; missing entries are zero."""

    xi: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    xi_i: dict = field(default_factory=dict)
    w: dict = field(default_factory=dict)
    symmetric_w: bool = False

    def w_spec(self, i: int, j: int) -> DisturbanceSpec:
        if (i, j) in self.w:
            return self.w[(i, j)]
        if self.symmetric_w and (j, i) in self.w:
            return self.w[(j, i)]
        return DisturbanceSpec()

    def w_key(self, i: int, j: int):
        """Realization key; paired edges share samples when symmetric."""
        if self.symmetric_w and (i, j) not in self.w and (j, i) in self.w:
            return (j, i)
        if self.symmetric_w:
            return (min(i, j), max(i, j))
        return (i, j)

    def is_zero(self) -> bool:
        specs = [self.xi, *self.xi_i.values(), *self.w.values()]
        return all(s.kind == "zero" for s in specs)


class _InputLayout:
    """Column layout of the stacked input u = (xi, xi_1..xi_N, w_c for each channel)."""

    def __init__(self, model: EstimationModel, dist: DisturbanceSet):
        self.model = model
        self.dist = dist
        N = model.N
        l = model.plant.l
        self.slices = {}
        off = 0
        self.slices["xi"] = slice(off, off + l)
        off += l
        self.specs = [("xi", dist.xi, l, None)]
        for i in range(1, N + 1):
            li = model.meas.l_i(i)
            self.slices[("xi", i)] = slice(off, off + li)
            self.specs.append((("xi", i), dist.xi_i.get(i, DisturbanceSpec()), li, None))
            off += li
        self.channels = model.net.channels()
        for (i, j) in self.channels:
            s = model.chan.G[(i, j)].shape[1]
            self.slices[("w", i, j)] = slice(off, off + s)
            self.specs.append((("w", i, j), dist.w_spec(i, j), s, dist.w_key(i, j)))
            off += s
        self.m = off
        self.random = any(sp.random for _, sp, _, _ in self.specs)

    def tail_bound(self, T: float) -> float:
        return sum(sp.tail_bound(T, d) for _, sp, d, _ in self.specs)


class _Inputs:
    """Evaluates u(t) for a batch of paths; shape (m,) when shared, (P, m) otherwise."""

    def __init__(self, layout: _InputLayout, rngs: Sequence[np.random.Generator], T: float, h: float):
        self.layout = layout
        self.P = len(rngs)
        self.pc = {}
        if layout.random:
            done = {}
            for name, sp, dim, key in layout.specs:
                if not sp.random:
                    continue
                dt = max(h, round(sp.dt / h) * h)
                nint = int(math.ceil(T / dt)) + 2
                rk = (key, dim) if key is not None else (name, dim)
                if rk not in done:
                    tstart = np.arange(nint) * dt
                    amp = np.broadcast_to(np.asarray(sp.amp, dtype=float), (dim,))
                    b = np.broadcast_to(np.asarray(sp.b, dtype=float), (dim,))
                    env = amp * np.exp(-np.outer(tstart, b))
                    vals = np.stack([rng.standard_normal((nint, dim)) for rng in rngs]) * env
                    done[rk] = (dt, vals)
                self.pc[name] = done[rk]

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        return self.chunk(np.array([t]), left)[0]

    def chunk(self, ts: np.ndarray, left: bool = False) -> np.ndarray:
        """u at each time in ``ts``: (S, m) when shared, (S, P, m) otherwise.

        ``left`` takes left limits of piecewise-constant signals.
        """
        lay = self.layout
        S = len(ts)
        out = np.zeros((S, lay.m)) if not lay.random else np.zeros((S, self.P, lay.m))
        for name, sp, dim, _ in lay.specs:
            if sp.kind == "zero":
                continue
            sl = lay.slices[name]
            if sp.random:
                dt, vals = self.pc[name]
                q = ts / dt
                idx = (np.ceil(q - 1e-9) - 1) if left else np.floor(q + 1e-9)
                idx = np.clip(idx.astype(int), 0, vals.shape[1] - 1)
                out[..., sl] = np.swapaxes(vals[:, idx], 0, 1)
            elif lay.random:
                out[..., sl] = sp.evaluate(ts, dim)[:, None, :]
            else:
                out[:, sl] = sp.evaluate(ts, dim)
        return out

    def subset(self, rows) -> "_Inputs":
        sub = object.__new__(_Inputs)
        sub.layout = self.layout
        sub.P = len(rows)
        sub.pc = {k: (dt, v[rows]) for k, (dt, v) in self.pc.items()}
        return sub


# ---------------------------------------------------------------------------
# closed loop


def _gain_tables(model: EstimationModel, gains: GainSet, mode: str):
    net = model.net
    if mode == "local":
        if not gains.has_local:
            raise GainMismatchError("gain file has no local gains")

        def Lf(i, k):
            key = (i, net.local(i, k))
            if key not in gains.L_local:
                raise GainMismatchError(f"missing local L for node {i}, local state {key[1]}")
            return gains.L_local[key]

        def Kf(i, j, k):
            key = (i, j, net.local(i, k))
            if key not in gains.K_local:
                raise GainMismatchError(f"missing local K for edge ({i},{j}), local state {key[2]}")
            return gains.K_local[key]
    elif mode == "global":
        def Lf(i, k):
            if (i, k) not in gains.L:
                raise GainMismatchError(f"missing L for node {i}, state {k}")
            return gains.L[(i, k)]

        def Kf(i, j, k):
            if (i, j, k) not in gains.K:
                raise GainMismatchError(f"missing K for edge ({i},{j}), state {k}")
            return gains.K[(i, j, k)]
    else:
        raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")
    return Lf, Kf


def check_gain_shapes(model: EstimationModel, gains: GainSet, mode: str) -> None:
    Lf, Kf = _gain_tables(model, gains, mode)
    n = model.n
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            L = np.atleast_2d(Lf(i, k))
            if L.shape != (n, model.meas.r(i)):
                raise GainMismatchError(f"L for node {i} has shape {L.shape}")
            for j in model.net.neighbours(i, k):
                K = np.atleast_2d(Kf(i, j, k))
                if K.shape != (n, model.chan.H[(i, j)].shape[0]):
                    raise GainMismatchError(f"K for edge ({i},{j}) has shape {K.shape}")


class ClosedLoop:
    """Per-state matrices of z' = F_k z + B_k u and the disagreement weights."""

    def __init__(self, model: EstimationModel, gains: GainSet, layout: _InputLayout, mode: str):
        check_gain_shapes(model, gains, mode)
        Lf, Kf = _gain_tables(model, gains, mode)
        self.model = model
        n, N = model.n, model.N
        self.n, self.N = n, N
        self.d = n * (N + 1)
        A, B2 = model.plant.A, model.plant.B2
        self.F, self.B, self.W, self.gate = {}, {}, {}, {}
        for k in range(1, model.M + 1):
            F = np.zeros((self.d, self.d))
            B = np.zeros((self.d, layout.m))
            F[:n, :n] = A
            B[:n, layout.slices["xi"]] = B2
            for i in range(1, N + 1):
                bi = slice(i * n, (i + 1) * n)
                C, D, Db = model.meas.triplet(i, k)
                L = np.atleast_2d(Lf(i, k))
                F[bi, bi] = A - L @ C
                B[bi, layout.slices["xi"]] = B2 - L @ D
                B[bi, layout.slices[("xi", i)]] = -L @ Db
                for j in model.net.neighbours(i, k):
                    K = np.atleast_2d(Kf(i, j, k))
                    KH = K @ model.chan.H[(i, j)]
                    bj = slice(j * n, (j + 1) * n)
                    F[bi, bi] -= KH
                    F[bi, bj] += KH
                    B[bi, layout.slices[("w", i, j)]] = -K @ model.chan.G[(i, j)]
            W = np.zeros((self.d, self.d))
            W[n:, n:] = disagreement_matrix(model.net, k, n) / N
            gate = np.zeros(layout.m)
            for (i, j) in layout.channels:
                if j in model.net.neighbours(i, k):
                    gate[layout.slices[("w", i, j)]] = 1.0
            self.F[k], self.B[k], self.W[k], self.gate[k] = F, B, W, gate
        self._cache = {}

    def error_generator(self, k: int) -> np.ndarray:
        n = self.n
        return self.F[k][n:, n:]

    def rk4(self, k: int, h: float):
        """(Phi, G0, Gh, G1) of one RK4 step of length h in state k."""
        key = (k, h)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = _rk4_linear_maps(self.F[k], self.B[k], h)
        if len(self._cache) < 64:
            self._cache[key] = out
        return out


def _rk4_linear_maps(F: np.ndarray, B: np.ndarray, h: float):
    """Exact RK4 step maps, obtained by running the stages on matrix arguments."""
    d, m = B.shape
    I = np.eye(d)
    # response to the state
    k1 = F
    k2 = F @ (I + h / 2 * k1)
    k3 = F @ (I + h / 2 * k2)
    k4 = F @ (I + h * k3)
    Phi = I + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    Z = np.zeros((d, m))

    def resp(b0, bh, b1):
        s1 = b0
        s2 = F @ (h / 2 * s1) + bh
        s3 = F @ (h / 2 * s2) + bh
        s4 = F @ (h * s3) + b1
        return h / 6 * (s1 + 2 * s2 + 2 * s3 + s4)
    return Phi, resp(B, Z, Z), resp(Z, B, Z), resp(Z, Z, B)


def rk4_step(F, B, z, u0, uh, u1, h):
    """Plain RK4 step for z' = F z + B u(t); rows of ``z`` are independent states."""
    def f(zz, u):
        return zz @ F.T + u @ B.T
    k1 = f(z, u0)
    k2 = f(z + h / 2 * k1, uh)
    k3 = f(z + h / 2 * k2, uh)
    k4 = f(z + h * k3, u1)
    return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# metrics


def disagreement(net: SwitchingNetwork, k: int, xhat) -> float:
    """(1/N) sum_i sum_{j in V_i^k} ||xhat_j - xhat_i||^2."""
    xhat = np.asarray(xhat, dtype=float)
    N = net.N
    tot = 0.0
    for i in range(1, N + 1):
        for j in net.neighbours(i, k):
            d = xhat[j - 1] - xhat[i - 1]
            tot += float(d @ d)
    return tot / N


def _gl_integral(f, a: float, b: float, panels: int = 64, order: int = 8) -> np.ndarray:
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    tot = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        tot = tot + 0.5 * (hi - lo) * np.tensordot(w, f(t), axes=1)
    return tot


def signal_energy(spec: DisturbanceSpec, dim: int, T: float, gate_segments=None) -> float:
    """Energy of a deterministic signal over [0, T], optionally only over given (a, b) segments."""
    if spec.kind == "zero":
        return 0.0
    segs = gate_segments if gate_segments is not None else [(0.0, T)]
    tot = 0.0
    for a, b in segs:
        a, b = max(a, 0.0), min(b, T)
        if b <= a:
            continue
        panels = max(8, int(math.ceil((b - a) * 4)))
        tot += float(_gl_integral(lambda t: (spec.evaluate(t, dim) ** 2).sum(axis=1), a, b, panels))
    return tot


def mu_P(P, x0, disturbances: DisturbanceSet, model: EstimationModel,
         paths: Sequence[MarkovPath] = (), horizon: float | None = None) -> float:
    """||x0||_P^2 + ||xi||^2 + (1/N) sum_i (||xi_i||^2 + sum_j E||a_ij w_ij||^2).

    Norms are taken over [0, horizon]; the gated channel term is averaged over
    the supplied topology paths.  Deterministic disturbances only.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if np.linalg.eigvalsh(0.5 * (P + P.T)).min() <= 0:
        raise ValueError("P must be positive definite")
    x0 = np.asarray(x0, dtype=float)
    T = horizon if horizon is not None else (paths[0].horizon if paths else None)
    if T is None:
        raise ValueError("a horizon or at least one path is required")
    val = float(x0 @ P @ x0)
    val += signal_energy(disturbances.xi, model.plant.l, T)
    N = model.N
    acc = 0.0
    for i in range(1, N + 1):
        acc += signal_energy(disturbances.xi_i.get(i, DisturbanceSpec()), model.meas.l_i(i), T)
    if paths:
        wsum = 0.0
        for (i, j) in model.net.channels():
            spec = disturbances.w_spec(i, j)
            if spec.kind == "zero":
                continue
            dim = model.chan.G[(i, j)].shape[1]
            for p in paths:
                segs = [(a, b) for a, b, s in p.segments() if j in model.net.neighbours(i, s)]
                wsum += signal_energy(spec, dim, T, segs)
        acc += wsum / len(paths)
    return val + acc / N


# ---------------------------------------------------------------------------
# results


@dataclass
class SimulationResult:
    t: np.ndarray
    path: MarkovPath
    eta: np.ndarray
    x: np.ndarray
    xhat: np.ndarray           # (len(t), N, n)
    err_norms: np.ndarray      # (len(t), N)
    psi: np.ndarray
    psi_integral: float
    mu_P: float
    ratio: float | None
    terminal_errors: np.ndarray
    err_integrals: np.ndarray
    tail_bound: float
    step: float

    def to_rows(self):
        N, n = self.xhat.shape[1], self.xhat.shape[2]
        header = ["t", "eta"] + [f"x{c + 1}" for c in range(n)]
        header += [f"xhat{i + 1}_{c + 1}" for i in range(N) for c in range(n)]
        header += [f"err{i + 1}" for i in range(N)] + ["psi"]
        rows = []
        for r in range(len(self.t)):
            row = [self.t[r], int(self.eta[r])] + list(self.x[r]) + list(self.xhat[r].ravel())
            row += list(self.err_norms[r]) + [self.psi[r]]
            rows.append(row)
        return header, rows


@dataclass
class BatchResult:
    psi_integral: np.ndarray    # (P,)
    mu_P: np.ndarray            # (P,) per-path realized mu_P
    err_integrals: np.ndarray   # (P, N)
    terminal_errors: np.ndarray  # (P, N)
    sample_t: np.ndarray
    sample_norms: np.ndarray    # (P, S, N)
    paths: list
    x0_energy: float
    tail_bound: float
    step: float

    @property
    def ratio(self) -> float:
        den = float(self.mu_P.mean())
        return float(self.psi_integral.mean()) / den if den > 0 else float("nan")

    def decay_slopes(self, t_min: float = 0.0, floor: float = 1e-200) -> np.ndarray:
        """Least-squares slope of log ||e(t)|| (all nodes stacked) per path.

        Samples before ``t_min`` or below ``floor`` (underflow range) are ignored.
        """
        tot = np.sqrt((self.sample_norms ** 2).sum(axis=2))
        out = np.full(len(tot), np.nan)
        for p, row in enumerate(tot):
            keep = (self.sample_t >= t_min) & (row > floor)
            if keep.sum() >= 2:
                out[p] = np.polyfit(self.sample_t[keep], np.log(row[keep]), 1)[0]
        return out


# ---------------------------------------------------------------------------
# integration engine


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HINFCONS_THREADS", "1")))
    except ValueError:
        return 1


def _path_rngs(seed, runs: int, offset: int = 0):
    return [np.random.default_rng(np.random.SeedSequence([int(seed), offset + p])) for p in range(runs)]


def _run_batch(cl: ClosedLoop, layout: _InputLayout, x0, T: float, h: float,
               paths: list[MarkovPath], rngs, sample_every: float, record: int = 0):
    """Integrate a batch of paths; ``record`` > 0 keeps z every that many steps."""
    # overflow surfaces as SimulationError at the next sample point
    with np.errstate(over="ignore", invalid="ignore"):
        return _integrate(cl, layout, x0, T, h, paths, rngs, sample_every, record)


def _integrate(cl, layout, x0, T, h, paths, rngs, sample_every, record):
    n, N, d = cl.n, cl.N, cl.d
    P = len(paths)
    nsteps = int(round(T / h))
    inputs = _Inputs(layout, rngs, T, h)

    z = np.zeros((P, d))
    z[:, :n] = x0
    z[:, n:] = np.tile(x0, N)
    cur = np.array([p.states[0] for p in paths])
    # steps with a jump strictly inside are split; jumps on grid points only switch the state
    split: dict[int, list[int]] = {}
    on_grid: dict[int, list[tuple[int, int]]] = {}
    for pi, p in enumerate(paths):
        for tj, sj in zip(p.times[1:], p.states[1:]):
            s = int(round(tj / h))
            if abs(tj - s * h) <= 1e-9 * h:
                if s < nsteps:
                    on_grid.setdefault(s, []).append((pi, int(sj)))
            else:
                s = int(math.floor(tj / h))
                if s < nsteps and pi not in split.get(s, ()):
                    split.setdefault(s, []).append(pi)

    psi_int = np.zeros(P)
    err_int = np.zeros((P, N))
    energy = np.zeros((P, 3))  # xi, sum of xi_i, gated w
    masks = np.zeros((3, layout.m))
    masks[0, layout.slices["xi"]] = 1.0
    for (i, j) in layout.channels:
        masks[2, layout.slices[("w", i, j)]] = 1.0
    masks[1] = 1.0 - masks[0] - masks[2]

    stride = max(1, int(round(sample_every / h)))
    samp_t = [0.0]
    samp = [np.linalg.norm(z[:, n:].reshape(P, N, n), axis=2)]
    rec = {"t": [0.0], "eta": [cur.copy()], "z": [z.copy()]} if record else None
    wts = {}
    for k in cl.F:
        w = masks.copy()
        w[2] *= cl.gate[k]
        wts[k] = w
    FW = {k: np.hstack([cl.F[k].T, cl.W[k]]) for k in cl.F}

    def forms(zz, bu, k):
        """Psi and node error energies with their time derivatives."""
        zfw = zz @ FW[k]
        zd = zfw[:, :d] + bu
        zw = zfw[:, d:]
        f = (zw * zz).sum(axis=1)
        df = 2 * (zw * zd).sum(axis=1)
        e = zz[:, n:]
        g = (e * e).reshape(-1, N, n).sum(axis=2)
        dg = 2 * (e * zd[:, n:]).reshape(-1, N, n).sum(axis=2)
        return f, df, g, dg

    def simpson(u0, uh, u1, k):
        return (np.atleast_2d(u0) ** 2 + 4 * np.atleast_2d(uh) ** 2 + np.atleast_2d(u1) ** 2) @ wts[k].T

    # start-of-step quadrature values, valid while the path stays in its state
    fa = np.zeros(P)
    dfa = np.zeros(P)
    ga = np.zeros((P, N))
    dga = np.zeros((P, N))
    stale = np.ones(P, dtype=bool)

    CH = 1024
    for c0 in range(0, nsteps, CH):
        S = min(CH, nsteps - c0)
        tg = (c0 + np.arange(S)) * h
        U0, Uh, U1 = inputs.chunk(tg), inputs.chunk(tg + h / 2), inputs.chunk(tg + h, left=True)
        pre = {}
        if not layout.random:
            for k in cl.F:
                _, G0, Gh, G1 = cl.rk4(k, h)
                B = cl.B[k]
                pre[k] = (U0 @ G0.T + Uh @ Gh.T + U1 @ G1.T, U0 @ B.T, U1 @ B.T,
                          h / 6 * simpson(U0, Uh, U1, k))
        for sc in range(S):
            s = c0 + sc
            t0 = s * h
            t1 = t0 + h
            jumpers = split.get(s, [])
            active = cur.copy()
            if jumpers:
                active[jumpers] = 0
            for k in np.unique(active):
                if k == 0:
                    continue
                k = int(k)
                rows = np.flatnonzero(active == k)
                Phi, G0, Gh, G1 = cl.rk4(k, h)
                if layout.random:
                    B = cl.B[k]
                    a0, ah, a1 = U0[sc][rows], Uh[sc][rows], U1[sc][rows]
                    cin = a0 @ G0.T + ah @ Gh.T + a1 @ G1.T
                    bu0, bu1 = a0 @ B.T, a1 @ B.T
                    en = h / 6 * simpson(a0, ah, a1, k)
                else:
                    cin_all, bu0_all, bu1_all, en_all = pre[k]
                    cin, bu0, bu1, en = cin_all[sc], bu0_all[sc], bu1_all[sc], en_all[sc]
                st = stale[rows]
                if st.any():
                    r2 = rows[st]
                    fa[r2], dfa[r2], ga[r2], dga[r2] = forms(z[r2], bu0 if bu0.ndim == 1 else bu0[st], k)
                    stale[r2] = False
                zn = z[rows] @ Phi.T + cin
                fb, dfb, gb, dgb = forms(zn, bu1, k)
                # trapezoid with the Hermite end correction (fourth order)
                psi_int[rows] += h / 2 * (fa[rows] + fb) + h * h / 12 * (dfa[rows] - dfb)
                err_int[rows] += h / 2 * (ga[rows] + gb) + h * h / 12 * (dga[rows] - dgb)
                energy[rows] += en
                z[rows] = zn
                fa[rows], dfa[rows], ga[rows], dga[rows] = fb, dfb, gb, dgb
            for pi in jumpers:
                p = paths[pi]
                sub = inputs.subset([pi]) if layout.random else inputs
                knots = [t0] + [float(tj) for tj in p.times[1:] if t0 < tj < t1] + [t1]
                zz = z[pi:pi + 1]
                for a, b in zip(knots[:-1], knots[1:]):
                    kk = p.state_at(a)
                    hh = b - a
                    v0, vh, v1 = (np.reshape(sub(tt, left=lf), (1, -1)) for tt, lf in
                                  ((a, False), (0.5 * (a + b), False), (b, True)))
                    B = cl.B[kk]
                    zn = rk4_step(cl.F[kk], B, zz, v0, vh, v1, hh)
                    f0, df0, g0, dg0 = forms(zz, v0 @ B.T, kk)
                    f1, df1, g1, dg1 = forms(zn, v1 @ B.T, kk)
                    psi_int[pi] += (hh / 2 * (f0 + f1) + hh * hh / 12 * (df0 - df1))[0]
                    err_int[pi] += (hh / 2 * (g0 + g1) + hh * hh / 12 * (dg0 - dg1))[0]
                    energy[pi] += hh / 6 * simpson(v0, vh, v1, kk)[0]
                    zz = zn
                z[pi] = zz[0]
                cur[pi] = p.state_at(t1)
                stale[pi] = True
            for pi, sj in on_grid.get(s + 1, ()):
                cur[pi] = sj
                stale[pi] = True
            if (s + 1) % stride == 0 or s + 1 == nsteps:
                if not np.all(np.isfinite(z)):
                    bad = np.flatnonzero(~np.all(np.isfinite(z), axis=1))
                    raise SimulationError(f"non-finite state by t={t1:.6g} on path(s) {bad[:5].tolist()}")
                if (s + 1) % stride == 0:
                    samp_t.append(t1)
                    samp.append(np.linalg.norm(z[:, n:].reshape(P, N, n), axis=2))
            if record and (s + 1) % record == 0:
                rec["t"].append(t1)
                rec["eta"].append(cur.copy())
                rec["z"].append(z.copy())

    terminal = np.linalg.norm(z[:, n:].reshape(P, N, n), axis=2)
    return psi_int, err_int, terminal, np.array(samp_t), np.stack(samp, axis=1), energy, rec


def _prepare(model, gains, disturbances, horizon, step, mode):
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if step <= 0:
        raise ValueError("step must be positive")
    nsteps = max(1, int(math.ceil(horizon / step - 1e-9)))
    h = horizon / nsteps
    layout = _InputLayout(model, disturbances)
    cl = ClosedLoop(model, gains, layout, mode)
    rho = max(np.abs(np.linalg.eigvals(cl.F[k])).max() for k in cl.F)
    if h * rho > 2.5:
        warnings.warn(f"step {h:g} times spectral radius {rho:.3g} exceeds 2.5; RK4 may be inaccurate",
                      RuntimeWarning)
    return h, layout, cl


def simulate_batch(model: EstimationModel, gains: GainSet, disturbances: DisturbanceSet, x0,
                   m0: int, horizon: float, step: float = 1e-3, runs: int = 1, seed: int = 0,
                   mode: str = "local", sample_every: float = 1.0,
                   paths: list[MarkovPath] | None = None) -> BatchResult:
    """Monte Carlo runs sharing one disturbance set; path p uses seed (seed, p)."""
    h, layout, cl = _prepare(model, gains, disturbances, horizon, step, mode)
    x0 = np.asarray(x0, dtype=float)
    rngs = _path_rngs(seed, runs)
    if paths is None:
        paths = [sample_ctmc_path(model.net.generator, m0, horizon, rng) for rng in rngs]
    workers = min(_threads(), runs)
    chunks = np.array_split(np.arange(runs), workers)

    def work(idx):
        idx = list(idx)
        return _run_batch(cl, layout, x0, horizon, h, [paths[i] for i in idx],
                          [rngs[i] for i in idx], sample_every)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(chunks[0])]
    psi = np.concatenate([p[0] for p in parts])
    err = np.concatenate([p[1] for p in parts])
    term = np.concatenate([p[2] for p in parts])
    st = parts[0][3]
    sn = np.concatenate([p[4] for p in parts])
    en = np.concatenate([p[5] for p in parts])
    Pm = gains.P if gains.P is not None else np.eye(model.n)
    x0e = float(x0 @ Pm @ x0)
    mu = x0e + en[:, 0] + (en[:, 1] + en[:, 2]) / model.N
    return BatchResult(psi, mu, err, term, st, sn, paths, x0e, layout.tail_bound(horizon), h)


def simulate(model: EstimationModel, gains: GainSet, disturbances: DisturbanceSet, x0, m0: int,
             horizon: float, step: float = 1e-3, seed: int = 0, mode: str = "local",
             record_every: float | None = None, path: MarkovPath | None = None) -> SimulationResult:
    """One sampled topology path, integrated jointly with the plant and all observers."""
    h, layout, cl = _prepare(model, gains, disturbances, horizon, step, mode)
    x0 = np.asarray(x0, dtype=float)
    rng = _path_rngs(seed, 1)[0]
    if path is None:
        path = sample_ctmc_path(model.net.generator, m0, horizon, rng)
    stride = max(1, int(round((record_every or h) / h)))
    psi, err, term, st, sn, en, rec = _run_batch(cl, layout, x0, horizon, h, [path], [rng],
                                                 horizon, stride)
    n, N = model.n, model.N
    Z = np.stack(rec["z"])[:, 0]
    t = np.array(rec["t"])
    eta = np.array(rec["eta"])[:, 0]
    x = Z[:, :n]
    e = Z[:, n:].reshape(len(t), N, n)
    xhat = x[:, None, :] - e
    psi_t = np.array([float(Z[r] @ cl.W[int(eta[r])] @ Z[r]) for r in range(len(t))])
    Pm = gains.P if gains.P is not None else np.eye(n)
    mu = float(x0 @ Pm @ x0) + float(en[0, 0]) + float(en[0, 1] + en[0, 2]) / N
    ratio = float(psi[0]) / mu if mu > 0 else None
    return SimulationResult(t, path, eta, x, xhat, np.linalg.norm(e, axis=2), psi_t, float(psi[0]), mu,
                            ratio, term[0], err[0], layout.tail_bound(horizon), h)


@dataclass
class HinfEstimate:
    worst: float
    cases: list   # dicts with ratio, numerator, denominator, standard error
    skipped: list
    note: str = "empirical lower bound on the supremum over disturbances"


def estimate_hinf_ratio(model: EstimationModel, gains: GainSet, battery, runs: int, horizon: float,
                        step: float = 1e-3, seed: int = 0, m0: int = 1, mode: str = "local") -> HinfEstimate:
    """Worst Monte Carlo ratio E[int Psi] / E[mu_P] over a battery of (x0, DisturbanceSet) cases.

    The same topology paths are used for every case (common random numbers).
    """
    rngs = _path_rngs(seed, runs)
    paths = [sample_ctmc_path(model.net.generator, m0, horizon, r) for r in rngs]
    cases, skipped = [], []
    for ci, (x0, dist) in enumerate(battery):
        x0 = np.asarray(x0, dtype=float)
        if not np.any(x0) and dist.is_zero():
            warnings.warn(f"case {ci}: zero initial condition and disturbances, skipped", RuntimeWarning)
            skipped.append(ci)
            continue
        res = simulate_batch(model, gains, dist, x0, m0, horizon, step, runs, seed, mode, horizon, paths)
        num, den = res.psi_integral, res.mu_P
        r = float(num.mean() / den.mean())
        # delta-method standard error of a ratio of means
        zz = (num - r * den) / den.mean()
        se = float(zz.std(ddof=1) / math.sqrt(runs)) if runs > 1 else float("nan")
        cases.append({"case": ci, "ratio": r, "numerator": float(num.mean()),
                      "denominator": float(den.mean()), "stderr": se, "tail_bound": res.tail_bound})
    if not cases:
        raise ValueError("no case in the battery has a nonzero initial condition or disturbance")
    return HinfEstimate(max(c["ratio"] for c in cases), cases, skipped)


def conditional_mean_mc(net: SwitchingNetwork, values: dict, i: int, k_i: int, t: float,
                        samples: int, seed: int = 0, m0: int = 1):
    """Monte Carlo E(V^{eta(t)} | eta_i(t) = k_i) with elementwise standard errors."""
    rng = np.random.default_rng(seed)
    hits = []
    for _ in range(samples):
        p = sample_ctmc_path(net.generator, m0, t + 1e-9, rng)
        k = p.state_at(t)
        if net.local(i, k) == k_i:
            hits.append(np.asarray(values[k], dtype=float))
    if len(hits) < 2:
        raise ValueError("too few samples hit the conditioning event")
    H = np.stack(hits)
    return H.mean(axis=0), H.std(axis=0, ddof=1) / math.sqrt(len(hits)), len(hits)
