"""Plant simulators used to generate identification data.

Every plant maps an input sequence to an output sequence sample by sample;
``y[k]`` is the output observed after ``u[k]`` has been applied, which is
the alignment the NNARX simulation uses.
"""
from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .exceptions import ConfigError, ConvergenceFailure, InvalidArgument, NumericDivergence


def rk4_step(f, x, u, h):
    """One classical fourth-order Runge-Kutta step of ``x' = f(x, u)`` (``u`` held)."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Plant(ABC):
    """Common interface of the benchmark plants.

    Subclasses set ``name``, ``n_states``, ``n_inputs``, ``n_outputs`` and
    ``input_range``.
    """

    name = "plant"
    n_states = 1
    n_inputs = 1
    n_outputs = 1
    input_range = (-np.inf, np.inf)

    @abstractmethod
    def equilibrium_residual(self, x, u):
        """Zero exactly at equilibria for the constant input ``u``."""

    @abstractmethod
    def simulate(self, x0, u_seq):
        """Return the ``(T, n_outputs)`` outputs for a ``(T, n_inputs)`` input."""

    def initial_state(self, rng):
        return np.zeros(self.n_states)

    def describe(self):
        return {"name": self.name}


class DiscretePlant(Plant):
    @abstractmethod
    def step(self, x, u):
        """Return ``(x_next, y)`` with ``y`` the output after applying ``u``."""

    def equilibrium_residual(self, x, u):
        return self.step(x, u)[0] - x

    def simulate(self, x0, u_seq):
        u_seq = _as_inputs(u_seq, self.n_inputs)
        x = np.asarray(x0, dtype=float)
        out = np.empty((u_seq.shape[0], self.n_outputs))
        for k, u in enumerate(u_seq):
            x, y = self.step(x, u)
            if not np.all(np.isfinite(x)):
                raise NumericDivergence(f"{self.name}: non-finite state at sample {k}", step=k)
            out[k] = y
        return out


class ContinuousPlant(Plant):
    """Sampled continuous-time plant integrated with fixed-step RK4.

    The input is held constant over each sampling interval, which is split
    into ``inner_steps`` RK4 steps.
    """

    sampling_time = 1.0
    inner_steps = 10

    @abstractmethod
    def derivative(self, x, u):
        pass

    @abstractmethod
    def output(self, x):
        pass

    def equilibrium_residual(self, x, u):
        return self.derivative(x, u)

    def simulate(self, x0, u_seq):
        u_seq = _as_inputs(u_seq, self.n_inputs)
        h = self.sampling_time / self.inner_steps
        x = np.asarray(x0, dtype=float)
        out = np.empty((u_seq.shape[0], self.n_outputs))
        for k, u in enumerate(u_seq):
            for _ in range(self.inner_steps):
                x = rk4_step(self.derivative, x, u, h)
            if not np.all(np.isfinite(x)):
                raise NumericDivergence(f"{self.name}: non-finite state at sample {k}", step=k)
            out[k] = self.output(x)
        return out


def _as_inputs(u_seq, m):
    u = np.asarray(u_seq, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, m) if u.size else np.zeros((0, m))
    if u.ndim != 2 or u.shape[1] != m:
        raise InvalidArgument(f"input sequence must have shape (T, {m}), got {u.shape}")
    return u


def surrogate_plant_step(state, u):
    """Second-order rational benchmark map.

    ``s1+ = s2``, ``s2+ = s1 s2 (s2 + 2.5) / (1 + s1^2 + s2^2) + u``,
    output ``y = s2+``.
    """
    s1, s2 = np.asarray(state, dtype=float)
    u = float(np.asarray(u, dtype=float).reshape(-1)[0])
    if not (np.isfinite(s1) and np.isfinite(s2) and np.isfinite(u)):
        raise InvalidArgument("surrogate plant needs finite state and input")
    nxt = s1 * s2 * (s2 + 2.5) / (1.0 + s1 * s1 + s2 * s2) + u
    return np.array([s2, nxt]), np.array([nxt])


class SurrogatePlant(DiscretePlant):
    name = "surrogate"
    n_states = 2
    input_range = (-2.0, 2.0)

    def __init__(self, init_scale=0.5):
        self.init_scale = init_scale

    def step(self, x, u):
        return surrogate_plant_step(x, u)

    def initial_state(self, rng):
        return rng.uniform(-self.init_scale, self.init_scale, 2)

    def describe(self):
        return {"name": self.name, "init_scale": self.init_scale}


class LinearPlant(ContinuousPlant):
    """``x' = A x + B u``, ``y = C x``; mostly a test fixture."""

    name = "linear"

    def __init__(self, A, B, C=None, sampling_time=1.0, inner_steps=10):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.C = np.eye(self.A.shape[0]) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        self.n_states = self.A.shape[0]
        self.n_inputs = self.B.shape[1]
        self.n_outputs = self.C.shape[0]
        self.sampling_time = sampling_time
        self.inner_steps = inner_steps

    def derivative(self, x, u):
        return self.A @ x + self.B @ np.atleast_1d(u)

    def output(self, x):
        return self.C @ x

    def describe(self):
        return {"name": self.name, "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist()}


@dataclass(frozen=True)
class PhParams:
    """Constants of the two-tank pH neutralization model.

    Values must come from the literature describing the benchmark; no
    defaults are provided.  Units only need to be mutually consistent.
    """

    area: float  # tank cross-section
    valve_coefficient: float  # outflow q4 = Cv * (h + z)**n
    valve_offset: float  # z
    valve_exponent: float  # n
    q1: float  # acid stream
    q2: float  # buffer stream
    Wa1: float
    Wa2: float
    Wa3: float
    Wb1: float
    Wb2: float
    Wb3: float
    pK1: float
    pK2: float
    u_min: float  # admissible range of the base stream q3
    u_max: float

    @classmethod
    def from_dict(cls, d):
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in d]
        if missing:
            raise ConfigError(
                f"pH parameter file is missing {missing}; take the constants from the "
                "published description of the pH neutralization benchmark"
            )
        unknown = sorted(set(d) - set(names) - {"schema_version", "source"})
        if unknown:
            raise ConfigError(f"unknown pH parameters: {unknown}")
        return cls(**{n: float(d[n]) for n in names})

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(
                f"pH parameter file {path} not found; populate it with the benchmark's published constants"
            )
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)


def ph_from_ions(Wa, Wb, pK1, pK2):
    """Solve the charge balance for pH given the reaction invariants."""

    def balance(ph):
        return (Wa + 10.0 ** (ph - 14.0) - 10.0 ** (-ph)
                + Wb * (1.0 + 2.0 * 10.0 ** (ph - pK2)) / (1.0 + 10.0 ** (pK1 - ph) + 10.0 ** (ph - pK2)))

    return brentq(balance, -2.0, 16.0, xtol=1e-12, rtol=1e-14, maxiter=200)


class PhPlant(ContinuousPlant):
    """Third-order pH neutralization process; state ``[Wa4, Wb4, h]``, input ``q3``."""

    name = "ph"
    n_states = 3

    def __init__(self, params: PhParams, sampling_time=10.0, inner_step=None):
        self.params = params
        self.sampling_time = float(sampling_time)
        inner_step = self.sampling_time / 10.0 if inner_step is None else float(inner_step)
        steps = self.sampling_time / inner_step
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigError("inner_step must divide sampling_time")
        self.inner_steps = int(round(steps))
        self.input_range = (params.u_min, params.u_max)

    def derivative(self, x, u):
        P = self.params
        Wa4, Wb4, h = x
        q3 = float(np.asarray(u).reshape(-1)[0])
        head = max(h + P.valve_offset, 0.0)
        q4 = P.valve_coefficient * head ** P.valve_exponent
        vol = P.area * h
        return np.array([
            (P.q1 * (P.Wa1 - Wa4) + P.q2 * (P.Wa2 - Wa4) + q3 * (P.Wa3 - Wa4)) / vol,
            (P.q1 * (P.Wb1 - Wb4) + P.q2 * (P.Wb2 - Wb4) + q3 * (P.Wb3 - Wb4)) / vol,
            (P.q1 + P.q2 + q3 - q4) / P.area,
        ])

    def output(self, x):
        return np.array([ph_from_ions(x[0], x[1], self.params.pK1, self.params.pK2)])

    def initial_state(self, rng):
        u = rng.uniform(*self.input_range)
        return find_equilibrium(self, u, x_guess=self._guess(u))

    def _guess(self, u):
        P = self.params
        q = P.q1 + P.q2 + u
        h = (q / P.valve_coefficient) ** (1.0 / P.valve_exponent) - P.valve_offset
        Wa = (P.q1 * P.Wa1 + P.q2 * P.Wa2 + u * P.Wa3) / q
        Wb = (P.q1 * P.Wb1 + P.q2 * P.Wb2 + u * P.Wb3) / q
        return np.array([Wa, Wb, max(h, 1e-3)])

    def describe(self):
        return {"name": self.name, "params": self.params.to_dict(),
                "sampling_time": self.sampling_time, "inner_steps": self.inner_steps}


def ph_plant_simulate(params: PhParams, x0, u_seq, sampling_time=10.0, inner_step=None):
    """pH after each sampling interval for the base-flow sequence ``u_seq``."""
    plant = PhPlant(params, sampling_time, inner_step)
    return plant.simulate(x0, u_seq)[:, 0]


def find_equilibrium(plant: Plant, u_const, x_guess=None, tol=1e-10, max_iter=200):
    """Damped Newton iteration on ``plant.equilibrium_residual``.

    The Jacobian is formed by central differences; the step is halved until
    the residual norm decreases.  Converged when the residual norm is below
    ``tol``.
    """
    u = np.atleast_1d(np.asarray(u_const, dtype=float))
    x = np.zeros(plant.n_states) if x_guess is None else np.array(x_guess, dtype=float)

    def res(z):
        return np.asarray(plant.equilibrium_residual(z, u), dtype=float)

    r = res(x)
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn < tol:
            return x
        J = np.empty((r.size, x.size))
        for j in range(x.size):
            h = 1e-7 * max(1.0, abs(x[j]))
            e = np.zeros_like(x)
            e[j] = h
            J[:, j] = (res(x + e) - res(x - e)) / (2 * h)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            x_new = x + t * dx
            r_new = res(x_new)
            rn_new = np.linalg.norm(r_new)
            if np.isfinite(rn_new) and rn_new < rn:
                break
            t *= 0.5
        else:
            break
        x, r, rn = x_new, r_new, rn_new
    if rn < tol:
        return x
    raise ConvergenceFailure(f"equilibrium search stalled with residual {rn:.3e}", estimate=x, residual=rn)
