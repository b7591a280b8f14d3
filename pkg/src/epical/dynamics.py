"""Compartmental model catalog and Euler / Euler-Maruyama integration.

Models are drift/diffusion function pairs written in plain arithmetic, so
the same code integrates over floats, numpy batches (grid search,
prediction ensembles) and tape variables (gradient computation). The three
paths therefore produce bitwise-identical trajectories for identical
inputs.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var, clip0
from .errors import BlowUp, InvalidValue

__all__ = [
    "TimeSeries", "VarSeries", "ParamEntry", "ParameterVector", "ModelSpec",
    "NoiseDriver", "sir_model", "sir_perturbed_model", "seirdplus_model",
    "integrate", "integrate_ad", "integrate_batch", "MODELS",
    "BERLIN_SEGMENT_BREAKS", "QUARANTINE_ENTRY_RATE",
]


class TimeSeries:
    """Uniformly sampled multivariate series of compartment densities.

    values has shape (L, N); labels name the N compartments. Densities are
    nonnegative; integrator output may carry negative excursions of a
    deterministic model, which are permitted explicitly and surfaced in
    `meta` rather than silently clipped.
    """

    __slots__ = ("times", "values", "labels", "meta")

    def __init__(self, times, values, labels, meta=None, allow_negative=False):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        labels = tuple(labels)
        if times.ndim != 1 or values.ndim != 2 or values.shape[0] != times.shape[0]:
            raise ValueError("times must be (L,), values (L, N)")
        if values.shape[1] != len(labels):
            raise ValueError("label count does not match value columns")
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be unique")
        if times.shape[0] < 2:
            raise ValueError("need at least two samples")
        steps = np.diff(times)
        dt = steps[0]
        if dt <= 0 or np.any(np.abs(steps - dt) > 1e-9 * abs(dt)):
            raise ValueError("times must be strictly increasing with uniform spacing")
        if not allow_negative and np.any(values < 0):
            raise ValueError("negative density values")
        self.times = times
        self.values = values
        self.labels = labels
        self.meta = dict(meta) if meta else {}

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def __len__(self):
        return self.times.shape[0]

    def column(self, label):
        try:
            j = self.labels.index(label)
        except ValueError:
            raise KeyError(f"no compartment {label!r}") from None
        return self.values[:, j]

    def slice(self, start, stop):
        """Row slice [start, stop) as a new series."""
        return TimeSeries(self.times[start:stop], self.values[start:stop],
                          self.labels, meta=self.meta, allow_negative=True)

    def select(self, labels):
        cols = [self.labels.index(lb) for lb in labels]
        return TimeSeries(self.times, self.values[:, cols], tuple(labels),
                          meta=self.meta, allow_negative=True)


@dataclass
class VarSeries:
    """Trajectory of tape variables produced by integrate_ad."""

    times: np.ndarray
    rows: list
    labels: tuple

    def column(self, label):
        j = self.labels.index(label)
        return [row[j] for row in self.rows]

    def value_array(self):
        out = np.empty((len(self.rows), len(self.labels)))
        for i, row in enumerate(self.rows):
            for j, x in enumerate(row):
                out[i, j] = x.value if isinstance(x, Var) else x
        return out


@dataclass(frozen=True)
class ParamEntry:
    """One named parameter: a scalar or a piecewise-constant schedule.

    A piecewise entry with k segments stores k values and k-1 interior
    breakpoints (times at which the active segment switches).
    """

    name: str
    values: tuple
    breakpoints: tuple = ()

    def __post_init__(self):
        if len(self.values) != len(self.breakpoints) + 1:
            raise ValueError(
                f"{self.name}: {len(self.values)} values need "
                f"{len(self.values) - 1} interior breakpoints")
        if any(self.breakpoints[i] >= self.breakpoints[i + 1]
               for i in range(len(self.breakpoints) - 1)):
            raise ValueError(f"{self.name}: breakpoints must increase")

    @property
    def segments(self):
        return len(self.values)


class ParameterVector:
    """Ordered, named, positive model parameters.

    Entries may hold floats (simulation, sampling) or tape variables
    (gradient paths). Float values are validated nonnegative; exact zeros
    are tolerated as the boundary of the positive prior support.
    """

    __slots__ = ("entries", "_by_name")

    def __init__(self, entries):
        self.entries = tuple(entries)
        self._by_name = {e.name: e for e in self.entries}
        if len(self._by_name) != len(self.entries):
            raise ValueError("duplicate parameter names")
        for e in self.entries:
            for v in e.values:
                if isinstance(v, Var):
                    continue
                if isinstance(v, np.ndarray):
                    if not np.isfinite(v).all() or np.any(v < 0):
                        raise ValueError(f"parameter {e.name} must be finite and >= 0")
                    continue
                if not math.isfinite(v) or v < 0:
                    raise ValueError(f"parameter {e.name} must be finite and >= 0")

    @classmethod
    def of(cls, **scalars):
        return cls([ParamEntry(k, (float(v),)) for k, v in scalars.items()])

    def names(self):
        return tuple(e.name for e in self.entries)

    def flat_names(self):
        out = []
        for e in self.entries:
            if e.segments == 1:
                out.append(e.name)
            else:
                out.extend(f"{e.name}_{j}" for j in range(e.segments))
        return tuple(out)

    def flat_values(self):
        out = []
        for e in self.entries:
            out.extend(e.values)
        return out

    def with_flat_values(self, flat):
        flat = list(flat)
        if len(flat) != len(self.flat_names()):
            raise ValueError("flat value count mismatch")
        entries = []
        k = 0
        for e in self.entries:
            vals = tuple(flat[k:k + e.segments])
            k += e.segments
            entries.append(ParamEntry(e.name, vals, e.breakpoints))
        return ParameterVector(entries)

    def __call__(self, name, t=None):
        e = self._by_name[name]
        if e.segments == 1:
            return e.values[0]
        if t is None:
            raise ValueError(f"{name} is piecewise; a time is required")
        return e.values[bisect_right(e.breakpoints, t)]

    def __contains__(self, name):
        return name in self._by_name

    def entry(self, name):
        return self._by_name[name]

    def __repr__(self):
        parts = ", ".join(f"{n}={v!r}" for n, v in
                          zip(self.flat_names(), self.flat_values()))
        return f"ParameterVector({parts})"


@dataclass(frozen=True)
class NoiseDriver:
    """Seeded source of per-compartment Gaussian increments scaled by sqrt(dt)."""

    seed: int

    def increments(self, steps, n_states, dt):
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((steps, n_states)) * math.sqrt(dt)


@dataclass(frozen=True)
class ModelSpec:
    """A named drift/diffusion pair with its parameter structure.

    drift(state, params, t) and diffusion(state, params, t) accept any
    arithmetic state type and must be defined for nonnegative states and
    positive parameters. diffusion None means a deterministic model.
    conserved_sum lists states whose total is preserved by the noiseless
    dynamics.
    """

    name: str
    state_names: tuple
    drift: object
    diffusion: object
    param_template: ParameterVector
    conserved_sum: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def param_names(self):
        return self.param_template.names()

    @property
    def n_states(self):
        return len(self.state_names)


# --- SIR -------------------------------------------------------------------

def _sir_drift(y, p, t):
    s, i, r = y
    infection = p("beta") * s * i
    recovery = i / p("tau")
    return (-infection, infection - recovery, recovery)


def _sir_diffusion(y, p, t):
    a = p("sigma") * y[1]
    return (-a, a, 0.0)


def sir_model():
    """Three-compartment epidemic SDE with infection, recovery time, and
    infection-proportional noise on S and I (independent drivers)."""
    return ModelSpec(
        name="sir",
        state_names=("S", "I", "R"),
        drift=_sir_drift,
        diffusion=_sir_diffusion,
        param_template=ParameterVector([
            ParamEntry("beta", (1.0,)),
            ParamEntry("tau", (1.0,)),
            ParamEntry("sigma", (1.0,)),
        ]),
        conserved_sum=("S", "I", "R"),
    )


def _sir_perturbed_drift(y, p, t):
    base = _sir_drift(y, p, t)
    bump = 1.0 / (1000.0 + p("alpha"))
    return tuple(d + bump for d in base)


def sir_perturbed_model():
    """SIR plus a near-irrelevant parameter adding 1/(1000+alpha) to every
    drift component; used for sensitivity checks."""
    return ModelSpec(
        name="sir_perturbed",
        state_names=("S", "I", "R"),
        drift=_sir_perturbed_drift,
        diffusion=_sir_diffusion,
        param_template=ParameterVector([
            ParamEntry("beta", (1.0,)),
            ParamEntry("tau", (1.0,)),
            ParamEntry("sigma", (1.0,)),
            ParamEntry("alpha", (1.0,)),
        ]),
        conserved_sum=None,  # the perturbation injects mass
    )


# --- SEIRD+ ------------------------------------------------------------------

# Interior breakpoints (days from the start of the Berlin window) of the
# five-segment exposure-rate schedule; policy-change dates 2020-03-12,
# 2020-03-22, 2020-05-06 and 2020-06-15 relative to 2020-02-16.
BERLIN_SEGMENT_BREAKS = (25.0, 35.0, 80.0, 120.0)

# Rate of compliance with quarantine orders per contact-tracing volume;
# fixed, not calibrated.
QUARANTINE_ENTRY_RATE = 10.25

SEIRD_STATES = ("S", "E", "I", "R", "SY", "H", "C", "D",
                "Q_S", "Q_E", "Q_I", "CT", "lambda_Q")


def _seirdplus_rhs(y, p, t, literal_e_outflow):
    S, E, I, R, SY, H, C, D, QS, QE, QI, CT, LQ = y
    lam_S = p("lambda_S")
    lam_E = p("lambda_E", t)
    lam_I = p("lambda_I")
    lam_R = p("lambda_R")
    lam_SY = p("lambda_SY")
    lam_H = p("lambda_H")
    lam_C = p("lambda_C")
    lam_D = p("lambda_D")
    lam_CT = p("lambda_CT")

    exposure = lam_E * S * I
    dS = -exposure + lam_S * QS - LQ * S
    if literal_e_outflow:
        dE = exposure - lam_E * I - LQ * E
    else:
        dE = exposure - lam_I * E - LQ * E
    dI = lam_I * E - lam_R * I - lam_SY * I - LQ * I
    dR = lam_R * (I + SY + H + C + QI)
    dSY = lam_SY * (QI + I) - lam_R * SY - lam_H * SY
    dH = lam_H * SY - lam_R * H - lam_C * H
    dC = lam_C * H - lam_R * C - lam_D * C
    dD = lam_D * C
    dQS = -lam_S * QS + LQ * S
    dQE = -lam_I * QE + LQ * E
    dQI = lam_I * QE + LQ * I - lam_SY * QI - lam_R * QI
    dCT = lam_SY * I + (lam_CT - LQ) * (S + E + I)
    dLQ = QUARANTINE_ENTRY_RATE * lam_CT * CT
    return (dS, dE, dI, dR, dSY, dH, dC, dD, dQS, dQE, dQI, dCT, dLQ)


def _seirdplus_drift(y, p, t):
    return _seirdplus_rhs(y, p, t, literal_e_outflow=False)


def _seirdplus_drift_literal(y, p, t):
    return _seirdplus_rhs(y, p, t, literal_e_outflow=True)


def seirdplus_model(breakpoints=BERLIN_SEGMENT_BREAKS, e_outflow="incubation"):
    """Deterministic 13-state quarantine/contact-tracing model.

    The exposure rate is a five-segment piecewise-constant schedule; the
    quarantine-compliance rate is an auxiliary dynamic state driven by the
    contact-tracing volume. The published equation block writes the exposed
    outflow with the exposure rate, inconsistent with the transition diagram
    and with mass balance; `e_outflow="incubation"` (default) uses the
    incubation rate, `e_outflow="literal"` reproduces the printed form.
    """
    if e_outflow == "incubation":
        drift = _seirdplus_drift
    elif e_outflow == "literal":
        drift = _seirdplus_drift_literal
    else:
        raise ValueError("e_outflow must be 'incubation' or 'literal'")
    breakpoints = tuple(float(b) for b in breakpoints)
    if len(breakpoints) != 4:
        raise ValueError("the exposure schedule has 5 segments (4 breakpoints)")
    return ModelSpec(
        name="seirdplus",
        state_names=SEIRD_STATES,
        drift=drift,
        diffusion=None,
        param_template=ParameterVector([
            ParamEntry("lambda_S", (1.0,)),
            ParamEntry("lambda_E", (1.0,) * 5, breakpoints),
            ParamEntry("lambda_I", (1.0,)),
            ParamEntry("lambda_R", (1.0,)),
            ParamEntry("lambda_SY", (1.0,)),
            ParamEntry("lambda_H", (1.0,)),
            ParamEntry("lambda_C", (1.0,)),
            ParamEntry("lambda_D", (1.0,)),
            ParamEntry("lambda_CT", (1.0,)),
        ]),
        conserved_sum=("S", "E", "I", "R", "SY", "H", "C", "D",
                       "Q_S", "Q_E", "Q_I"),
        meta={"loss_exclude": ("D",), "e_outflow": e_outflow},
    )


MODELS = {
    "sir": sir_model,
    "sir_perturbed": sir_perturbed_model,
    "seirdplus": seirdplus_model,
}


# --- integration -------------------------------------------------------------

def _axpy(y, d, dt):
    """y + dt*d with a fused node when d is a tape variable."""
    if isinstance(d, Var):
        if isinstance(y, Var):
            return d.tape._node2("axpy", y.value + dt * d.value,
                                 y.index, 1.0, d.index, dt)
        return d.tape._node1("axpy", y + dt * d.value, d.index, dt)
    if isinstance(y, Var):
        return y.tape._node1("axpy", y.value + dt * d, y.index, 1.0)
    return y + dt * d


def integrate(model, params, y0, dt, steps, noise=None, t0=0.0):
    """Explicit Euler (Euler-Maruyama when a NoiseDriver is given).

    Returns steps+1 rows including y0. With noise, negative excursions are
    clipped to 0 and counted in meta["clips"]; without noise, negative
    values are left in place and counted in meta["negative_values"].
    A non-finite state raises BlowUp with the offending step index.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = tuple(float(v) for v in y0)
    n = len(y)
    if n != model.n_states:
        raise ValueError("initial state size does not match the model")
    if any(v < 0 for v in y):
        raise ValueError("initial state must be nonnegative")
    inc = noise.increments(steps, n, dt) if noise is not None else None

    rows = [y]
    clips = 0
    negatives = 0
    t = t0
    for k in range(1, steps + 1):
        d = model.drift(y, params, t)
        if inc is None:
            y = tuple(yi + dt * di for yi, di in zip(y, d))
            negatives += sum(1 for v in y if v < 0)
        else:
            g = model.diffusion(y, params, t)
            w = inc[k - 1]
            new = []
            for j in range(n):
                v = (y[j] + dt * d[j]) + g[j] * w[j]
                if v < 0.0:
                    v = 0.0
                    clips += 1
                new.append(v)
            y = tuple(new)
        if not all(math.isfinite(v) for v in y):
            raise BlowUp(k)
        rows.append(y)
        t = t0 + k * dt

    times = t0 + dt * np.arange(steps + 1)
    meta = {"clips": clips, "negative_values": negatives}
    return TimeSeries(times, np.array(rows), model.state_names, meta=meta,
                      allow_negative=True)


def integrate_ad(model, params, y0, dt, steps, noise=None, t0=0.0):
    """integrate() over tape variables; values match integrate() bitwise.

    Noise increments, when present, are pre-drawn constants, so gradients
    are pathwise derivatives at fixed noise.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = tuple(float(v) for v in y0)
    n = len(y)
    if n != model.n_states:
        raise ValueError("initial state size does not match the model")
    inc = noise.increments(steps, n, dt) if noise is not None else None

    rows = [y]
    t = t0
    try:
        for k in range(1, steps + 1):
            d = model.drift(y, params, t)
            if inc is None:
                y = tuple(_axpy(yi, di, dt) for yi, di in zip(y, d))
            else:
                g = model.diffusion(y, params, t)
                w = inc[k - 1]
                new = []
                for j in range(n):
                    v = _axpy(y[j], d[j], dt) + g[j] * w[j]
                    new.append(clip0(v) if isinstance(v, Var)
                               else (v if v > 0.0 else 0.0))
                y = tuple(new)
            for v in y:
                if not isinstance(v, Var) and not math.isfinite(v):
                    raise BlowUp(k)
            rows.append(y)
            t = t0 + k * dt
    except InvalidValue as exc:
        raise BlowUp(k) from exc

    times = t0 + dt * np.arange(steps + 1)
    return VarSeries(times, rows, model.state_names)


def integrate_batch(model, params, y0, dt, steps, t0=0.0):
    """Vectorized noiseless integration over a batch of parameter points.

    Parameter entries hold arrays of shape (B,); y0 is one state shared by
    the batch. Returns (trajectory of shape (steps+1, B, N), alive mask).
    Batch members that turn non-finite are frozen at zero and marked dead
    instead of raising.
    """
    batch = None
    for v in params.flat_values():
        if isinstance(v, np.ndarray):
            batch = v.shape[0]
            break
    if batch is None:
        raise ValueError("no array-valued parameter entry in batch integrate")
    n = model.n_states
    y = tuple(np.full(batch, float(v)) for v in y0)
    traj = np.empty((steps + 1, batch, n))
    for j in range(n):
        traj[0, :, j] = y[j]
    alive = np.ones(batch, dtype=bool)
    t = t0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(1, steps + 1):
            d = model.drift(y, params, t)
            y = tuple(yi + dt * di for yi, di in zip(y, d))
            bad = np.zeros(batch, dtype=bool)
            for v in y:
                bad |= ~np.isfinite(v)
            if bad.any():
                alive &= ~bad
                y = tuple(np.where(bad, 0.0, v) for v in y)
            for j in range(n):
                traj[k, :, j] = y[j]
            t = t0 + k * dt
    return traj, alive
