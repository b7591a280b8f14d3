"""Densities, prediction ensembles and scalar metrics built from sample logs.

Marginals come from likelihood-weighted Gaussian kernel estimates over the
points a calibration (or sampling) run visited: each record contributes
mass exp(-loss), so the density reflects the loss landscape rather than
visit frequency. A dense grid evaluation provides the low-dimensional
ground truth, and the squared Hellinger distance compares the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibrate import _fit_template, _initial_state, _predicted_column
from .dynamics import ParamEntry, ParameterVector, TimeSeries, integrate_batch
from .errors import (DegenerateLikelihoods, EmptyWindow, EpicalError,
                     GridMismatch)

__all__ = [
    "Density1D", "GridPosterior", "PredictionEnsemble", "marginal_from_log",
    "marginal_from_samples", "silverman_bandwidth", "grid_search", "hellinger",
    "select_draws", "predict", "residual", "uniform_density",
]


class Density1D:
    """A gridded probability density: uniform grid, mass summing to one.

    Normalization uses the rectangle rule, sum(mass) * dx = 1.
    """

    __slots__ = ("grid", "mass")

    def __init__(self, grid, mass):
        grid = np.asarray(grid, dtype=float)
        mass = np.asarray(mass, dtype=float)
        if grid.ndim != 1 or grid.shape != mass.shape or grid.size < 2:
            raise ValueError("grid and mass must be matching 1-d arrays")
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.any(np.abs(steps - steps[0]) > 1e-9 * steps[0]):
            raise ValueError("grid must be strictly increasing and uniform")
        if np.any(mass < 0):
            raise ValueError("mass must be nonnegative")
        total = float(mass.sum() * steps[0])
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"density integrates to {total}, not 1")
        self.grid = grid
        self.mass = mass

    @classmethod
    def from_unnormalized(cls, grid, raw):
        raw = np.asarray(raw, dtype=float)
        dx = float(grid[1] - grid[0])
        total = raw.sum() * dx
        if not math.isfinite(total) or total <= 0:
            raise ValueError("cannot normalize: nonpositive or non-finite mass")
        return cls(grid, raw / total)

    @property
    def dx(self):
        return float(self.grid[1] - self.grid[0])

    def mean(self):
        return float((self.grid * self.mass).sum() * self.dx)

    def mode(self):
        return float(self.grid[int(np.argmax(self.mass))])

    def resample(self, new_grid):
        """Linear interpolation onto another grid, then renormalization."""
        raw = np.interp(new_grid, self.grid, self.mass, left=0.0, right=0.0)
        return Density1D.from_unnormalized(np.asarray(new_grid, dtype=float), raw)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("grid,mass\n")
            for g, m in zip(self.grid, self.mass):
                fh.write(f"{g!r},{m!r}\n")

    @classmethod
    def from_csv(cls, path):
        grid, mass = [], []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "grid,mass":
                raise ValueError("not a density file")
            for line in fh:
                g, m = line.strip().split(",")
                grid.append(float(g))
                mass.append(float(m))
        return cls(np.array(grid), np.array(mass))


def uniform_density(lo, hi, points=512):
    grid = np.linspace(lo, hi, points)
    return Density1D.from_unnormalized(grid, np.ones(points))


def hellinger(p, q):
    """Squared Hellinger distance (1/2) * int (sqrt(p) - sqrt(q))^2 dx.

    Values lie in [0, 1]: 0 for identical densities, 1 for disjoint
    supports. Densities must share a grid; resample first otherwise.
    """
    if p.grid.shape != q.grid.shape or np.max(np.abs(p.grid - q.grid)) > 1e-9:
        raise GridMismatch("densities are on different grids")
    diff = np.sqrt(p.mass) - np.sqrt(q.mass)
    return float(0.5 * (diff * diff).sum() * p.dx)


def _weighted_quantile(xs, weights, q):
    order = np.argsort(xs)
    cum = np.cumsum(weights[order])
    cum /= cum[-1]
    return float(np.interp(q, cum, xs[order]))


def silverman_bandwidth(xs, weights):
    """Silverman's rule on the weighted effective sample size."""
    w = weights / weights.sum()
    n_eff = 1.0 / float((w * w).sum())
    mean = float(w @ xs)
    var = float(w @ (xs - mean) ** 2)
    sigma = math.sqrt(var)
    iqr = (_weighted_quantile(xs, w, 0.75) - _weighted_quantile(xs, w, 0.25))
    scale = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    if scale <= 0:
        return 0.0
    return 0.9 * scale * n_eff ** (-0.2)


def _kde_on_grid(grid, xs, weights, bandwidth):
    raw = np.zeros(grid.size)
    inv_h = 1.0 / bandwidth
    norm = inv_h / math.sqrt(2.0 * math.pi)
    for lo in range(0, xs.size, 4096):
        block_x = xs[lo:lo + 4096]
        block_w = weights[lo:lo + 4096]
        z = (grid[:, None] - block_x[None, :]) * inv_h
        raw += (np.exp(-0.5 * z * z) * block_w[None, :]).sum(axis=1)
    return raw * norm


def marginal_from_log(log, parameter, grid=None, bandwidth=None, prior=None,
                      grid_points=512):
    """Likelihood-weighted kernel density of one parameter's visited values.

    Records are weighted by exp(-loss) (computed with the minimum loss
    subtracted, which only rescales the weights), smoothed with a Gaussian
    kernel, multiplied by the prior density, and renormalized. The default
    prior is uniform on the positive axis.
    """
    xs = np.asarray(log.column(parameter), dtype=float)
    loss = np.asarray(log.loss, dtype=float)
    finite = np.isfinite(loss) & np.isfinite(xs)
    if not finite.any():
        raise DegenerateLikelihoods("no record has a finite loss")
    xs = xs[finite]
    loss = loss[finite]
    weights = np.exp(-(loss - loss.min()))
    return _weighted_marginal(xs, weights, grid, bandwidth, prior, grid_points)


def marginal_from_samples(samples, grid=None, bandwidth=None, prior=None,
                          grid_points=512):
    """Frequency-based kernel density of retained MCMC samples (equal
    weights, as sampling semantics dictate)."""
    xs = np.asarray(samples, dtype=float)
    return _weighted_marginal(xs, np.ones(xs.size), grid, bandwidth, prior,
                              grid_points)


def _weighted_marginal(xs, weights, grid, bandwidth, prior, grid_points):
    if bandwidth is None:
        bandwidth = silverman_bandwidth(xs, weights)
    if bandwidth <= 0 or not math.isfinite(bandwidth):
        span = float(xs.max() - xs.min())
        center = abs(float(xs.mean()))
        bandwidth = span / 50 if span > 0 else max(0.01 * max(center, 1.0), 1e-8)
    if grid is None:
        lo = float(xs.min()) - 4 * bandwidth
        hi = float(xs.max()) + 4 * bandwidth
        grid = np.linspace(lo, hi, grid_points)
    else:
        grid = np.asarray(grid, dtype=float)
    raw = _kde_on_grid(grid, xs, weights, bandwidth)
    if prior is None:
        raw = raw * (grid > 0)
    else:
        raw = raw * np.clip(prior(grid), 0.0, None)
    try:
        return Density1D.from_unnormalized(grid, raw)
    except ValueError as exc:
        raise DegenerateLikelihoods(str(exc)) from None


@dataclass
class GridPosterior:
    """Dense posterior over a small parameter grid (the ground-truth oracle).

    joint holds the normalized density over the cell measure; axes are
    (name, grid) pairs in storage order.
    """

    axes: list
    joint: np.ndarray
    meta: dict = field(default_factory=dict)

    def axis(self, name):
        for k, (n, grid) in enumerate(self.axes):
            if n == name:
                return k, grid
        raise KeyError(f"no grid axis {name!r}")

    def marginal(self, name):
        k, grid = self.axis(name)
        other = tuple(i for i in range(self.joint.ndim) if i != k)
        cell = 1.0
        for i, (_, g) in enumerate(self.axes):
            if i != k:
                cell *= float(g[1] - g[0])
        raw = self.joint.sum(axis=other) * cell
        return Density1D.from_unnormalized(grid, raw)

    def mode(self):
        flat = int(np.argmax(self.joint))
        idx = np.unravel_index(flat, self.joint.shape)
        return tuple(float(g[i]) for (_, g), i in zip(self.axes, idx))


def grid_search(model, data, loss_spec, axes, *, fixed_params=None,
                max_points=1 << 22):
    """Evaluate the loss on a dense parameter grid; posterior mass is
    proportional to exp(-loss) at each node.

    axes is a sequence of (scalar parameter name, 1-d grid). Nodes whose
    simulation fails get zero mass and are counted in meta["dead_nodes"].
    """
    names = [name for name, _ in axes]
    grids = [np.asarray(g, dtype=float) for _, g in axes]
    shape = tuple(g.size for g in grids)
    total = int(np.prod(shape))
    if total > max_points:
        raise ValueError(f"grid of {total} points exceeds budget {max_points}")
    mesh = np.meshgrid(*grids, indexing="ij")
    flats = [m.ravel() for m in mesh]

    fixed = dict(fixed_params or {})
    fit_template = _fit_template(model, names)
    entries = []
    k = 0
    for e in model.param_template.entries:
        if e.name in names:
            entries.append(ParamEntry(e.name, (flats[names.index(e.name)],),
                                      e.breakpoints))
            k += 1
        else:
            fv = fixed[e.name]
            vals = tuple(float(v) for v in fv) if isinstance(fv, (tuple, list)) \
                else (float(fv),) * e.segments
            entries.append(ParamEntry(e.name, vals, e.breakpoints))
    if any(e.segments > 1 and e.name in names for e in fit_template.entries):
        raise ValueError("grid axes must be scalar parameters")
    params = ParameterVector(entries)

    y0 = _initial_state(model, data)
    traj, alive = integrate_batch(model, params, y0, data.dt, len(data) - 1,
                                  t0=float(data.times[0]))
    loss = np.zeros(total)
    for lb in loss_spec.fit_labels(data.labels):
        if lb in model.state_names:
            pred = traj[:, :, model.state_names.index(lb)]
        else:
            cols = [model.state_names.index(s) for s in loss_spec.aggregate[lb]]
            pred = traj[:, :, cols].sum(axis=2)
        resid = pred - data.column(lb)[:, None]
        loss += loss_spec.weight_of(lb) * (resid * resid).sum(axis=0)

    loss = np.where(alive, loss, np.inf)
    finite = np.isfinite(loss)
    if not finite.any():
        raise EpicalError("every grid node failed to simulate")
    mass = np.zeros(total)
    mass[finite] = np.exp(-(loss[finite] - loss[finite].min()))
    cell = float(np.prod([g[1] - g[0] for g in grids]))
    mass /= mass.sum() * cell
    return GridPosterior(list(zip(names, grids)), mass.reshape(shape),
                         meta={"dead_nodes": int((~alive).sum()),
                               "min_loss": float(loss[finite].min())})


# --- prediction ensembles ------------------------------------------------------

@dataclass
class PredictionEnsemble:
    """Weighted member trajectories with pointwise mean and spread."""

    param_names: tuple
    rows: np.ndarray        # (n, p) member parameter draws
    weights: np.ndarray     # normalized, nonnegative
    trajectories: np.ndarray  # (n, L, N)
    mean: TimeSeries
    std: TimeSeries
    dropped: int = 0


def select_draws(log, n, seed, weighting="likelihood"):
    """Pick n random records from a log; returns (rows, weights).

    "likelihood" weights draws by exp(-loss) (the default); "uniform"
    gives equal weights, reproducing pure frequency semantics.
    """
    if len(log) == 0:
        raise ValueError("empty log")
    rng = np.random.default_rng(seed)
    replace = n > len(log)
    idx = rng.choice(len(log), size=n, replace=replace)
    rows = log.params[idx]
    if weighting == "likelihood":
        loss = log.loss[idx]
        weights = np.exp(-(loss - loss.min()))
    elif weighting == "uniform":
        weights = np.ones(n)
    else:
        raise ValueError("weighting must be 'likelihood' or 'uniform'")
    return rows, weights


def predict(model, param_names, rows, y0, dt, steps, *, weights=None,
            fixed_params=None, t0=0.0):
    """Noiseless model trajectories for each parameter draw, plus the
    weighted mean series and pointwise standard deviation.

    rows holds flat values of the named (fit) parameters; the remaining
    model parameters come from fixed_params. Members whose simulation
    fails are dropped and the weights renormalized.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n = rows.shape[0]
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative and normalizable")

    fixed = dict(fixed_params or {})
    names = list(param_names)
    fit_template = _fit_template(model, _names_to_entries(model, names))
    entries = []
    k = 0
    for e in model.param_template.entries:
        if e.name in {t.name for t in fit_template.entries}:
            vals = tuple(rows[:, k + j] for j in range(e.segments))
            k += e.segments
            entries.append(ParamEntry(e.name, vals, e.breakpoints))
        else:
            fv = fixed[e.name]
            vals = tuple(float(v) for v in fv) if isinstance(fv, (tuple, list)) \
                else (float(fv),) * e.segments
            entries.append(ParamEntry(e.name, vals, e.breakpoints))
    params = ParameterVector(entries)
    if tuple(fit_template.flat_names()) != tuple(names):
        raise ValueError(f"param_names must be {fit_template.flat_names()}, "
                         f"got {tuple(names)}")

    traj, alive = integrate_batch(model, params, y0, dt, steps, t0=t0)
    dropped = int((~alive).sum())
    if not alive.any():
        raise EpicalError("every ensemble member failed to simulate")
    traj = traj[:, alive, :]
    rows = rows[alive]
    weights = weights[alive]
    w = weights / weights.sum()

    mean = np.einsum("m,lmn->ln", w, traj)
    dev = traj - mean[:, None, :]
    var = np.einsum("m,lmn->ln", w, dev * dev)
    times = t0 + dt * np.arange(steps + 1)
    mean_ts = TimeSeries(times, mean, model.state_names, allow_negative=True,
                         meta={"dropped": dropped})
    std_ts = TimeSeries(times, np.sqrt(var), model.state_names,
                        allow_negative=True)
    return PredictionEnsemble(tuple(names), rows, w,
                              np.swapaxes(traj, 0, 1), mean_ts, std_ts,
                              dropped=dropped)


def _names_to_entries(model, flat_names):
    """Base entry names covering a sequence of flat parameter names."""
    base = []
    for e in model.param_template.entries:
        flats = ([e.name] if e.segments == 1
                 else [f"{e.name}_{j}" for j in range(e.segments)])
        if any(f in flat_names for f in flats):
            base.append(e.name)
    return tuple(base)


def residual(predicted, observed, compartment, window, aggregate=None):
    """Root-mean-square error of a mean prediction over a time window.

    window is a (start, stop) row range on the shared time grid. Returns
    (raw, relative) where relative divides by the observed mean level.
    """
    lo, hi = window
    if hi <= lo:
        raise EmptyWindow(f"window {window} selects no points")
    if np.max(np.abs(predicted.times[lo:hi] - observed.times[lo:hi])) > 1e-9:
        raise ValueError("prediction and observation grids differ on window")
    spec = _AggView(aggregate or {})
    pred = np.asarray(_predicted_column(predicted, spec, compartment),
                      dtype=float)[lo:hi]
    obs = observed.column(compartment)[lo:hi]
    err = pred - obs
    raw = math.sqrt(float(err @ err) / err.size)
    level = float(np.mean(obs))
    rel = raw / level if level > 0 else math.inf
    return raw, rel


class _AggView:
    """Minimal loss-spec stand-in exposing aggregation for residual()."""

    def __init__(self, aggregate):
        self.aggregate = aggregate
