"""Preconditioned Metropolis-adjusted Langevin sampling baseline.

The proposal follows Langevin dynamics rescaled by an RMSProp-style
diagonal metric (Li et al., 2016): an exponential moving average of
squared gradients defines G = diag(1/(kappa + sqrt(v))), plus a secant
estimate of the metric's position derivative as the drift correction.
Within a step the metric is frozen, so the Metropolis-Hastings ratio uses
the same proposal covariance in both directions and the accept decision
stays exact for the frozen metric. Step sizes follow a polynomially
decaying schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .calibrate import (PosteriorLog, _assemble_params, _fit_template,
                        _initial_state, loss_node)
from .dynamics import integrate_ad
from .errors import BlowUp, EpicalError, InvalidValue, OutOfSupport
from .seeding import derive_seed

__all__ = [
    "MalaConfig", "PreconditionerState", "McmcTrace", "StepResult",
    "log_posterior_and_grad", "make_target", "mala_step", "step_size_at",
    "run_mala", "gelman_rubin",
]


@dataclass(frozen=True)
class MalaConfig:
    """Sampler settings: chain count, schedule, preconditioner, retention."""

    chains: int = 50
    steps: int = 10000
    burn_in: int = 500
    thinning: int = 5
    step_size: float = 1e-2
    decay: float = 0.51
    decay_offset: int = 0
    ema: float = 0.99
    regularization: float = 1e-5
    precondition: bool = True
    curvature_term: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.burn_in < self.steps):
            raise ValueError("need 0 <= burn_in < steps")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if not (0 < self.decay < 1):
            raise ValueError("decay exponent must lie in (0, 1)")

    @property
    def retained_per_chain(self):
        return (self.steps - self.burn_in) // self.thinning


def step_size_at(config, i):
    """Step size at iteration i (1-based): eps0 * (offset + i)^-decay."""
    return config.step_size * (config.decay_offset + i) ** (-config.decay)


class PreconditionerState:
    """Running diagonal metric from an EMA of squared gradients."""

    __slots__ = ("ema", "regularization", "curvature_term", "v", "g_diag",
                 "curvature", "_prev_pos", "_prev_g", "initialized")

    def __init__(self, dim, ema=0.99, regularization=1e-5, curvature_term=True,
                 enabled=True):
        self.ema = ema if enabled else None
        self.regularization = regularization
        self.curvature_term = curvature_term
        self.v = np.zeros(dim)
        self.g_diag = np.ones(dim)
        self.curvature = np.zeros(dim)
        self._prev_pos = None
        self._prev_g = None
        self.initialized = False

    def update(self, grad, position):
        """Absorb the current gradient; refresh G and the drift correction."""
        if self.ema is None:  # identity metric
            return
        if not self.initialized:
            self.v = grad * grad
            self.initialized = True
        else:
            self.v = self.ema * self.v + (1.0 - self.ema) * grad * grad
        g = 1.0 / (self.regularization + np.sqrt(self.v))
        if self.curvature_term and self._prev_pos is not None:
            move = position - self._prev_pos
            safe = np.abs(move) > 1e-12
            self.curvature = np.where(safe, (g - self._prev_g)
                                      / np.where(safe, move, 1.0), 0.0)
        self._prev_pos = position.copy()
        self._prev_g = g
        self.g_diag = g


@dataclass
class StepResult:
    position: np.ndarray
    log_density: float
    gradient: np.ndarray
    accepted: bool
    proposal: np.ndarray | None
    proposal_log_density: float
    nonfinite: bool = False


def mala_step(target, x, logp, grad, state, eps, rng):
    """One proposal/accept cycle from (x, logp, grad).

    `target` maps a position to (log density, gradient); out-of-support
    positions return (-inf, None). The preconditioner state absorbs the
    current gradient before proposing. Non-finite proposals are rejected
    outright and flagged.
    """
    state.update(grad, x)
    g = state.g_diag
    gamma = state.curvature if state.curvature_term else 0.0
    half = 0.5 * eps
    mean = x + half * (g * grad + gamma)
    noise = rng.standard_normal(x.size)
    proposal = mean + np.sqrt(eps * g) * noise
    if not np.all(np.isfinite(proposal)):
        return StepResult(x, logp, grad, False, None, -np.inf, nonfinite=True)

    logp_new, grad_new = target(proposal)
    if not math.isfinite(logp_new):
        return StepResult(x, logp, grad, False, proposal, logp_new)

    mean_back = proposal + half * (g * grad_new + gamma)
    inv_cov = 1.0 / (eps * g)
    d_fwd = proposal - mean
    d_back = x - mean_back
    log_q_fwd = -0.5 * float(d_fwd * inv_cov @ d_fwd)
    log_q_back = -0.5 * float(d_back * inv_cov @ d_back)
    log_alpha = (logp_new - logp) + (log_q_back - log_q_fwd)
    if math.log(rng.uniform()) < log_alpha:
        return StepResult(proposal, logp_new, grad_new, True, proposal, logp_new)
    return StepResult(x, logp, grad, False, proposal, logp_new)


# --- model-coupled target ----------------------------------------------------

def log_posterior_and_grad(model, data, loss_spec, params, fixed_params=None):
    """(log posterior, gradient) at a fit-parameter vector.

    The posterior is exp(-loss) times the uniform positive prior: the log
    density is the negative loss up to a constant, and the gradient flows
    through the same simulation/loss pipeline used for network training.
    Nonpositive entries raise OutOfSupport.
    """
    flat = np.asarray(params.flat_values(), dtype=float)
    if np.any(flat <= 0):
        raise OutOfSupport("parameter vector has a nonpositive entry")
    fit_names = params.names()
    target = make_target(model, data, loss_spec, fit_names, fixed_params)
    logp, grad = target(flat)
    if grad is None:
        raise OutOfSupport("simulation failed at this parameter vector")
    return logp, grad


def make_target(model, data, loss_spec, fit_params, fixed_params=None):
    """Callable x -> (log density, gradient) over flat fit parameters."""
    fixed = dict(fixed_params or {})
    fit_template = _fit_template(model, fit_params)
    n_flat = len(fit_template.flat_names())
    y0 = _initial_state(model, data)
    dt = data.dt
    steps = len(data) - 1
    t0 = float(data.times[0])

    def target(x):
        if x.size != n_flat:
            raise ValueError("flat parameter size mismatch")
        if np.any(x <= 0):
            return -np.inf, None
        tape = Tape()
        leaves = [tape.lift(v) for v in x]
        pv = _assemble_params(model, fit_template, leaves, fixed)
        try:
            predicted = integrate_ad(model, pv, y0, dt, steps, t0=t0)
            loss = loss_node(tape, loss_spec, predicted, data)
        except (BlowUp, InvalidValue):
            return -np.inf, None
        grad_map = tape.backward(loss)
        grad = -grad_map.block(leaves[0].index, n_flat)
        return -loss.value, grad

    return target


# --- traces and the full run -------------------------------------------------

@dataclass
class McmcTrace:
    """Retained samples per chain plus acceptance bookkeeping."""

    param_names: tuple
    samples: list          # per chain: (n_retained, p) arrays
    sample_loss: list      # per chain: (n_retained,) negative log densities
    sample_accepted: list  # per chain: bool array (step that produced sample)
    accept_counts: list
    steps: int
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return len(self.samples)

    def stacked(self):
        """All retained samples pooled, shape (sum n_k, p)."""
        return np.vstack(self.samples)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("chain,epoch," + ",".join(self.param_names)
                     + ",loss,likelihood,accepted\n")
            for c, (xs, ls, acc) in enumerate(zip(self.samples, self.sample_loss,
                                                  self.sample_accepted)):
                for k in range(xs.shape[0]):
                    row = [str(c), str(k)]
                    row += [repr(float(v)) for v in xs[k]]
                    row += [repr(float(ls[k])), repr(float(np.exp(-ls[k]))),
                            str(int(acc[k]))]
                    fh.write(",".join(row) + "\n")


def _init_position(target, init_ranges, names_entries, rng, tries=100):
    for _ in range(tries):
        flat = []
        for name, segments in names_entries:
            lo, hi = init_ranges[name]
            flat.extend(rng.uniform(lo, hi, size=segments))
        x = np.array(flat)
        logp, grad = target(x)
        if math.isfinite(logp):
            return x, logp, grad
    raise EpicalError("could not find a finite-density initial position")


def _mala_chain_task(payload):
    (model, data, loss_spec, config, fit_params, fixed_params, init_ranges,
     chain_id) = payload
    target = make_target(model, data, loss_spec, fit_params, fixed_params)
    fit_template = _fit_template(model, fit_params)
    names_entries = [(e.name, e.segments) for e in fit_template.entries]
    flat_names = fit_template.flat_names()
    rng = np.random.default_rng(derive_seed(config.seed, chain_id))
    try:
        x, logp, grad = _init_position(target, init_ranges, names_entries, rng)
    except EpicalError as exc:
        return chain_id, None, None, {"chain": chain_id, "cause": repr(exc)}

    state = PreconditionerState(x.size, ema=config.ema,
                                regularization=config.regularization,
                                curvature_term=config.curvature_term,
                                enabled=config.precondition)
    kept, kept_loss, kept_acc = [], [], []
    ev_step, ev_params, ev_loss = [0], [x.copy()], [-logp]
    accepts = 0
    nonfinite = 0
    for i in range(1, config.steps + 1):
        eps = step_size_at(config, i)
        res = mala_step(target, x, logp, grad, state, eps, rng)
        x, logp, grad = res.position, res.log_density, res.gradient
        accepts += res.accepted
        nonfinite += res.nonfinite
        if res.proposal is not None and math.isfinite(res.proposal_log_density):
            ev_step.append(i)
            ev_params.append(res.proposal.copy())
            ev_loss.append(-res.proposal_log_density)
        if i > config.burn_in and (i - config.burn_in) % config.thinning == 0:
            kept.append(x.copy())
            kept_loss.append(-logp)
            kept_acc.append(res.accepted)
    log = PosteriorLog(flat_names, [chain_id] * len(ev_step), ev_step,
                       np.array(ev_params), ev_loss)
    chain = {
        "samples": np.array(kept).reshape(len(kept), x.size),
        "loss": np.array(kept_loss),
        "accepted": np.array(kept_acc, dtype=bool),
        "accepts": accepts,
        "nonfinite": nonfinite,
    }
    return chain_id, chain, log, None


def run_mala(model, data, loss_spec, config, *, fit_params, init_ranges,
             fixed_params=None, workers=1):
    """Sample the loss-based posterior with `config.chains` parallel chains.

    Returns (McmcTrace, PosteriorLog); the log collects every in-support
    evaluated point for density construction on the same footing as the
    neural scheme. Chains that cannot start are recorded in trace.meta and
    the rest continue.
    """
    payloads = [(model, data, loss_spec, config, tuple(fit_params),
                 dict(fixed_params or {}), dict(init_ranges), k)
                for k in range(config.chains)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_mala_chain_task, payloads))
    else:
        outcomes = [_mala_chain_task(p) for p in payloads]
    outcomes.sort(key=lambda item: item[0])

    samples, sample_loss, sample_acc, accept_counts = [], [], [], []
    logs, failures = [], []
    nonfinite = 0
    for _, chain, log, failure in outcomes:
        if failure is not None:
            failures.append(failure)
            continue
        samples.append(chain["samples"])
        sample_loss.append(chain["loss"])
        sample_acc.append(chain["accepted"])
        accept_counts.append(chain["accepts"])
        nonfinite += chain["nonfinite"]
        logs.append(log)
    if not samples:
        raise EpicalError("all MALA chains failed to start")
    fit_template = _fit_template(model, fit_params)
    trace = McmcTrace(fit_template.flat_names(), samples, sample_loss,
                      sample_acc, accept_counts, config.steps,
                      meta={"failures": failures,
                            "nonfinite_proposals": nonfinite})
    return trace, PosteriorLog.merge(logs)


# --- convergence diagnostics -------------------------------------------------

def gelman_rubin(chains, prefixes=None):
    """Potential scale reduction over growing prefixes of retained samples.

    `chains` is a sequence of 1-d arrays (one parameter, one array per
    chain). Returns (prefix lengths, R-hat values); zero within-chain
    variance yields inf at that prefix.
    """
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 2:
        raise ValueError("need at least two chains")
    n = min(c.shape[0] for c in chains)
    if n < 10:
        raise ValueError("need at least 10 samples per chain")
    if prefixes is None:
        prefixes = np.unique(np.linspace(10, n, 20).astype(int))
    rhats = np.empty(len(prefixes))
    for k, m in enumerate(prefixes):
        block = np.stack([c[:m] for c in chains])
        within = float(np.mean(np.var(block, axis=1, ddof=1)))
        between = m * float(np.var(np.mean(block, axis=1), ddof=1))
        if within == 0.0:
            rhats[k] = np.inf
            continue
        pooled = (m - 1) / m * within + between / m
        rhats[k] = math.sqrt(pooled / within)
    return np.asarray(prefixes), rhats
