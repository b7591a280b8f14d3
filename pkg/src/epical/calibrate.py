"""Neural calibration driver.

Each chain repeats: feed the observed series to the network, integrate the
model with the emitted parameters, score the prediction, backpropagate to
the network weights, take an Adam step. Every evaluated parameter point
enters the sample log together with its loss; nothing is rejected. Chains
are independent and seeded from a master seed, so pooled results do not
depend on worker scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .dynamics import (ParamEntry, ParameterVector, TimeSeries, VarSeries,
                       integrate_ad)
from .errors import (BlowUp, ChainFailed, DegenerateWeight, DivergedGradient,
                     EnsembleFailed, EpicalError, SchemaError)
from .neural import NetConfig, adam_step, build_network, forward_ad, pretrain_to
from .seeding import derive_seed

__all__ = [
    "LossSpec", "PosteriorLog", "ChainResult", "EnsembleResult",
    "compute_loss", "loss_breakdown", "loss_weights", "flatten_input",
    "train_chain", "run_ensemble",
]


@dataclass(frozen=True)
class LossSpec:
    """How predictions are scored against observations.

    kind "plain-l2" sums squared residuals; "weighted-l2" scales each
    compartment by a positive weight (typically the inverse of its time
    integral, so compartments spanning orders of magnitude contribute
    comparably). `fit` restricts the loss to a subset of observed
    compartments; `aggregate` maps an observed column to the predicted
    state columns summed before comparison (e.g. one quarantine column
    against the sum of the three quarantined states).
    """

    kind: str = "plain-l2"
    weights: dict | None = None
    fit: tuple | None = None
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("plain-l2", "weighted-l2"):
            raise ValueError("kind must be 'plain-l2' or 'weighted-l2'")
        if self.kind == "weighted-l2":
            if not self.weights:
                raise ValueError("weighted-l2 requires weights")
            if any(w <= 0 for w in self.weights.values()):
                raise ValueError("loss weights must be positive")

    def fit_labels(self, observed_labels):
        labels = self.fit if self.fit is not None else tuple(observed_labels)
        missing = [lb for lb in labels if lb not in observed_labels]
        if missing:
            raise SchemaError(f"fit compartments {missing} not in observations")
        return labels

    def weight_of(self, label):
        if self.kind == "plain-l2":
            return 1.0
        try:
            return float(self.weights[label])
        except KeyError:
            raise SchemaError(f"no loss weight for compartment {label!r}") from None


def loss_weights(observed, fit=None):
    """Inverse-integral weights: 1 / trapezoid integral of each compartment."""
    labels = fit if fit is not None else observed.labels
    out = {}
    for lb in labels:
        integral = float(np.trapezoid(observed.column(lb), observed.times))
        if integral <= 0:
            raise DegenerateWeight(f"compartment {lb!r} has nonpositive integral")
        out[lb] = 1.0 / integral
    return out


def _predicted_column(predicted, spec, label):
    if label in predicted.labels:
        return predicted.column(label)
    if label in spec.aggregate:
        parts = [predicted.column(s) for s in spec.aggregate[label]]
        if isinstance(predicted, TimeSeries):
            return np.sum(parts, axis=0)
        col = parts[0]
        for extra in parts[1:]:
            col = [a + b for a, b in zip(col, extra)]
        return col
    raise SchemaError(f"predicted series has no compartment {label!r}")


def _check_alignment(predicted, observed):
    if len(predicted.times) != len(observed.times):
        raise SchemaError("predicted and observed lengths differ")
    if np.max(np.abs(predicted.times - observed.times)) > 1e-9:
        raise SchemaError("predicted and observed time grids differ")


def compute_loss(spec, predicted, observed):
    """Scalar loss between a numeric predicted series and observations."""
    return sum(loss_breakdown(spec, predicted, observed).values())


def loss_breakdown(spec, predicted, observed):
    """Per-compartment contributions to the loss (numeric path)."""
    _check_alignment(predicted, observed)
    out = {}
    for lb in spec.fit_labels(observed.labels):
        resid = _predicted_column(predicted, spec, lb) - observed.column(lb)
        out[lb] = spec.weight_of(lb) * float(resid @ resid)
    return out


def loss_node(tape, spec, predicted, observed):
    """Loss as a single fused tape node over a VarSeries prediction."""
    _check_alignment(predicted, observed)
    items, targets, coeffs = [], [], []
    for lb in spec.fit_labels(observed.labels):
        col = _predicted_column(predicted, spec, lb)
        obs = observed.column(lb)
        w = spec.weight_of(lb)
        items.extend(col)
        targets.extend(obs)
        coeffs.extend([w] * len(obs))
    return tape.weighted_sse(items, np.array(targets), np.array(coeffs))


class PosteriorLog:
    """Columnar log of (chain, epoch, parameter estimate, loss) samples.

    The stored likelihood is exactly exp(-loss). Export column order:
    chain, epoch, the flat parameter names, loss, likelihood.
    """

    def __init__(self, param_names, chain, epoch, params, loss):
        self.param_names = tuple(param_names)
        self.chain = np.asarray(chain, dtype=int)
        self.epoch = np.asarray(epoch, dtype=int)
        self.params = np.asarray(params, dtype=float)
        self.loss = np.asarray(loss, dtype=float)
        self.likelihood = np.exp(-self.loss)
        n = len(self.chain)
        if not (len(self.epoch) == n and self.params.shape == (n, len(self.param_names))
                and len(self.loss) == n):
            raise ValueError("inconsistent log columns")

    def __len__(self):
        return len(self.chain)

    @classmethod
    def empty(cls, param_names):
        p = len(tuple(param_names))
        return cls(param_names, [], [], np.empty((0, p)), [])

    @classmethod
    def merge(cls, logs):
        logs = [lg for lg in logs if lg is not None]
        if not logs:
            raise ValueError("nothing to merge")
        names = logs[0].param_names
        for lg in logs:
            if lg.param_names != names:
                raise ValueError("parameter names differ between logs")
        merged = cls(
            names,
            np.concatenate([lg.chain for lg in logs]),
            np.concatenate([lg.epoch for lg in logs]),
            np.vstack([lg.params for lg in logs]),
            np.concatenate([lg.loss for lg in logs]),
        )
        order = np.lexsort((merged.epoch, merged.chain))
        return cls(names, merged.chain[order], merged.epoch[order],
                   merged.params[order], merged.loss[order])

    def column(self, name):
        try:
            j = self.param_names.index(name)
        except ValueError:
            raise KeyError(f"no parameter {name!r}") from None
        return self.params[:, j]

    def best(self):
        """(row index, parameter row, loss) of the lowest-loss record."""
        i = int(np.argmin(self.loss))
        return i, self.params[i], float(self.loss[i])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("chain,epoch," + ",".join(self.param_names)
                     + ",loss,likelihood\n")
            for i in range(len(self)):
                row = [str(int(self.chain[i])), str(int(self.epoch[i]))]
                row += [repr(float(v)) for v in self.params[i]]
                row += [repr(float(self.loss[i])), repr(float(self.likelihood[i]))]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header[:2] != ["chain", "epoch"] or header[-2:] != ["loss", "likelihood"]:
                raise ValueError("not a posterior log file")
            names = header[2:-2]
            chain, epoch, params, loss = [], [], [], []
            for line in fh:
                parts = line.strip().split(",")
                chain.append(int(parts[0]))
                epoch.append(int(parts[1]))
                params.append([float(v) for v in parts[2:-2]])
                loss.append(float(parts[-2]))
        return cls(names, chain, epoch,
                   np.array(params).reshape(len(chain), len(names)), loss)


@dataclass
class ChainResult:
    chain_id: int
    final_params: ParameterVector
    losses: np.ndarray
    termination: str  # "max-epochs" | "plateau"

    @property
    def epochs_run(self):
        return len(self.losses)


@dataclass
class EnsembleResult:
    log: PosteriorLog
    results: list
    failures: list


def flatten_input(data):
    """Network input: per-compartment max-normalized series, concatenated
    compartment by compartment."""
    cols = []
    for lb in data.labels:
        col = data.column(lb)
        peak = float(np.max(col))
        cols.append(col / peak if peak > 0 else col)
    return np.concatenate(cols)


def _initial_state(model, data):
    """First data row mapped onto model states; absent states start at 0."""
    y0 = []
    for name in model.state_names:
        y0.append(float(data.column(name)[0]) if name in data.labels else 0.0)
    return tuple(y0)


def _fit_template(model, fit_params):
    entries = [e for e in model.param_template.entries if e.name in fit_params]
    missing = set(fit_params) - {e.name for e in entries}
    if missing:
        raise ValueError(f"unknown fit parameters {sorted(missing)}")
    return ParameterVector(entries)


def _assemble_params(model, fit_template, out_vars, fixed):
    """Full model parameter vector from network outputs plus fixed values."""
    fit_names = {e.name for e in fit_template.entries}
    entries = []
    k = 0
    for e in model.param_template.entries:
        if e.name in fit_names:
            vals = tuple(out_vars[k:k + e.segments])
            k += e.segments
        else:
            fv = fixed[e.name]
            vals = tuple(float(v) for v in fv) if isinstance(fv, (tuple, list)) \
                else (float(fv),) * e.segments
        entries.append(ParamEntry(e.name, vals, e.breakpoints))
    return ParameterVector(entries)


def _draw_target(fit_template, init_ranges, rng):
    flat = []
    for e in fit_template.entries:
        lo, hi = init_ranges[e.name]
        flat.extend(rng.uniform(lo, hi, size=e.segments))
    return np.array(flat)


def _plateaued(losses, window, rtol):
    """True when the last `window` epochs brought no meaningful new minimum."""
    if window is None or len(losses) < window + 1:
        return False
    before = min(losses[:-window])
    recent = min(losses[-window:])
    return (before - recent) < rtol * max(1.0, abs(before))


def train_chain(model, data, net_config, loss_spec, *, epochs, seed,
                fit_params, init_ranges, fixed_params=None, chain_id=0,
                pretrain_tol=5e-3, pretrain_max_iters=10000,
                plateau_window=20, plateau_rtol=1e-12, noise_in_loss=None):
    """Run one calibration chain; returns (ChainResult, PosteriorLog).

    The network is first pretrained to emit a uniform draw from
    `init_ranges`, then trained on the data for up to `epochs` epochs or
    until the loss plateaus. One log record is written per epoch. Failures
    raise ChainFailed carrying the partial log as `fragment`.
    """
    fixed_params = dict(fixed_params or {})
    fit_template = _fit_template(model, fit_params)
    flat_names = fit_template.flat_names()
    x = flatten_input(data)
    y0 = _initial_state(model, data)
    dt = data.dt
    steps = len(data) - 1
    t0 = float(data.times[0])

    net = build_network(
        NetConfig(depth=net_config.depth, width=net_config.width,
                  activation=net_config.activation,
                  learning_rate=net_config.learning_rate,
                  batch_size=net_config.batch_size,
                  seed=derive_seed(seed, 0)),
        x.size, fit_template)
    rng = np.random.default_rng(derive_seed(seed, 1))
    target = _draw_target(fit_template, init_ranges, rng)
    pretrain_to(net, target, x, tol=pretrain_tol, max_iters=pretrain_max_iters)

    chains_col, epochs_col, rows, losses = [], [], [], []

    def _fragment():
        return PosteriorLog(flat_names, chains_col, epochs_col,
                            np.array(rows).reshape(len(rows), len(flat_names)),
                            losses)

    termination = "max-epochs"
    for epoch in range(epochs):
        try:
            tape = Tape()
            out, binding = forward_ad(tape, net, x)
            params = _assemble_params(model, fit_template, out, fixed_params)
            predicted = integrate_ad(model, params, y0, dt, steps,
                                     noise=noise_in_loss, t0=t0)
            loss = loss_node(tape, loss_spec, predicted, data)
            chains_col.append(chain_id)
            epochs_col.append(epoch)
            rows.append([o.value for o in out])
            losses.append(loss.value)
            grads = binding.extract(tape.backward(loss))
            adam_step(net, grads, net_config.learning_rate)
        except (BlowUp, DivergedGradient, EpicalError) as exc:
            err = ChainFailed(chain_id, epoch, repr(exc))
            err.fragment = _fragment()
            raise err from exc
        if _plateaued(losses, plateau_window, plateau_rtol):
            termination = "plateau"
            break

    log = _fragment()
    final = fit_template.with_flat_values(rows[-1]) if rows else fit_template
    return ChainResult(chain_id, final, np.array(losses), termination), log


def _chain_task(payload):
    (model, data, net_config, loss_spec, epochs, master_seed, chain_id,
     kwargs) = payload
    seed = derive_seed(master_seed, chain_id)
    try:
        result, log = train_chain(model, data, net_config, loss_spec,
                                  epochs=epochs, seed=seed, chain_id=chain_id,
                                  **kwargs)
        return chain_id, result, log, None
    except ChainFailed as exc:
        return chain_id, None, exc.fragment, {
            "chain": chain_id, "epoch": exc.epoch, "cause": str(exc)}
    except EpicalError as exc:  # e.g. pretraining cap
        return chain_id, None, None, {
            "chain": chain_id, "epoch": -1, "cause": repr(exc)}


def run_ensemble(model, data, net_config, loss_spec, *, chains, epochs,
                 master_seed, workers=1, **chain_kwargs):
    """Train `chains` independent chains and pool their logs.

    Chain k is seeded from (master_seed, k), so results are reproducible
    and independent of `workers`. Failed chains are recorded and the
    ensemble continues; if every chain fails, EnsembleFailed is raised.
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    payloads = [(model, data, net_config, loss_spec, epochs, master_seed,
                 k, chain_kwargs) for k in range(chains)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_chain_task, payloads))
    else:
        outcomes = [_chain_task(p) for p in payloads]

    outcomes.sort(key=lambda item: item[0])
    results, logs, failures = [], [], []
    for _, result, log, failure in outcomes:
        if failure is not None:
            failures.append(failure)
            if log is not None and len(log):
                logs.append(log)
        else:
            results.append(result)
            logs.append(log)
    if not results:
        raise EnsembleFailed(f"all {chains} chains failed")
    return EnsembleResult(PosteriorLog.merge(logs), results, failures)
