"""Exception taxonomy shared across the package."""


class EpicalError(Exception):
    """Base class for all package-specific errors."""


# --- automatic differentiation ---

class InvalidValue(EpicalError):
    """A non-finite value was produced or supplied to the tape."""

    def __init__(self, op, value):
        self.op = op
        self.value = value
        super().__init__(f"non-finite value {value!r} produced by op '{op}'")


class DomainError(EpicalError):
    """An elementary operation was evaluated outside its domain."""

    def __init__(self, op, detail):
        self.op = op
        super().__init__(f"domain violation in op '{op}': {detail}")


class StaleTape(EpicalError):
    """A variable refers to a tape that has been cleared."""


# --- dynamics / integration ---

class BlowUp(EpicalError):
    """The integrator produced a non-finite state."""

    def __init__(self, step_index):
        self.step_index = step_index
        super().__init__(f"non-finite state at integration step {step_index}")


# --- neural network ---

class ShapeError(EpicalError):
    """Input length does not match the network's input layer."""


class DivergedGradient(EpicalError):
    """A non-finite gradient reached the optimizer."""


class PretrainFailed(EpicalError):
    """Pretraining hit its iteration cap before reaching tolerance."""

    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"pretraining stopped at residual {residual:.3e} after {iterations} iterations"
        )


# --- calibration ---

class SchemaError(EpicalError):
    """Predicted and observed series disagree on labels or times."""


class DegenerateWeight(EpicalError):
    """A loss weight could not be formed (zero-integral compartment)."""


class ChainFailed(EpicalError):
    """A calibration or sampling chain aborted."""

    def __init__(self, chain_id, epoch, cause):
        self.chain_id = chain_id
        self.epoch = epoch
        self.cause = cause
        super().__init__(f"chain {chain_id} failed at epoch {epoch}: {cause}")


class EnsembleFailed(EpicalError):
    """Every chain in an ensemble failed."""


# --- mcmc ---

class OutOfSupport(EpicalError):
    """A parameter vector lies outside the positive prior support."""


# --- posterior ---

class DegenerateLikelihoods(EpicalError):
    """No usable likelihood weights could be formed from a log."""


class GridMismatch(EpicalError):
    """Two densities do not share a grid; resample before comparing."""


class EmptyWindow(EpicalError):
    """A residual window selects no time points."""


# --- data / config ---

class DataError(EpicalError):
    """Problem with an ingested dataset."""


class GapError(DataError):
    """Dates in a dataset are not consecutive daily."""

    def __init__(self, date):
        self.date = date
        super().__init__(f"non-daily gap in dataset at {date}")


class ConfigError(EpicalError):
    """Invalid or inconsistent run configuration."""
