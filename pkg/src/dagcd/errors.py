"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """An argument violates a documented precondition."""


class DegenerateLabels(InvalidInput):
    """A labeled set contains only one class."""


class NoPositiveEvidence(InvalidInput):
    """All detector coefficients are non-positive; head weights are undefined."""


class EmptyContext(InvalidInput):
    """A prompt layout contains no context-labeled positions."""


class UndefinedCorrelation(InvalidInput):
    """Rank correlation is undefined (zero rank variance in an input)."""


class InfeasibleScenario(RuntimeError):
    """Requested planted margins cannot be satisfied for the given config."""


class CorruptTrace(RuntimeError):
    """Trace payload failed checksum or structural validation."""


class UnsupportedVersion(RuntimeError):
    """Trace file carries an unknown format version."""


class TraceExhausted(RuntimeError):
    """A replay oracle was asked for a step beyond the recorded range."""


class ReplayDivergence(RuntimeError):
    """Replay prefix no longer matches the recorded token sequence."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"replay diverged from recorded tokens at step {step}")


class EmptyDataset(RuntimeError):
    """A dataset file yielded zero valid examples."""
