"""Exception hierarchy shared by every subsystem."""


class RitError(Exception):
    """Base class for all engine errors."""


# concept space
class OracleProtocolError(RitError):
    def __init__(self, pair, detail):
        self.pair = tuple(pair)
        super().__init__(f"probability oracle failed for {self.pair[0]!r}|{self.pair[1]!r}: {detail}")


class IncompleteMatrixError(RitError):
    pass


class PromptSynthesisError(RitError):
    def __init__(self, labels, raw, missing):
        self.labels = list(labels)
        self.raw = raw
        self.missing = list(missing)
        super().__init__(f"language model output misses {self.missing}: {raw!r}")


class BuildError(RitError):
    pass


# metrics
class ScoringError(RitError):
    pass


class CoverageError(RitError):
    pass


# plans
class PlanParseError(RitError):
    def __init__(self, message, line=0, column=0):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"line {line}, column {column}: {message}")


class PlanApplicationError(RitError):
    pass


class ProtocolError(RitError):
    """A port or conversation contract was broken; never retried."""


# gate
class GateError(RitError):
    pass


# transport
class TransportError(RitError):
    """Retryable failure reaching a backend."""


class TokenExpiredError(TransportError):
    """The backend no longer holds the addressed state."""
