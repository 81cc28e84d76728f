"""Exception hierarchy shared by the library and the command line front end."""


class BassDecompError(Exception):
    """Base class for all library errors."""


class MeasureError(BassDecompError, ValueError):
    """Invalid measure, coupling or input file."""


class InfeasibleError(BassDecompError):
    """The pair is not in convex order (no martingale transport exists)."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NonConvergence(BassDecompError):
    """An iterative solver hit its iteration cap or stalled."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BoundaryAtom(BassDecompError, ValueError):
    """A source atom lies on the relative boundary of the target hull."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class CrossLeak(BassDecompError):
    """A coupling moves mass between distinct paving components."""


class PavingDisagreement(BassDecompError):
    """Two paving routes produced different partitions."""


class VerificationFailure(BassDecompError):
    """A statistical check on simulated paths failed."""
