"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input failed a shape, range or finiteness check."""


class SignalLengthError(ValidationError):
    """Waveform is too short for the requested analysis."""


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or Inf.

    ``term`` names the offending quantity and ``context`` carries whatever
    diagnostics the caller had at hand (interval, alpha, ...).
    """

    def __init__(self, term, context=None):
        self.term = term
        self.context = dict(context or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.context.items())
        super().__init__(f"non-finite value in {term}" + (f" ({detail})" if detail else ""))
