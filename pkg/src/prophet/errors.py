"""Exception types shared across the pipeline."""


class ProphetError(Exception):
    """Base class for pipeline errors."""


class MissingSection(ProphetError):
    """A required manpage section (OPTIONS, SYNOPSIS) was not found."""

    def __init__(self, section: str):
        self.section = section
        super().__init__(f"required section not found: {section}")


class ProviderError(ProphetError):
    """Transient failure talking to the model provider."""


class CassetteMiss(ProphetError):
    """Replay mode saw a request with no recorded response left."""


class BudgetExceeded(ProphetError):
    """The cost ledger reached the configured cap; the call was not sent."""


class UnparseableOutput(ProphetError):
    """A model completion did not yield a usable payload for its stage."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"unparseable {stage} output" + (f": {detail}" if detail else ""))


class EmptyExtraction(ProphetError):
    """Every extraction sample was unparseable."""


class EmptyPrediction(ProphetError):
    """No combination survived parsing and constraint filtering."""


class AssemblyFailed(ProphetError):
    """No draft command could be built for a combination."""


class ScriptRejected(ProphetError):
    """A generated file script still contained fill-me placeholders after re-prompting."""
