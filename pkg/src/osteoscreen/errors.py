"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's documented precondition."""


class DimensionError(ValueError):
    """Array shapes are incompatible for the requested operation."""


class InfeasibleError(ValueError):
    """A constrained problem has an empty feasible set."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an artifact that an upstream stage has not produced."""

    def __init__(self, stage: str, path):
        self.stage = stage
        self.path = path
        super().__init__(f"missing artifact {path}; run the '{stage}' stage first")
