"""Exception types shared across the package."""


class ClusterAllocError(Exception):
    """Base class for all errors raised by this package."""


class DatasetError(ClusterAllocError, ValueError):
    """Malformed or invariant-violating dataset content."""


class ConfigError(ClusterAllocError, ValueError):
    """Invalid run configuration (unknown keys, bad types, missing files)."""


class InfeasibleBudgetError(ClusterAllocError, ValueError):
    """Budget below the cheapest feasible allocation."""

    def __init__(self, budget: float, min_feasible: float):
        self.budget = float(budget)
        self.min_feasible = float(min_feasible)
        super().__init__(
            f"budget {budget:g} is infeasible; minimum feasible budget is "
            f"{min_feasible:g}"
        )


class TrainingDivergedError(ClusterAllocError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
