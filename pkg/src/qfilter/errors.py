class DimensionError(ValueError):
    """Operators of incompatible or unsupported dimension."""


class DivergenceError(RuntimeError):
    """Numerical blow-up of a state; carries the step (and trajectory) if known."""

    def __init__(self, message, step=None, trajectory=None):
        self.step = step
        self.trajectory = trajectory
        where = []
        if trajectory is not None:
            where.append(f"trajectory {trajectory}")
        if step is not None:
            where.append(f"step {step}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ImpossibleJumpError(ValueError):
    """A count was recorded where the model assigns (numerically) zero rate."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class RecordError(ValueError):
    """Observation record inconsistent with a model or grid."""


class ConfigError(ValueError):
    """Invalid scenario configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))
