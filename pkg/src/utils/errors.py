"""
Error types shared across the harness
"""


class ShapeError(ValueError):
    """Raised when a tensor op receives operands whose shapes do not conform"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class GradientError(RuntimeError):
    """Raised for invalid backward passes or optimizer steps"""


class RankDeficiencyError(ValueError):
    """Raised when a projection source matrix has (numerically) dependent rows"""

    def __init__(self, condition_number: float, limit: float):
        self.condition_number = condition_number
        self.limit = limit
        super().__init__(
            f"R_raw is rank-deficient: condition number {condition_number:.3e} exceeds {limit:.1e}"
        )


class PipelineError(RuntimeError):
    """A stream run failed; names the task and the stage it failed in"""

    def __init__(self, task_id: str, stage: str, cause: Exception):
        self.task_id = task_id
        self.stage = stage
        self.cause = cause
        super().__init__(f"task {task_id} failed during {stage}: {cause}")
