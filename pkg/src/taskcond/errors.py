"""Exception hierarchy shared by all modules."""


class TaskCondError(Exception):
    """Base class for every error raised by this package."""


class UnknownVerb(TaskCondError):
    pass


class ArityMismatch(TaskCondError):
    pass


class SelfCollision(TaskCondError):
    pass


class SchemaError(TaskCondError):
    pass


class TooFewSamples(TaskCondError):
    pass


class NonFiniteState(TaskCondError):
    pass


class DuplicateObject(TaskCondError):
    pass


class UnknownObject(TaskCondError):
    pass


class InfeasibleTask(TaskCondError):
    pass


class UnmappableAtom(TaskCondError):
    pass


class BackendUnavailable(TaskCondError):
    pass


class ConditionGenerationFailed(TaskCondError):
    def __init__(self, task, outcome=None):
        super().__init__(f"could not generate a condition for {task!s}")
        self.task = task
        self.outcome = outcome


class RecursionLimit(TaskCondError):
    def __init__(self, depth, trace=None):
        super().__init__(f"pre-condition recursion limit reached at depth {depth}")
        self.depth = depth
        self.trace = trace


class MissingDemo(TaskCondError):
    pass


class DegenerateDemo(UserWarning):
    """Warning: the demonstration has no motion; a zero-weight model is returned."""
