"""Exception hierarchy shared by every gammt module."""


class GammtError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(GammtError, ValueError):
    """An operation was called with arguments outside its precondition."""


class ShapeError(ContractViolation):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        if shapes:
            desc = " vs ".join(str(tuple(s)) for s in shapes)
            super().__init__(f"{op}: incompatible shapes {desc}")
        else:
            super().__init__(f"{op}: shape mismatch")


class SequenceLengthError(ContractViolation):
    pass


class NumericError(GammtError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class TrainingDiverged(NumericError):
    def __init__(self, step, head, what="loss"):
        self.step = step
        self.head = head
        super().__init__(f"non-finite {what} at step {step} (head {head})")


class ConfigError(GammtError, ValueError):
    pass


class UnknownTokenError(GammtError, LookupError):
    def __init__(self, char, offset):
        self.char = char
        self.offset = offset
        super().__init__(f"character {char!r} at offset {offset} is not in the vocabulary")

    def __str__(self):
        return self.args[0]


class IdRangeError(GammtError, IndexError):
    pass


class BudgetExceeded(GammtError, RuntimeError):
    def __init__(self, count, budget):
        self.count = count
        self.budget = budget
        super().__init__(f"enumeration needs {count} measures, budget is {budget}")


class CheckpointFormatError(GammtError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")
