"""Exception types shared across the optimizer."""


class DerivError(Exception):
    """Base class for all errors raised by this package."""


class UndeclaredIterator(DerivError):
    pass


class ArityMismatch(DerivError):
    pass


class EmptyRange(DerivError):
    pass


class ParseError(DerivError):
    pass


class CycleError(DerivError):
    pass


class UnknownOp(DerivError):
    pass


class BadAttr(DerivError):
    pass


class ShapeMismatch(DerivError):
    pass


class OutOfBoundsRead(DerivError):
    pass


class OverflowError64(DerivError):
    pass


class MissingInput(DerivError):
    pass


class RuleError(DerivError):
    """A rule was applied where its precondition does not hold."""


class NotCoveringPartition(RuleError):
    pass


class BodiesDiffer(RuleError):
    pass


class NotUnionable(RuleError):
    pass


class NotIndependent(RuleError):
    pass


class NoDependency(RuleError):
    pass


class NotAPartition(RuleError):
    pass


class NotBijective(RuleError):
    pass


class RangeNotContained(RuleError):
    pass


class NotApplicable(RuleError):
    pass


class NotProvablyConstant(RuleError):
    pass


class RegionUsed(RuleError):
    pass


class BadSite(RuleError):
    pass


class EmptyCandidates(DerivError):
    pass


class VerificationFailed(DerivError):
    pass
