"""Exception types shared across the package."""


class EgotwinError(Exception):
    """Base class for all library errors."""


class CutLocus(EgotwinError):
    pass


class NonUnitAxis(EgotwinError):
    pass


class Degenerate(EgotwinError):
    pass


class NoConsensus(EgotwinError):
    pass


class PivotOffAxisNormal(EgotwinError):
    pass


class FrameOutOfRange(EgotwinError):
    pass


class EmptyStates(EgotwinError):
    pass


class RadiusTooSmall(EgotwinError):
    pass


class KindMismatch(EgotwinError):
    pass


class MissingCameraPose(EgotwinError):
    pass


class NoClusters(EgotwinError):
    pass


class InvalidCount(EgotwinError):
    pass


class NoKeyframes(EgotwinError):
    pass


class DisconnectedChain(EgotwinError):
    pass


class NotConverged(EgotwinError):
    pass


class NoTracks(EgotwinError):
    pass


class IntrinsicsMismatch(EgotwinError):
    pass


class TooFewPoints(EgotwinError):
    pass


class DisconnectedScene(EgotwinError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"submap graph is disconnected: {self.components}")


class InvalidSpec(EgotwinError):
    pass


class NotRevolute(EgotwinError):
    pass


class FrameMismatch(EgotwinError):
    pass


class EmptyGeometry(EgotwinError):
    pass


class DimMismatch(EgotwinError):
    pass


class WriteError(EgotwinError):
    pass


class FragmentFailure(EgotwinError):
    """A fragment could not be processed; ``stage`` names where it broke."""

    def __init__(self, stage: str, reason: str):
        self.stage = stage
        self.reason = reason
        super().__init__(f"[{stage}] {reason}")
