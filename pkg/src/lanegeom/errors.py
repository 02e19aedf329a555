class LaneGeomError(Exception):
    """Base class for all errors raised by lanegeom."""


class ParseError(LaneGeomError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class DegenerateGeometryError(LaneGeomError):
    """Zero-length axis, coincident terminals, cusps and similar."""


class RankDeficientError(LaneGeomError):
    pass


class ShapeMismatchError(LaneGeomError):
    pass


class PlacementError(LaneGeomError):
    """Rejection sampling could not place the requested cells."""


class InfeasibleConfigError(LaneGeomError):
    pass


class NonFiniteLossError(LaneGeomError):
    def __init__(self, term):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


class DivergenceError(LaneGeomError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace
