"""Exception hierarchy shared by every texseg module."""


class TexSegError(Exception):
    """Base class for all library errors."""


# mesh I/O and topology
class ParseError(TexSegError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvalidIndex(ParseError):
    pass


class EmptyMesh(TexSegError, ValueError):
    pass


class NonManifold(TexSegError, ValueError):
    def __init__(self, edge, facets):
        self.edge = tuple(edge)
        self.facets = tuple(facets)
        super().__init__(
            f"edge {self.edge} is shared by {len(self.facets)} facets {self.facets}"
        )


class DegenerateFacet(TexSegError, ValueError):
    pass


class LengthMismatch(TexSegError, ValueError):
    pass


# patch geometry
class IncompleteRing(TexSegError):
    pass


class BadGridSize(TexSegError, ValueError):
    pass


class InsufficientNeighborhood(TexSegError, ValueError):
    pass


class SingularFit(TexSegError, ValueError):
    pass


# features and binary formats
class DimensionMismatch(TexSegError, ValueError):
    pass


class IndivisibleDimension(TexSegError, ValueError):
    pass


class BadMagic(TexSegError, ValueError):
    pass


class TruncatedFile(TexSegError, ValueError):
    pass


class VersionUnsupported(TexSegError, ValueError):
    pass


# numerics and models
class ShapeMismatch(TexSegError, ValueError):
    pass


class HeadsIndivisible(TexSegError, ValueError):
    pass


class NonFiniteLoss(TexSegError, FloatingPointError):
    pass


class EmptyBatch(TexSegError, ValueError):
    pass


class NonFiniteError(TexSegError, ValueError):
    pass


# training and evaluation
class TooFewSamples(TexSegError, ValueError):
    pass


class DegenerateClusters(TexSegError, ValueError):
    pass


class EmptyInput(TexSegError, ValueError):
    pass


class UnknownVariant(TexSegError, ValueError):
    pass


class AllNoise(TexSegError, ValueError):
    pass


class BadSpec(TexSegError, ValueError):
    pass


class MalformedLine(ParseError):
    pass
