"""Exception hierarchy shared by all modules."""


class PatchSDFError(Exception):
    """Base class for every error raised by the package."""


class MeshFileNotFound(PatchSDFError, FileNotFoundError):
    pass


class MeshFormatError(PatchSDFError, ValueError):
    pass


class FaceTriangulationError(MeshFormatError):
    """A face has fewer than three vertices."""


class IndexOutOfRangeError(MeshFormatError, IndexError):
    """A face references a vertex that does not exist."""


class EmptyMeshError(PatchSDFError, ValueError):
    pass


class DegenerateMeshError(PatchSDFError, ValueError):
    """The mesh has zero total surface area."""


class EmptyObservationError(PatchSDFError, ValueError):
    """No camera ray hit the mesh."""


class DimensionMismatchError(PatchSDFError, ValueError):
    pass


class NonFiniteError(PatchSDFError, FloatingPointError):
    """A loss term or gradient block became NaN or infinite."""

    def __init__(self, what, context=""):
        self.what = what
        msg = f"non-finite value in {what}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class RadiusError(PatchSDFError, ValueError):
    """Patch radius below the allowed minimum."""


class PriorError(PatchSDFError, ValueError):
    pass


class FileFormatError(PatchSDFError, ValueError):
    """A binary artifact (PNSD / PNWT / PNGP) is malformed."""
