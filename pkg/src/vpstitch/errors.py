"""Exception hierarchy shared by all vpstitch stages."""


class VpStitchError(Exception):
    """Base class for all library errors."""


# geometry kernels

class DegenerateRotation(VpStitchError):
    """Rotation has no well-defined in-plane component."""


class RankDeficient(VpStitchError):
    """Target matrix sum is rank-deficient; no unique nearest rotation."""


class DegenerateHull(VpStitchError):
    """Point set is collinear or too small for a 2D hull."""


class TooFewPoints(VpStitchError):
    """Not enough points for the requested geometric construction."""


class SingularSystem(VpStitchError):
    """Least-squares normal/KKT system is rank-deficient beyond tolerance."""


class DegenerateConfiguration(VpStitchError):
    """Point configuration (e.g. 3 collinear of 4) admits no homography."""


# ingest

class TooFewSegments(VpStitchError):
    """Line segment detector produced fewer segments than required."""


class InsufficientMatches(VpStitchError):
    """Feature matching produced fewer than the minimum inlier count."""


class FormatError(VpStitchError):
    """A project or data file violates the expected schema."""


class BoundsError(VpStitchError):
    """Coordinates in a data file fall outside the declared image bounds."""


# vanishing point detection

class NoConsensus(VpStitchError):
    """No vanishing point candidate reached the minimum segment support."""


class NoOrthogonalPair(VpStitchError):
    """No candidate pair admits a valid focal length."""


# pose graph

class DisconnectedGraph(VpStitchError):
    """Stitch graph is not connected."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(
            "stitch graph is disconnected; components: %s" % self.components
        )


class FocalEstimationFailed(VpStitchError):
    """Homography decomposition yielded no valid focal for an edge."""


class ConvergenceFailure(VpStitchError):
    """Iterative rotation averaging diverged."""


# similarity prior

class NoHypothesis(VpStitchError):
    """No roughly-orthogonal pair of aligned VPs to seed dominant directions."""


class AllOutliers(VpStitchError):
    """Every image was rejected by the VP residual test."""


class AmbiguousAssignment(UserWarning):
    """Two axis assignments tied; the first in canonical order was kept."""


class NonPositiveScale(UserWarning):
    """A solved scale was not positive and has been floored."""


# mesh warp

class NoAnchors(UserWarning):
    """A graph edge contributed no alignment residuals and was ignored."""


class EmptyCanvas(VpStitchError):
    """Deformed meshes span an empty or non-finite canvas."""


# metrics

class NoFreeQuads(UserWarning):
    """An image has no non-overlapping quads; its distortion is skipped."""


class SingleImage(VpStitchError):
    """Metric requires at least two images."""


class MissingTruth(VpStitchError):
    """Metric requires ground-truth extrinsics that were not provided."""


# synthesis

class InvalidSpec(VpStitchError):
    """Scene specification violates its documented ranges."""
