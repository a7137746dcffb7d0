"""Exception types raised across the pipeline.

Every failure mode the pipeline can hit has its own class so callers (and the
CLI exit-code mapping) can tell them apart without parsing messages.
"""


class PlaneParallaxError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(PlaneParallaxError):
    pass


class DegenerateWarp(PlaneParallaxError):
    pass


class DegenerateConfiguration(PlaneParallaxError):
    pass


class InsufficientInliers(PlaneParallaxError):
    pass


class NoParallax(PlaneParallaxError):
    """All residual parallax is below the minimum, i.e. no ego-motion."""


class DivergedRefinement(PlaneParallaxError):
    pass


class NoEgoMotion(PlaneParallaxError):
    """The camera did not translate; the homography carries no structure."""


class NoValidCandidate(PlaneParallaxError):
    pass


class EpipoleSingularity(PlaneParallaxError):
    """Pixel too close to the epipole for a stable structure estimate."""


class DegeneratePair(PlaneParallaxError):
    pass


class BehindPlaneHorizon(PlaneParallaxError):
    pass


class EmptyMask(PlaneParallaxError):
    pass


class NonPositiveValue(PlaneParallaxError):
    pass


class InfeasibleConfig(PlaneParallaxError):
    pass
