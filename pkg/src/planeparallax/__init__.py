"""Scene structure from planar parallax: homographies, epipoles, structure and depth."""
from .errors import PlaneParallaxError
from .geometry import (CameraIntrinsics, PlanarHomography, ReferencePlane, RigidPose,
                       plane_induced_homography, project, warp)
from .homography import CorrespondenceSet, Epipole, RansacParams

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CorrespondenceSet", "Epipole", "PlanarHomography", "PlaneParallaxError",
    "RansacParams", "ReferencePlane", "RigidPose", "plane_induced_homography", "project", "warp",
]
