"""Object-level semantic SLAM back end: association, dual-quadric
initialisation and bundle adjustment on synthetic desk scenes."""

from . import (association, bundle_adjustment, evaluation, geometry, initializer, qp, simulator,
               vocabulary)
from .errors import ObjSlamError

__version__ = "0.1.0"
