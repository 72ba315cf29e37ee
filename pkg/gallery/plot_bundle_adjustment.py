"""
Refining poses and ellipsoids together
======================================

Drifted keyframe poses and rough ellipsoids are pulled back into agreement
with the boxes and the odometry by Levenberg-Marquardt.  The first pose is
held fixed.
"""

import numpy as np

from objslam.bundle_adjustment import (BaState, LmSettings, OdometryFactor, SemanticFactor,
                                       odometry_covariance, optimize, retract_ellipsoid)
from objslam.geometry import Ellipsoid, look_at
from objslam.simulator import DEFAULT_INTRINSICS as K, exact_bbox, random_rotation, visible

rng = np.random.default_rng(0)

# a ring of keyframes around a few small objects
objects = {j: Ellipsoid(random_rotation(rng), rng.uniform(-0.3, 0.3, 3) * [1, 1, 0.2], rng.uniform(0.04, 0.09, 3))
           for j in range(5)}
poses = [look_at([1.6 * np.cos(a), 1.6 * np.sin(a), 0.8], [0, 0, 0.05]) for a in np.linspace(0, 1.2, 12)]

factors = []
for i in range(1, len(poses)):
    u = (poses[i] @ poses[i - 1].inverse()).retract(rng.normal(0, 0.002, 6))
    factors.append(OdometryFactor(i - 1, i, u, odometry_covariance(0.002, 0.002)))
for i, p in enumerate(poses):
    for j, e in objects.items():
        if visible(e, p, K):
            factors.append(SemanticFactor(i, j, exact_bbox(e, p, K), K, 16.0 * np.eye(4)))
print(len(factors), "factors")

# start from a disturbed copy of the truth
start = BaState([poses[0]] + [p.retract(rng.normal(0, 0.01, 6)) for p in poses[1:]],
                {j: retract_ellipsoid(e, rng.normal(0, 0.08, 9)) for j, e in objects.items()})

out, report = optimize(factors, start, LmSettings(max_iters=50))
print(f"cost {report.initial_cost:.1f} -> {report.final_cost:.3f} in {report.n_iterations} iterations")


def centre_error(state):
    return np.mean([np.linalg.norm(state.objects[j].center - objects[j].center) for j in objects])


print(f"mean centre error {centre_error(start) * 1000:.1f} mm -> {centre_error(out) * 1000:.1f} mm")
