"""Independent reference implementations used by the tests."""

import numpy as np

from taskcond.core import SpatialRelation

EPS = 0.01


def _overlaps(S, O, k):
    # projections overlap iff some subject point is not left of some object point and vice versa
    d = S[:, None, k] - O[None, :, k]
    return bool((d >= 0).any() and (d <= 0).any())


def brute_relation(S: np.ndarray, O: np.ndarray, rel: SpatialRelation, eps: float = EPS) -> bool:
    """Per-point semantics: every subject point must satisfy the relation against the object cloud."""
    if rel is SpatialRelation.ABOVE:
        top = bool((S[:, None, 2] >= O[None, :, 2] - eps).all())
        return top and _overlaps(S, O, 0) and _overlaps(S, O, 1)
    if rel is SpatialRelation.BELOW:
        return brute_relation(O, S, SpatialRelation.ABOVE, eps)
    if rel is SpatialRelation.INSIDE:
        lo_ok = (S[:, None, :] >= O[None, :, :] - eps).any(axis=1)  # some object point is not beyond it
        hi_ok = (S[:, None, :] <= O[None, :, :] + eps).any(axis=1)
        return bool(lo_ok.all() and hi_ok.all())
    if rel is SpatialRelation.OUTSIDE:
        return not brute_relation(S, O, SpatialRelation.INSIDE, eps)
    if rel is SpatialRelation.IN_FRONT_OF:
        front = bool((S[:, None, 1] <= O[None, :, 1] + eps).all())
        return front and _overlaps(S, O, 0) and _overlaps(S, O, 2)
    raise ValueError(rel)


def step_response(y0, g, t, tau, alpha_z=25.0):
    """Closed-form critically damped response of the unforced transformation system."""
    w = alpha_z / (2.0 * tau)
    t = np.asarray(t)[:, None]
    return g + (np.asarray(y0) - g) * (1.0 + w * t) * np.exp(-w * t)


def random_pair_scene(rng: np.random.Generator, points: int = 40) -> dict:
    """Two-object scene biased toward the boundaries of every relation."""
    def shape(scale):
        if rng.random() < 0.5:
            return {"box": (rng.uniform(0.3, 1.0, 3) * scale).round(4).tolist()}
        return {"cylinder": [round(rng.uniform(0.15, 0.5) * scale, 4), round(rng.uniform(0.3, 1.0) * scale, 4)]}

    def half(sh):
        if "box" in sh:
            return np.asarray(sh["box"]) / 2
        r, h = sh["cylinder"]
        return np.array([r, r, h / 2])

    obj, sub = shape(0.4), shape(0.15)
    ho, hs = half(obj), half(sub)
    mode = rng.integers(5)
    jitter = rng.normal(0, 0.01, 3)
    if mode == 0:    # inside, near a wall
        pos = rng.uniform(-1, 1, 3) * np.maximum(ho - hs, 0) + jitter
    elif mode == 1:  # resting on top
        pos = np.r_[rng.uniform(-1, 1, 2) * (ho[:2] + hs[:2]), ho[2] + hs[2]] + jitter
    elif mode == 2:  # in front
        pos = np.r_[rng.uniform(-1, 1) * (ho[0] + hs[0]), -(ho[1] + hs[1]),
                    rng.uniform(-1, 1) * (ho[2] + hs[2])] + jitter
    elif mode == 3:  # underneath
        pos = np.r_[rng.uniform(-1, 1, 2) * ho[:2], -(ho[2] + hs[2])] + jitter
    else:
        pos = rng.uniform(-1.5, 1.5, 3) * (ho + hs)
    yaw = rng.uniform(-0.3, 0.3)
    q = [np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)]
    return {"seed": int(rng.integers(1 << 30)), "objects": [
        {"id": "obj", "shape": obj, "pose": [0, 0, 1, 1, 0, 0, 0], "points_per_object": points},
        {"id": "sub", "shape": sub, "pose": [*(pos + [0, 0, 1]).tolist(), *q], "points_per_object": points},
    ]}
