"""Finite-difference validation of every analytic gradient.

Central differences at h=1e-5 in double precision, compared with a
relative error against the larger magnitude. Sample points are drawn
away from the known non-smooth loci (smooth-L1 kinks, exact logit
equality in the consistency loss).
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import distill, tracker
from .core import Box, cross_entropy, smooth_l1

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _batch(rng: np.random.Generator, n=4, c=6) -> distill.DistillBatch:
    boxes = tuple(
        Box(x, y, x + w, y + h)
        for x, y, w, h in rng.uniform(5, 20, size=(n, 4))
    )
    # keep delta differences away from the smooth-L1 kink at |x| = beta
    sd = rng.normal(size=(n, 4)) * 0.4
    td = sd + rng.choice([-0.3, 0.3], size=(n, 4))
    return distill.DistillBatch(
        boxes=boxes,
        student_logits=rng.normal(size=(n, c)),
        teacher_logits=rng.normal(size=(n, c)),
        student_deltas=sd,
        teacher_deltas=td,
        roles=rng.choice([1, -1], size=n),
        n_cls=n,
    )


def check_kd_class(rng, variant="mse") -> float:
    batch = _batch(rng)
    _, grad = distill.kd_class_loss(batch, variant=variant)

    def f(x):
        b = _clone_batch(batch, student_logits=x)
        return distill.kd_class_loss(b, variant=variant)[0]

    return relative_error(grad, central_difference(f, batch.student_logits.copy()))


def check_hard_label(rng) -> float:
    batch = _batch(rng)
    _, grad = distill.hard_label_class_loss(batch)

    def f(x):
        return distill.hard_label_class_loss(_clone_batch(batch, student_logits=x))[0]

    return relative_error(grad, central_difference(f, batch.student_logits.copy()))


def check_kd_reg(rng) -> float:
    batch = _batch(rng)
    _, grad = distill.kd_reg_loss(batch)

    def f(x):
        return distill.kd_reg_loss(_clone_batch(batch, student_deltas=x))[0]

    return relative_error(grad, central_difference(f, batch.student_deltas.copy()))


def check_semcon(rng) -> float:
    a = rng.normal(size=(3, 6))
    b = a + rng.normal(size=(3, 6)) * 0.5 + 0.2  # keep views distinct
    _, ga, gb = distill.semcon_loss(a, b)
    fa = central_difference(lambda x: distill.semcon_loss(x, b)[0], a.copy())
    fb = central_difference(lambda x: distill.semcon_loss(a, x)[0], b.copy())
    return max(relative_error(ga, fa), relative_error(gb, fb))


def check_cross_entropy(rng) -> float:
    logits = rng.normal(size=7)
    label = int(rng.integers(7))
    _, grad = cross_entropy(logits, label)
    fd = central_difference(lambda x: cross_entropy(x, label)[0], logits.copy())
    return relative_error(grad, fd)


def check_smooth_l1(rng) -> float:
    # sample away from the kink |pred - target| = beta
    target = float(rng.normal())
    pred = target + float(rng.choice([-1, 1]) * rng.uniform(0.05, 0.8))
    if abs(abs(pred - target) - 1.0) < 1e-2:
        pred = target + 0.5
    _, grad = smooth_l1(pred, target)
    fd = central_difference(
        lambda x: smooth_l1(float(x[0]), target)[0], np.array([pred])
    )
    return relative_error(np.array([grad]), fd)


def check_track_contrastive(rng) -> float:
    anchors = []
    for _ in range(3):
        anchors.append(
            (rng.normal(size=int(rng.integers(1, 4))), rng.normal(size=int(rng.integers(1, 4))))
        )
    _, grads = tracker.track_contrastive_loss(anchors)
    errs = []
    for k in range(len(anchors)):
        for side in (0, 1):
            def f(x, k=k, side=side):
                mod = [list(a) for a in anchors]
                mod[k][side] = x
                return tracker.track_contrastive_loss([tuple(a) for a in mod])[0]

            fd = central_difference(f, anchors[k][side].copy())
            errs.append(relative_error(grads[k][side], fd))
    return max(errs)


def _clone_batch(batch, **overrides):
    fields = dict(
        boxes=batch.boxes,
        student_logits=batch.student_logits,
        teacher_logits=batch.teacher_logits,
        student_deltas=batch.student_deltas,
        teacher_deltas=batch.teacher_deltas,
        roles=batch.roles,
        n_cls=batch.n_cls,
    )
    fields.update(overrides)
    return distill.DistillBatch(**fields)


SUITES: Dict[str, Callable] = {
    "kd_class_mse": lambda rng: check_kd_class(rng, "mse"),
    "kd_class_kl": lambda rng: check_kd_class(rng, "kl"),
    "kd_class_hard": check_hard_label,
    "kd_reg": check_kd_reg,
    "semcon": check_semcon,
    "cross_entropy": check_cross_entropy,
    "smooth_l1": check_smooth_l1,
    "track_contrastive": check_track_contrastive,
}


def run_all(points: int = 100, seed: int = 0, tol: float = DEFAULT_TOL) -> Dict[str, float]:
    """Max relative error per loss over `points` random draws each."""
    results = {}
    for idx, (name, suite) in enumerate(SUITES.items()):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, idx])))
        results[name] = max(suite(rng) for _ in range(points))
    return results


def gate(points: int = 10, seed: int = 0, tol: float = DEFAULT_TOL) -> None:
    """Fast pre-training gate; raises when any gradient disagrees with FD."""
    results = run_all(points=points, seed=seed, tol=tol)
    bad = {k: v for k, v in results.items() if v >= tol}
    if bad:
        raise AssertionError(f"gradient check failed: {bad}")
