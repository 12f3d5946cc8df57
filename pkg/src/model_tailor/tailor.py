"""Core fusion algorithm: score, select, compensate, and fuse each layer.

Per layer, fine-tuned weights are compared against their pre-trained
counterparts with two per-parameter scores:

* salience: the absolute fine-tune delta, favoring parameters the target
  task moved the most;
* sensitivity: a second-order estimate of the target-task loss increase
  from reverting one parameter, delta^2 / (2 * inverse-curvature diagonal).

Both are min-max normalized over the layer and blended with a convex weight.
The top-scoring fraction of entries (the patch) keeps its fine-tuned values;
everything else reverts to pre-trained. Reverting costs target-task loss, so
retained entries receive a compensation (the decorator) that minimizes the
quadratic layer-output error, computed either by sequential coordinate
elimination with inverse downdates, or by one constrained least-squares
solve per row. The two routes agree to near machine precision on quadratics
and are both kept as mutual checks.

Compensation never crosses rows: the squared layer loss decouples row-wise,
so each output row sees only its own columns' curvature.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import Checkpoint, PatchLayer, TaskPatch, checkpoint_hash
from .errors import NumericalError, ShapeError, SingularPivotError, ValidationError
from .hessian import CalibrationRecord, HessianState, build_hessian, inv_diag

MODE_OBS = "obs-iterative"
MODE_EXACT = "exact-ls"
_MODES = (MODE_OBS, MODE_EXACT)


def worker_count() -> int:
    """Layer-level parallelism cap from MODEL_TAILOR_THREADS (default 1)."""
    raw = os.environ.get("MODEL_TAILOR_THREADS", "")
    try:
        value = int(raw)
    except ValueError:
        return 1
    return max(1, value)


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for one fusion run.

    rho is the fraction of parameters retained from the fine-tuned model
    (the patch size); omega blends normalized salience (weight omega)
    against normalized sensitivity (weight 1 - omega).
    """

    rho: float = 0.1
    omega: float = 0.5
    damp_frac: float = 0.01
    mode: str = MODE_OBS

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValidationError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValidationError(f"omega must be in [0, 1], got {self.omega}")
        if self.damp_frac < 0.0:
            raise ValidationError("damp_frac must be nonnegative")
        if self.mode not in _MODES:
            raise ValidationError(f"mode must be one of {_MODES}, got {self.mode!r}")


@dataclass
class LayerScores:
    layer: str
    salience: np.ndarray
    sensitivity: np.ndarray
    fused: np.ndarray
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class LayerPatch:
    layer: str
    mask: np.ndarray
    decorator: np.ndarray
    threshold: float


def retained_budget(rho: float, n: int) -> int:
    """How many of n parameters the patch keeps: max(1, round(rho * n))."""
    if not 0.0 < rho <= 1.0:
        raise ValidationError(f"rho must be in (0, 1], got {rho}")
    return max(1, int(math.floor(rho * n + 0.5)))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = linalg.as_matrix(a, "w_sft")
    b = linalg.as_matrix(b, "w_pre")
    if a.shape != b.shape:
        raise ShapeError(f"weight shapes differ: {a.shape} vs {b.shape}")
    return a, b


def salience(w_sft, w_pre) -> np.ndarray:
    """Absolute fine-tune deviation per parameter."""
    w_sft, w_pre = _pair(w_sft, w_pre)
    return np.abs(w_sft - w_pre)


def sensitivity(w_sft, w_pre, hinv_diag) -> np.ndarray:
    """Estimated loss increase from reverting one parameter: d^2 / (2 k_jj).

    hinv_diag holds the inverse-curvature diagonal per column, shared by all
    rows of the layer.
    """
    w_sft, w_pre = _pair(w_sft, w_pre)
    diag = np.asarray(hinv_diag, dtype=np.float64)
    if diag.ndim != 1 or diag.shape[0] != w_sft.shape[1]:
        raise ShapeError(
            f"inverse diagonal has {diag.shape} entries for {w_sft.shape[1]} columns"
        )
    if np.any(diag <= 0.0):
        bad = int(np.argmax(diag <= 0.0))
        raise NumericalError(f"inverse diagonal entry {bad} is not positive")
    delta = w_sft - w_pre
    return (delta * delta) / (2.0 * diag)


def _minmax(scores: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo = float(scores.min())
    hi = float(scores.max())
    if hi == lo:
        return np.zeros_like(scores), (lo, hi)
    return (scores - lo) / (hi - lo), (lo, hi)


def fuse_scores(s_delta, s_eps, omega: float, layer: str = "") -> LayerScores:
    """Min-max normalize each score over the layer and blend them convexly.

    A constant score map normalizes to all zeros, so it contributes nothing
    to the blend and selection falls back to the other score (or, if both
    are degenerate, to index order).
    """
    s_delta = linalg.as_matrix(s_delta, "s_delta")
    s_eps = linalg.as_matrix(s_eps, "s_eps")
    if s_delta.shape != s_eps.shape:
        raise ShapeError(f"score shapes differ: {s_delta.shape} vs {s_eps.shape}")
    if not 0.0 <= omega <= 1.0:
        raise ValidationError(f"omega must be in [0, 1], got {omega}")
    norm_delta, bounds_delta = _minmax(s_delta)
    norm_eps, bounds_eps = _minmax(s_eps)
    fused = omega * norm_delta + (1.0 - omega) * norm_eps
    return LayerScores(
        layer=layer,
        salience=s_delta,
        sensitivity=s_eps,
        fused=fused,
        bounds={"salience": bounds_delta, "sensitivity": bounds_eps},
    )


def select_mask(scores: LayerScores, rho: float) -> LayerPatch:
    """Keep the budget-many highest fused scores; ties keep lower flat index."""
    fused = scores.fused
    flat = fused.ravel()
    budget = retained_budget(rho, flat.size)
    order = np.argsort(-flat, kind="stable")
    keep = order[:budget]
    mask = np.zeros(flat.size, dtype=bool)
    mask[keep] = True
    threshold = float(flat[order[budget - 1]])
    return LayerPatch(
        layer=scores.layer,
        mask=mask.reshape(fused.shape),
        decorator=np.zeros_like(fused),
        threshold=threshold,
    )


def random_mask(shape: tuple[int, int], rho: float, seed: int, layer: str = "") -> LayerPatch:
    """Baseline: uniformly random patch of the same budget (for reports)."""
    n = shape[0] * shape[1]
    budget = retained_budget(rho, n)
    rng = np.random.default_rng(seed)
    keep = rng.permutation(n)[:budget]
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    return LayerPatch(
        layer=layer,
        mask=mask.reshape(shape),
        decorator=np.zeros(shape, dtype=np.float64),
        threshold=float("nan"),
    )


def _removal_order(row_mask: np.ndarray, row_scores: np.ndarray | None) -> np.ndarray:
    removed = np.flatnonzero(~row_mask)
    if row_scores is None or removed.size == 0:
        return removed
    # ascending fused score, ties by column index (argsort is stable)
    return removed[np.argsort(row_scores[removed], kind="stable")]


def decorate(
    w_sft,
    w_pre,
    patch: LayerPatch,
    hstate: HessianState,
    mode: str = MODE_OBS,
    scores: LayerScores | None = None,
) -> LayerPatch:
    """Fill in the compensation values for the retained entries of the patch.

    obs-iterative works row by row on a private copy of the inverse: each
    removed column is driven to its pre-trained value by the rank-one OBS
    step for its current deviation, spreading the correction over the still
    active columns, then the inverse is downdated. Removed columns' own
    accumulated corrections are discarded; the fusion rule pins them to the
    pre-trained values anyway.

    exact-ls solves, per row, the quadratic minimization of the layer-output
    error over the retained columns with the removed ones fixed at their
    pre-trained values. The two modes agree on quadratics; both are exposed
    so either can serve as the oracle for the other.
    """
    w_sft, w_pre = _pair(w_sft, w_pre)
    if mode not in _MODES:
        raise ValidationError(f"mode must be one of {_MODES}, got {mode!r}")
    rows, cols = w_sft.shape
    if patch.mask.shape != w_sft.shape:
        raise ShapeError(f"mask shape {patch.mask.shape} vs weights {w_sft.shape}")
    if hstate.dim != cols:
        raise ShapeError(f"curvature dim {hstate.dim} vs {cols} columns")
    if hstate.eliminated:
        raise ValidationError("decorate needs a fresh curvature state (no eliminations)")

    decorator = np.zeros_like(w_sft)
    fused_scores = scores.fused if scores is not None else None
    for r in range(rows):
        row_mask = patch.mask[r]
        removed = _removal_order(row_mask, None if fused_scores is None else fused_scores[r])
        if removed.size == 0 or removed.size == cols:
            continue
        if mode == MODE_OBS:
            inv = hstate.inverse.copy()
            cur = w_sft[r].copy()
            for m in removed:
                pivot = inv[m, m]
                if pivot <= linalg.PIVOT_FLOOR:
                    raise SingularPivotError(
                        f"layer {patch.layer or hstate.layer}: dead pivot at column {m}"
                    )
                shift = cur[m] - w_pre[r, m]
                if shift != 0.0:
                    cur -= (shift / pivot) * inv[:, m]
                cur[m] = w_pre[r, m]
                inv = linalg.obs_downdate(inv, m)
            delta = cur - w_sft[r]
            decorator[r, row_mask] = delta[row_mask]
        else:
            retained = np.flatnonzero(row_mask)
            pinned = (w_pre[r, removed] - w_sft[r, removed])[:, None]
            h_rr = hstate.hessian[np.ix_(retained, retained)]
            h_rs = hstate.hessian[np.ix_(retained, removed)]
            rhs = -np.einsum("ij,jk->ik", h_rs, pinned)
            solved = linalg.solve_spd(h_rr, rhs)
            decorator[r, retained] = solved[:, 0]
    return LayerPatch(
        layer=patch.layer,
        mask=patch.mask.copy(),
        decorator=decorator,
        threshold=patch.threshold,
    )


def fuse_layer(w_sft, w_pre, patch: LayerPatch) -> np.ndarray:
    """Blend: retained entries take fine-tuned + compensation, rest revert."""
    w_sft, w_pre = _pair(w_sft, w_pre)
    if patch.mask.shape != w_sft.shape or patch.decorator.shape != w_sft.shape:
        raise ShapeError("patch shape does not match the weights")
    nonzero = patch.decorator != 0.0
    if np.any(nonzero & ~patch.mask):
        raise ValidationError(f"layer {patch.layer}: decorator has values outside the mask")
    out = np.where(patch.mask, w_sft, w_pre)
    out[nonzero] += patch.decorator[nonzero]
    return out


def _check_aligned(pre: Checkpoint, sft: Checkpoint) -> list[str]:
    if pre.tensors.keys() != sft.tensors.keys():
        raise ValidationError("checkpoints hold different tensor names")
    for name, a in pre.tensors.items():
        if a.shape != sft.tensors[name].shape:
            raise ShapeError(f"tensor {name!r}: shapes {a.shape} vs {sft.tensors[name].shape}")
        if pre.dtypes[name] != sft.dtypes[name]:
            raise ValidationError(f"tensor {name!r}: dtypes differ")
    return list(pre.tensors)


def _tailor_layer(name, w_pre, w_sft, record, cfg, decorate_patch, mask_strategy, mask_seed):
    hstate = build_hessian(record, cfg.damp_frac)
    diag = [v for v in inv_diag(hstate) if v is not None]
    s_delta = salience(w_sft, w_pre)
    s_eps = sensitivity(w_sft, w_pre, diag)
    scores = fuse_scores(s_delta, s_eps, cfg.omega, layer=name)
    if mask_strategy == "random":
        patch = random_mask(w_sft.shape, cfg.rho, mask_seed, layer=name)
    else:
        patch = select_mask(scores, cfg.rho)
    if decorate_patch:
        patch = decorate(w_sft, w_pre, patch, hstate, cfg.mode, scores)
    fused = fuse_layer(w_sft, w_pre, patch)
    return patch, fused


def tailor_model(
    pre: Checkpoint,
    sft: Checkpoint,
    calib: dict[str, CalibrationRecord],
    cfg: FusionConfig,
    decorate_patch: bool = True,
    mask_strategy: str = "scored",
    mask_seed: int = 0,
) -> tuple[Checkpoint, TaskPatch]:
    """Run the full per-layer pipeline and assemble the fused checkpoint.

    Layers are processed independently (optionally in parallel, capped by
    MODEL_TAILOR_THREADS); output does not depend on the worker count. The
    fused checkpoint carries the fine-tuned model's metadata verbatim, so a
    full-retention run reproduces it byte for byte; fusion provenance lives
    in the returned task patch.
    """
    if mask_strategy not in ("scored", "random"):
        raise ValidationError(f"unknown mask strategy {mask_strategy!r}")
    names = _check_aligned(pre, sft)
    missing = [n for n in names if n not in calib]
    if missing:
        raise ValidationError(f"missing calibration for layers: {missing}")

    def job(name):
        return name, _tailor_layer(
            name,
            pre.tensors[name],
            sft.tensors[name],
            calib[name],
            cfg,
            decorate_patch,
            mask_strategy,
            mask_seed,
        )

    workers = worker_count()
    if workers > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(job, names))
    else:
        results = dict(job(name) for name in names)

    fused_tensors = {}
    patch_layers = {}
    for name in names:
        patch, fused = results[name]
        fused_tensors[name] = fused
        flat_mask = patch.mask.ravel()
        indices = np.flatnonzero(flat_mask)
        patch_layers[name] = PatchLayer(
            shape=patch.mask.shape,
            indices=indices,
            decorator=patch.decorator.ravel()[indices],
            sft_values=sft.tensors[name].ravel()[indices],
        )

    fused_ckpt = Checkpoint(
        tensors=fused_tensors, metadata=dict(sft.metadata), dtypes=dict(sft.dtypes)
    )
    snapshot = {
        "rho": cfg.rho,
        "omega": cfg.omega,
        "damp_frac": cfg.damp_frac,
        "mode": cfg.mode,
        "decorated": decorate_patch,
        "mask_strategy": mask_strategy,
    }
    task_patch = TaskPatch(
        task_id=sft.metadata.get("task_id", ""),
        layers=patch_layers,
        config=snapshot,
        pre_hash=checkpoint_hash(pre),
    )
    return fused_ckpt, task_patch
