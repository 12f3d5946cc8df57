"""Stitch several task patches onto one parent checkpoint.

The aggregated mask is the union of the member masks. Compensation values
are averaged over the task count (a parameter selected by a single task
still divides by the number of tasks; pass average="selected" to divide by
the number of selecting tasks instead). Where masks overlap, the retained
fine-tuned value is the mean over the tasks that selected the parameter,
the symmetric choice matching the compensation averaging. Parameters
outside the union stay bit-exactly at their pre-trained values.

Patches are folded in a canonical order (task id, then content hash), so
the result is a pure function of the multiset of patches: stitching order
can never change the output, not even in the last bit.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, TaskPatch, checkpoint_hash, write_task_patch
from .errors import ShapeError, ValidationError
from .metrics import score_definition
from .toymodel import TaskDataset, evaluate

_AVERAGES = ("all", "selected")


@dataclass
class AggregatePatch:
    """Union mask with averaged compensation and fine-tuned values, per layer."""

    task_ids: list[str]
    masks: dict[str, np.ndarray]
    decorators: dict[str, np.ndarray]
    sft_values: dict[str, np.ndarray]


def _patch_key(patch: TaskPatch) -> tuple[str, str]:
    sink = io.BytesIO()
    write_task_patch(patch, sink)
    return (patch.task_id, hashlib.sha256(sink.getvalue()).hexdigest())


def _validate_patches(patches: list[TaskPatch], pre: Checkpoint) -> None:
    if not patches:
        raise ValidationError("need at least one task patch")
    anchor = checkpoint_hash(pre)
    for patch in patches:
        if patch.pre_hash != anchor:
            raise ValidationError(
                f"patch for task {patch.task_id!r} was built against a different parent checkpoint"
            )
        for name, layer in patch.layers.items():
            if name not in pre.tensors:
                raise ValidationError(f"patch layer {name!r} is not in the parent checkpoint")
            if tuple(layer.shape) != pre.tensors[name].shape:
                raise ShapeError(
                    f"patch layer {name!r}: shape {layer.shape} vs parent {pre.tensors[name].shape}"
                )


def build_aggregate(patches: list[TaskPatch], pre: Checkpoint, average: str = "all") -> AggregatePatch:
    if average not in _AVERAGES:
        raise ValidationError(f"average must be one of {_AVERAGES}, got {average!r}")
    _validate_patches(patches, pre)
    ordered = sorted(patches, key=_patch_key)
    m = len(ordered)

    layer_names = sorted({name for p in ordered for name in p.layers})
    masks, decorators, values = {}, {}, {}
    for name in layer_names:
        shape = pre.tensors[name].shape
        size = shape[0] * shape[1]
        count = np.zeros(size, dtype=np.int64)
        sum_sft = np.zeros(size, dtype=np.float64)
        sum_dec = np.zeros(size, dtype=np.float64)
        for patch in ordered:
            layer = patch.layers.get(name)
            if layer is None:
                continue
            count[layer.indices] += 1
            sum_sft[layer.indices] += layer.sft_values
            sum_dec[layer.indices] += layer.decorator
        selected = count > 0
        mean_sft = np.zeros(size, dtype=np.float64)
        mean_dec = np.zeros(size, dtype=np.float64)
        mean_sft[selected] = sum_sft[selected] / count[selected]
        denom = float(m) if average == "all" else count[selected]
        mean_dec[selected] = sum_dec[selected] / denom
        masks[name] = selected.reshape(shape)
        decorators[name] = mean_dec.reshape(shape)
        values[name] = mean_sft.reshape(shape)
    return AggregatePatch(
        task_ids=[p.task_id for p in ordered],
        masks=masks,
        decorators=decorators,
        sft_values=values,
    )


def stitch(patches: list[TaskPatch], pre: Checkpoint, average: str = "all") -> Checkpoint:
    """Fuse the aggregate of the given patches onto the parent checkpoint."""
    agg = build_aggregate(patches, pre, average)
    tensors = {name: arr.copy() for name, arr in pre.tensors.items()}
    for name, mask in agg.masks.items():
        flat = tensors[name].ravel()
        sel = mask.ravel()
        flat[sel] = agg.sft_values[name].ravel()[sel] + agg.decorators[name].ravel()[sel]
        tensors[name] = flat.reshape(pre.tensors[name].shape)
    metadata = dict(pre.metadata)
    metadata["task_id"] = "+".join(agg.task_ids)
    metadata["stage"] = "trained"
    return Checkpoint(tensors=tensors, metadata=metadata, dtypes=dict(pre.dtypes))


def apply_patch(pre: Checkpoint, patch: TaskPatch) -> Checkpoint:
    """Reconstruct the single-task fusion recorded in one patch."""
    return stitch([patch], pre)


def stitch_report(
    pre: Checkpoint,
    patches: list[TaskPatch],
    datasets: dict[str, TaskDataset],
    average: str = "all",
) -> dict:
    """Score the parent, each single-task fusion, and the stitched model.

    The directional flags record whether the stitched model beats each
    single-task fusion on the other tasks (the cross-task gaps stitching is
    meant to bridge).
    """
    for patch in patches:
        if patch.task_id not in datasets:
            raise ValidationError(f"no dataset supplied for task {patch.task_id!r}")
    stitched = stitch(patches, pre, average)
    task_ids = sorted(datasets)
    scores = {
        "pre": {t: evaluate(pre, datasets[t]) for t in task_ids},
        "stitched": {t: evaluate(stitched, datasets[t]) for t in task_ids},
    }
    singles = {}
    for patch in patches:
        fused = apply_patch(pre, patch)
        singles[patch.task_id] = {t: evaluate(fused, datasets[t]) for t in task_ids}
    flags = {}
    for patch in patches:
        for other in task_ids:
            if other == patch.task_id:
                continue
            key = f"stitched_beats_{patch.task_id}_fusion_on_{other}"
            flags[key] = bool(scores["stitched"][other] > singles[patch.task_id][other])
    return {
        "schema_version": 1,
        "score_definition": score_definition(),
        "average": average,
        "task_ids": [p.task_id for p in patches],
        "scores": scores,
        "single_fusions": singles,
        "flags": flags,
    }
