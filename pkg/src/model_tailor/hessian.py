"""Per-layer damped curvature from calibration activations, with OBS downdates.

For the squared layer-output loss, every row of a layer's weight matrix sees
the same curvature in its columns: H = (2/N) X X^T + lambda*I, where X holds
the layer's captured inputs (one column per calibration sample). The factor
2 comes from differentiating the squared loss twice, 1/N from averaging over
samples; any positive rescaling would shift all sensitivity scores uniformly
and leave rankings and compensation directions unchanged.

The maintained inverse stays consistent with H restricted to the surviving
coordinates through eliminations, which is what sequential compensation needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .errors import SingularPivotError, ValidationError

CALIB_PREFIX = "calib/"


@dataclass
class CalibrationRecord:
    """Captured layer inputs on the target task: a (d_col x N) matrix."""

    layer: str
    inputs: np.ndarray
    count: int

    def __post_init__(self):
        self.inputs = linalg.as_matrix(self.inputs, f"calibration inputs for {self.layer}")
        if self.count < 1:
            raise ValidationError("calibration needs at least one sample")
        if self.inputs.shape[1] != self.count:
            raise ValidationError(
                f"calibration for {self.layer}: {self.inputs.shape[1]} columns, "
                f"declared count {self.count}"
            )


@dataclass
class HessianState:
    layer: str
    hessian: np.ndarray
    inverse: np.ndarray
    damping: float
    eliminated: set[int] = field(default_factory=set)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]


def build_hessian(record: CalibrationRecord, damp_frac: float) -> HessianState:
    """H = (2/N) X X^T + lambda*I with lambda = damp_frac * mean(diag), inverted.

    Raises DefinitenessError when the damped matrix is still not positive
    definite (e.g. all-zero activations, where the damping term vanishes too).
    """
    if damp_frac < 0:
        raise ValidationError("damp_frac must be nonnegative")
    x = record.inputs
    base = np.einsum("ij,kj->ik", x, x) * (2.0 / record.count)
    lam = damp_frac * float(np.mean(np.diag(base)))
    h = base + lam * np.eye(base.shape[0])
    h = (h + h.T) / 2.0
    inverse = linalg.sym_inverse(h)
    return HessianState(layer=record.layer, hessian=h, inverse=inverse, damping=lam)


def eliminate(state: HessianState, m: int) -> HessianState:
    """Drop coordinate m from the maintained inverse (in place)."""
    if m in state.eliminated:
        raise ValidationError(f"coordinate {m} already eliminated")
    if not 0 <= m < state.dim:
        raise ValidationError(f"coordinate {m} out of range for dim {state.dim}")
    if state.inverse[m, m] <= linalg.PIVOT_FLOOR:
        raise SingularPivotError(
            f"layer {state.layer}: inverse diagonal at {m} is {state.inverse[m, m]:.3e}"
        )
    state.inverse = linalg.obs_downdate(state.inverse, m)
    state.eliminated.add(m)
    return state


def inv_diag(state: HessianState) -> list[float | None]:
    """Diagonal of the maintained inverse; eliminated coordinates are None."""
    return [
        None if i in state.eliminated else float(state.inverse[i, i])
        for i in range(state.dim)
    ]


def save_calibration(records: dict[str, CalibrationRecord], sink, metadata: dict[str, str] | None = None) -> int:
    """Serialize calibration records into a container with the calib/ prefix."""
    tensors = {CALIB_PREFIX + name: rec.inputs for name, rec in records.items()}
    meta = {"kind": "calibration"}
    meta.update(metadata or {})
    return write_checkpoint(Checkpoint(tensors=tensors, metadata=meta), sink)


def load_calibration(source) -> tuple[dict[str, CalibrationRecord], dict[str, str]]:
    container = read_checkpoint(source)
    if container.metadata.get("kind") != "calibration":
        raise ValidationError("container does not hold calibration records")
    records = {}
    for name, arr in container.tensors.items():
        if not name.startswith(CALIB_PREFIX):
            raise ValidationError(f"unexpected tensor {name!r} in calibration container")
        layer = name[len(CALIB_PREFIX) :]
        records[layer] = CalibrationRecord(layer=layer, inputs=arr, count=arr.shape[1])
    return records, dict(container.metadata)


def save_calibration_file(records, path, metadata=None) -> int:
    with open(path, "wb") as fh:
        return save_calibration(records, fh, metadata)


def load_calibration_file(path):
    with open(path, "rb") as fh:
        return load_calibration(fh)
