"""Report aggregation: pooled average, harmonic balance score, retention.

The average pools every task, origin and target alike. The balance score is
the harmonic mean of the two group means (origin tasks vs target tasks), so
one collapsed side drags it toward zero no matter how large the other is.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError

REPORT_SCHEMA_VERSION = 1


def score_definition() -> str:
    """Provenance note for report consumers: the score is a local surrogate."""
    return "score = 100 / (1 + mse); bounded, higher is better"


def avg(scores) -> float:
    """Arithmetic mean over all task scores (origin and target pooled)."""
    scores = list(scores)
    if not scores:
        raise ValidationError("cannot average an empty score list")
    return sum(float(s) for s in scores) / len(scores)


def hscore(origin_scores, target_scores) -> float:
    """Harmonic mean of the origin-group mean and the target-group mean."""
    a = avg(origin_scores)
    b = avg(target_scores)
    if a <= 0.0 or b <= 0.0:
        raise ValidationError(f"group means must be positive, got {a} and {b}")
    return 2.0 * a * b / (a + b)


def retention(pre_scores: dict, sft_scores: dict, fused_scores: dict) -> dict:
    """Percent of baseline performance the fused model keeps, per group.

    Each argument maps "origin" and "target" to that model's group mean.
    Origin retention is measured against the pre-trained model, target
    retention against the fine-tuned one.
    """
    for label, scores in (("pre", pre_scores), ("sft", sft_scores), ("fused", fused_scores)):
        if "origin" not in scores or "target" not in scores:
            raise ValidationError(f"{label} scores need 'origin' and 'target' entries")
    if pre_scores["origin"] == 0.0 or sft_scores["target"] == 0.0:
        raise ValidationError("baseline scores must be nonzero")
    return {
        "origin_pct": fused_scores["origin"] / pre_scores["origin"] * 100.0,
        "target_pct": fused_scores["target"] / sft_scores["target"] * 100.0,
    }


@dataclass
class EvalReport:
    per_task: dict[str, float]
    origin_tasks: list[str]
    target_tasks: list[str]

    def __post_init__(self):
        missing = [t for t in self.origin_tasks + self.target_tasks if t not in self.per_task]
        if missing:
            raise ValidationError(f"scores missing for tasks: {missing}")
        if not self.target_tasks:
            raise ValidationError("target task set is empty")
        if not self.origin_tasks:
            raise ValidationError("origin task set is empty")

    @property
    def avg(self) -> float:
        return avg(self.per_task[t] for t in self.origin_tasks + self.target_tasks)

    @property
    def hscore(self) -> float:
        return hscore(
            [self.per_task[t] for t in self.origin_tasks],
            [self.per_task[t] for t in self.target_tasks],
        )

    def group_means(self) -> dict[str, float]:
        return {
            "origin": avg(self.per_task[t] for t in self.origin_tasks),
            "target": avg(self.per_task[t] for t in self.target_tasks),
        }

    def to_dict(self) -> dict:
        return {
            "scores": {t: self.per_task[t] for t in sorted(self.per_task)},
            "avg": self.avg,
            "hscore": self.hscore,
            "groups": self.group_means(),
        }


# jsonschema document for the eval report emitted by the CLI.
EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "score_definition", "origin_tasks", "target_tasks", "models"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "score_definition": {"type": "string"},
        "origin_tasks": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "target_tasks": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "models": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "required": ["scores", "avg", "hscore", "groups"],
                "properties": {
                    "scores": {"type": "object", "additionalProperties": {"type": "number"}},
                    "avg": {"type": "number"},
                    "hscore": {"type": "number"},
                    "groups": {
                        "type": "object",
                        "required": ["origin", "target"],
                        "additionalProperties": {"type": "number"},
                    },
                },
            },
        },
        "retention": {
            "type": "object",
            "required": ["origin_pct", "target_pct"],
            "additionalProperties": {"type": "number"},
        },
    },
}
