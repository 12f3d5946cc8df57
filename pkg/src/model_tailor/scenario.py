"""Scenario configuration: the versioned key/value tree behind every CLI run.

A scenario file pins everything a run needs (layer widths, task ids, seeds,
training and fusion settings), so rerunning any command with the same file
overwrites its outputs with identical bytes. Three configurations ship with
the package and can be named on the command line instead of a path:
``default`` (single target), ``multitask`` (two targets, half budget each),
and ``fast`` (short training, used for pipeline determinism checks).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from importlib.resources import files

import yaml

from .errors import ValidationError
from .tailor import MODE_EXACT, MODE_OBS, FusionConfig
from .toymodel import MlpSpec, TaskDataset, TrainConfig, gen_task

CONFIG_VERSION = 1
BUNDLED = ("default", "multitask", "fast")

MODE_ALIASES = {"obs": MODE_OBS, "exact": MODE_EXACT, MODE_OBS: MODE_OBS, MODE_EXACT: MODE_EXACT}


@dataclass(frozen=True)
class ScenarioConfig:
    widths: tuple[int, ...]
    init_seed: int
    origin_task: str
    target_tasks: tuple[str, ...]
    samples: int
    eval_fraction: float
    noise: float
    data_seed: int
    pretrain: TrainConfig
    finetune: TrainConfig
    fusion: FusionConfig
    calib_samples: int

    def spec(self) -> MlpSpec:
        return MlpSpec(widths=self.widths, seed=self.init_seed)

    def all_tasks(self) -> list[str]:
        return [self.origin_task, *self.target_tasks]

    def dataset(self, task_id: str) -> TaskDataset:
        return gen_task(
            task_id,
            self.data_seed,
            self.samples,
            in_dim=self.widths[0],
            out_dim=self.widths[-1],
            noise=self.noise,
            eval_fraction=self.eval_fraction,
        )

    def datasets(self) -> dict[str, TaskDataset]:
        return {t: self.dataset(t) for t in self.all_tasks()}

    def widest_columns(self) -> int:
        return max(self.widths[i] + 1 for i in range(len(self.widths) - 1))


def _train_config(node: dict, label: str) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=float(node["learning_rate"]),
            epochs=int(node["epochs"]),
            batch_size=int(node["batch_size"]),
            seed=int(node["seed"]),
        )
    except KeyError as exc:
        raise ValidationError(f"scenario train.{label} is missing {exc}") from exc


def parse_scenario(tree: dict) -> ScenarioConfig:
    if not isinstance(tree, dict):
        raise ValidationError("scenario file must hold a key/value tree")
    version = tree.get("config_version")
    if version != CONFIG_VERSION:
        raise ValidationError(f"unsupported scenario config_version {version!r}")
    try:
        model = tree["model"]
        tasks = tree["tasks"]
        data = tree["data"]
        train = tree["train"]
        fusion = tree["fusion"]
        calib = tree["calibration"]
        mode = MODE_ALIASES.get(str(fusion.get("mode", "obs")))
        if mode is None:
            raise ValidationError(f"unknown fusion mode {fusion.get('mode')!r}")
        cfg = ScenarioConfig(
            widths=tuple(int(w) for w in model["widths"]),
            init_seed=int(model["init_seed"]),
            origin_task=str(tasks["origin"]),
            target_tasks=tuple(str(t) for t in tasks["targets"]),
            samples=int(data["samples"]),
            eval_fraction=float(data["eval_fraction"]),
            noise=float(data["noise"]),
            data_seed=int(data["seed"]),
            pretrain=_train_config(train["pretrain"], "pretrain"),
            finetune=_train_config(train["finetune"], "finetune"),
            fusion=FusionConfig(
                rho=float(fusion["rho"]),
                omega=float(fusion["omega"]),
                damp_frac=float(fusion["damp_frac"]),
                mode=mode,
            ),
            calib_samples=int(calib["samples"]),
        )
    except KeyError as exc:
        raise ValidationError(f"scenario file is missing {exc}") from exc
    if cfg.samples < 1 or cfg.calib_samples < 1:
        raise ValidationError("sample counts must be positive")
    if not cfg.target_tasks:
        raise ValidationError("scenario needs at least one target task")
    if cfg.origin_task in cfg.target_tasks:
        raise ValidationError("origin task cannot also be a target")
    return cfg


def load_scenario(ref: str | None) -> ScenarioConfig:
    """Load a scenario from a path or a bundled name (default when None)."""
    if ref is None:
        ref = "default"
    if ref in BUNDLED and not os.path.exists(ref):
        text = files("model_tailor").joinpath(f"configs/{ref}_scenario.yaml").read_text()
    else:
        try:
            with open(ref, "r", encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError as exc:
            raise ValidationError(f"scenario config not found: {ref}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"scenario config is not valid YAML: {exc}") from exc
    return parse_scenario(tree)


def _derive(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def reseeded(cfg: ScenarioConfig, master: int) -> ScenarioConfig:
    """Derive every stage seed from one master seed (for --seed overrides)."""
    return replace(
        cfg,
        init_seed=_derive(master, "init"),
        data_seed=_derive(master, "data"),
        pretrain=replace(cfg.pretrain, seed=_derive(master, "pretrain")),
        finetune=replace(cfg.finetune, seed=_derive(master, "finetune")),
    )
