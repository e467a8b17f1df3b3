"""Flat ``key=value`` pipeline configuration."""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ssodr.errors import ConfigError

PROFILES = {
    "default": {},
    "synthetic": {"K": 10},
}


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "default"
    K: int = 50
    tau: float = 50.0
    I: int = 5  # noqa: E741  refinement epochs per cycle
    cycles: int = 5
    epochs: int = 35
    lr: float = 1e-4
    decay: float = 0.6
    decay_every: int = 6
    keep_prob: float = 0.8
    batch_size: int = 64
    steps_per_epoch: int = 0  # 0: one pass over the mined positives
    centroid_step: float = 1e-3
    grad_clip: float = 10.0
    lloyd_iters: int = 10
    edge_iou: float = 0.4
    top_m: int = 3
    nms_iou: float = 0.3
    score_threshold: float = 0.5
    iou_thresholds: tuple[float, ...] = (0.5, 0.3)
    test_fraction: float = 0.2
    fold: int = 0
    folds: int = 1
    retrieve_n: int = 3
    seed: int = 0

    def validate(self) -> None:
        checks = [
            (self.profile in PROFILES, f"profile must be one of {sorted(PROFILES)}"),
            (self.K >= 2, "K must be >= 2"),
            (self.tau > 0, "tau must be > 0"),
            (self.I >= 0, "I must be >= 0"),
            (self.cycles >= 1, "cycles must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (0 < self.decay <= 1, "decay must be in (0, 1]"),
            (self.decay_every >= 1, "decay_every must be >= 1"),
            (0 < self.keep_prob <= 1, "keep_prob must be in (0, 1]"),
            (self.batch_size >= 2 and self.batch_size % 2 == 0, "batch_size must be even and >= 2"),
            (self.steps_per_epoch >= 0, "steps_per_epoch must be >= 0"),
            (self.centroid_step > 0, "centroid_step must be > 0"),
            (self.grad_clip >= 0, "grad_clip must be >= 0"),
            (self.lloyd_iters >= 0, "lloyd_iters must be >= 0"),
            (0 < self.edge_iou < 1, "edge_iou must be in (0, 1)"),
            (self.top_m >= 1, "top_m must be >= 1"),
            (0 < self.nms_iou <= 1, "nms_iou must be in (0, 1]"),
            (0 <= self.score_threshold <= 1, "score_threshold must be in [0, 1]"),
            (len(self.iou_thresholds) >= 1 and all(0 < t <= 1 for t in self.iou_thresholds), "iou_thresholds must lie in (0, 1]"),
            (0 <= self.test_fraction < 1, "test_fraction must be in [0, 1)"),
            (self.folds >= 1 and 0 <= self.fold, "need folds >= 1 and fold >= 0"),
            (self.retrieve_n >= 1, "retrieve_n must be >= 1"),
            (self.seed >= 0, "seed must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def epochs_for_cycle(self, cycle: int) -> int:
        """Split ``epochs`` over ``cycles``; earlier cycles absorb the remainder."""
        if not 0 <= cycle < self.cycles:
            raise ConfigError(f"cycle {cycle} outside [0, {self.cycles})")
        base, extra = divmod(self.epochs, self.cycles)
        return base + (1 if cycle < extra else 0)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "tuple[float, ...]":
            parts = [p for p in raw.strip("[]()").split(",") if p.strip()]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"key {key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"key {key}: unsupported type {kind}")


def _split_assignment(text: str, where: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"unknown key {key}")
    return key, value


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            key, value = _split_assignment(line, f"{path}:{lineno}")
            out[key] = value
    return out


def parse_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    seed: int | None = None,
    env: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Build a config from defaults, a file, ``SSODR_SEED``, overrides, then ``seed``.

    Later sources win. Profile defaults (e.g. K=10 for ``synthetic``) apply
    only to keys that no source set explicitly.
    """
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(read_config_file(path))
    env = os.environ if env is None else env
    if env.get("SSODR_SEED"):
        raw["seed"] = env["SSODR_SEED"]
    for item in overrides:
        key, value = _split_assignment(item, "override")
        raw[key] = value
    if seed is not None:
        raw["seed"] = str(seed)
    values = {k: _convert(k, v) for k, v in raw.items()}
    profile = values.get("profile", PipelineConfig.profile)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    for k, v in PROFILES[profile].items():
        values.setdefault(k, v)
    cfg = replace(PipelineConfig(), **values)
    cfg.validate()
    return cfg
