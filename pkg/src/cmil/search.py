"""Random hyperparameter search raced with successive halving.

Configurations are sampled from per-parameter distributions and trained for
``min_iterations`` epochs; the best ``ceil(n / eta)`` advance to the next rung,
which trains ``eta`` times longer. Every trial is recorded in a CSV table.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .config import TrainConfig

__all__ = [
    "Distribution",
    "SearchSpace",
    "TrialRecord",
    "SearchResult",
    "SearchError",
    "halving_schedule",
    "search_hyperparameters",
    "default_space",
    "write_trial_table",
    "read_trial_table",
]

log = logging.getLogger(__name__)

TRIAL_HEADER = ("trial", "rung", "epochs", "config", "objective", "error")


class SearchError(RuntimeError):
    def __init__(self, message: str, trials: list["TrialRecord"]):
        super().__init__(message)
        self.trials = trials


@dataclass(frozen=True)
class Distribution:
    """One of ``int_uniform``, ``log_uniform``, ``uniform`` or ``categorical``."""

    kind: str
    low: float | None = None
    high: float | None = None
    choices: tuple = ()

    def __post_init__(self):
        if self.kind == "categorical":
            if not self.choices:
                raise ValueError("categorical distribution needs choices")
            object.__setattr__(self, "choices", tuple(self.choices))
        elif self.kind in ("int_uniform", "log_uniform", "uniform"):
            if self.low is None or self.high is None or self.low > self.high:
                raise ValueError(f"{self.kind} needs low <= high")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError("log_uniform needs low > 0")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    def sample(self, rng: np.random.Generator) -> Any:
        if self.kind == "int_uniform":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "log_uniform":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        choice = self.choices[int(rng.integers(len(self.choices)))]
        return choice.item() if hasattr(choice, "item") else choice

    def to_json(self) -> dict:
        if self.kind == "categorical":
            return {"type": self.kind, "choices": list(self.choices)}
        return {"type": self.kind, "low": self.low, "high": self.high}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Distribution":
        return cls(obj["type"], obj.get("low"), obj.get("high"), tuple(obj.get("choices", ())))


@dataclass(frozen=True)
class SearchSpace:
    params: Mapping[str, Distribution]
    budget: int = 8
    halving_eta: float = 2.0
    min_iterations: int = 3
    max_iterations: int | None = None
    base: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.halving_eta <= 1:
            raise ValueError("halving_eta must be > 1")
        if self.min_iterations < 1:
            raise ValueError("min_iterations must be >= 1")

    def sample(self, rng: np.random.Generator) -> dict[str, Any]:
        return {name: dist.sample(rng) for name, dist in self.params.items()}

    def to_json(self) -> dict:
        return {
            "budget": self.budget,
            "halving_eta": self.halving_eta,
            "min_iterations": self.min_iterations,
            "max_iterations": self.max_iterations,
            "base": dict(self.base),
            "params": {k: d.to_json() for k, d in self.params.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "SearchSpace":
        return cls(
            params={k: Distribution.from_json(v) for k, v in obj["params"].items()},
            budget=int(obj.get("budget", 8)),
            halving_eta=float(obj.get("halving_eta", 2.0)),
            min_iterations=int(obj.get("min_iterations", 3)),
            max_iterations=obj.get("max_iterations"),
            base=obj.get("base", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SearchSpace":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def default_space(budget: int | None = None) -> SearchSpace:
    """Search ranges of the bundled ``default_space.json``."""
    text = resources.files("cmil.data_files").joinpath("default_space.json").read_text(encoding="utf-8")
    obj = json.loads(text)
    if budget is not None:
        obj["budget"] = budget
    return SearchSpace.from_json(obj)


def halving_schedule(
    budget: int, eta: float = 2.0, min_iterations: int = 3, max_iterations: int | None = None
) -> list[tuple[int, int]]:
    """Rungs as ``(num_trials, epochs)``.

    Survivors shrink as ``ceil(n / eta)`` while at least ``eta`` would remain;
    epochs grow by ``eta`` per rung and never exceed ``max_iterations``.
    """
    rungs = [(budget, min_iterations)]
    while True:
        n, r = rungs[-1]
        nxt_n, nxt_r = math.ceil(n / eta), int(round(r * eta))
        if nxt_n < eta or nxt_n >= n or (max_iterations is not None and nxt_r > max_iterations):
            return rungs
        rungs.append((nxt_n, nxt_r))


@dataclass
class TrialRecord:
    trial: int
    rung: int
    epochs: int
    config: str
    objective: float | None
    error: str = ""


@dataclass
class SearchResult:
    best_config: TrainConfig
    best_objective: float
    trials: list[TrialRecord]


def _rung_config(point: Mapping[str, Any], space: SearchSpace, epochs: int) -> TrainConfig:
    flat = {**space.base, **point, "epochs": epochs}
    cfg = TrainConfig.from_flat({k: v for k, v in flat.items() if k not in ("fixbase", "fixbase_epochs")})
    fixbase = flat.get("fixbase", flat.get("fixbase_epochs", 0))
    # short rungs cannot freeze longer than they train
    return cfg.replace(fixbase_epochs=min(int(fixbase), epochs))


def search_hyperparameters(
    space: SearchSpace,
    objective: Callable[[TrainConfig], float],
    *,
    seed: int = 0,
    trial_table: str | Path | None = None,
) -> SearchResult:
    """Maximize ``objective`` (e.g. validation rank-1) over ``space``.

    ``objective`` receives a full :class:`TrainConfig` whose ``epochs`` is set
    to the rung length. A trial that raises is recorded with its error and
    ranked last.
    """
    rng = np.random.default_rng(seed)
    points = [space.sample(rng) for _ in range(space.budget)]
    schedule = halving_schedule(space.budget, space.halving_eta, space.min_iterations, space.max_iterations)
    trials: list[TrialRecord] = []
    alive = list(range(space.budget))
    best: tuple[float, int, int] | None = None  # (objective, -rung, trial)
    best_cfg: TrainConfig | None = None

    for rung, (n, epochs) in enumerate(schedule):
        alive = alive[:n]
        scores: dict[int, float] = {}
        for t in alive:
            cfg = None
            try:
                cfg = _rung_config(points[t], space, epochs)
                value = float(objective(cfg))
                if not math.isfinite(value):
                    raise ValueError(f"objective returned {value}")
                rec = TrialRecord(t, rung, epochs, cfg.dumps(), value)
                scores[t] = value
                # later rungs train longer, so they win ties
                key = (value, rung, -t)
                if best is None or key > best:
                    best, best_cfg = key, cfg
            except Exception as exc:  # noqa: BLE001 - a failed trial must not end the search
                log.warning("trial %d rung %d failed: %s", t, rung, exc)
                rec = TrialRecord(t, rung, epochs, cfg.dumps() if cfg else json.dumps(points[t]), None, repr(exc))
                scores[t] = -math.inf
            trials.append(rec)
            if trial_table is not None:
                write_trial_table(trials, trial_table)
        alive = sorted(alive, key=lambda t: (-scores[t], t))
        if all(math.isinf(scores[t]) for t in alive):
            break

    if best_cfg is None:
        raise SearchError(f"all {len(trials)} trials failed", trials)
    return SearchResult(best_cfg, best[0], trials)


def write_trial_table(trials: list[TrialRecord], path: str | Path) -> None:
    """Rewrite the whole table atomically (temp file + rename)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_HEADER)
    for t in trials:
        w.writerow([t.trial, t.rung, t.epochs, t.config, "" if t.objective is None else repr(t.objective), t.error])
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_trial_table(path: str | Path) -> list[TrialRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            TrialRecord(
                int(r["trial"]), int(r["rung"]), int(r["epochs"]), r["config"],
                float(r["objective"]) if r["objective"] else None, r["error"],
            )
            for r in csv.DictReader(fh)
        ]
