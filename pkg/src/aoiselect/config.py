"""Experiment configuration: parsing, validation and error reporting.

Config files are YAML or JSON (JSON is read through the YAML loader).  Every
problem is reported with its dotted path and, when it can be located, the line
in the file.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import AoiSelectError, InfeasibleCalibrationError
from .markov import calibrate_monotone_chain
from .policies import EXACT_M_MODES, PolicyKind

EXPERIMENTS = ("sigma", "intervals", "stability", "train", "markov-analyze")


class ConfigError(AoiSelectError):
    def __init__(self, problems: list[tuple[str, str]], source: Optional[str] = None):
        self.problems = problems
        self.source = source
        lines = [f"{path or '<root>'}: {msg}" for path, msg in problems]
        head = f"invalid config {source}" if source else "invalid config"
        super().__init__(head + "\n  " + "\n  ".join(lines))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SizeModel(_Strict):
    kind: Literal["homogeneous", "zipf"] = "homogeneous"
    size: int = Field(1, ge=1)
    a: float = 2.0
    d_min: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _shape(self):
        if self.kind == "zipf" and not self.a > 1:
            raise ValueError("shape must exceed 1")
        return self


class PopulationConfig(_Strict):
    n: int = Field(100, ge=1)
    size_model: SizeModel = SizeModel()
    importance: Literal["data", "uniform"] = "data"


class PolicyConfig(_Strict):
    kind: PolicyKind
    m: int = Field(15, ge=1)
    exact_m: Literal[EXACT_M_MODES] = "off"  # type: ignore[valid-type]


class MarkovConfig(_Strict):
    m_prime: int = Field(10, ge=1)


class TaskConfig(_Strict):
    dim: int = Field(20, ge=1)
    heterogeneity: Literal["iid", "dirichlet"] = "dirichlet"
    alpha: float = Field(0.3, gt=0)
    spread: float = Field(1.0, ge=0)
    curvature: tuple[float, float] = (1.0, 4.0)

    @model_validator(mode="after")
    def _curv(self):
        lo, hi = self.curvature
        if not 0 < lo <= hi:
            raise ValueError("curvature must satisfy 0 < mu <= L")
        return self


class ScheduleConfig(_Strict):
    kind: Literal["decay", "inverse"] = "decay"
    eta0: float = Field(0.1, gt=0)
    rate: float = Field(0.998, gt=0)
    shift: Optional[float] = Field(None, gt=0)  # inverse only; None -> 4K(K+1)L/mu


class TrainingSection(_Strict):
    K: int = Field(5, ge=1)
    batch_size: int = Field(1, ge=1)
    schedule: ScheduleConfig = ScheduleConfig()
    noise_sigma: float = Field(0.1, ge=0)
    target: float = Field(1e-3, gt=0)


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]  # type: ignore[valid-type]
    population: PopulationConfig = PopulationConfig()
    policies: List[PolicyConfig]
    markov: MarkovConfig = MarkovConfig()
    rounds: int = Field(1000, ge=1)
    burn_in: Optional[int] = Field(None, ge=0)
    windows: List[int] = [10, 20, 50, 100]
    task: TaskConfig = TaskConfig()
    training: TrainingSection = TrainingSection()
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "out"

    def resolved_burn_in(self) -> int:
        return self.burn_in if self.burn_in is not None else 10 * (self.markov.m_prime + 1)

    def semantic_problems(self) -> list[tuple[str, str]]:
        problems = []
        n = self.population.n
        if not self.policies:
            problems.append(("policies", "at least one policy is required"))
        if not self.seeds:
            problems.append(("seeds", "at least one seed is required"))
        for s_i, s in enumerate(self.seeds):
            if not 0 <= s < 2**64:
                problems.append((f"seeds.{s_i}", "seed must be an unsigned 64-bit integer"))
        for i, pol in enumerate(self.policies):
            if pol.m > n:
                problems.append((f"policies.{i}.m", f"m exceeds n ({pol.m} > {n})"))
                continue
            if pol.kind is PolicyKind.MARKOV_MONOTONE:
                if pol.m == n:
                    problems.append((f"policies.{i}.m", "monotone calibration needs m < n"))
                    continue
                try:
                    calibrate_monotone_chain(n, pol.m, self.markov.m_prime)
                except InfeasibleCalibrationError as exc:
                    problems.append((f"policies.{i}", str(exc)))
        if self.experiment == "stability":
            if not self.windows:
                problems.append(("windows", "stability needs at least one window"))
            for w_i, w in enumerate(self.windows):
                if not 1 <= w <= self.rounds:
                    problems.append((f"windows.{w_i}", f"window {w} must lie in [1, rounds={self.rounds}]"))
        if self.experiment in ("sigma", "intervals") and self.rounds < 2:
            problems.append(("rounds", "needs at least two rounds"))
        if self.experiment == "train":
            if self.training.target <= 0:
                problems.append(("training.target", "target must be positive"))
        return problems


def _locate(node, path: tuple) -> Optional[int]:
    """1-based line of ``path`` inside a composed YAML node tree."""
    line = None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def _with_line(root, path: tuple, text: str) -> tuple[str, str]:
    dotted = ".".join(str(p) for p in path)
    line = _locate(root, path) if root is not None else None
    return (dotted, f"{text} (line {line})" if line else text)


def parse_config(data: dict, root_node=None, source: Optional[str] = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError([("", "top level must be a mapping")], source)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
            msg = err["msg"].removeprefix("Value error, ")
            problems.append(_with_line(root_node, loc, msg))
        raise ConfigError(problems, source) from None
    semantic = cfg.semantic_problems()
    if semantic:
        problems = [
            _with_line(root_node, tuple(int(p) if p.isdigit() else p for p in path.split(".")), msg)
            for path, msg in semantic
        ]
        raise ConfigError(problems, source)
    return cfg


def validate_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([("", f"cannot read config: {exc}")], str(path)) from None
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError([("", f"parse error{where}: {getattr(exc, 'problem', exc)}")], str(path)) from None
    return parse_config(data, root, str(path))


def resolved(cfg: ExperimentConfig) -> dict:
    data = cfg.model_dump(mode="json")
    data["burn_in"] = cfg.resolved_burn_in()
    return data
