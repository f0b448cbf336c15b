"""Experiment configuration: strict TOML/JSON grammar, validation, resolution.

A config file has these tables (every key optional unless noted)::

    seeds = [0, 1, 2]

    [population]                    # required
    group_sizes = [5, 5]            # required
    examples = 50                   # or one count per group
    heterogeneity = 1.0
    split = [0.7, 0.1, 0.2]
    majority_fraction = 0.714       # optional: two-group imbalance

    [population.generator]
    kind = "quadratic"              # quadratic | logistic | label_skew

    [objective]
    kind = "quadratic"              # quadratic | logistic | mlp
    l2 = 0.0

    [plan]
    algorithm = "gifair_global"     # fedavg | gifair_global | gifair_per
    rounds = 100
    local_steps = 5                 # or local_epochs = <n>
    lambda_fraction = 0.5           # or lambda = <absolute value>
    r_mode = "stale"
    batch = { batch_size = 10, sampling = "without_replacement_reshuffle" }
    schedule = { kind = "exp_decay", initial = 0.1, decay = 0.99 }
    sampling = { kind = "by_weight", fraction = 1.0 }

    [sweep]
    lambda_fractions = [0.0, 0.1, 0.5]   # or lambdas = [...]
    algorithms = ["fedavg", "gifair_global"]

    [output]
    dir = "runs"
    eval_split = "test"
    gamma = true
    dump_data = false

Unknown keys are errors.  Every problem found is reported, not just the first.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from gifair import fairness
from gifair.algorithms import (ALGORITHMS, ExpDecayPerRound, InverseSqrt, InverseTime,
                               SamplingScheme, TrainPlan)
from gifair.core import ConfigError, compute_pk
from gifair.datagen import (LabelSkew, LogisticClusters, PopulationSpec, QuadraticCenters,
                            imbalance_population, train_sizes)
from gifair.objectives import BatchSpec, Objective, make_objective

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MANIFEST_VERSION = 1

PosInt = Annotated[int, Field(ge=1)]
PosFloat = Annotated[float, Field(gt=0)]
NonNeg = Annotated[float, Field(ge=0)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class QuadraticGen(_Strict):
    kind: Literal["quadratic"]
    dim: PosInt = 2
    center_mean: float = 0.0
    center_spread: NonNeg = 0.5
    noise: list[PosFloat] = Field(default_factory=lambda: [1.0], min_length=1)


class LogisticGen(_Strict):
    kind: Literal["logistic"]
    feature_dim: PosInt = 5
    num_classes: Annotated[int, Field(ge=2)] = 2
    label_noise: Annotated[float, Field(ge=0, le=1)] = 0.05
    cluster_shift: NonNeg = 1.0
    rule_shift: NonNeg = 1.0


class LabelSkewGen(_Strict):
    kind: Literal["label_skew"]
    feature_dim: PosInt = 10
    classes_total: Annotated[int, Field(ge=2)] = 10
    classes_per_client: PosInt = 5
    prototype_scale: PosFloat = 2.0
    noise: NonNeg = 1.0


GeneratorModel = Annotated[Union[QuadraticGen, LogisticGen, LabelSkewGen], Field(discriminator="kind")]


class PopulationModel(_Strict):
    group_sizes: list[PosInt] = Field(min_length=1)
    examples: PosInt | list[PosInt] = 50
    heterogeneity: NonNeg = 1.0
    split: tuple[NonNeg, NonNeg, NonNeg] = (0.7, 0.1, 0.2)
    majority_fraction: float | None = None
    generator: GeneratorModel = Field(default_factory=lambda: QuadraticGen(kind="quadratic"))


class ObjectiveModel(_Strict):
    kind: Literal["quadratic", "logistic", "mlp"] = "quadratic"
    l2: NonNeg = 0.0
    hidden: PosInt = 8
    init_scale: PosFloat = 0.5


class BatchModel(_Strict):
    batch_size: PosInt = 32
    sampling: Literal["with_replacement", "without_replacement_reshuffle"] = "without_replacement_reshuffle"


class ExpDecayModel(_Strict):
    kind: Literal["exp_decay"]
    initial: PosFloat = 0.1
    decay: Annotated[float, Field(gt=0, le=1)] = 0.99


class InverseTimeModel(_Strict):
    kind: Literal["inverse_time"]
    beta: PosFloat
    gamma: PosFloat


class InverseSqrtModel(_Strict):
    kind: Literal["inverse_sqrt"]
    c0: PosFloat


ScheduleModel = Annotated[Union[ExpDecayModel, InverseTimeModel, InverseSqrtModel], Field(discriminator="kind")]


class SamplingModel(_Strict):
    kind: Literal["by_weight", "uniform"] = "by_weight"
    fraction: Annotated[float, Field(gt=0, le=1)] = 1.0


class PlanModel(_Strict):
    algorithm: Literal["fedavg", "gifair_global", "gifair_per"] = "fedavg"
    rounds: PosInt = 100
    local_steps: PosInt = 1
    local_epochs: PosInt | None = None
    lam: NonNeg | None = Field(default=None, alias="lambda")
    lambda_fraction: NonNeg | None = None
    r_mode: Literal["stale", "exact"] = "stale"
    batch: BatchModel = Field(default_factory=BatchModel)
    schedule: ScheduleModel = Field(default_factory=lambda: ExpDecayModel(kind="exp_decay"))
    sampling: SamplingModel = Field(default_factory=SamplingModel)
    initial_group_losses: list[float] | None = None


class SweepModel(_Strict):
    lambdas: list[NonNeg] | None = Field(default=None, min_length=1)
    lambda_fractions: list[NonNeg] | None = Field(default=None, min_length=1)
    algorithms: list[Literal["fedavg", "gifair_global", "gifair_per"]] | None = Field(default=None, min_length=1)


class OutputModel(_Strict):
    dir: str = "runs"
    eval_split: Literal["train", "validation", "test"] = "test"
    gamma: bool = True
    dump_data: bool = False


class ExperimentModel(_Strict):
    population: PopulationModel
    objective: ObjectiveModel = Field(default_factory=ObjectiveModel)
    plan: PlanModel = Field(default_factory=PlanModel)
    seeds: list[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0], min_length=1)
    sweep: SweepModel | None = None
    output: OutputModel = Field(default_factory=OutputModel)


# ---------------------------------------------------------------------------
# resolved form


@dataclass(frozen=True)
class SweepPoint:
    algorithm: str
    lam: float
    lam_fraction: float | None


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSpec
    objective_kind: str
    objective_args: dict
    plan: TrainPlan
    seeds: tuple[int, ...]
    points: tuple[SweepPoint, ...]
    lam_max: float
    output: OutputModel
    model: ExperimentModel

    def make_objective(self) -> Objective:
        return make_objective(self.objective_kind, **self.objective_args)

    def plan_for(self, point: SweepPoint) -> TrainPlan:
        return TrainPlan(**{**self.plan.__dict__, "algorithm": point.algorithm, "lam": point.lam})

    def run_config(self, point: SweepPoint, seed: int) -> dict:
        """Config for exactly one (point, seed) run, in the file grammar."""
        data = self.model.model_dump(by_alias=True, exclude_none=True, mode="json")
        data.pop("sweep", None)
        data["seeds"] = [seed]
        plan = data["plan"]
        plan.pop("lambda_fraction", None)
        plan["algorithm"] = point.algorithm
        plan["lambda"] = point.lam
        return data


def _format_pydantic(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def load_mapping(path) -> dict:
    """Read a TOML or JSON config; a run manifest yields its embedded config."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")  # OSError propagates as an I/O failure
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config", {})
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def parse_config(path) -> ExperimentConfig:
    return config_from_mapping(load_mapping(path))


def config_from_mapping(data: dict) -> ExperimentConfig:
    try:
        model = ExperimentModel.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("invalid config:\n  " + "\n  ".join(_format_pydantic(exc))) from exc
    errors: list[str] = []
    population = _population(model.population, errors)
    objective_args = _objective_args(model.objective, model.population.generator, errors)
    plan = _plan(model.plan, errors)
    if population is not None and plan is not None and model.plan.local_epochs is not None:
        if "local_steps" in model.plan.model_fields_set:
            errors.append("plan: set either local_steps or local_epochs, not both")
        plan = replace(plan, local_steps=_epoch_steps(model.plan, population))
    lam_max = math.nan
    points: list[SweepPoint] = []
    if population is not None:
        try:
            lam_max = _lambda_max(population)
        except ConfigError as exc:
            errors.append(f"population: {exc}")
        else:
            points = _points(model, lam_max, errors)
            _check_batch(model.plan.batch, population, errors)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return ExperimentConfig(population=population, objective_kind=model.objective.kind,
                            objective_args=objective_args, plan=plan, seeds=tuple(model.seeds),
                            points=tuple(points), lam_max=lam_max, output=model.output, model=model)


def _population(m: PopulationModel, errors) -> PopulationSpec | None:
    g = m.generator
    if isinstance(g, QuadraticGen):
        gen = QuadraticCenters(dim=g.dim, center_mean=g.center_mean, center_spread=g.center_spread,
                               noise=tuple(g.noise))
    elif isinstance(g, LogisticGen):
        gen = LogisticClusters(feature_dim=g.feature_dim, num_classes=g.num_classes,
                               label_noise=g.label_noise, cluster_shift=g.cluster_shift,
                               rule_shift=g.rule_shift)
    else:
        gen = LabelSkew(feature_dim=g.feature_dim, classes_total=g.classes_total,
                        classes_per_client=g.classes_per_client,
                        prototype_scale=g.prototype_scale, noise=g.noise)
    examples = m.examples if isinstance(m.examples, int) else tuple(m.examples)
    spec = PopulationSpec(group_sizes=tuple(m.group_sizes), examples=examples, generator=gen,
                          heterogeneity=m.heterogeneity, split=tuple(m.split))
    try:
        if m.majority_fraction is not None:
            spec = imbalance_population(spec, m.majority_fraction)
        spec.validate()
    except ConfigError as exc:
        errors.append(f"population: {exc}")
        return None
    return spec


def _objective_args(m: ObjectiveModel, g, errors) -> dict:
    if m.kind == "quadratic":
        if not isinstance(g, QuadraticGen):
            errors.append(f"objective.kind: quadratic needs a quadratic generator, got {g.kind}")
        return {}
    if isinstance(g, QuadraticGen):
        errors.append(f"objective.kind: {m.kind} needs labeled data, not the quadratic generator")
        return {}
    classes = g.num_classes if isinstance(g, LogisticGen) else g.classes_total
    if m.kind == "logistic":
        return {"num_classes": classes, "l2": m.l2}
    return {"hidden": m.hidden, "num_classes": classes, "l2": m.l2, "init_scale": m.init_scale}


def _plan(m: PlanModel, errors) -> TrainPlan | None:
    s = m.schedule
    if isinstance(s, ExpDecayModel):
        schedule = ExpDecayPerRound(s.initial, s.decay)
    elif isinstance(s, InverseTimeModel):
        schedule = InverseTime(s.beta, s.gamma)
    else:
        schedule = InverseSqrt(s.c0)
    if m.lam is not None and m.lambda_fraction is not None:
        errors.append("plan: set either lambda or lambda_fraction, not both")
    try:
        # algorithm and lambda are filled in per sweep point
        return TrainPlan(algorithm="fedavg", rounds=m.rounds, local_steps=m.local_steps,
                         batch=BatchSpec(m.batch.batch_size, m.batch.sampling), schedule=schedule,
                         sampling=SamplingScheme(m.sampling.kind, m.sampling.fraction),
                         lam=0.0, r_mode=m.r_mode,
                         initial_group_losses=None if m.initial_group_losses is None
                         else tuple(m.initial_group_losses))
    except ConfigError as exc:
        errors.append(f"plan: {exc}")
        return None


def _epoch_steps(m: PlanModel, spec: PopulationSpec) -> int:
    """``ceil(train_size / batch_size) * epochs`` steps, sized by the largest client."""
    return math.ceil(max(train_sizes(spec)) / m.batch.batch_size) * m.local_epochs


def _lambda_max(spec: PopulationSpec) -> float:
    p = compute_pk(train_sizes(spec))
    sizes = spec.group_sizes
    return fairness.lambda_max(p, sizes, spec.group_of(), len(sizes))


def _points(model: ExperimentModel, lam_max: float, errors) -> list[SweepPoint]:
    plan, sweep = model.plan, model.sweep
    algorithms = list(sweep.algorithms) if sweep and sweep.algorithms else [plan.algorithm]
    if sweep and sweep.lambdas is not None and sweep.lambda_fractions is not None:
        errors.append("sweep: set either lambdas or lambda_fractions, not both")
    if sweep and sweep.lambdas is not None:
        grid = [(lam, None) for lam in sweep.lambdas]
    elif sweep and sweep.lambda_fractions is not None:
        grid = [(f * lam_max, f) for f in sweep.lambda_fractions]
    elif plan.lambda_fraction is not None:
        grid = [(plan.lambda_fraction * lam_max, plan.lambda_fraction)]
    else:
        grid = [(plan.lam or 0.0, None)]

    points = []
    for algorithm in algorithms:
        if algorithm == "gifair_per" and plan.r_mode == "exact":
            errors.append("plan.r_mode: gifair_per orders groups by personalized losses; use 'stale'")
        if algorithm == "fedavg":
            points.append(SweepPoint("fedavg", 0.0, None))  # one run; lambda is not used
            continue
        for lam, frac in grid:
            if lam > 0 and lam >= lam_max:
                where = f"lambda_fraction={frac!r} gives " if frac is not None else ""
                errors.append(f"plan.lambda: {where}lambda={lam!r} is not below lambda_max={lam_max!r}")
            points.append(SweepPoint(algorithm, float(lam), frac))
    if plan.initial_group_losses is not None and len(plan.initial_group_losses) != len(model.population.group_sizes):
        errors.append("plan.initial_group_losses: need one value per group")
    return points


def _check_batch(m: BatchModel, spec: PopulationSpec, errors) -> None:
    if m.sampling == "without_replacement_reshuffle":
        smallest = min(train_sizes(spec))
        if m.batch_size > smallest:
            errors.append(f"plan.batch.batch_size={m.batch_size} exceeds the smallest training "
                          f"split ({smallest}) under sampling without replacement")


__all__ = ["ALGORITHMS", "ConfigError", "ExperimentConfig", "MANIFEST_VERSION", "SweepPoint",
           "config_from_mapping", "load_mapping", "parse_config"]
