"""YAML configuration: model definitions, trial specs, settings, manifests.

One human-editable structured format covers every input. The grammar is
documented in the README; every loader raises ConfigError naming the
offending file and field.
"""

from __future__ import annotations

import os
from dataclasses import asdict
from pathlib import Path

import yaml

from .constraints import (
    ConstraintSpec,
    EligibilitySpec,
    Indicator,
    MissingnessIndicator,
    Moment,
    Predicate,
    SigmoidQuantile,
    ExactQuantile,
    SubgroupScoped,
    landmark_to_quantile,
)
from .errors import ConfigError
from .model import ContinuousMarginal, CovariateSchema, Feature, SyntheticSurvivalModel
from .pipeline import PipelineSettings, RecodeMap, TrialSpec
from .sampler import SamplerSettings, StepSchedule


def _load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: file not found") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing field {key!r}")
    return d[key]


# -- synthetic model ---------------------------------------------------------


def parse_schema(items, where="schema") -> CovariateSchema:
    feats = []
    for i, f in enumerate(items):
        try:
            feats.append(Feature(
                name=_need(f, "name", f"{where}[{i}]"),
                kind=_need(f, "kind", f"{where}[{i}]"),
                units=f.get("units"),
                levels=tuple(str(v) for v in f.get("levels", ())),
                nullable=bool(f.get("nullable", False))))
        except ValueError as e:
            raise ConfigError(f"{where}[{i}]: {e}") from e
    return CovariateSchema(tuple(feats))


def load_model_config(source) -> SyntheticSurvivalModel:
    """Build the synthetic simulator from a YAML file or parsed mapping."""
    doc = _load_yaml(source) if not isinstance(source, dict) else source
    where = source if isinstance(source, (str, os.PathLike)) else "model config"
    schema = parse_schema(_need(doc, "schema", where), f"{where}:schema")
    baseline = _need(doc, "baseline", where)
    cat, cont, miss = {}, {}, {}
    for f in schema.features:
        spec = _need(baseline, f.name, f"{where}:baseline")
        if f.kind == "categorical":
            probs = _need(spec, "probs", f"{where}:baseline:{f.name}")
            cat[f.name] = {str(k): float(v) for k, v in probs.items()}
        else:
            cont[f.name] = ContinuousMarginal(
                mean=float(_need(spec, "mean", f"{where}:baseline:{f.name}")),
                sd=float(_need(spec, "sd", f"{where}:baseline:{f.name}")),
                lower=float(spec.get("lower", "-inf")),
                upper=float(spec.get("upper", "inf")))
        if "missing_rate" in spec:
            miss[f.name] = float(spec["missing_rate"])
    outcome = _need(doc, "outcome", where)
    try:
        return SyntheticSurvivalModel(
            schema=schema, categorical_marginals=cat, continuous_marginals=cont,
            missing_rates=miss,
            shape=float(_need(outcome, "shape", f"{where}:outcome")),
            log_scale_intercept=float(_need(outcome, "log_scale_intercept", f"{where}:outcome")),
            coefficients={
                str(name): ({k: float(v) for k, v in spec.items()}
                            if isinstance(spec, dict) and "coef" not in spec
                            else {"coef": float(spec["coef"]),
                                  "center": float(spec.get("center", 0.0))})
                for name, spec in outcome.get("coefficients", {}).items()})
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


# -- trial specs -------------------------------------------------------------


def parse_predicate(d: dict, where: str) -> Predicate:
    op = _need(d, "op", where)
    value = d.get("value")
    if op != "notnull" and value is None:
        raise ConfigError(f"{where}: op {op!r} needs a value")
    if op == "in":
        value = tuple(value)
    return Predicate(feature=_need(d, "feature", where), op=op, value=value)


def parse_constraint(d: dict, where: str, default_scale: float = 10.0) -> ConstraintSpec:
    kind = _need(d, "kind", where)
    mode = d.get("mode", "hard")
    penalty = d.get("penalty")
    label = d.get("label", "")
    try:
        if kind == "moment":
            stat = Moment(feature=_need(d, "feature", where), transform=d.get("transform"))
            target = float(_need(d, "target", where))
        elif kind == "indicator":
            stat = Indicator(parse_predicate(d, where))
            target = float(_need(d, "target", where))
        elif kind == "missingness":
            stat = MissingnessIndicator(features=tuple(d.get("features", ())))
            target = float(d.get("target", 0.0))
        elif kind == "landmark":
            spec = landmark_to_quantile(
                float(_need(d, "time", where)), float(_need(d, "survival", where)),
                scale=float(d.get("scale", default_scale)), mode=mode, penalty=penalty,
                label=label)
            return _maybe_subgroup(spec, d, where)
        elif kind in ("median", "quantile"):
            target = 0.5 if kind == "median" else float(_need(d, "target", where))
            stat = SigmoidQuantile(threshold=float(_need(d, "time", where)),
                                   scale=float(d.get("scale", default_scale)))
        elif kind == "exact_quantile":
            stat = ExactQuantile(threshold=float(_need(d, "time", where)))
            target = float(_need(d, "target", where))
        else:
            raise ConfigError(f"{where}: unknown constraint kind {kind!r}")
        spec = ConstraintSpec(statistic=stat, target=target, mode=mode,
                              penalty=penalty, label=label or f"{kind}")
        return _maybe_subgroup(spec, d, where)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _maybe_subgroup(spec: ConstraintSpec, d: dict, where: str) -> ConstraintSpec:
    if "subgroup" not in d:
        return spec
    pred = parse_predicate(d["subgroup"], f"{where}:subgroup")
    return ConstraintSpec(statistic=SubgroupScoped(pred, spec.statistic),
                          target=spec.target, mode=spec.mode, penalty=spec.penalty,
                          label=spec.label)


def load_trial_spec(source, default_scale: float = 10.0) -> TrialSpec:
    doc = _load_yaml(source) if not isinstance(source, dict) else source
    where = str(source) if isinstance(source, (str, os.PathLike)) else "trial spec"
    name = _need(doc, "name", where)
    elig = doc.get("eligibility", {}) or {}
    include = tuple(parse_predicate(p, f"{where}:eligibility.include[{i}]")
                    for i, p in enumerate(elig.get("include", ()) or ()))
    exclude = tuple(parse_predicate(p, f"{where}:eligibility.exclude[{i}]")
                    for i, p in enumerate(elig.get("exclude", ()) or ()))
    recodes = tuple(
        RecodeMap(feature=_need(r, "feature", f"{where}:recode[{i}]"),
                  mapping={str(k): str(v) for k, v in _need(r, "mapping", f"{where}:recode[{i}]").items()},
                  new_feature=r.get("new_feature"))
        for i, r in enumerate(doc.get("recode", ()) or ()))
    baseline = tuple(parse_constraint(c, f"{where}:baseline_constraints[{i}]", default_scale)
                     for i, c in enumerate(doc.get("baseline_constraints", ()) or ()))
    outcome = tuple(parse_constraint(c, f"{where}:outcome_constraints[{i}]", default_scale)
                    for i, c in enumerate(doc.get("outcome_constraints", ()) or ()))
    return TrialSpec(name=name, eligibility=EligibilitySpec(include, exclude),
                     baseline_constraints=baseline, outcome_constraints=outcome,
                     recodes=recodes)


# -- settings ----------------------------------------------------------------


def sampler_settings_to_dict(s: SamplerSettings) -> dict:
    d = asdict(s)
    d["schedule"] = asdict(s.schedule)
    return d


def sampler_settings_from_dict(d: dict) -> SamplerSettings:
    d = dict(d or {})
    sched = d.pop("schedule", {})
    try:
        settings = SamplerSettings(schedule=StepSchedule(**sched), **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sampler settings: {e}") from e
    return settings.validate()


def pipeline_settings_to_dict(s: PipelineSettings) -> dict:
    return {
        "n_baseline": s.n_baseline,
        "sampler": sampler_settings_to_dict(s.sampler),
        "rmst_horizons": list(s.rmst_horizons),
        "report_landmarks": list(s.report_landmarks),
        "b_source": s.b_source,
        "b_target": s.b_target,
        "drop_policy": s.drop_policy,
    }


def pipeline_settings_from_dict(d: dict) -> PipelineSettings:
    d = dict(d or {})
    sampler = sampler_settings_from_dict(d.pop("sampler", {}))
    try:
        settings = PipelineSettings(
            sampler=sampler,
            n_baseline=int(d.get("n_baseline", 20_000)),
            rmst_horizons=tuple(float(v) for v in d.get("rmst_horizons", (365.0, 731.0))),
            report_landmarks=tuple(float(v) for v in d.get("report_landmarks", (365.0, 731.0))),
            b_source=int(d.get("b_source", 20)), b_target=int(d.get("b_target", 20)),
            drop_policy=d.get("drop_policy", "drop_constraint"))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"pipeline settings: {e}") from e
    return settings.validate()


# -- run manifest ------------------------------------------------------------


class RunManifest:
    """Paths and settings for one end-to-end run."""

    def __init__(self, model_path, trial_paths, settings, output, seed,
                 bootstrap=None, base_dir="."):
        self.model_path = Path(base_dir) / model_path
        self.trial_paths = [Path(base_dir) / p for p in trial_paths]
        self.settings = settings
        self.output = Path(output)
        self.seed = int(seed)
        self.bootstrap = bootstrap or {}

    def validate(self) -> "RunManifest":
        if not self.model_path.exists():
            raise ConfigError(f"manifest: model file {self.model_path} does not exist")
        for p in self.trial_paths:
            if not p.exists():
                raise ConfigError(f"manifest: trial spec {p} does not exist")
        return self


def load_manifest(path) -> RunManifest:
    doc = _load_yaml(path)
    base = Path(path).parent
    where = str(path)
    manifest = RunManifest(
        model_path=_need(doc, "model", where),
        trial_paths=list(_need(doc, "trials", where)),
        settings=pipeline_settings_from_dict(doc.get("settings", {})),
        output=doc.get("output", "runs/out"),
        seed=doc.get("seed", 0),
        bootstrap=doc.get("bootstrap", {}),
        base_dir=base)
    return manifest.validate()


def dump_yaml(obj: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(obj, fh, sort_keys=False)
