"""Run-directory artifacts: delimited tables and JSON documents.

Every emitted machine-readable document re-parses into the type it came
from; the CLI round-trip tests hold this module to that contract.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .balance import Cohort, DualState
from .errors import ConfigError
from .pipeline import CalibratedArm, ContrastReport
from .sampler import ChainDiagnostics, EnsembleState, LambdaState
from .survival import SurvivalCurve


def write_records_csv(path, records, schema) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(schema.names)
        for x in records:
            w.writerow(["" if x[n] is None else x[n] for n in schema.names])


def read_records_csv(path, schema) -> list:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != schema.names:
            raise ConfigError(f"{path}: header {header} does not match the schema")
        for row in r:
            x = {}
            for name, raw in zip(header, row):
                if raw == "":
                    x[name] = None
                elif schema.feature(name).kind == "continuous":
                    x[name] = float(raw)
                else:
                    x[name] = raw
            out.append(x)
    return out


def write_weights_csv(path, weights) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "weight"])
        for i, v in enumerate(np.asarray(weights)):
            w.writerow([i, repr(float(v))])


def read_weights_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return np.array([float(row[1]) for row in r])


def write_chains_csv(path, buffer: np.ndarray) -> None:
    """Columnar chain dump: particle id, chain index, outcome days."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "chain_index", "outcome_days"])
        n, k = buffer.shape
        for i in range(n):
            for c in range(k):
                w.writerow([i, c, repr(float(buffer[i, c]))])


def read_chains_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [(int(a), int(b), float(c)) for a, b, c in r]
    n = max(a for a, _, _ in rows) + 1
    k = max(b for _, b, _ in rows) + 1
    buf = np.zeros((n, k))
    for a, b, v in rows:
        buf[a, b] = v
    return buf


def write_curve_csv(path, curve: SurvivalCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "survival", "at_risk"])
        risk = curve.at_risk if curve.at_risk is not None else [math.nan] * len(curve.times)
        for t, s, r in zip(curve.times, curve.survival, risk):
            w.writerow([repr(float(t)), repr(float(s)), repr(float(r))])


def read_curve_csv(path) -> SurvivalCurve:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [(float(a), float(b), float(c)) for a, b, c in r]
    return SurvivalCurve(np.array([t for t, _, _ in rows]),
                         np.array([s for _, s, _ in rows]),
                         np.array([k for _, _, k in rows]))


def read_xy_csv(path):
    """Two-column delimited input (e.g. digitized time/survival points)."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue  # header line
                raise ConfigError(f"{path}:{i + 1}: expected two numeric columns")
            xs.append(x)
            ys.append(y)
    if not xs:
        raise ConfigError(f"{path}: no data rows")
    return np.array(xs), np.array(ys)


def write_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- calibrated-arm persistence ----------------------------------------------


def save_arm(run_dir, arm: CalibratedArm, schema, balance_report=None) -> Path:
    out = Path(run_dir) / arm.name
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", arm.cohort.records, schema)
    write_weights_csv(out / "weights.csv", arm.cohort.weights)
    write_chains_csv(out / "chains.csv", arm.ensemble.buffer)
    write_json(out / "stage1.json", {
        "dual": arm.stage1.to_dict(),
        "balance_report": balance_report.to_dict() if balance_report else None})
    write_json(out / "lambda.json", {
        "values": [float(v) for v in arm.lam.values],
        "labels": [c.name for c in arm.targets],
        "t": int(arm.lam.t),
        "trace_iterations": [int(v) for v in arm.diagnostics.trace_iterations],
        "trace": [[float(v) for v in row] for row in arm.diagnostics.lambda_trace]})
    write_json(out / "diagnostics.json", arm.diagnostics.to_dict())
    return out


def load_arm(run_dir, name, schema, targets) -> CalibratedArm:
    src = Path(run_dir) / name
    if not src.exists():
        raise ConfigError(f"run artifact directory {src} does not exist")
    for artifact in ("records.csv", "weights.csv", "chains.csv", "lambda.json",
                     "diagnostics.json", "stage1.json"):
        if not (src / artifact).exists():
            raise ConfigError(f"missing artifact {artifact} under {src}")
    records = read_records_csv(src / "records.csv", schema)
    weights = read_weights_csv(src / "weights.csv")
    buffer = read_chains_csv(src / "chains.csv")
    lam_doc = read_json(src / "lambda.json")
    diag_doc = read_json(src / "diagnostics.json")
    stage1 = read_json(src / "stage1.json")["dual"]
    cohort = Cohort(records=records, weights=weights)
    ensemble = EnsembleState(outcomes=buffer[:, -1].copy(), buffer=buffer,
                             buffer_fill=buffer.shape[1])
    lam = LambdaState(values=np.array(lam_doc["values"]), targets=tuple(targets),
                      t=lam_doc["t"])
    diag = ChainDiagnostics(
        ready=True,
        acceptance_rate=_nan(diag_doc.get("acceptance_rate")),
        max_rhat=_nan(diag_doc.get("max_rhat")),
        rhat=np.array(diag_doc.get("rhat", [])),
        max_soft_violation=_nan(diag_doc.get("max_soft_violation")),
        max_landmark_deviation_days=_nan(diag_doc.get("max_landmark_deviation_days")),
        aggregate_hard_residual=_nan(diag_doc.get("aggregate_hard_residual")),
        stopping_iteration=diag_doc.get("stopping_iteration"),
        total_iterations=diag_doc.get("total_iterations", 0),
        converged=diag_doc.get("converged", False),
        proposals_drawn=diag_doc.get("proposals_drawn", 0),
        labels=tuple(diag_doc.get("labels", ())))
    dual = DualState(
        multipliers=np.array(stage1["multipliers"]), labels=tuple(stage1["labels"]),
        modes=tuple(stage1["modes"]), targets=np.array(stage1["targets"]),
        achieved=np.array(stage1["achieved"]), penalties=tuple(stage1["penalties"]),
        iterations=stage1["iterations"], grad_norm=stage1["grad_norm"],
        converged=stage1["converged"],
        flagged_missing=np.array(stage1["flagged_missing"], dtype=int))
    return CalibratedArm(name=name, cohort=cohort, stage1=dual, ensemble=ensemble,
                         lam=lam, diagnostics=diag, targets=tuple(targets))


def _nan(v):
    return math.nan if v is None else v


def save_contrast(path, report: ContrastReport) -> None:
    write_json(path, report.to_dict())


def load_contrast(path) -> ContrastReport:
    return ContrastReport.from_dict(read_json(path))
