"""
File formats.

Panel CSV (long form): header ``unit,t,y,x1..xK,t0``; per unit one ``t=0`` row carrying
the initial conditions followed by rows for t = 1..T. Never-treated units have ``t0 = 0``
on disk. Floats are written with 17 significant digits so a read/write cycle is exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model_core import NEVER, EventDesign, FeedbackModel, HeterogeneityModel, ModelError, PanelData, StructuralParams


class DataError(ModelError):
    """Malformed input data; the message carries row/column diagnostics."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def t0_to_disk(t0) -> np.ndarray:
    t0 = np.asarray(t0, dtype=np.int64)
    return np.where(t0 == NEVER, 0, t0)


def t0_from_disk(t0) -> np.ndarray:
    t0 = np.asarray(t0, dtype=np.int64)
    return np.where(t0 == 0, NEVER, t0)


def _write_rows(path, header: list[str], rows: Iterable[Iterable]):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def panel_header(K: int) -> list[str]:
    return ["unit", "t", "y"] + [f"x{k + 1}" for k in range(K)] + ["t0"]


def write_panel_csv(path, panel: PanelData):
    t0 = t0_to_disk(panel.t0)

    def rows():
        for i in range(panel.N):
            yield [i + 1, 0, panel.Y0[i], *panel.X0[i], t0[i]]
            for t in range(panel.T):
                yield [i + 1, t + 1, panel.Y[i, t], *panel.X[i, t], t0[i]]

    _write_rows(path, panel_header(panel.K), rows())


def read_panel_csv(path, design: Optional[EventDesign] = None) -> PanelData:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in ("unit", "t", "y", "t0"):
            if col not in header:
                raise DataError(f"{path}: missing column '{col}'")
        xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        K = len(xcols)
        if K == 0:
            raise DataError(f"{path}: no covariate columns (expected x1..xK)")
        expected = [f"x{k + 1}" for k in range(K)]
        if sorted(xcols, key=lambda c: int(c[1:])) != expected:
            raise DataError(f"{path}: covariate columns must be x1..x{K}, got {xcols}")
        extra = set(header) - {"unit", "t", "y", "t0", *xcols}
        if extra:
            raise DataError(f"{path}: unknown column(s) {sorted(extra)}")
        pos = {h: i for i, h in enumerate(header)}
        units: dict[int, dict[int, tuple]] = {}
        order: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                u = int(row[pos["unit"]])
                t = int(row[pos["t"]])
                t0 = int(row[pos["t0"]])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: unit, t and t0 must be integers") from None
            vals = []
            for col in ["y"] + expected:
                try:
                    v = float(row[pos[col]])
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column '{col}': not a number") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {lineno}, column '{col}': missing or non-finite")
                vals.append(v)
            if u not in units:
                units[u] = {}
                order.append(u)
            if t in units[u]:
                raise DataError(f"{path}: line {lineno}: duplicate row for unit {u}, t={t}")
            units[u][t] = (vals, t0, lineno)
    if not units:
        raise DataError(f"{path}: no data rows")
    T = max(max(rows) for rows in units.values())
    if design is not None and (design.T != T or design.K != K):
        raise DataError(f"{path}: data has T={T}, K={K}; config design says T={design.T}, K={design.K}")
    N = len(order)
    Y0, X0, t0s = np.empty(N), np.empty((N, K)), np.empty(N, dtype=np.int64)
    Y, X = np.empty((N, T)), np.empty((N, T, K))
    for i, u in enumerate(order):
        rows = units[u]
        if sorted(rows) != list(range(T + 1)):
            raise DataError(f"{path}: unit {u} must have rows t=0..{T}, has {sorted(rows)}")
        t0_vals = {r[1] for r in rows.values()}
        if len(t0_vals) != 1:
            raise DataError(f"{path}: unit {u}: column 't0' varies across rows")
        t0 = t0_vals.pop()
        if not 0 <= t0 <= T:
            raise DataError(f"{path}: line {rows[0][2]}, column 't0': {t0} outside 0..{T}")
        t0s[i] = t0
        Y0[i], X0[i] = rows[0][0][0], rows[0][0][1:]
        for t in range(1, T + 1):
            Y[i, t - 1], X[i, t - 1] = rows[t][0][0], rows[t][0][1:]
    return PanelData(Y0=Y0, X0=X0, t0=t0_from_disk(t0s), Y=Y, X=X)


def write_latent_csv(path, latent, design: EventDesign):
    header = (["unit", "alpha", "delta0"] + [f"eps{j}" for j in range(1, design.J_max + 1)]
              + [f"u{t}" for t in range(1, design.T + 1)])
    rows = ([i + 1, latent.alpha[i], latent.delta0[i], *latent.eps[i], *latent.U[i]]
            for i in range(latent.alpha.shape[0]))
    _write_rows(path, header, rows)


def write_table_csv(path, columns: list[str], rows: Iterable[dict], append: bool = False):
    """Dict rows to CSV. With ``append`` the header is assumed present."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        if not append:
            fh.write(",".join(columns) + "\n")
        block = "".join(",".join(fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns) + "\n"
                        for r in rows)
        fh.write(block)
        fh.flush()


# ---------------------------------------------------------------------------
# Structured documents (fit reports, metadata)
# ---------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, doc: dict):
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2, allow_nan=False)
        fh.write("\n")


def theta_to_doc(theta: StructuralParams) -> dict:
    doc = {"rho_Y": theta.rho_Y, "rho_delta": theta.rho_delta, "beta": theta.beta,
           "sigma2_U": theta.sigma2_U, "sigma2_eps": theta.sigma2_eps}
    if theta.gamma is not None:
        doc["gamma"] = theta.gamma
    return doc


def theta_from_doc(doc: dict) -> StructuralParams:
    gamma = doc.get("gamma")
    return StructuralParams(rho_Y=float(doc["rho_Y"]), rho_delta=float(doc["rho_delta"]),
                            beta=np.asarray(doc["beta"], dtype=float),
                            sigma2_U=float(doc["sigma2_U"]), sigma2_eps=float(doc["sigma2_eps"]),
                            gamma=None if gamma is None else np.asarray(gamma, dtype=float))


def het_to_doc(het: HeterogeneityModel) -> dict:
    return {"cohorts": t0_to_disk(np.asarray(het.cohorts, dtype=np.int64)) if het.cohorts else [],
            "mean_coef": het.mean_coef, "cov": het.cov}


def het_from_doc(doc: dict) -> HeterogeneityModel:
    cohorts = tuple(int(c) for c in t0_from_disk(np.asarray(doc["cohorts"], dtype=np.int64)))
    return HeterogeneityModel(mean_coef=np.asarray(doc["mean_coef"], dtype=float),
                              cov=np.asarray(doc["cov"], dtype=float), cohorts=cohorts)


def feedback_to_doc(fb: FeedbackModel) -> dict:
    return {"A_x": fb.A_x, "a_y": fb.a_y, "a_d": fb.a_d, "c": fb.c, "Sigma_X": fb.Sigma_X}


def feedback_from_doc(doc: dict) -> FeedbackModel:
    return FeedbackModel(A_x=np.asarray(doc["A_x"], dtype=float), a_y=np.asarray(doc["a_y"], dtype=float),
                         a_d=np.asarray(doc["a_d"], dtype=float), c=np.asarray(doc["c"], dtype=float),
                         Sigma_X=np.asarray(doc["Sigma_X"], dtype=float))


def fit_to_doc(fit, design: EventDesign, trace_file: Optional[str] = None) -> dict:
    doc = {
        "schema_version": 1,
        "design": {"T": design.T, "K": design.K, "J_max": design.J_max},
        "gamma_mode": fit.layout.gamma_mode,
        "theta": theta_to_doc(fit.theta_hat),
        "heterogeneity": het_to_doc(fit.het_hat),
        "feedback": None if fit.feedback_hat is None else feedback_to_doc(fit.feedback_hat),
        "loglik_Y": fit.loglik_Y,
        "loglik_X": fit.loglik_X,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "polish_iterations": fit.polish_iterations,
        "message": fit.message,
        "packed": dict(zip(fit.layout.names, fit.z_hat.tolist())),
        "free": dict(zip(fit.layout.names, fit.free_mask.tolist())),
    }
    if fit.se is not None:
        doc["se"] = {
            "natural": fit.se.natural_dict(),
            "packed": dict(zip(fit.se.names, fit.se.packed.tolist())),
            "hessian_pd": fit.se.hessian_pd,
            "condition_number": fit.se.condition_number,
            "warnings": fit.se.warnings,
        }
    if trace_file is not None:
        doc["trace_file"] = trace_file
    return doc


def read_fit_report(path) -> dict:
    """Parse a fit report into model objects: design, theta, het, feedback, raw doc."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        d = doc["design"]
        design = EventDesign(T=int(d["T"]), K=int(d["K"]), J_max=int(d["J_max"]))
        theta = theta_from_doc(doc["theta"])
        het = het_from_doc(doc["heterogeneity"])
        fb = None if doc.get("feedback") is None else feedback_from_doc(doc["feedback"])
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from None
    return {"design": design, "theta": theta, "het": het, "feedback": fb, "doc": doc}
