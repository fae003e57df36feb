"""
Run configuration: one JSON document per run, validated strictly before any computation.

Unknown keys are errors, model dimensions are never defaulted, and every diagnostic names
the offending field by its dotted path (``simulate.N``). Adoption periods use the on-disk
encoding, where 0 means never treated. See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import json
import numbers
from typing import Any, Callable

import numpy as np

from .estimation import ESTIMATORS, FitOptions, MonteCarloStudy, StudyCell
from .fileio import t0_from_disk
from .model_core import GAMMA_MODES, EventDesign, FeedbackModel, HeterogeneityModel, ModelError, StructuralParams
from .simulation import InitialLaw, SimConfig

SCHEMA_VERSION = 1


class ConfigError(ModelError):
    pass


# --- primitive checks ---------------------------------------------------------


def _is_num(v) -> bool:
    return isinstance(v, numbers.Real) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, numbers.Integral) and not isinstance(v, bool)


def number(path, v):
    if not _is_num(v):
        raise ConfigError(f"{path}: must be a finite number, got {v!r}")


def positive_number(path, v):
    number(path, v)
    if not v > 0:
        raise ConfigError(f"{path}: must be > 0, got {v!r}")


def integer(path, v):
    if not _is_int(v):
        raise ConfigError(f"{path}: must be an integer, got {v!r}")


def nonneg_int(path, v):
    integer(path, v)
    if v < 0:
        raise ConfigError(f"{path}: must be >= 0, got {v!r}")


def positive_int(path, v):
    integer(path, v)
    if v < 1:
        raise ConfigError(f"{path}: must be a positive integer, got {v!r}")


def seed_int(path, v):
    integer(path, v)
    if not 0 <= v < 2**64:
        raise ConfigError(f"{path}: must be an unsigned 64-bit integer, got {v!r}")


def vector(path, v):
    if not isinstance(v, list) or not all(_is_num(x) for x in v):
        raise ConfigError(f"{path}: must be a list of numbers")


def int_vector(path, v):
    if not isinstance(v, list) or not all(_is_int(x) for x in v):
        raise ConfigError(f"{path}: must be a list of integers")


def matrix(path, v):
    if (not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v)
            or len({len(r) for r in v}) != 1):
        raise ConfigError(f"{path}: must be a non-empty rectangular list of lists")
    for i, r in enumerate(v):
        vector(f"{path}[{i}]", r)


def one_of(*choices) -> Callable:
    def check(path, v):
        if v not in choices:
            raise ConfigError(f"{path}: must be one of {list(choices)}, got {v!r}")
    return check


def string(path, v):
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{path}: must be a non-empty string")


def string_list(path, v):
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ConfigError(f"{path}: must be a list of strings")


def t0_value(path, v):
    if v == "observed" or _is_int(v):
        return
    int_vector(path, v)


def scalar_or_vector(path, v):
    if _is_num(v):
        return
    vector(path, v)


def vector_or_matrix(path, v):
    if isinstance(v, list) and v and isinstance(v[0], list):
        matrix(path, v)
    else:
        vector(path, v)


# --- schemas (a trailing "?" marks an optional key) ----------------------------

DESIGN = {"T": positive_int, "K": positive_int, "J_max": nonneg_int}
THETA = {"rho_Y": number, "rho_delta": number, "beta": vector, "sigma2_U": positive_number,
         "sigma2_eps": number, "gamma?": vector}
HETEROGENEITY = {"cohorts": int_vector, "mean_coef": matrix, "cov": matrix}
FEEDBACK = {"A_x": matrix, "a_y": vector, "a_d": matrix, "c": vector, "Sigma_X": matrix}
INITIAL = {"mean": vector, "cov": matrix}
SIMULATE = {"N": positive_int, "seed": seed_int, "theta": THETA, "heterogeneity": HETEROGENEITY,
            "feedback": FEEDBACK, "initial": INITIAL, "cohort_probs": vector}
FIXED = {"rho_Y?": number, "rho_delta?": number, "beta?": vector, "sigma2_U?": positive_number,
         "sigma2_eps?": positive_number}
ESTIMATE = {"gamma_mode?": one_of(*GAMMA_MODES), "max_iter?": positive_int, "tol?": positive_number,
            "xtol?": positive_number, "grad_tol?": positive_number, "n_starts?": positive_int,
            "seed?": seed_int, "fixed?": FIXED, "polish?": one_of(True, False)}
SCENARIO = {"t0_star": t0_value, "n_draws": positive_int, "seed": seed_int,
            "lambda_source?": one_of("prior", "posterior"),
            "init_star?": {"y0": scalar_or_vector, "x0": vector_or_matrix}, "n_units?": positive_int}
CELL = {"name": string, "simulate": {**{k: v for k, v in SIMULATE.items() if k != "seed"}, "seed?": seed_int}}
MONTECARLO = {"replications": positive_int, "seed": seed_int, "cells": [CELL],
              "estimators?": string_list, "estimate?": ESTIMATE}

SECTIONS = {"simulate": SIMULATE, "estimate": ESTIMATE, "scenario": SCENARIO, "montecarlo": MONTECARLO}

# the section each command needs; every other known section is optional and still validated
REQUIRED_SECTION = {"simulate": "simulate", "estimate": None, "counterfactual": "scenario",
                    "decompose": "scenario", "montecarlo": "montecarlo"}


def check(doc: Any, schema, path: str = ""):
    if callable(schema):
        schema(path, doc)
        return
    if isinstance(schema, list):
        if not isinstance(doc, list):
            raise ConfigError(f"{path}: must be a list")
        for i, item in enumerate(doc):
            check(item, schema[0], f"{path}[{i}]")
        return
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: must be an object")
    keys = {k.rstrip("?"): k.endswith("?") for k in schema}
    for k in doc:
        if k not in keys:
            raise ConfigError(f"{_join(path, k)}: unknown key")
    for k, optional in keys.items():
        sub = schema[k + "?" if optional else k]
        if k not in doc:
            if not optional:
                raise ConfigError(f"{_join(path, k)}: required field is missing")
            continue
        check(doc[k], sub, _join(path, k))


def _join(path, key):
    return f"{path}.{key}" if path else key


def load_config(path, command: str) -> dict:
    """Read and validate a run configuration for ``command``."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    need = REQUIRED_SECTION[command]
    schema = {"schema_version": one_of(SCHEMA_VERSION), "design": DESIGN,
              **{k if k == need else k + "?": v for k, v in SECTIONS.items()}}
    check(doc, schema)
    design = EventDesign(**doc["design"])
    if "simulate" in doc:
        build_sim_config(doc["simulate"], design, "simulate")
    if "estimate" in doc:
        build_fit_options(doc["estimate"], design)
    if "scenario" in doc:
        _check_scenario(doc["scenario"], design)
    if "montecarlo" in doc:
        build_study(doc["montecarlo"], design)
    return doc


# --- builders with cross-field checks -----------------------------------------


def _shape(path, arr, shape):
    if np.shape(arr) != shape:
        raise ConfigError(f"{path}: expected shape {shape}, got {np.shape(arr)}")


def build_theta(doc: dict, design: EventDesign, path: str) -> StructuralParams:
    _shape(f"{path}.beta", doc["beta"], (design.K,))
    if "gamma" in doc:
        _shape(f"{path}.gamma", doc["gamma"], (design.T,))
    if doc["sigma2_eps"] < 0:
        raise ConfigError(f"{path}.sigma2_eps: must be >= 0")
    try:
        return StructuralParams(rho_Y=doc["rho_Y"], rho_delta=doc["rho_delta"], beta=doc["beta"],
                                sigma2_U=doc["sigma2_U"], sigma2_eps=doc["sigma2_eps"],
                                gamma=doc.get("gamma"))
    except ModelError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_het(doc: dict, design: EventDesign, path: str) -> HeterogeneityModel:
    cohorts = doc["cohorts"]
    for i, c in enumerate(cohorts):
        if not 0 <= c <= design.T:
            raise ConfigError(f"{path}.cohorts[{i}]: {c} outside 0..{design.T}")
    if len(set(cohorts)) != len(cohorts):
        raise ConfigError(f"{path}.cohorts: duplicate values")
    _shape(f"{path}.mean_coef", doc["mean_coef"], (2, 2 + design.K + len(cohorts)))
    _shape(f"{path}.cov", doc["cov"], (2, 2))
    try:
        return HeterogeneityModel(mean_coef=doc["mean_coef"], cov=doc["cov"],
                                  cohorts=tuple(int(c) for c in t0_from_disk(np.asarray(cohorts, dtype=np.int64))))
    except ModelError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_feedback(doc: dict, design: EventDesign, path: str) -> FeedbackModel:
    K = design.K
    _shape(f"{path}.A_x", doc["A_x"], (K, K))
    _shape(f"{path}.a_y", doc["a_y"], (K,))
    _shape(f"{path}.a_d", doc["a_d"], (K, design.n_events))
    _shape(f"{path}.c", doc["c"], (K,))
    _shape(f"{path}.Sigma_X", doc["Sigma_X"], (K, K))
    try:
        return FeedbackModel(**{k: np.asarray(doc[k], dtype=float) for k in FEEDBACK})
    except ModelError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_sim_config(doc: dict, design: EventDesign, path: str, seed=None) -> SimConfig:
    theta = build_theta(doc["theta"], design, f"{path}.theta")
    het = build_het(doc["heterogeneity"], design, f"{path}.heterogeneity")
    fb = build_feedback(doc["feedback"], design, f"{path}.feedback")
    init = doc["initial"]
    _shape(f"{path}.initial.mean", init["mean"], (1 + design.K,))
    _shape(f"{path}.initial.cov", init["cov"], (1 + design.K, 1 + design.K))
    _shape(f"{path}.cohort_probs", doc["cohort_probs"], (design.T + 1,))
    probs = np.asarray(doc["cohort_probs"], dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ConfigError(f"{path}.cohort_probs: must be non-negative and sum to 1")
    try:
        return SimConfig(N=doc["N"], design=design, theta=theta, het=het, feedback=fb,
                         initial_law=InitialLaw(init["mean"], init["cov"]), cohort_law=probs,
                         seed=doc.get("seed", 0) if seed is None else seed)
    except ModelError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def build_fit_options(doc: dict, design: EventDesign, seed=None) -> FitOptions:
    kw = {k: v for k, v in doc.items() if k != "fixed"}
    if seed is not None:
        kw["seed"] = seed
    fixed = dict(doc.get("fixed", {}))
    if "beta" in fixed:
        _shape("estimate.fixed.beta", fixed["beta"], (design.K,))
    return FitOptions(fixed=fixed, **kw)


def _check_scenario(doc: dict, design: EventDesign):
    t0 = doc["t0_star"]
    vals = [t0] if _is_int(t0) else (t0 if isinstance(t0, list) else [])
    for v in vals:
        if not 0 <= v <= design.T:
            raise ConfigError(f"scenario.t0_star: {v} outside 0..{design.T}")
    if "init_star" in doc:
        x0 = np.asarray(doc["init_star"]["x0"], dtype=float)
        if x0.shape[-1] != design.K:
            raise ConfigError(f"scenario.init_star.x0: last dimension must be K={design.K}")


def build_study(doc: dict, design: EventDesign, seed=None) -> MonteCarloStudy:
    if not doc["cells"]:
        raise ConfigError("montecarlo.cells: empty grid")
    estimators = tuple(doc.get("estimators", ESTIMATORS))
    for i, e in enumerate(estimators):
        if e not in ESTIMATORS:
            raise ConfigError(f"montecarlo.estimators[{i}]: unknown estimator {e!r}")
    cells = []
    for i, cell in enumerate(doc["cells"]):
        cfg = build_sim_config(cell["simulate"], design, f"montecarlo.cells[{i}].simulate")
        cells.append(StudyCell(name=cell["name"], config=cfg))
    opts = build_fit_options({"n_starts": 1, **doc.get("estimate", {})}, design)
    return MonteCarloStudy(cells=cells, replications=doc["replications"], estimators=estimators,
                           seed=doc["seed"] if seed is None else seed, fit_options=opts)
