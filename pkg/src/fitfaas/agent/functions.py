"""The built-in function catalog executed by workers (and in-process by the serial baseline)."""

from __future__ import annotations

import math
import time

from .. import errors
from ..inference import fit, hypotest_asymptotic, hypotest_toys
from ..model import build_model, observed_data
from ..workspace import apply_patch, named_patch_from_document, workspace_from_document

DEFAULT_TOYS = 1000


def _require(payload, key, kind):
    if not isinstance(payload, dict) or key not in payload:
        raise errors.BadRequest(f"payload is missing {key!r}")
    value = payload[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise errors.BadRequest(f"payload field {key!r} has the wrong type")
    return value


def _load(payload, allow_missing_poi):
    ws = workspace_from_document(_require(payload, "workspace", dict))
    patch_doc = payload.get("patch")
    if patch_doc is not None:
        ws = apply_patch(ws, named_patch_from_document(patch_doc))
    model = build_model(ws, payload.get("measurement"), allow_missing_poi=allow_missing_poi)
    return model, observed_data(model, ws)


def _finite(value, what):
    value = float(value)
    if not math.isfinite(value):
        raise errors.NonFiniteResult(f"{what} is {value}")
    return value


def hypotest_workspace(payload: dict) -> dict:
    """Run a CLs hypothesis test at ``payload['mu']`` on the patched workspace.

    Result: ``{cls_obs, cls_exp[5], clsb_obs, clb_obs, fit: {nll_min, n_evaluations}, timing: {fit_seconds}}``.
    ``fit`` is the unconditional global fit on the observed data.
    """
    mu = float(_require(payload, "mu", (int, float)))
    method = payload.get("method", "asymptotic")
    if method not in ("asymptotic", "toys"):
        raise errors.BadRequest(f"unknown method {method!r}")
    start = time.perf_counter()
    model, data = _load(payload, allow_missing_poi=False)
    best = fit(model, data)
    if method == "asymptotic":
        res = hypotest_asymptotic(model, data, mu)
    else:
        res = hypotest_toys(model, data, mu, int(payload.get("n_toys", DEFAULT_TOYS)), int(payload.get("seed", 0)))
    elapsed = time.perf_counter() - start
    return {
        "cls_obs": _finite(res.cls_obs, "cls_obs"),
        "cls_exp": [_finite(v, "cls_exp") for v in res.cls_exp],
        "clsb_obs": _finite(res.clsb_obs, "clsb_obs"),
        "clb_obs": _finite(res.clb_obs, "clb_obs"),
        "fit": {"nll_min": _finite(best.nll_min, "nll_min"), "n_evaluations": int(best.n_evaluations)},
        "timing": {"fit_seconds": elapsed},
    }


def fit_workspace(payload: dict) -> dict:
    """Global maximum-likelihood fit; the POI may be absent (background-only workspaces)."""
    start = time.perf_counter()
    model, data = _load(payload, allow_missing_poi=True)
    best = fit(model, data)
    elapsed = time.perf_counter() - start
    return {
        "fit": {
            "nll_min": _finite(best.nll_min, "nll_min"),
            "n_evaluations": int(best.n_evaluations),
            "parameters": best.parameters(model),
        },
        "timing": {"fit_seconds": elapsed},
    }


def echo(payload):
    return payload


CATALOG = {"hypotest_workspace": hypotest_workspace, "fit_workspace": fit_workspace, "echo": echo}


def execute_function(name: str, payload):
    """Run catalog function ``name``; module errors propagate with their codes."""
    try:
        func = CATALOG[name]
    except KeyError:
        raise errors.UnknownFunction(f"{name!r} is not in the catalog") from None
    return func(payload)


def error_report(exc: BaseException) -> dict:
    """Structured ``{code, message, retriable}`` for any exception."""
    if isinstance(exc, errors.FitFaaSError):
        return exc.to_report()
    return {"code": "InternalError", "message": f"{type(exc).__name__}: {exc}", "retriable": False}


def strip_timing(result):
    """Copy of a result document without wall-clock fields, for equality checks."""
    if not isinstance(result, dict):
        return result
    return {k: v for k, v in result.items() if k != "timing"}
