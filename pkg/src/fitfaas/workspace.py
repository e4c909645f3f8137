"""Declarative workspace documents: parsing, validation, canonical form and patching.

The document layout mirrors the published pyhf workspace schema::

    {"channels": [...], "observations": [...], "measurements": [...], "version": "1.0.0"}

so that published background-only workspaces parse without modification.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import jsonschema

from . import errors

__all__ = [
    "KINDS",
    "NormSysData",
    "HistoSysData",
    "ModifierSpec",
    "Sample",
    "Channel",
    "ParameterConfig",
    "Measurement",
    "Workspace",
    "PatchOp",
    "NamedPatch",
    "PatchSet",
    "parse_workspace",
    "workspace_from_document",
    "serialize_workspace",
    "to_document",
    "canonical_json",
    "digest",
    "apply_patch",
    "apply_operations",
    "parse_patchset",
    "patchset_to_document",
    "named_patch_from_document",
    "named_patch_to_document",
    "verify_pallet",
    "validate",
]

KINDS = ("normfactor", "lumi", "normsys", "histosys", "shapesys", "staterror")
PER_BIN_KINDS = ("shapesys", "staterror")
DEFAULT_VERSION = "1.0.0"


@dataclass(frozen=True)
class NormSysData:
    hi: float
    lo: float


@dataclass(frozen=True)
class HistoSysData:
    hi_data: tuple[float, ...]
    lo_data: tuple[float, ...]


@dataclass(frozen=True)
class ModifierSpec:
    name: str
    kind: str
    # None | NormSysData | HistoSysData | tuple of per-bin uncertainties
    data: Any = None


@dataclass(frozen=True)
class Sample:
    name: str
    data: tuple[float, ...]
    modifiers: tuple[ModifierSpec, ...] = ()


@dataclass(frozen=True)
class Channel:
    name: str
    samples: tuple[Sample, ...]

    @property
    def n_bins(self) -> int:
        return len(self.samples[0].data)


@dataclass(frozen=True)
class ParameterConfig:
    """Per-parameter overrides carried by a measurement."""

    name: str
    inits: tuple[float, ...] | None = None
    bounds: tuple[tuple[float, float], ...] | None = None
    fixed: bool | None = None
    auxdata: tuple[float, ...] | None = None
    sigmas: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Measurement:
    name: str
    poi: str
    parameters: tuple[ParameterConfig, ...] = ()


@dataclass(frozen=True)
class Workspace:
    channels: tuple[Channel, ...]
    observations: Mapping[str, tuple[float, ...]]
    measurements: tuple[Measurement, ...]
    version: str = DEFAULT_VERSION

    def channel(self, name: str) -> Channel:
        for channel in self.channels:
            if channel.name == name:
                return channel
        raise KeyError(name)

    def measurement(self, name: str | None = None) -> Measurement:
        if name is None:
            return self.measurements[0]
        for measurement in self.measurements:
            if measurement.name == name:
                return measurement
        raise errors.UnknownMeasurement(f"no measurement named {name!r}")

    def modifier_names(self) -> set[str]:
        return {
            mod.name
            for channel in self.channels
            for sample in channel.samples
            for mod in sample.modifiers
        }


@dataclass(frozen=True)
class PatchOp:
    op: str
    path: str
    value: Any = None


@dataclass(frozen=True)
class NamedPatch:
    name: str
    values: tuple[Any, ...]
    operations: tuple[PatchOp, ...]


@dataclass(frozen=True)
class PatchSet:
    description: str
    digest: str
    labels: tuple[str, ...]
    patches: tuple[NamedPatch, ...]
    name: str = ""
    version: str = DEFAULT_VERSION
    references: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> NamedPatch:
        for patch in self.patches:
            if patch.name == name:
                return patch
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Schema (shape only; cross-field invariants are checked separately)

_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}
_NONNEG_LIST = {"type": "array", "items": {"type": "number", "minimum": 0}}


def _modifier_rule(kind, data_schema):
    return {
        "if": {"properties": {"type": {"const": kind}}},
        "then": {"properties": {"data": data_schema}},
    }


WORKSPACE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "definitions": {
        "modifier": {
            "type": "object",
            "required": ["name", "type", "data"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "type": {"enum": list(KINDS)},
            },
            "allOf": [
                _modifier_rule("normfactor", {"type": "null"}),
                _modifier_rule("lumi", {"type": "null"}),
                _modifier_rule(
                    "normsys",
                    {
                        "type": "object",
                        "required": ["hi", "lo"],
                        "properties": {
                            "hi": {"type": "number", "exclusiveMinimum": 0},
                            "lo": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                ),
                _modifier_rule(
                    "histosys",
                    {
                        "type": "object",
                        "required": ["hi_data", "lo_data"],
                        "properties": {"hi_data": _NUMBER_LIST, "lo_data": _NUMBER_LIST},
                    },
                ),
                _modifier_rule("shapesys", _NONNEG_LIST),
                _modifier_rule("staterror", _NONNEG_LIST),
            ],
        },
        "sample": {
            "type": "object",
            "required": ["name", "data", "modifiers"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "data": _NONNEG_LIST,
                "modifiers": {"type": "array", "items": {"$ref": "#/definitions/modifier"}},
            },
        },
        "channel": {
            "type": "object",
            "required": ["name", "samples"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "samples": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"$ref": "#/definitions/sample"},
                },
            },
        },
        "parameter": {
            "type": "object",
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "inits": _NUMBER_LIST,
                "bounds": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                },
                "fixed": {"type": "boolean"},
                "auxdata": _NUMBER_LIST,
                "sigmas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "measurement": {
            "type": "object",
            "required": ["name", "config"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "config": {
                    "type": "object",
                    "required": ["poi"],
                    "properties": {
                        "poi": {"type": "string", "minLength": 1},
                        "parameters": {"type": "array", "items": {"$ref": "#/definitions/parameter"}},
                    },
                },
            },
        },
    },
    "type": "object",
    "required": ["channels", "observations", "measurements", "version"],
    "properties": {
        "channels": {"type": "array", "minItems": 1, "items": {"$ref": "#/definitions/channel"}},
        "observations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "data"],
                "properties": {"name": {"type": "string"}, "data": _NONNEG_LIST},
            },
        },
        "measurements": {
            "type": "array",
            "minItems": 1,
            "items": {"$ref": "#/definitions/measurement"},
        },
        "version": {"type": "string"},
    },
}

PATCHSET_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["metadata", "patches"],
    "properties": {
        "metadata": {
            "type": "object",
            "required": ["digests", "labels"],
            "properties": {
                "description": {"type": "string"},
                "digests": {"type": "object", "required": ["sha256"]},
                "labels": {"type": "array", "items": {"type": "string"}},
            },
        },
        "patches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metadata", "patch"],
                "properties": {
                    "metadata": {
                        "type": "object",
                        "required": ["name", "values"],
                        "properties": {"name": {"type": "string", "minLength": 1}, "values": {"type": "array"}},
                    },
                    "patch": {"type": "array", "items": {"$ref": "#/definitions/op"}},
                },
            },
        },
    },
    "definitions": {
        "op": {
            "type": "object",
            "required": ["op", "path"],
            "properties": {
                "op": {"enum": ["add", "remove", "replace"]},
                "path": {"type": "string", "minLength": 1},
            },
            "if": {"properties": {"op": {"enum": ["add", "replace"]}}},
            "then": {"required": ["value"]},
        }
    },
}

_WORKSPACE_VALIDATOR = jsonschema.Draft7Validator(WORKSPACE_SCHEMA)
_PATCHSET_VALIDATOR = jsonschema.Draft7Validator(PATCHSET_SCHEMA)


def _pointer(parts) -> str:
    return "/" + "/".join(str(p) for p in parts) if parts else ""


def _schema_check(validator, doc):
    # best_match prefers the most specific (deepest) error
    error = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if error is not None:
        raise errors.SchemaViolation(error.message, path=_pointer(error.absolute_path))


def _load_json(text):
    try:
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        return json.loads(text, parse_constant=_reject_constant, parse_float=_finite_float)
    except (ValueError, TypeError) as exc:
        raise errors.MalformedDocument(str(exc), path="") from exc


def _reject_constant(name):
    raise ValueError(f"non-finite constant {name} not allowed")


def _finite_float(literal):
    value = float(literal)
    if not math.isfinite(value):
        # e.g. 1e999 overflows to inf
        raise ValueError(f"number {literal} is out of range")
    return value


# ---------------------------------------------------------------------------
# Document <-> types


def _floats(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


def _modifier_from_doc(doc) -> ModifierSpec:
    kind = doc["type"]
    data = doc["data"]
    if kind == "normsys":
        payload = NormSysData(float(data["hi"]), float(data["lo"]))
    elif kind == "histosys":
        payload = HistoSysData(_floats(data["hi_data"]), _floats(data["lo_data"]))
    elif kind in PER_BIN_KINDS:
        payload = _floats(data)
    else:
        payload = None
    return ModifierSpec(name=doc["name"], kind=kind, data=payload)


def _modifier_to_doc(mod: ModifierSpec) -> dict:
    if isinstance(mod.data, NormSysData):
        data = {"hi": mod.data.hi, "lo": mod.data.lo}
    elif isinstance(mod.data, HistoSysData):
        data = {"hi_data": list(mod.data.hi_data), "lo_data": list(mod.data.lo_data)}
    elif mod.data is None:
        data = None
    else:
        data = list(mod.data)
    return {"name": mod.name, "type": mod.kind, "data": data}


def _parameter_from_doc(doc) -> ParameterConfig:
    def opt(key):
        return _floats(doc[key]) if key in doc else None

    bounds = None
    if "bounds" in doc:
        bounds = tuple((float(lo), float(hi)) for lo, hi in doc["bounds"])
    return ParameterConfig(
        name=doc["name"],
        inits=opt("inits"),
        bounds=bounds,
        fixed=doc.get("fixed"),
        auxdata=opt("auxdata"),
        sigmas=opt("sigmas"),
    )


def _parameter_to_doc(par: ParameterConfig) -> dict:
    doc: dict[str, Any] = {"name": par.name}
    if par.inits is not None:
        doc["inits"] = list(par.inits)
    if par.bounds is not None:
        doc["bounds"] = [list(b) for b in par.bounds]
    if par.fixed is not None:
        doc["fixed"] = par.fixed
    if par.auxdata is not None:
        doc["auxdata"] = list(par.auxdata)
    if par.sigmas is not None:
        doc["sigmas"] = list(par.sigmas)
    return doc


def workspace_from_document(doc) -> Workspace:
    """Build a validated :class:`Workspace` from an already-decoded document."""
    _schema_check(_WORKSPACE_VALIDATOR, doc)
    channels = tuple(
        Channel(
            name=ch["name"],
            samples=tuple(
                Sample(
                    name=s["name"],
                    data=_floats(s["data"]),
                    modifiers=tuple(_modifier_from_doc(m) for m in s["modifiers"]),
                )
                for s in ch["samples"]
            ),
        )
        for ch in doc["channels"]
    )
    observations = {}
    for i, obs in enumerate(doc["observations"]):
        if obs["name"] in observations:
            raise errors.InvariantViolation(
                f"duplicate observation for channel {obs['name']!r}", path=f"/observations/{i}"
            )
        observations[obs["name"]] = _floats(obs["data"])
    measurements = tuple(
        Measurement(
            name=m["name"],
            poi=m["config"]["poi"],
            parameters=tuple(_parameter_from_doc(p) for p in m["config"].get("parameters", [])),
        )
        for m in doc["measurements"]
    )
    ws = Workspace(
        channels=channels,
        observations=observations,
        measurements=measurements,
        version=doc["version"],
    )
    violations = validate(ws)
    if violations:
        path, message = violations[0]
        raise errors.InvariantViolation(message, path=path)
    return ws


def parse_workspace(text: str | bytes) -> Workspace:
    """Parse a serialized workspace.

    Raises:
        MalformedDocument: ``text`` is not JSON.
        SchemaViolation: a field is missing or has the wrong shape.
        InvariantViolation: a cross-field rule (e.g. bin counts) is broken.
    """
    return workspace_from_document(_load_json(text))


def to_document(ws: Workspace) -> dict:
    return {
        "channels": [
            {
                "name": ch.name,
                "samples": [
                    {
                        "name": s.name,
                        "data": list(s.data),
                        "modifiers": [_modifier_to_doc(m) for m in s.modifiers],
                    }
                    for s in ch.samples
                ],
            }
            for ch in ws.channels
        ],
        "observations": [{"name": name, "data": list(data)} for name, data in ws.observations.items()],
        "measurements": [
            {
                "name": m.name,
                "config": {
                    "poi": m.poi,
                    "parameters": [_parameter_to_doc(p) for p in m.parameters],
                },
            }
            for m in ws.measurements
        ],
        "version": ws.version,
    }


def canonical_json(doc) -> str:
    """Sorted keys, shortest round-trip floats; same bytes pyhf hashes for its digests."""
    return json.dumps(doc, sort_keys=True, allow_nan=False)


def serialize_workspace(ws: Workspace) -> str:
    # observations are emitted in channel order so field order never leaks into bytes
    doc = to_document(ws)
    doc["observations"] = sorted(doc["observations"], key=lambda o: o["name"])
    return canonical_json(doc)


def digest(text_or_doc) -> str:
    """SHA-256 hex digest of the canonical form of a document (or its text)."""
    doc = _load_json(text_or_doc) if isinstance(text_or_doc, (str, bytes)) else text_or_doc
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def validate(ws: Workspace) -> list[tuple[str, str]]:
    """Return ``(path, message)`` pairs for every broken workspace invariant."""
    violations = []
    names = [ch.name for ch in ws.channels]
    for i, ch in enumerate(ws.channels):
        base = f"/channels/{i}"
        if names.count(ch.name) > 1:
            violations.append((base, f"duplicate channel name {ch.name!r}"))
        if not ch.samples:
            violations.append((base + "/samples", f"channel {ch.name!r} has no samples"))
            continue
        n_bins = len(ch.samples[0].data)
        if n_bins == 0:
            violations.append((base, f"channel {ch.name!r} has zero bins"))
        sample_names = [s.name for s in ch.samples]
        for j, sample in enumerate(ch.samples):
            spath = f"{base}/samples/{j}"
            if sample_names.count(sample.name) > 1:
                violations.append((spath, f"duplicate sample {sample.name!r} in channel {ch.name!r}"))
            if len(sample.data) != n_bins:
                violations.append(
                    (spath + "/data", f"channel {ch.name!r}: sample {sample.name!r} has {len(sample.data)} bins, expected {n_bins}")
                )
            if any(not math.isfinite(v) or v < 0 for v in sample.data):
                violations.append((spath + "/data", "nominal rates must be finite and non-negative"))
            seen = set()
            for k, mod in enumerate(sample.modifiers):
                mpath = f"{spath}/modifiers/{k}"
                key = (mod.name, mod.kind)
                if key in seen:
                    violations.append((mpath, f"duplicate modifier {mod.name!r} ({mod.kind})"))
                seen.add(key)
                violations.extend(_modifier_violations(mod, len(sample.data), mpath))
        obs = ws.observations.get(ch.name)
        if obs is None:
            violations.append((base, f"channel {ch.name!r} has no observation"))
        elif len(obs) != n_bins:
            violations.append((base, f"channel {ch.name!r}: observation has {len(obs)} bins, samples have {n_bins}"))
    for name, data in ws.observations.items():
        if name not in names:
            violations.append(("/observations", f"observation for unknown channel {name!r}"))
        if any(not math.isfinite(v) or v < 0 for v in data):
            violations.append(("/observations", f"observation {name!r} must be finite and non-negative"))
    if not ws.measurements:
        violations.append(("/measurements", "at least one measurement is required"))
    return violations


def _modifier_violations(mod: ModifierSpec, n_bins: int, path: str):
    out = []
    if mod.kind not in KINDS:
        out.append((path, f"unknown modifier kind {mod.kind!r}"))
    elif mod.kind == "normsys":
        if not (mod.data.hi > 0 and mod.data.lo > 0):
            out.append((path + "/data", "normsys hi and lo must be positive"))
    elif mod.kind == "histosys":
        if len(mod.data.hi_data) != n_bins or len(mod.data.lo_data) != n_bins:
            out.append((path + "/data", f"histosys {mod.name!r} templates must have {n_bins} bins"))
    elif mod.kind in PER_BIN_KINDS:
        if len(mod.data) != n_bins:
            out.append((path + "/data", f"{mod.kind} {mod.name!r} must have {n_bins} entries"))
        if any(not math.isfinite(v) or v < 0 for v in mod.data):
            out.append((path + "/data", "uncertainties must be non-negative"))
    return out


# ---------------------------------------------------------------------------
# Patching (RFC 6902 add / remove / replace)


def _split_pointer(path: str) -> list[str]:
    if not path.startswith("/"):
        raise errors.SchemaViolation("pointer must start with '/'", path=path)
    return [tok.replace("~1", "/").replace("~0", "~") for tok in path[1:].split("/")]


def _index(container: list, token: str, path: str, allow_end: bool) -> int:
    if token == "-" and allow_end:
        return len(container)
    if not token.isdigit() or (len(token) > 1 and token[0] == "0"):
        raise errors.TypeMismatch(f"{token!r} is not an array index", path=path)
    idx = int(token)
    limit = len(container) if allow_end else len(container) - 1
    if idx > limit:
        raise errors.PathNotFound(f"index {idx} out of range", path=path)
    return idx


def _resolve_parent(doc, tokens, path):
    node = doc
    for token in tokens[:-1]:
        if isinstance(node, dict):
            if token not in node:
                raise errors.PathNotFound(f"no member {token!r}", path=path)
            node = node[token]
        elif isinstance(node, list):
            node = node[_index(node, token, path, allow_end=False)]
        else:
            raise errors.TypeMismatch(f"cannot index into {type(node).__name__}", path=path)
    return node


def _apply_op(doc, op: PatchOp):
    tokens = _split_pointer(op.path)
    parent = _resolve_parent(doc, tokens, op.path)
    last = tokens[-1]
    if isinstance(parent, dict):
        if op.op != "add" and last not in parent:
            raise errors.PathNotFound(f"no member {last!r}", path=op.path)
        if op.op == "remove":
            del parent[last]
        else:
            parent[last] = copy.deepcopy(op.value)
    elif isinstance(parent, list):
        idx = _index(parent, last, op.path, allow_end=op.op == "add")
        if op.op == "add":
            parent.insert(idx, copy.deepcopy(op.value))
        elif op.op == "remove":
            del parent[idx]
        else:
            parent[idx] = copy.deepcopy(op.value)
    else:
        raise errors.TypeMismatch(f"cannot index into {type(parent).__name__}", path=op.path)


def apply_operations(doc, operations) -> Any:
    """Apply patch operations to a deep copy of ``doc`` and return the copy."""
    out = copy.deepcopy(doc)
    for op in operations:
        if op.path == "":
            raise errors.SchemaViolation("empty pointer not supported", path="")
        _apply_op(out, op)
    return out


def apply_patch(ws: Workspace, patch: NamedPatch) -> Workspace:
    """Return a new workspace with ``patch`` applied; ``ws`` is left untouched.

    Raises:
        PathNotFound, TypeMismatch: an operation cannot be resolved.
        ResultInvalid: the patched document is not a valid workspace.
    """
    patched = apply_operations(to_document(ws), patch.operations)
    try:
        return workspace_from_document(patched)
    except errors.DocumentError as exc:
        raise errors.ResultInvalid(f"patch {patch.name!r}: {exc}", path=exc.path) from exc


def _op_from_doc(doc) -> PatchOp:
    return PatchOp(op=doc["op"], path=doc["path"], value=doc.get("value"))


def _op_to_doc(op: PatchOp) -> dict:
    doc = {"op": op.op, "path": op.path}
    if op.op != "remove":
        doc["value"] = op.value
    return doc


def named_patch_from_document(doc) -> NamedPatch:
    """Decode one ``{metadata: {name, values}, patch: [...]}`` entry."""
    try:
        meta = doc["metadata"]
        ops = doc["patch"]
        for i, op in enumerate(ops):
            if op.get("op") not in ("add", "remove", "replace"):
                raise errors.SchemaViolation(f"unsupported op {op.get('op')!r}", path=f"/patch/{i}/op")
            if not op.get("path"):
                raise errors.SchemaViolation("path must be non-empty", path=f"/patch/{i}/path")
            if op["op"] != "remove" and "value" not in op:
                raise errors.SchemaViolation("add/replace require a value", path=f"/patch/{i}")
        return NamedPatch(
            name=meta["name"],
            values=tuple(meta.get("values", ())),
            operations=tuple(_op_from_doc(op) for op in ops),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise errors.SchemaViolation(f"malformed patch: {exc}", path="") from exc


def named_patch_to_document(patch: NamedPatch) -> dict:
    return {
        "metadata": {"name": patch.name, "values": list(patch.values)},
        "patch": [_op_to_doc(op) for op in patch.operations],
    }


def parse_patchset(text_or_doc) -> PatchSet:
    doc = _load_json(text_or_doc) if isinstance(text_or_doc, (str, bytes)) else text_or_doc
    _schema_check(_PATCHSET_VALIDATOR, doc)
    meta = doc["metadata"]
    labels = tuple(meta["labels"])
    patches = []
    seen = set()
    for i, entry in enumerate(doc["patches"]):
        patch = named_patch_from_document(entry)
        if patch.name in seen:
            raise errors.InvariantViolation(f"duplicate patch name {patch.name!r}", path=f"/patches/{i}")
        if len(patch.values) != len(labels):
            raise errors.InvariantViolation(
                f"patch {patch.name!r} has {len(patch.values)} values for {len(labels)} labels",
                path=f"/patches/{i}/metadata/values",
            )
        seen.add(patch.name)
        patches.append(patch)
    return PatchSet(
        description=meta.get("description", ""),
        digest=meta["digests"]["sha256"],
        labels=labels,
        patches=tuple(patches),
        name=meta.get("name", ""),
        version=doc.get("version", DEFAULT_VERSION),
        references=meta.get("references", {}),
    )


def patchset_to_document(ps: PatchSet) -> dict:
    meta = {
        "description": ps.description,
        "digests": {"sha256": ps.digest},
        "labels": list(ps.labels),
    }
    if ps.name:
        meta["name"] = ps.name
    if ps.references:
        meta["references"] = dict(ps.references)
    return {
        "metadata": meta,
        "patches": [named_patch_to_document(p) for p in ps.patches],
        "version": ps.version,
    }


def verify_pallet(ws_text: str | bytes, ps: PatchSet) -> bool:
    """True iff the canonical digest of ``ws_text`` matches the patchset's digest."""
    if not ps.digest:
        return False
    try:
        return digest(ws_text) == ps.digest
    except errors.MalformedDocument:
        return False
