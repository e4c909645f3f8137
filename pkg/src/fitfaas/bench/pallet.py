"""Pallets: one background-only workspace plus a digest-pinned patchset.

Synthetic pallets stand in for published ones at desk scale; ``fetch_pallet``
downloads and unpacks a ``.tar.gz`` archive from any urllib-supported URL.
"""

from __future__ import annotations

import gzip
import io
import json
import os
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .. import errors
from ..workspace import (
    NamedPatch,
    PatchOp,
    PatchSet,
    digest,
    parse_patchset,
    parse_workspace,
    patchset_to_document,
    serialize_workspace,
    verify_pallet,
    workspace_from_document,
)

WORKSPACE_FILE = "BkgOnly.json"
PATCHSET_FILE = "patchset.json"
ARCHIVE_FILE = "pallet.tar.gz"
POI = "mu_SIG"


@dataclass(frozen=True)
class Pallet:
    label: str
    workspace_text: str
    workspace_doc: dict
    patchset: PatchSet

    @property
    def n_patches(self) -> int:
        return len(self.patchset.patches)


def _r(values):
    return [round(float(v), 3) for v in np.atleast_1d(values)]


def _background(rng, n_channels, n_bins):
    channels, observations = [], []
    for c in range(n_channels):
        name = f"SR_{c}"
        x = np.linspace(0.0, 1.0, n_bins)
        main = 80.0 * np.exp(-1.5 * x) * rng.uniform(0.9, 1.1, n_bins) + 20.0
        minor = rng.uniform(5.0, 15.0, n_bins)
        shape_up = main * (1.0 + rng.uniform(0.02, 0.06) * (1.0 - x))
        shape_dn = main * (1.0 - rng.uniform(0.02, 0.06) * (1.0 - x))
        channels.append(
            {
                "name": name,
                "samples": [
                    {
                        "name": "bkg_main",
                        "data": _r(main),
                        "modifiers": [
                            {"name": f"bkg_norm_{c}", "type": "normsys", "data": {"hi": 1.08, "lo": 0.92}},
                            {"name": "bkg_shape", "type": "histosys", "data": {"hi_data": _r(shape_up), "lo_data": _r(shape_dn)}},
                            {"name": f"staterror_{name}", "type": "staterror", "data": _r(0.04 * main)},
                        ],
                    },
                    {
                        "name": "bkg_minor",
                        "data": _r(minor),
                        "modifiers": [
                            {"name": "lumi", "type": "lumi", "data": None},
                            {"name": "minor_xsec", "type": "normsys", "data": {"hi": 1.15, "lo": 0.85}},
                            {"name": f"staterror_{name}", "type": "staterror", "data": _r(0.1 * minor)},
                        ],
                    },
                ],
            }
        )
        expected = np.asarray(_r(main)) + np.asarray(_r(minor))
        observations.append({"name": name, "data": rng.poisson(expected).astype(float).tolist()})
    measurement = {
        "name": "NormalMeasurement",
        "config": {
            "poi": POI,
            "parameters": [{"name": "lumi", "auxdata": [1.0], "sigmas": [0.017], "bounds": [[0.915, 1.085]], "inits": [1.0]}],
        },
    }
    return {"channels": channels, "observations": observations, "measurements": [measurement], "version": "1.0.0"}


def _signal_patch(rng, k, n_channels, n_bins):
    m1 = 300 + 25 * k
    m2 = int(rng.integers(0, 10)) * 10 + 50
    centre = float(rng.uniform(0.0, 1.0))
    width = float(rng.uniform(0.15, 0.4))
    amplitude = float(rng.uniform(8.0, 25.0))
    x = np.linspace(0.0, 1.0, n_bins)
    ops = []
    for c in range(n_channels):
        shape = amplitude * np.exp(-0.5 * ((x - centre) / width) ** 2) * rng.uniform(0.6, 1.0) + 0.5
        sample = {
            "name": "signal",
            "data": _r(shape),
            "modifiers": [
                {"name": POI, "type": "normfactor", "data": None},
                {"name": "lumi", "type": "lumi", "data": None},
                {"name": "sig_theory", "type": "normsys", "data": {"hi": 1.1, "lo": 0.9}},
            ],
        }
        ops.append(PatchOp("add", f"/channels/{c}/samples/-", sample))
    return NamedPatch(f"sig_{m1}_{m2}", (float(m1), float(m2)), tuple(ops))


def gen_fixture(n_patches, n_channels=3, bins_per_channel=5, seed=7, out_dir=None, archive=False, label="synthetic"):
    """Deterministic synthetic pallet.

    Background: exponentially falling main process plus a flat minor one per
    channel, with normal-constrained normsys/histosys/lumi nuisances and
    staterror. Each patch adds a Gaussian-bump signal scaled by ``mu_SIG``.

    Writes ``BkgOnly.json`` and ``patchset.json`` (and ``pallet.tar.gz`` if
    ``archive``) to ``out_dir`` when given. Returns the :class:`Pallet`.
    """
    if min(n_patches, n_channels, bins_per_channel) < 1:
        raise ValueError("counts must be at least 1")
    rng = np.random.default_rng(seed)
    ws_text = serialize_workspace(workspace_from_document(_background(rng, n_channels, bins_per_channel)))
    patches = tuple(_signal_patch(rng, k, n_channels, bins_per_channel) for k in range(n_patches))
    ps = PatchSet(
        description=f"synthetic signal grid ({n_patches} points)",
        digest=digest(ws_text),
        labels=("m1", "m2"),
        patches=patches,
        name=label,
        references={"generator": f"gen_fixture(seed={seed})"},
    )
    pallet = Pallet(label, ws_text, json.loads(ws_text), ps)
    if out_dir is not None:
        write_pallet(pallet, out_dir, archive=archive)
    return pallet


def _patchset_text(ps: PatchSet) -> str:
    return json.dumps(patchset_to_document(ps), sort_keys=True, indent=1)


def write_pallet(pallet: Pallet, out_dir, archive=False):
    try:
        os.makedirs(out_dir, exist_ok=True)
        files = {WORKSPACE_FILE: pallet.workspace_text, PATCHSET_FILE: _patchset_text(pallet.patchset)}
        for name, text in files.items():
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(text)
        if archive:
            with open(os.path.join(out_dir, ARCHIVE_FILE), "wb") as fh:
                fh.write(make_archive(files))
    except OSError as exc:
        raise errors.UnwritablePath(f"{out_dir}: {exc}") from exc


def make_archive(files: dict) -> bytes:
    """Byte-reproducible ``.tar.gz`` of ``{name: text}`` (fixed mtimes and ownership)."""
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for name in sorted(files):
            data = files[name].encode("utf-8")
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o644
            tar.addfile(info, io.BytesIO(data))
    return gzip.compress(raw.getvalue(), mtime=0)


def _identify(docs: dict):
    ws_name = ps_name = None
    for name, doc in docs.items():
        if isinstance(doc, dict) and "patches" in doc and "metadata" in doc:
            ps_name = name
        elif isinstance(doc, dict) and "channels" in doc:
            ws_name = name
    if ws_name is None or ps_name is None:
        raise errors.FetchFailed(f"archive must hold one workspace and one patchset, found {sorted(docs)}")
    return ws_name, ps_name


def load_pallet(path, verify=True, label=None) -> Pallet:
    """Load a pallet from a directory (``BkgOnly.json`` + ``patchset.json``) or a ``.tar.gz`` archive.

    Raises:
        PalletDigestMismatch: the workspace does not match the patchset digest (when ``verify``).
    """
    if os.path.isdir(path):
        ws_path = os.path.join(path, WORKSPACE_FILE)
        ps_path = os.path.join(path, PATCHSET_FILE)
        with open(ws_path, encoding="utf-8") as fh:
            ws_text = fh.read()
        with open(ps_path, encoding="utf-8") as fh:
            ps_text = fh.read()
    else:
        with open(path, "rb") as fh:
            ws_text, ps_text = _unpack(fh.read())
    ps = parse_patchset(ps_text)
    if verify and not verify_pallet(ws_text, ps):
        raise errors.PalletDigestMismatch(f"{path}: workspace digest does not match patchset {ps.digest[:12]}")
    ws_doc = json.loads(serialize_workspace(parse_workspace(ws_text)))
    return Pallet(label or ps.name or os.path.basename(os.path.normpath(path)), ws_text, ws_doc, ps)


def _unpack(blob: bytes):
    try:
        docs = {}
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:*") as tar:
            for member in tar.getmembers():
                if not member.isfile() or not member.name.endswith(".json"):
                    continue
                fh = tar.extractfile(member)
                text = fh.read().decode("utf-8")
                docs[os.path.basename(member.name)] = (text, json.loads(text))
    except (tarfile.TarError, EOFError, OSError, UnicodeDecodeError, json.JSONDecodeError, gzip.BadGzipFile) as exc:
        raise errors.FetchFailed(f"unreadable pallet archive: {exc}") from exc
    ws_name, ps_name = _identify({k: v[1] for k, v in docs.items()})
    return docs[ws_name][0], docs[ps_name][0]


def fetch_pallet(url: str, dest: str, verify=True, timeout=60.0) -> Pallet:
    """Download a pallet archive, unpack the workspace and patchset into ``dest``, and verify.

    Raises:
        FetchFailed: download failed or the archive is unreadable/incomplete.
        PalletDigestMismatch: the workspace does not match the patchset digest.
    """
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            blob = resp.read()
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise errors.FetchFailed(f"{url}: {exc}") from exc
    ws_text, ps_text = _unpack(blob)
    try:
        os.makedirs(dest, exist_ok=True)
        with open(os.path.join(dest, WORKSPACE_FILE), "w", encoding="utf-8") as fh:
            fh.write(ws_text)
        with open(os.path.join(dest, PATCHSET_FILE), "w", encoding="utf-8") as fh:
            fh.write(ps_text)
    except OSError as exc:
        raise errors.UnwritablePath(f"{dest}: {exc}") from exc
    return load_pallet(dest, verify=verify)
