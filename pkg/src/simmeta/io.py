"""Artifact persistence: atomic writes, fixed float formatting, hashes and
the run manifest."""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.12g"
MANIFEST = "manifest.json"


class ManifestError(RuntimeError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(df: pd.DataFrame, path) -> str:
    text = df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    atomic_write_text(path, text)
    return sha256_text(text)


def read_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"flag": str, "estimator": str})
    if "flag" in df:
        df["flag"] = df["flag"].fillna("")
    return df


def _clean(obj):
    """JSON-ready copy with floats at 12 significant digits; NaN/inf -> None."""
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
        x = float(obj)
        return float(f"{x:.12g}") if math.isfinite(x) else None
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2) + "\n"


def write_json(obj, path) -> str:
    text = dumps_json(obj)
    atomic_write_text(path, text)
    return sha256_text(text)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pandas", "pyyaml", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def manifest_path(artifact) -> Path:
    return Path(artifact).parent / MANIFEST


def load_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ManifestError(f"no manifest at {path}") from None


def record_artifact(manifest_file, name: str, sha: str, **extra) -> None:
    """Add or replace an artifact entry in the manifest (atomic rewrite)."""
    man = load_manifest(manifest_file)
    man.setdefault("artifacts", {})[name] = {"sha256": sha, **extra}
    write_json(man, manifest_file)


def check_estimates(estimates_file, manifest_file=None, force: bool = False) -> dict | None:
    """Verify that the estimates file is the one its manifest describes."""
    manifest_file = manifest_file or manifest_path(estimates_file)
    try:
        man = load_manifest(manifest_file)
    except ManifestError:
        if force:
            return None
        raise ManifestError(f"no manifest next to {estimates_file}; rerun `run` or pass --force")
    want = man.get("files", {}).get("estimates.csv", {}).get("sha256")
    have = sha256_file(estimates_file)
    if want != have and not force:
        raise ManifestError(f"{estimates_file} does not match its manifest "
                            f"(sha256 {have[:12]} vs {str(want)[:12]}); pass --force to override")
    return man
