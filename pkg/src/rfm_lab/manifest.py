"""Run manifests: a JSON record of what a command ran and what it produced.

Each command-line run writes one manifest holding the command name, the
argv it was invoked with, the effective configuration after precedence
merging, the seed, SHA-256 hashes of every input and output artifact,
and the wall-clock duration. Re-executing the recorded argv must
reproduce every output byte for byte; only the manifest's duration may
differ between runs.
"""

import hashlib
import json
import os

from .errors import FormatError

MANIFEST_FORMAT = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _entries(paths) -> list:
    return [{"path": os.path.abspath(p), "sha256": sha256_file(p)}
            for p in sorted(paths)]


def build_manifest(*, command: str, argv, config: dict, seed,
                   inputs, outputs, duration: float) -> dict:
    """Hash the listed artifacts and assemble the manifest document."""
    return {
        "format_version": MANIFEST_FORMAT,
        "command": command,
        "argv": [str(a) for a in argv],
        "config": config,
        "seed": seed,
        "inputs": _entries(inputs),
        "outputs": _entries(outputs),
        "duration_seconds": round(float(duration), 3),
    }


def write_manifest(path, doc: dict):
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def load_manifest(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != MANIFEST_FORMAT:
        raise FormatError(f"unsupported manifest format_version {version!r}")
    return doc


def changed_artifacts(entries) -> list:
    """Re-hash recorded artifacts; list {path, expected, actual} rows
    for files that are missing or whose bytes changed."""
    changed = []
    for entry in entries:
        path = entry["path"]
        actual = sha256_file(path) if os.path.exists(path) else None
        if actual != entry["sha256"]:
            changed.append({"path": path, "expected": entry["sha256"],
                            "actual": actual})
    return changed
