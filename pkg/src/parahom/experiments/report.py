"""Deterministic output writers: CSV, JSON reports, run manifests.

Floats are rendered with repr (shortest round-trip), JSON keys are sorted,
and the manifest hashes the canonical config, so reruns with equal
manifests produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            lines.append(",".join(fmt(row[h]) for h in header))
        else:
            lines.append(",".join(fmt(v) for v in row))
    p.write_text("\n".join(lines) + "\n")
    return p


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_coerce) + "\n"


def _coerce(v):
    try:
        import numpy as np
        if isinstance(v, np.floating):
            return float(v)
        if isinstance(v, np.integer):
            return int(v)
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, np.bool_):
            return bool(v)
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"not JSON serializable: {type(v)}")


def write_json(path, obj) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(canonical_json(obj))
    return p


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()


def write_manifest(out_dir, config, seeds, extra=None) -> Path:
    from .. import __version__
    import numba
    import numpy
    import scipy

    cfg = config.to_dict()
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": [int(s) for s in seeds],
        "versions": {
            "parahom": __version__,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    return write_json(Path(out_dir) / "manifest.json", manifest)
