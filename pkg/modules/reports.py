# modules/reports.py
"""
CSV and JSON report writers. Every report carries provenance (tool, version,
config echo, seed); only the JSON metadata block holds a timestamp, so two runs
with the same config and seed produce identical report content.
"""

import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import pandas as pd

from modules import __version__

logger = logging.getLogger(__name__)

TOOL = "drmatch"
FLOAT_FORMAT = "%.6g"


def provenance(command: str, config: Mapping[str, Any], seed: Optional[int]) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": dict(config),
    }


def _plain(value):
    """JSON-safe copy: numpy scalars/arrays unwrapped, NaN/inf as null."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def render_json(payload: Mapping[str, Any], prov: Mapping[str, Any], timestamp: bool = True) -> str:
    doc = {"provenance": _plain(prov), **_plain(payload)}
    if timestamp:
        doc["metadata"] = {"generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def render_csv(frame: pd.DataFrame, prov: Mapping[str, Any], index: bool = True) -> str:
    header = [
        f"# tool: {prov['tool']}",
        f"# version: {prov['version']}",
        f"# command: {prov['command']}",
        f"# seed: {prov['seed']}",
        "# config: " + json.dumps(_plain(prov["config"]), sort_keys=True),
    ]
    body = frame.to_csv(index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return "\n".join(header) + "\n" + body


def write_json(path, payload: Mapping[str, Any], prov: Mapping[str, Any]) -> None:
    Path(path).write_text(render_json(payload, prov), encoding="utf-8")
    logger.info("wrote %s", path)


def write_csv(path, frame: pd.DataFrame, prov: Mapping[str, Any], index: bool = True) -> None:
    Path(path).write_text(render_csv(frame, prov, index), encoding="utf-8")
    logger.info("wrote %s", path)


def sibling(path, suffix: str, extension: str) -> Path:
    """results.json -> results_balance.csv style companion path."""
    path = Path(path)
    return path.with_name(f"{path.stem}_{suffix}{extension}")
