"""Shared scaffolding for the bundled demo workloads.

Every workload is a deterministic seeded input-stream generator plus a
workflow whose step actions realize the scenario's computations. The same
configuration always produces byte-identical streams, so experiments are
reproducible from a seed alone or from a serialized stream file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

from ..engine import WorkflowSpec

WavePuts = List[Tuple[str, str, float]]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    """Scale and signal-shaping knobs for the workload generators.

    ``amplitude``, ``noise`` and ``drift`` multiply each signal's built-in
    cyclic swing, per-wave jitter, and slow wander respectively; setting all
    three to 0 yields constant inputs after the first wave.
    """

    seed: int = 0
    waves: Optional[int] = None
    # air-quality scenario
    detectors: int = 25
    zones: int = 5
    # road-tolling scenario
    expressways: int = 2
    segments: int = 20
    vehicles: int = 200
    # fire-risk scenario
    grid: int = 10
    # signal shaping
    amplitude: float = 1.0
    noise: float = 1.0
    drift: float = 1.0


@dataclass
class Workload:
    """A ready-to-run scenario: workflow with bound actions plus the full
    input stream, one list of (container, key, value) puts per wave."""

    name: str
    workflow: WorkflowSpec
    waves: List[WavePuts]
    workflow_text: str
    bound: float
    config: GeneratorConfig

    @property
    def n_waves(self) -> int:
        return len(self.waves)


_INT_FIELDS = ("seed", "waves", "detectors", "zones", "expressways",
               "segments", "vehicles", "grid")
_FLOAT_FIELDS = ("amplitude", "noise", "drift")


def config_to_params(config: GeneratorConfig) -> str:
    parts = []
    for k, v in asdict(config).items():
        if v is None:
            continue
        parts.append(f"{k}={v!r}")
    return ",".join(parts)


def params_to_config(text: str) -> GeneratorConfig:
    kwargs = {}
    for item in text.split(","):
        if not item.strip():
            continue
        k, _, v = item.partition("=")
        k = k.strip()
        if k in _INT_FIELDS:
            kwargs[k] = int(v)
        elif k in _FLOAT_FIELDS:
            kwargs[k] = float(v)
        else:
            raise ConfigError(f"unknown generator parameter {k!r}")
    return GeneratorConfig(**kwargs)


def write_stream(waves: List[WavePuts], path, workload: Optional[str] = None,
                 config: Optional[GeneratorConfig] = None) -> None:
    """Serialize an input stream to CSV for replay.

    The leading comment lines carry the workload name and generator
    parameters so a replay run can rebuild the matching workflow.
    """
    with open(path, "w", newline="") as fh:
        if workload:
            fh.write(f"# workload: {workload}\n")
        if config is not None:
            fh.write(f"# params: {config_to_params(config)}\n")
        w = csv.writer(fh)
        w.writerow(["wave", "container", "key", "value"])
        for wave, puts in enumerate(waves):
            for container, key, value in puts:
                w.writerow([wave, container, key, repr(float(value))])


def read_stream(path) -> Tuple[List[WavePuts], Optional[str], Optional[GeneratorConfig]]:
    """Read a serialized stream; returns (waves, workload name, config)."""
    workload = None
    config = None
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("workload:"):
                    workload = body.split(":", 1)[1].strip()
                elif body.startswith("params:"):
                    config = params_to_config(body.split(":", 1)[1].strip())
                continue
            rows.append(line)
    parsed = list(csv.reader(rows))
    if not parsed or parsed[0] != ["wave", "container", "key", "value"]:
        raise ConfigError(f"not a qodflow input stream file: {path}")
    waves: Dict[int, WavePuts] = {}
    top = -1
    for row in parsed[1:]:
        if not row:
            continue
        wave = int(row[0])
        top = max(top, wave)
        waves.setdefault(wave, []).append((row[1], row[2], float(row[3])))
    return [waves.get(i, []) for i in range(top + 1)], workload, config


def forward_dirty(store, src: str, routes: Dict[str, str]) -> None:
    """Copy freshly written elements out of an external ingest container.

    ``routes`` maps key prefixes to destination containers. The source
    container is snapshotted afterwards so the next wave only forwards new
    writes. Used by source-step actions.
    """
    container = store.container(src)
    for el in list(container.dirty_items()):
        for prefix, dest in routes.items():
            if el.key.startswith(prefix):
                store.put(dest, el.key, el.current)
                break
    container.snapshot()
