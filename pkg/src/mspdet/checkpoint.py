"""Model checkpoints: a text manifest followed by one MSPT record per parameter.

Layout::

    MSPCKPT 1
    config <n>          # n lines of config text follow
    ...
    params <m>          # m lines "name d0,d1,d2,d3" follow, in record order
    ...
    end
    <MSPT record> x m
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig, format_config, parse_config
from .data import DataError
from .model import Detector
from .tensor import read_mspt, write_mspt

HEADER = "MSPCKPT 1"


def write_checkpoint(path, model: Detector, cfg: RunConfig | None = None) -> None:
    cfg = cfg or RunConfig(model=model.cfg)
    if cfg.model != model.cfg:
        raise ValueError("run config does not describe this model")
    config_lines = format_config(cfg).splitlines()
    lines = [HEADER, f"config {len(config_lines)}", *config_lines, f"params {len(model.params)}"]
    for name, p in model.params.items():
        lines.append(f"{name} {','.join(str(d) for d in p.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in model.params.values():
            write_mspt(fh, p.data)


def _readline(fh) -> str:
    raw = fh.readline()
    if not raw:
        raise DataError("truncated checkpoint manifest")
    return raw.decode("utf-8").rstrip("\n")


def _count(line: str, key: str) -> int:
    parts = line.split()
    if len(parts) != 2 or parts[0] != key or not parts[1].isdigit():
        raise DataError(f"checkpoint manifest: expected '{key} <n>', got {line!r}")
    return int(parts[1])


def read_checkpoint(path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    """Returns the echoed config and name -> array, validated against the manifest."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _readline(fh) != HEADER:
            raise DataError(f"{path}: not a checkpoint (bad header)")
        n_cfg = _count(_readline(fh), "config")
        cfg = parse_config("\n".join(_readline(fh) for _ in range(n_cfg)), f"{path}[config]")
        n_par = _count(_readline(fh), "params")
        shapes = []
        for _ in range(n_par):
            name, dims = _readline(fh).rsplit(" ", 1)
            shapes.append((name, tuple(int(d) for d in dims.split(","))))
        if _readline(fh) != "end":
            raise DataError(f"{path}: manifest not terminated by 'end'")
        arrays = {}
        for name, shape in shapes:
            try:
                arr = read_mspt(fh)
            except (ValueError, struct.error) as exc:
                raise DataError(f"{path}: bad record for {name}: {exc}") from exc
            if arr.shape != shape:
                raise DataError(f"{path}: {name} has shape {arr.shape}, manifest says {shape}")
            arrays[name] = arr
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last record")
    return cfg, arrays


def load_model(path) -> tuple[Detector, RunConfig]:
    cfg, arrays = read_checkpoint(path)
    model = Detector(cfg.model)
    if set(arrays) != set(model.params):
        missing = sorted(set(model.params) - set(arrays))
        extra = sorted(set(arrays) - set(model.params))
        raise DataError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    model.params.load(arrays)
    return model, cfg

