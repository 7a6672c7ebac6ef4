"""JSON checkpoints with base64 float64 payloads (byte-stable across runs)."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mvvin.autodiff import AdamState, ParamSet, Tensor
from mvvin.errors import CheckpointError, CompatibilityError

FORMAT = "mvvin-checkpoint"
VERSION = 1
from mvvin import __version__ as CODE_VERSION


def _enc(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(obj: dict, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"], validate=True)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return arr.reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}: corrupt array ({exc})") from exc


def _enc_params(p: ParamSet) -> dict:
    # sort_keys scrambles dict order, so the parameter order travels separately
    return {"order": list(p.names()), "arrays": {k: _enc(v.data) for k, v in p.items()}}


def _dec_params(obj: dict, where: str) -> ParamSet:
    if not isinstance(obj, dict) or not isinstance(obj.get("arrays"), dict) or not isinstance(obj.get("order"), list):
        raise CheckpointError(f"{where}: expected an object with 'order' and 'arrays'")
    arrays = obj["arrays"]
    if sorted(obj["order"]) != sorted(arrays):
        raise CheckpointError(f"{where}: parameter order does not match stored arrays")
    return ParamSet({k: Tensor(_dec(arrays[k], f"{where}.{k}"), requires_grad=True) for k in obj["order"]})


def _enc_adam(s: AdamState) -> dict:
    return {"step": s.step, "m": {k: _enc(v) for k, v in s.m.items()}, "v": {k: _enc(v) for k, v in s.v.items()}}


def _dec_adam(obj: dict, where: str) -> AdamState:
    try:
        return AdamState(
            step=int(obj["step"]),
            m={k: _dec(v, f"{where}.m.{k}") for k, v in obj["m"].items()},
            v={k: _dec(v, f"{where}.v.{k}") for k, v in obj["v"].items()},
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"{where}: malformed optimizer state") from exc


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    outer_step: int
    seed: int
    theta: ParamSet
    phi: ParamSet
    adam_theta: AdamState
    adam_phi: AdamState

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "code_version": CODE_VERSION,
            "config": self.config,
            "config_hash": self.config_hash,
            "outer_step": self.outer_step,
            "seed": self.seed,
            "rng": {"scheme": "SeedSequence([seed, outer_step, task_index])", "next_outer_step": self.outer_step},
            "theta": _enc_params(self.theta),
            "phi": _enc_params(self.phi),
            "adam_theta": _enc_adam(self.adam_theta),
            "adam_phi": _enc_adam(self.adam_phi),
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.write_text(ckpt.to_json())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an mvvin checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        return Checkpoint(
            config=doc["config"],
            config_hash=str(doc["config_hash"]),
            outer_step=int(doc["outer_step"]),
            seed=int(doc["seed"]),
            theta=_dec_params(doc["theta"], "theta"),
            phi=_dec_params(doc["phi"], "phi"),
            adam_theta=_dec_adam(doc["adam_theta"], "adam_theta"),
            adam_phi=_dec_adam(doc["adam_phi"], "adam_phi"),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from exc


def check_compatible(params: ParamSet, expected, what: str) -> None:
    have = {k: v.shape for k, v in params.items()}
    want = {e[0]: tuple(e[1]) for e in expected}
    if set(have) != set(want):
        extra, missing = sorted(set(have) - set(want)), sorted(set(want) - set(have))
        raise CompatibilityError(f"{what}: parameter names differ (unexpected {extra[:5]}, missing {missing[:5]})")
    for k, shape in want.items():
        if tuple(have[k]) != tuple(shape):
            raise CompatibilityError(f"{what}: {k} has shape {tuple(have[k])} in the checkpoint but the config needs {tuple(shape)}")
