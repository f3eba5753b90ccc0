"""JSON model files and checkpoints.

Both are plain, sorted-key JSON so identical inputs give identical bytes.
A model file holds the constructed linear ZDPs; a checkpoint holds a
trained network plus the matrices it was pretrained on.
"""

import json

import numpy as np

from .errors import ValidationError
from .linalg import GainMatrix, LinearModel
from .linear_zdp import InvariantSubspace, LinearZdp
from .mlp import MlpParams, NetworkPsi, linear_mlp

MODEL_FORMAT = "zdpolicy-model"
CHECKPOINT_FORMAT = "zdpolicy-checkpoint"
VERSION = 1


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_plain(doc), indent=1, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, doc: dict):
    with open(path, "w") as fh:
        fh.write(dumps(doc))


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


def linear_zdp_to_dict(zdp: LinearZdp) -> dict:
    sub = zdp.sub
    return {
        "gamma": zdp.gamma,
        "nz": sub.s.shape[1],
        "gain": zdp.k.k,
        "p": zdp.p,
        "c": zdp.c,
        "s_eta1": zdp.s_eta1,
        "s": sub.s,
        "s_eta": sub.s_eta,
        "j": sub.j,
        "chosen_eigenvalues": sub.chosen_eigenvalues,
        "chosen_indices": list(sub.chosen_indices),
        "a": zdp.model.a,
        "b": zdp.model.b,
    }


def linear_zdp_from_dict(d: dict) -> LinearZdp:
    try:
        model = LinearModel.from_matrices(np.array(d["a"]), np.array(d["b"]), int(d["gamma"]))
        sub = InvariantSubspace(np.array(d["s"], dtype=float), np.array(d["s_eta"], dtype=float),
                                np.array(d["j"], dtype=float), np.array(d["chosen_eigenvalues"], dtype=float),
                                tuple(d.get("chosen_indices", ())))
        return LinearZdp(np.array(d["s_eta1"], dtype=float), np.array(d["c"], dtype=float),
                         GainMatrix(np.array(d["gain"], dtype=float)), float(d["p"]), model, sub)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed linear ZDP entry: {exc}") from exc


def model_document(zdp: LinearZdp, lqr_zdp: LinearZdp, report: dict, meta: dict) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": VERSION,
        "linear_zdp": linear_zdp_to_dict(zdp),
        "lqr_zdp": linear_zdp_to_dict(lqr_zdp) if lqr_zdp is not None else None,
        "report": report,
        "meta": meta,
    }


def checkpoint_document(params: MlpParams, pretrain: dict, training: dict, meta: dict) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "network": params.to_dict(),
        "pretrain": pretrain,
        "training": training,
        "meta": meta,
    }


def load_any(path) -> dict:
    doc = read_json(path)
    if doc.get("format") not in (MODEL_FORMAT, CHECKPOINT_FORMAT):
        raise ValidationError(f"{path}: unknown file format {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise ValidationError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


def psi_from_document(doc: dict) -> NetworkPsi:
    """The network psi of a checkpoint, or the linear psi of a model file."""
    if doc["format"] == CHECKPOINT_FORMAT:
        try:
            return NetworkPsi(MlpParams.from_dict(doc["network"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed network: {exc}") from exc
    return NetworkPsi(linear_mlp(linear_zdp_from_dict(doc["linear_zdp"]).sub.s_eta.T))
