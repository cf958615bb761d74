"""
JSON checkpoints of model parameters (and optionally Adam state).

Layout:

    {
      "layer_widths": [6, 64, 64, 64, 4],
      "seed": 0,
      "layers": [{"weight": [[...], ...], "bias": [...]}, ...],
      "adam_state": {"step_count": 12, "m": [...layers...], "v": [...layers...],
                     "learning_rate": ..., "beta1": ..., "beta2": ..., "epsilon": ...}
    }

Floats are written with Python's shortest round-trip repr, so loading a
saved checkpoint gives back bit-identical arrays.
"""

import json
from typing import List, Optional, Tuple

import numpy as np

from src.app.errors import InvalidConfig
from src.app.nn import ModelParams
from src.helper.atomic_io import dumps_json, write_text_atomic
from src.helper.clock import log
from src.optimizer.adam_optimizer import AdamHyper, AdamState


def params_to_layers(params: ModelParams) -> List[dict]:
    return [{"weight": w.tolist(), "bias": b.tolist()} for w, b in params.layers]


def layers_to_params(layers: List[dict], field_path: str = "layers") -> ModelParams:
    try:
        converted = tuple(
            (np.array(layer["weight"], dtype=np.float64), np.array(layer["bias"], dtype=np.float64))
            for layer in layers
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidConfig(field_path, f"malformed layer list: {e}")
    if not converted:
        raise InvalidConfig(field_path, "no layers")
    for index, (w, b) in enumerate(converted):
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise InvalidConfig(f"{field_path}[{index}]", f"weight {w.shape} and bias {b.shape} do not fit")
        if index and converted[index - 1][0].shape[0] != w.shape[1]:
            raise InvalidConfig(f"{field_path}[{index}]", "input width does not match the previous layer")
    return ModelParams(converted)


def checkpoint_document(params: ModelParams, seed: int, adam_state: Optional[AdamState] = None) -> dict:
    document = {
        "layer_widths": params.layer_widths,
        "seed": int(seed),
        "layers": params_to_layers(params),
    }
    if adam_state is not None:
        document["adam_state"] = {
            "step_count": adam_state.step_count,
            "m": params_to_layers(adam_state.m),
            "v": params_to_layers(adam_state.v),
            "learning_rate": adam_state.hyper.learning_rate,
            "beta1": adam_state.hyper.beta1,
            "beta2": adam_state.hyper.beta2,
            "epsilon": adam_state.hyper.epsilon,
        }
    return document


def save_checkpoint(path: str, params: ModelParams, seed: int, adam_state: Optional[AdamState] = None) -> None:
    write_text_atomic(path, dumps_json(checkpoint_document(params, seed, adam_state)))
    log(f"Checkpoint: wrote {path}")


def load_checkpoint(path: str) -> Tuple[ModelParams, int, Optional[AdamState]]:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        InvalidConfig: the document is not a well-formed checkpoint
    """
    with open(path, encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as e:
            raise InvalidConfig("checkpoint", f"{path} is not JSON: {e}")
    return parse_checkpoint(document)


def parse_checkpoint(document: dict) -> Tuple[ModelParams, int, Optional[AdamState]]:
    for key in ("layer_widths", "seed", "layers"):
        if key not in document:
            raise InvalidConfig(f"checkpoint.{key}", "missing")
    params = layers_to_params(document["layers"], "checkpoint.layers")
    if list(document["layer_widths"]) != params.layer_widths:
        raise InvalidConfig(
            "checkpoint.layer_widths", f"{document['layer_widths']} does not match layers {params.layer_widths}"
        )

    adam_state = None
    if document.get("adam_state") is not None:
        raw = document["adam_state"]
        try:
            hyper = AdamHyper(float(raw["learning_rate"]), float(raw["beta1"]), float(raw["beta2"]), float(raw["epsilon"]))
            m = layers_to_params(raw["m"], "checkpoint.adam_state.m")
            v = layers_to_params(raw["v"], "checkpoint.adam_state.v")
            adam_state = AdamState(m, v, int(raw["step_count"]), hyper)
        except KeyError as e:
            raise InvalidConfig("checkpoint.adam_state", f"missing {e}")
        if not (params.same_shape(m) and params.same_shape(v)):
            raise InvalidConfig("checkpoint.adam_state", "moment shapes do not match the parameters")
    return params, int(document["seed"]), adam_state
