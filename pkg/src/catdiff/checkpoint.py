"""Versioned JSON checkpoints for denoisers and classifiers.

One document: format_version, model_kind, vocab, schedule, shapes, and
the parameter arrays flattened in declared field order. Keys are emitted
in a fixed order so identical models serialize byte-identically.
"""

from __future__ import annotations

import json

import numpy as np

from .core import NoiseSchedule, Vocabulary
from .model import ClassifierParams, ConstantDenoiser, DenoiserParams

FORMAT_VERSION = 1

KIND_TAGS = {
    ("denoiser", "uniform"): "denoiser_uniform",
    ("denoiser", "absorbing"): "denoiser_absorbing",
    ("constant", "uniform"): "constant_uniform",
    ("constant", "absorbing"): "constant_absorbing",
}


def _model_kind(params) -> str:
    if isinstance(params, DenoiserParams):
        return KIND_TAGS[("denoiser", params.kind)]
    if isinstance(params, ConstantDenoiser):
        return KIND_TAGS[("constant", params.kind)]
    if isinstance(params, ClassifierParams):
        return "classifier"
    raise TypeError(f"cannot checkpoint {type(params).__name__}")


def checkpoint_document(params) -> dict:
    if isinstance(params, ConstantDenoiser):
        hyper = {"length": params.length, "num_classes": params.num_classes,
                 "d": 0, "n_layers": 0}
        arrays = [("rows_table", params.rows_table)]
    else:
        hyper = {
            "length": params.length,
            "num_classes": params.num_classes,
            "d": params.d,
            "n_layers": len(params.hidden),
        }
        arrays = params.arrays()
    doc = {
        "format_version": FORMAT_VERSION,
        "model_kind": _model_kind(params),
        "vocab": {
            "size": params.vocab.size,
            "mask_index": params.vocab.mask_index,
            "symbols": list(params.vocab.symbols),
        },
        "schedule": {
            "kind": params.schedule.kind,
            "t_min": params.schedule.t_min,
            "t_max": params.schedule.t_max,
        },
        "hyper": hyper,
        "shapes": {name: list(arr.shape) for name, arr in arrays},
        "params": [
            [name, [float(v) for v in arr.reshape(-1)]]
            for name, arr in arrays
        ],
    }
    return doc


def save_checkpoint(params, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_document(params), fh)
        fh.write("\n")


def load_checkpoint(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {doc.get('format_version')!r}"
        )
    vocab = Vocabulary(
        doc["vocab"]["size"],
        mask_index=doc["vocab"]["mask_index"],
        symbols=tuple(doc["vocab"]["symbols"]),
    )
    schedule = NoiseSchedule(
        kind=doc["schedule"]["kind"],
        t_min=doc["schedule"]["t_min"],
        t_max=doc["schedule"]["t_max"],
    )
    hyper = doc["hyper"]
    named = {}
    for name, flat in doc["params"]:
        shape = tuple(doc["shapes"][name])
        arr = np.array(flat, dtype=np.float64).reshape(shape)
        named[name] = arr
    kind_tag = doc["model_kind"]
    if kind_tag in ("constant_uniform", "constant_absorbing"):
        return ConstantDenoiser(
            kind=kind_tag.removeprefix("constant_"), vocab=vocab,
            rows_table=named["rows_table"], schedule=schedule,
            num_classes=hyper["num_classes"],
        )
    hidden = [
        (named[f"hidden_w{i}"], named[f"hidden_b{i}"])
        for i in range(hyper["n_layers"])
    ]
    if kind_tag == "classifier":
        return ClassifierParams(
            vocab=vocab, length=hyper["length"],
            num_classes=hyper["num_classes"], d=hyper["d"], schedule=schedule,
            token_embedding=named["token_embedding"],
            position_encoding=named["position_encoding"],
            time_projection=named["time_projection"],
            hidden=hidden, output_head=named["output_head"],
        )
    reverse_tags = {v: k for k, v in KIND_TAGS.items()}
    if kind_tag not in reverse_tags:
        raise ValueError(f"unknown model_kind {kind_tag!r}")
    return DenoiserParams(
        kind=reverse_tags[kind_tag][1], vocab=vocab, length=hyper["length"],
        num_classes=hyper["num_classes"], d=hyper["d"], schedule=schedule,
        token_embedding=named["token_embedding"],
        position_encoding=named["position_encoding"],
        time_projection=named["time_projection"],
        condition_embedding=named["condition_embedding"],
        hidden=hidden, output_head=named["output_head"],
    )
