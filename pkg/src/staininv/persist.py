"""Versioned JSON model persistence with exact float round-trips.

Floats are written as decimals with 17 significant digits, which uniquely
identifies every finite double, so save -> load reproduces parameters
bit-for-bit.
"""

import json

import numpy as np

from .numerics import Conv2dLayer, DenseLayer


def format_float(value):
    return format(float(value), ".17g")


def _encode(obj, pieces, indent):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            pieces.append("{}")
            return
        pieces.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            pieces.append(f'{pad}  {json.dumps(key)}: ')
            _encode(value, pieces, indent + 1)
            pieces.append(",\n" if i < len(obj) - 1 else "\n")
        pieces.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            pieces.append("[]")
            return
        pieces.append("[")
        for i, value in enumerate(obj):
            _encode(value, pieces, indent)
            if i < len(obj) - 1:
                pieces.append(", ")
        pieces.append("]")
    elif isinstance(obj, bool) or obj is None:
        pieces.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)):
        pieces.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        pieces.append(format_float(obj))
    elif isinstance(obj, str):
        pieces.append(json.dumps(obj))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(obj, path):
    pieces = []
    _encode(obj, pieces, 0)
    pieces.append("\n")
    with open(path, "w") as fh:
        fh.write("".join(pieces))


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def dense_record(layer):
    record = {
        "kind": "dense",
        "shape": list(layer.weights.shape),
        "weights": [float(v) for v in layer.weights.reshape(-1)],
        "bias": [float(v) for v in layer.bias],
        "activation": layer.activation,
    }
    if layer.activation == "leaky_relu":
        record["leaky_slope"] = layer.leaky_slope
    return record


def dense_from_record(record):
    shape = tuple(record["shape"])
    return DenseLayer(
        weights=np.array(record["weights"], dtype=np.float64).reshape(shape),
        bias=np.array(record["bias"], dtype=np.float64),
        activation=record["activation"],
        leaky_slope=record.get("leaky_slope", 0.01),
    )


def conv_record(layer):
    record = {
        "kind": "conv2d",
        "shape": list(layer.kernels.shape),
        "weights": [float(v) for v in layer.kernels.reshape(-1)],
        "bias": [float(v) for v in layer.bias],
        "padding": layer.padding,
        "activation": layer.activation,
    }
    if layer.activation == "leaky_relu":
        record["leaky_slope"] = layer.leaky_slope
    return record


def conv_from_record(record):
    shape = tuple(record["shape"])
    return Conv2dLayer(
        kernels=np.array(record["weights"], dtype=np.float64).reshape(shape),
        bias=np.array(record["bias"], dtype=np.float64),
        padding=record["padding"],
        activation=record["activation"],
        leaky_slope=record.get("leaky_slope", 0.01),
    )
