"""Piecewise-linear policy networks: representation, JSON I/O and exact evaluation."""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed or fails validation."""


def _frozen(a, ndim: int, where: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        # an empty weight matrix comes back 1-d from json
        if ndim == 2 and arr.size == 0:
            arr = arr.reshape(0, 0)
        else:
            raise NetworkFormatError(f"{where}: expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NetworkFormatError(f"{where}: non-finite entry")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights, 2, "affine.weights")
        b = _frozen(self.bias, 1, "affine.bias")
        if w.shape[0] != b.shape[0]:
            raise NetworkFormatError(
                f"affine: weight rows ({w.shape[0]}) != bias length ({b.shape[0]})")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.weights @ v + self.bias


@dataclass(frozen=True, eq=False)
class Relu:
    pass


@dataclass(frozen=True)
class Segment:
    offset: int
    length: int
    affine: AffineLayer


@dataclass(frozen=True, eq=False)
class SplitEmbedConcat:
    """Apply a separate affine embedding to each contiguous slice of the input and concatenate."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise NetworkFormatError("split_embed_concat: no segments")
        pos = 0
        for k, seg in enumerate(segs):
            if seg.offset != pos:
                raise NetworkFormatError(
                    f"split_embed_concat segment {k}: offset {seg.offset}, expected {pos}")
            if seg.length <= 0:
                raise NetworkFormatError(f"split_embed_concat segment {k}: non-positive length")
            if seg.affine.in_width != seg.length:
                raise NetworkFormatError(
                    f"split_embed_concat segment {k}: embedding consumes {seg.affine.in_width} "
                    f"inputs, segment length is {seg.length}")
            pos += seg.length
        object.__setattr__(self, "segments", segs)

    @property
    def in_width(self) -> int:
        last = self.segments[-1]
        return last.offset + last.length

    @property
    def out_width(self) -> int:
        return sum(seg.affine.out_width for seg in self.segments)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        parts = [seg.affine(v[seg.offset:seg.offset + seg.length]) for seg in self.segments]
        return np.concatenate(parts, axis=0)

    def dense(self) -> AffineLayer:
        """Equivalent block-diagonal affine layer."""
        w = np.zeros((self.out_width, self.in_width))
        b = np.zeros(self.out_width)
        row = 0
        for seg in self.segments:
            h = seg.affine.out_width
            w[row:row + h, seg.offset:seg.offset + seg.length] = seg.affine.weights
            b[row:row + h] = seg.affine.bias
            row += h
        return AffineLayer(w, b)


Layer = Union[AffineLayer, Relu, SplitEmbedConcat]


@dataclass(frozen=True)
class Discrete:
    action_values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.action_values)
        if not vals:
            raise NetworkFormatError("decoder.action_values: empty")
        if not all(math.isfinite(v) for v in vals):
            raise NetworkFormatError("decoder.action_values: non-finite entry")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise NetworkFormatError("decoder.action_values: not strictly increasing")
        object.__setattr__(self, "action_values", vals)


@dataclass(frozen=True)
class ContinuousMean:
    mean_index: int
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise NetworkFormatError("decoder.sigma must be positive and finite")
        if self.mean_index < 0:
            raise NetworkFormatError("decoder.mean_index must be non-negative")


ActionDecoder = Union[Discrete, ContinuousMean]


def _width(layer: Layer, incoming: int) -> int:
    if isinstance(layer, Relu):
        return incoming
    return layer.out_width


@dataclass(frozen=True, eq=False)
class Network:
    name: str
    input_width: int
    layers: tuple[Layer, ...]
    decoder: ActionDecoder
    widths: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.input_width <= 0:
            raise NetworkFormatError("input_width must be positive")
        if not layers:
            raise NetworkFormatError("network has no layers")
        widths = [self.input_width]
        for k, layer in enumerate(layers):
            if not isinstance(layer, Relu) and layer.in_width != widths[-1]:
                raise NetworkFormatError(
                    f"layer {k} ({kind_of(layer)}): expects {layer.in_width} inputs, "
                    f"previous width is {widths[-1]}")
            widths.append(_width(layer, widths[-1]))
        if not isinstance(layers[-1], AffineLayer):
            raise NetworkFormatError("final layer must be affine (raw logits)")
        object.__setattr__(self, "widths", tuple(widths))
        out = widths[-1]
        dec = self.decoder
        if isinstance(dec, Discrete) and len(dec.action_values) != out:
            raise NetworkFormatError(
                f"decoder.action_values: {len(dec.action_values)} values for {out} outputs")
        if isinstance(dec, ContinuousMean) and dec.mean_index >= out:
            raise NetworkFormatError(f"decoder.mean_index {dec.mean_index} out of range ({out})")

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def is_discrete(self) -> bool:
        return isinstance(self.decoder, Discrete)

    def parameter_count(self) -> int:
        n = 0
        for layer in self.layers:
            if isinstance(layer, AffineLayer):
                n += layer.weights.size + layer.bias.size
            elif isinstance(layer, SplitEmbedConcat):
                n += sum(s.affine.weights.size + s.affine.bias.size for s in layer.segments)
        return n


def kind_of(layer: Layer) -> str:
    if isinstance(layer, AffineLayer):
        return "affine"
    if isinstance(layer, Relu):
        return "relu"
    return "split_embed_concat"


def forward(net: Network, x: Sequence[float]) -> np.ndarray:
    """Raw output logits of ``net`` at ``x``."""
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (net.input_width,):
        raise ValueError(f"input has shape {v.shape}, network expects ({net.input_width},)")
    for layer in net.layers:
        if isinstance(layer, Relu):
            v = np.maximum(v, 0.0)
        else:
            v = layer(v)
    return v


def forward_batch(net: Network, xs: np.ndarray) -> np.ndarray:
    """Row-wise forward pass for an (N, input_width) array. Not bitwise-equal to ``forward``."""
    v = np.asarray(xs, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != net.input_width:
        raise ValueError(f"batch has shape {v.shape}, network expects (N, {net.input_width})")
    for layer in net.layers:
        if isinstance(layer, Relu):
            v = np.maximum(v, 0.0)
        elif isinstance(layer, AffineLayer):
            v = v @ layer.weights.T + layer.bias
        else:
            v = np.concatenate(
                [v[:, s.offset:s.offset + s.length] @ s.affine.weights.T + s.affine.bias
                 for s in layer.segments], axis=1)
    return v


def argmax_low(logits: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(logits))


def decode_action(net: Network, logits: Sequence[float]) -> float:
    lg = np.asarray(logits, dtype=np.float64)
    if lg.shape != (net.output_width,):
        raise ValueError(f"logits have shape {lg.shape}, network has {net.output_width} outputs")
    dec = net.decoder
    if isinstance(dec, Discrete):
        return dec.action_values[argmax_low(lg)]
    return float(lg[dec.mean_index])


# -- serialization -----------------------------------------------------------

def _affine_to_json(a: AffineLayer) -> dict:
    return {"weights": a.weights.tolist(), "bias": a.bias.tolist()}


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            layers.append({"kind": "affine", **_affine_to_json(layer)})
        elif isinstance(layer, Relu):
            layers.append({"kind": "relu"})
        else:
            layers.append({"kind": "split_embed_concat", "segments": [
                {"offset": s.offset, "length": s.length, **_affine_to_json(s.affine)}
                for s in layer.segments]})
    dec = net.decoder
    if isinstance(dec, Discrete):
        decoder = {"mode": "discrete", "action_values": list(dec.action_values)}
    else:
        decoder = {"mode": "continuous_mean", "mean_index": dec.mean_index, "sigma": dec.sigma}
    return {"name": net.name, "input_width": net.input_width, "layers": layers, "decoder": decoder}


def dumps_network(net: Network) -> str:
    return _dumps_17(network_to_dict(net))


def _dumps_17(obj) -> str:
    """Compact JSON with every float written as a 17-significant-digit literal."""

    def floatstr(o):
        if o != o or o in (float("inf"), float("-inf")):
            raise ValueError("non-finite float")
        return format(o, ".17g")

    def _iter(o):
        if isinstance(o, float):
            return floatstr(o)
        if isinstance(o, bool) or o is None or isinstance(o, (int, str)):
            return json.dumps(o)
        if isinstance(o, dict):
            return "{" + ",".join(f"{json.dumps(k)}:{_iter(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ",".join(_iter(v) for v in o) + "]"
        raise TypeError(type(o))

    return _iter(obj)


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise NetworkFormatError(f"{where}: missing field '{key}'")
    return d[key]


def _affine_from_json(d: dict, where: str) -> AffineLayer:
    try:
        return AffineLayer(_need(d, "weights", where), _need(d, "bias", where))
    except NetworkFormatError as e:
        raise NetworkFormatError(f"{where}: {e}") from None
    except (TypeError, ValueError) as e:
        raise NetworkFormatError(f"{where}: {e}") from None


def network_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise NetworkFormatError("network document must be a JSON object")
    layers: list[Layer] = []
    for k, ld in enumerate(_need(doc, "layers", "network")):
        where = f"layer {k}"
        kind = _need(ld, "kind", where)
        if kind == "affine":
            layers.append(_affine_from_json(ld, where))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "split_embed_concat":
            segs = []
            for j, sd in enumerate(_need(ld, "segments", where)):
                sw = f"{where} segment {j}"
                segs.append(Segment(int(_need(sd, "offset", sw)), int(_need(sd, "length", sw)),
                                    _affine_from_json(sd, sw)))
            try:
                layers.append(SplitEmbedConcat(tuple(segs)))
            except NetworkFormatError as e:
                raise NetworkFormatError(f"{where}: {e}") from None
        else:
            raise NetworkFormatError(f"{where}: unknown kind {kind!r}")
    dd = _need(doc, "decoder", "network")
    mode = _need(dd, "mode", "decoder")
    if mode == "discrete":
        decoder: ActionDecoder = Discrete(tuple(_need(dd, "action_values", "decoder")))
    elif mode == "continuous_mean":
        decoder = ContinuousMean(int(_need(dd, "mean_index", "decoder")),
                                 float(_need(dd, "sigma", "decoder")))
    else:
        raise NetworkFormatError(f"decoder: unknown mode {mode!r}")
    return Network(str(_need(doc, "name", "network")), int(_need(doc, "input_width", "network")),
                   tuple(layers), decoder)


def loads_network(text: str) -> Network:
    try:
        doc = json.loads(text, parse_constant=lambda c: float(c))
    except json.JSONDecodeError as e:
        raise NetworkFormatError(f"malformed JSON: {e}") from None
    return network_from_dict(doc)


def load_network(path: Union[str, os.PathLike]) -> Network:
    return loads_network(Path(path).read_text(encoding="utf-8"))


def atomic_write_text(path: Union[str, os.PathLike], text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_network(net: Network, path: Union[str, os.PathLike]) -> None:
    atomic_write_text(path, dumps_network(net))
