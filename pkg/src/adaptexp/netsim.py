"""Desk-scale inference: float32 reference, exponential-quantized path, traces.

Convolutions are lowered to patch matrices so that the quantized path runs
every FC and CONV layer through the counting dot-product engine.  Biases stay
in float32 and are added after the dot products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensorio
from .errors import EmptySplit, MalformedHeader, MissingParams, ShapeMismatch
from .expdot import quantized_matvec
from .expquant import QuantizedTensor, quantize_array
from .tensor import Tensor


# ----------------------------------------------------------------- layers

@dataclass(frozen=True, eq=False)
class FC:
    name: str
    weight: np.ndarray  # (out, in)
    bias: Optional[np.ndarray] = None
    kind = "fc"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        if w.ndim != 2:
            raise ShapeMismatch(f"{self.name}: FC weight must be 2-D, got {w.shape}")
        object.__setattr__(self, "weight", w)
        b = np.zeros(w.shape[0], np.float32) if self.bias is None else np.asarray(self.bias, np.float32)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"{self.name}: bias shape {b.shape} != ({w.shape[0]},)")
        object.__setattr__(self, "bias", b)

    @property
    def matrix(self) -> np.ndarray:
        return self.weight

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1] or len(in_shape) != 1:
            raise ShapeMismatch(f"{self.name}: expects ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)


@dataclass(frozen=True, eq=False)
class Conv2D:
    name: str
    weight: np.ndarray  # (cout, cin, kh, kw)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    pad: int = 0
    kind = "conv"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        if w.ndim != 4:
            raise ShapeMismatch(f"{self.name}: conv weight must be 4-D, got {w.shape}")
        object.__setattr__(self, "weight", w)
        b = np.zeros(w.shape[0], np.float32) if self.bias is None else np.asarray(self.bias, np.float32)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"{self.name}: bias shape {b.shape} != ({w.shape[0]},)")
        object.__setattr__(self, "bias", b)
        if self.stride < 1 or self.pad < 0:
            raise ValueError(f"{self.name}: invalid stride/pad")

    @property
    def matrix(self) -> np.ndarray:
        return self.weight.reshape(self.weight.shape[0], -1)

    def out_shape(self, in_shape):
        cout, cin, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != cin:
            raise ShapeMismatch(f"{self.name}: expects ({cin}, H, W), got {tuple(in_shape)}")
        oh = (in_shape[1] + 2 * self.pad - kh) // self.stride + 1
        ow = (in_shape[2] + 2 * self.pad - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"{self.name}: input {tuple(in_shape)} smaller than kernel")
        return (cout, oh, ow)


@dataclass(frozen=True)
class ReLU:
    name: str = "relu"
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class Flatten:
    name: str = "flatten"
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class Argmax:
    name: str = "argmax"
    kind = "argmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch("argmax expects a vector")
        return ()


QUANTIZABLE = (FC, Conv2D)


@dataclass
class ModelGraph:
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        names = set()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, QUANTIZABLE):
                if layer.name in names:
                    raise ValueError(f"duplicate layer name {layer.name!r}")
                names.add(layer.name)
            if isinstance(layer, Argmax) and i != len(self.layers) - 1:
                raise ValueError("argmax must be the last layer")
            shape = layer.out_shape(shape)

    @property
    def quantizable(self) -> list:
        return [l for l in self.layers if isinstance(l, QUANTIZABLE)]

    def layer_sizes(self) -> list[int]:
        return [int(l.weight.size) for l in self.quantizable]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, OH*OW, C*kh*kw) patch matrix, channel-major within a patch."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # (N, C, OH, OW, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _as_batch(model: ModelGraph, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape == model.input_shape:
        return arr[None], True
    if arr.shape[1:] == model.input_shape:
        return arr, False
    raise ShapeMismatch(f"input shape {arr.shape} does not match model input {model.input_shape}")


def _linear(layer, x: np.ndarray, matmul) -> np.ndarray:
    """Apply an FC or conv layer using ``matmul(layer, rows) -> rows @ W.T``."""
    if isinstance(layer, FC):
        return matmul(layer, x.reshape(x.shape[0], -1)) + layer.bias
    cout, _, kh, kw = layer.weight.shape
    cols, oh, ow = im2col(x, kh, kw, layer.stride, layer.pad)
    n, p, k = cols.shape
    y = matmul(layer, cols.reshape(n * p, k)) + layer.bias
    return y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)


def _run(model: ModelGraph, x, matmul, stop_before_argmax: bool, capture: bool):
    batch, single = _as_batch(model, x)
    acts = {}
    h = batch
    for layer in model.layers:
        if isinstance(layer, QUANTIZABLE):
            if capture:
                acts[layer.name] = h.copy()
            h = _linear(layer, h, matmul).astype(np.float32)
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Argmax):
            if stop_before_argmax:
                break
            h = np.argmax(h, axis=1).astype(np.float32)
    if single:
        h = h[0]
        acts = {k: v[0] for k, v in acts.items()}
    return h, acts


def _f32_matmul(layer, rows):
    return rows @ layer.matrix.T


def forward_f32(model: ModelGraph, x, stop_before_argmax: bool = False):
    """Reference forward pass; also returns each quantizable layer's input."""
    out, acts = _run(model, x, _f32_matmul, stop_before_argmax, capture=True)
    return Tensor(out), {k: Tensor(v, name=k) for k, v in acts.items()}


class QuantizedModel:
    """A model plus per-layer codecs, with weights quantized once up front."""

    def __init__(self, model: ModelGraph, results: Mapping):
        self.model = model
        self.results = dict(results)
        self.weights = {}
        for layer in model.quantizable:
            r = self.results.get(layer.name)
            if r is None:
                raise MissingParams(f"no quantization parameters for layer {layer.name!r}")
            s, f = quantize_array(layer.matrix, r.w_params)
            self.weights[layer.name] = QuantizedTensor(r.w_params, s, f, name=layer.name)

    def _matmul(self, layer, rows):
        r = self.results[layer.name]
        s, f = quantize_array(rows, r.act_params)
        a_q = QuantizedTensor(r.act_params, s, f)
        return np.asarray(quantized_matvec(self.weights[layer.name], a_q), dtype=np.float32)

    def quantized_inputs(self, layer_name: str, x) -> QuantizedTensor:
        """Quantized input rows seen by one layer during quantized inference.

        Rows are input vectors for FC layers and patch rows for conv layers.
        """
        batch, _ = _as_batch(self.model, x)
        _, acts = _run(self.model, batch, self._matmul, True, capture=True)
        layer = next(l for l in self.model.quantizable if l.name == layer_name)
        h = acts[layer_name]
        if isinstance(layer, FC):
            rows = h.reshape(h.shape[0], -1)
        else:
            _, _, kh, kw = layer.weight.shape
            cols, _, _ = im2col(h, kh, kw, layer.stride, layer.pad)
            rows = cols.reshape(-1, cols.shape[-1])
        p = self.results[layer_name].act_params
        s, f = quantize_array(rows, p)
        return QuantizedTensor(p, s, f)

    def forward(self, x, stop_before_argmax: bool = False) -> Tensor:
        out, _ = _run(self.model, x, self._matmul, stop_before_argmax, capture=False)
        return Tensor(out)


def forward_quantized(model: ModelGraph, x, results: Mapping, stop_before_argmax: bool = False) -> Tensor:
    return QuantizedModel(model, results).forward(x, stop_before_argmax)


# ----------------------------------------------------------------- data

@dataclass
class EvalDataset:
    inputs: np.ndarray   # (N, *input_shape)
    labels: np.ndarray   # (N,)
    splits: dict = field(default_factory=dict)  # tag -> index array
    n_classes: int = 10

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatch("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside class range")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        seen = set()
        for k, idx in self.splits.items():
            s = set(idx.tolist())
            if seen & s:
                raise ValueError(f"split {k!r} overlaps another split")
            seen |= s

    def split(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[tag]
        return self.inputs[idx], self.labels[idx]

    def with_calibration(self, count: int, pool: str = "train") -> "EvalDataset":
        """Copy whose ``calibration`` split is the first ``count`` samples of ``pool``."""
        splits = {k: v for k, v in self.splits.items() if k != "calibration"}
        base = splits.pop(pool, self.splits.get("calibration", np.zeros(0, np.int64)))
        splits["calibration"] = base[:count]
        return EvalDataset(self.inputs, self.labels, splits, self.n_classes)


def predict(model: ModelGraph, inputs, results: Optional[Mapping] = None) -> np.ndarray:
    if results is None:
        logits, _ = _run(model, inputs, _f32_matmul, True, capture=False)
    else:
        logits = np.asarray(QuantizedModel(model, results).forward(inputs, stop_before_argmax=True))
    logits = np.asarray(logits)
    if logits.ndim == 1:
        logits = logits[None]
    return np.argmax(logits, axis=1)


def evaluate_accuracy(model: ModelGraph, inputs, labels, results: Optional[Mapping] = None) -> float:
    """Fraction of samples classified correctly (float32 when ``results`` is None)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptySplit("cannot evaluate an empty split")
    return float(np.mean(predict(model, inputs, results) == labels))


def make_evaluator(model: ModelGraph, inputs, labels):
    """Callable for ``search_network``: ``None`` -> float32 accuracy."""
    if np.asarray(labels).size == 0:
        raise EmptySplit("cannot evaluate an empty split")

    def evaluator(results):
        return evaluate_accuracy(model, inputs, labels, results)

    return evaluator


# ---------------------------------------------------------------- traces

def layer_traces(model: ModelGraph, inputs) -> list[tensorio.LayerTrace]:
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.shape[0] == 0:
        raise EmptySplit("calibration split is empty")
    _, acts = forward_f32(model, inputs)
    out = []
    for layer in model.quantizable:
        a = np.asarray(acts[layer.name])
        samples = [Tensor(a[i] if isinstance(layer, FC) else a[i][None], name=f"{layer.name}.act")
                   for i in range(a.shape[0])]
        out.append(tensorio.LayerTrace(layer.name, layer.kind, Tensor(layer.weight), samples))
    return out


def capture_traces(model: ModelGraph, inputs, out_dir, sample_ids: Optional[Sequence] = None) -> dict:
    """Write weights and per-sample layer inputs in the trace layout."""
    traces = layer_traces(model, inputs)
    if sample_ids is None:
        sample_ids = [f"{i:04d}" for i in range(len(inputs))]
    return tensorio.write_traces(out_dir, traces, list(sample_ids))


# ------------------------------------------------------- model/dataset IO

_KINDS = {"fc", "conv", "relu", "flatten", "argmax"}


def _layer_from_entry(entry: dict, root: Path):
    kind = entry.get("kind")
    if kind not in _KINDS:
        raise MalformedHeader(f"unknown layer kind {kind!r}")
    if kind == "relu":
        return ReLU(entry.get("name", "relu"))
    if kind == "flatten":
        return Flatten(entry.get("name", "flatten"))
    if kind == "argmax":
        return Argmax(entry.get("name", "argmax"))
    w = np.asarray(tensorio.load_tensor(root / entry["weights"]))
    b = np.asarray(tensorio.load_tensor(root / entry["bias"])) if entry.get("bias") else None
    if kind == "fc":
        return FC(entry["name"], w, b)
    return Conv2D(entry["name"], w, b, stride=int(entry.get("stride", 1)), pad=int(entry.get("pad", 0)))


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except OSError as exc:
        raise tensorio.TraceIOError(f"{path}: {exc}") from exc
    return ModelGraph(tuple(spec["input_shape"]), [_layer_from_entry(e, path.parent) for e in spec["layers"]])


def save_model(model: ModelGraph, path) -> None:
    path = Path(path)
    entries = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "name": layer.name}
        if isinstance(layer, QUANTIZABLE):
            entry["weights"] = f"{layer.name}.weights.npy"
            entry["bias"] = f"{layer.name}.bias.npy"
            tensorio.save_tensor(layer.weight, path.parent / entry["weights"])
            tensorio.save_tensor(layer.bias, path.parent / entry["bias"])
        if isinstance(layer, Conv2D):
            entry.update(stride=layer.stride, pad=layer.pad)
        entries.append(entry)
    doc = {"input_shape": list(model.input_shape), "layers": entries}
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_dataset(path) -> EvalDataset:
    """Dataset directory: ``dataset.json`` (labels, splits) plus ``inputs.npy``."""
    root = Path(path)
    meta = json.loads((root / "dataset.json").read_text())
    inputs = np.asarray(tensorio.load_tensor(root / meta["inputs"]))
    return EvalDataset(inputs, meta["labels"], meta["splits"], meta.get("n_classes", 10))


def save_dataset(ds: EvalDataset, path) -> None:
    root = Path(path)
    tensorio.save_tensor(ds.inputs, root / "inputs.npy")
    meta = {"inputs": "inputs.npy", "labels": ds.labels.tolist(), "n_classes": ds.n_classes,
            "splits": {k: v.tolist() for k, v in ds.splits.items()}}
    (root / "dataset.json").write_text(json.dumps(meta) + "\n")


def make_blobs_dataset(seed: int = 0, n_train: int = 512, n_heldout: int = 256,
                       n_classes: int = 10, size: int = 8) -> EvalDataset:
    """Gaussian blobs rendered on ``size x size`` grids, one blob layout per class."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(1.5, size - 2.5, size=(n_classes, 2, 2))
    widths = rng.uniform(0.8, 1.6, size=(n_classes, 2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n = n_train + n_heldout
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    imgs = np.empty((n, 1, size, size), dtype=np.float32)
    for k in range(n):
        c = labels[k]
        img = np.zeros((size, size))
        for blob in range(2):
            cy, cx = centers[c, blob] + rng.normal(0, 0.4, 2)
            w = widths[c, blob] * rng.uniform(0.8, 1.25)
            amp = rng.uniform(0.6, 1.4)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w**2))
        img += rng.normal(0, 0.1, img.shape)
        imgs[k, 0] = img
    splits = {"train": np.arange(n_train), "heldout": np.arange(n_train, n)}
    return EvalDataset(imgs, labels, splits, n_classes)


def _bundled_dir() -> Path:
    return Path(str(resources.files("adaptexp") / "data" / "bundled"))


def bundled_model_path() -> Path:
    return _bundled_dir() / "model.json"


def bundled_dataset_path() -> Path:
    return _bundled_dir() / "dataset"


def load_bundled() -> tuple[ModelGraph, EvalDataset]:
    return load_model(bundled_model_path()), load_dataset(bundled_dataset_path())
