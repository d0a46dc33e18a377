"""A small layer-stack network with explicit per-layer backward passes.

Every parameter carries a :class:`ParamKind` so federated strategies can
route it: ordinary weights are ``GENERIC``, batch-norm scale/shift are
``BN_AFFINE`` and batch-norm running moments are ``BN_STATS`` (never
trained by SGD).  Group/layer norm keep no running moments, so their
affine parameters are ``GENERIC``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import normalization
from .errors import ContractError, DimensionError, NumericError
from .normalization import NormConfig
from .tensor import NormStats, conv_output_size, im2col

__all__ = [
    "ParamKind",
    "LayerSpec",
    "LayerState",
    "ModelState",
    "ForwardCache",
    "GradCheckReport",
    "build_model",
    "forward",
    "cross_entropy",
    "backward",
    "apply_batch_stats",
    "sgd_step",
    "grad_check",
    "predict",
]

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "norm")


class ParamKind(str, Enum):
    GENERIC = "GENERIC"
    BN_AFFINE = "BN_AFFINE"
    BN_STATS = "BN_STATS"


TRAINABLE = (ParamKind.GENERIC, ParamKind.BN_AFFINE)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    norm: str = "batch"
    groups: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and self.out < 1:
            raise ValueError(f"{self.kind} layer needs out >= 1")
        if self.kind == "norm" and self.norm not in normalization.NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        keep = {"kind": self.kind}
        if self.kind == "dense":
            keep["out"] = self.out
        elif self.kind == "conv2d":
            keep.update(out=self.out, kernel=self.kernel, stride=self.stride, pad=self.pad)
        elif self.kind == "norm":
            keep["norm"] = self.norm
            if self.norm == "group":
                keep["groups"] = self.groups
        return keep


@dataclass
class LayerState:
    spec: LayerSpec
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    kinds: Dict[str, ParamKind] = field(default_factory=dict)

    def running(self) -> NormStats:
        return NormStats(self.params["running_mean"], self.params["running_var"])


@dataclass
class ModelState:
    layers: List[LayerState]
    input_shape: Tuple[int, ...]
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @property
    def specs(self) -> List[LayerSpec]:
        return [l.spec for l in self.layers]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def norm_cfg(self, spec: LayerSpec) -> NormConfig:
        return NormConfig(kind=spec.norm, eps=self.eps, momentum=self.momentum, groups=spec.groups)

    def named(self, kinds=None):
        """Yield ``(layer_index, name, kind, array)`` in a stable order."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                kind = layer.kinds[name]
                if kinds is None or kind in kinds:
                    yield i, name, kind, layer.params[name]

    def bn_layers(self) -> List[int]:
        return [i for i, l in enumerate(self.layers) if l.spec.kind == "norm" and l.spec.norm == "batch"]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_model(specs: Sequence[LayerSpec], input_shape, seed=0, eps=1e-5, momentum=0.1) -> ModelState:
    """Validate that the layer shapes compose and initialise parameters.

    ``input_shape`` excludes the batch axis: ``(d,)`` or ``(C, H, W)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    layers = []
    for idx, spec in enumerate(specs):
        if isinstance(spec, dict):
            spec = LayerSpec.from_dict(spec)
        params, kinds = {}, {}
        if spec.kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"layer {idx}: dense needs flat input, got {shape}")
            fan_in = shape[0]
            params["weight"] = _glorot(rng, (fan_in, spec.out), fan_in, spec.out)
            params["bias"] = np.zeros(spec.out)
            out = (spec.out,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise DimensionError(f"layer {idx}: conv2d needs (C, H, W) input, got {shape}")
            c, h, w = shape
            k = spec.kernel
            oh, ow = conv_output_size(h, w, k, k, spec.stride, spec.pad)
            if oh <= 0 or ow <= 0:
                raise DimensionError(f"layer {idx}: conv output extent ({oh}, {ow}) not positive")
            params["weight"] = _glorot(rng, (spec.out, c, k, k), c * k * k, spec.out * k * k)
            params["bias"] = np.zeros(spec.out)
            out = (spec.out, oh, ow)
        elif spec.kind == "relu":
            out = shape
        elif spec.kind == "flatten":
            out = (int(np.prod(shape)),)
        else:
            c = shape[0]
            if spec.norm == "group" and c % spec.groups:
                raise DimensionError(f"layer {idx}: {spec.groups} groups do not divide {c} channels")
            affine_kind = ParamKind.BN_AFFINE if spec.norm == "batch" else ParamKind.GENERIC
            params["gamma"] = np.ones(c)
            params["beta"] = np.zeros(c)
            kinds["gamma"] = kinds["beta"] = affine_kind
            if spec.norm == "batch":
                params["running_mean"] = np.zeros(c)
                params["running_var"] = np.ones(c)
                kinds["running_mean"] = kinds["running_var"] = ParamKind.BN_STATS
            out = shape
        for name in params:
            kinds.setdefault(name, ParamKind.GENERIC)
        layers.append(LayerState(spec, shape, out, params, kinds))
        shape = out
    return ModelState(layers, tuple(int(s) for s in input_shape), eps, momentum)


@dataclass
class ForwardCache:
    mode: str
    entries: list
    batch_stats: Dict[int, NormStats]


def forward(model: ModelState, x, mode: Optional[str] = None):
    """Run the stack; returns ``(logits, cache)``.

    Train mode normalizes BN layers with batch moments (recorded in
    ``cache.batch_stats``); eval mode uses the stored running moments.
    Nothing in ``model`` is modified.
    """
    mode = mode or model.mode
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    entries, stats = [], {}
    for i, layer in enumerate(model.layers):
        spec, p = layer.spec, layer.params
        if spec.kind == "dense":
            entries.append(x)
            x = x @ p["weight"] + p["bias"]
        elif spec.kind == "conv2d":
            k = spec.kernel
            cols = im2col(x, k, k, spec.stride, spec.pad)
            entries.append((x.shape, cols))
            o = p["weight"].shape[0]
            y = cols @ p["weight"].reshape(o, -1).T + p["bias"]
            x = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
        elif spec.kind == "relu":
            mask = x > 0
            entries.append(mask)
            x = x * mask
        elif spec.kind == "flatten":
            entries.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            cfg = model.norm_cfg(spec)
            if spec.norm == "batch":
                if mode == "train":
                    x, stats[i], cache = normalization.bn_forward_train(x, p["gamma"], p["beta"], cfg)
                else:
                    x = normalization.bn_forward_eval(x, p["gamma"], p["beta"], layer.running(), cfg)
                    cache = None
            else:
                x, cache = normalization.norm_forward(spec.norm, x, p["gamma"], p["beta"], cfg)
            entries.append(cache)
    return x, ForwardCache(mode, entries, stats)


def predict(model: ModelState, x) -> np.ndarray:
    logits, _ = forward(model, x, "eval")
    return logits.argmax(axis=1)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class, and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.size != n:
        raise DimensionError(f"{labels.size} labels for {n} logits rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - lse[:, None]
    loss = -log_p[np.arange(n), labels].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def backward(model: ModelState, cache: ForwardCache, dlogits) -> List[Dict[str, np.ndarray]]:
    """Gradients of every trainable parameter, one dict per layer."""
    if cache.mode != "train":
        raise ContractError("backward needs a train-mode forward cache")
    grads: List[Dict[str, np.ndarray]] = [dict() for _ in model.layers]
    d = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, entry = model.layers[i], cache.entries[i]
        spec, p = layer.spec, layer.params
        if spec.kind == "dense":
            grads[i]["weight"] = entry.T @ d
            grads[i]["bias"] = d.sum(axis=0)
            d = d @ p["weight"].T
        elif spec.kind == "conv2d":
            x_shape, cols = entry
            o = p["weight"].shape[0]
            dy = d.transpose(0, 2, 3, 1)  # N, OH, OW, O
            grads[i]["weight"] = np.einsum("nhwo,nhwk->ok", dy, cols).reshape(p["weight"].shape)
            grads[i]["bias"] = dy.sum(axis=(0, 1, 2))
            dcols = dy @ p["weight"].reshape(o, -1)
            d = _col2im(dcols, x_shape, spec.kernel, spec.stride, spec.pad)
        elif spec.kind == "relu":
            d = d * entry
        elif spec.kind == "flatten":
            d = d.reshape(entry)
        else:
            if spec.norm == "batch":
                d, dg, db = normalization.bn_backward(entry, d)
            else:
                d, dg, db = normalization.norm_backward(entry, d)
            grads[i]["gamma"] = dg
            grads[i]["beta"] = db
    return grads


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    _, oh, ow, _ = dcols.shape
    dpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    patches = dcols.reshape(n, oh, ow, c, k, k)
    for di in range(k):
        for dj in range(k):
            dpad[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += (
                patches[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    if pad:
        return dpad[:, :, pad:pad + h, pad:pad + w]
    return dpad


def apply_batch_stats(model: ModelState, cache: ForwardCache, momentum: Optional[float] = None) -> ModelState:
    """Fold a train-mode batch's BN moments into the running statistics."""
    rho = model.momentum if momentum is None else momentum
    out = model.copy()
    for i, batch in cache.batch_stats.items():
        new = normalization.update_running(model.layers[i].running(), batch, rho)
        out.layers[i].params["running_mean"] = new.mean
        out.layers[i].params["running_var"] = new.var
    return out


def sgd_step(model: ModelState, grads, lr: float, proximal_mu: float = 0.0,
             anchor: Optional[ModelState] = None) -> ModelState:
    """``w <- w - lr * (g + mu * (w - w_anchor))`` on GENERIC and BN_AFFINE params."""
    if proximal_mu > 0 and anchor is None:
        raise ContractError("proximal term needs an anchor model")
    if len(grads) != len(model.layers):
        raise DimensionError(f"{len(grads)} gradient dicts for {len(model.layers)} layers")
    out = model.copy()
    for i, name, kind, w in model.named(TRAINABLE):
        g = grads[i][name]
        if g.shape != w.shape:
            raise DimensionError(f"layer {i} {name}: grad {g.shape} vs param {w.shape}")
        if proximal_mu > 0:
            g = g + proximal_mu * (w - anchor.layers[i].params[name])
        out.layers[i].params[name] = w - lr * g
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _loss(model, x, y):
    logits, _ = forward(model, x, "train")
    return cross_entropy(logits, y)[0]


def grad_check(specs, input_shape, seed=0, h=1e-5, tol=1e-4, batch=4) -> GradCheckReport:
    """Compare backprop against central finite differences on a random batch.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6)``; the
    floor keeps entries whose true gradient is ~0 from reporting noise.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    model = build_model(specs, input_shape, rng)
    # move BN/GN/LN affine params off their trivial init so their grads are exercised
    for i, name, kind, w in list(model.named(TRAINABLE)):
        if name in ("gamma", "beta"):
            model.layers[i].params[name] = w + rng.uniform(-0.5, 0.5, size=w.shape)
    classes = model.layers[-1].out_shape[0]
    x = rng.standard_normal((batch,) + tuple(input_shape))
    y = rng.integers(0, classes, size=batch)
    logits, cache = forward(model, x, "train")
    _, dlogits = cross_entropy(logits, y)
    grads = backward(model, cache, dlogits)

    worst, worst_name, checked = 0.0, "", 0
    for i, name, kind, w in list(model.named(TRAINABLE)):
        analytic = grads[i][name]
        flat = w.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = _loss(model, x, y)
            flat[j] = orig - h
            lm = _loss(model, x, y)
            flat[j] = orig
            num = (lp - lm) / (2 * h)
            a = analytic.reshape(-1)[j]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-6)
            checked += 1
            if not np.isfinite(rel):
                raise NumericError(f"non-finite gradient at layer {i} {name}[{j}]")
            if rel > worst:
                worst, worst_name = rel, f"layer {i} {name}[{j}]"
    return GradCheckReport(float(worst), worst_name, tol, checked)


# (name, layers, per-sample input shape): one spec per layer family mix
DEFAULT_GRADCHECK_SPECS = [
    ("dense-bn", [LayerSpec("dense", out=6), LayerSpec("norm", norm="batch"), LayerSpec("relu"),
                  LayerSpec("dense", out=3)], (4,)),
    ("conv-bn", [LayerSpec("conv2d", out=3, kernel=3, pad=1), LayerSpec("norm", norm="batch"),
                 LayerSpec("relu"), LayerSpec("flatten"), LayerSpec("dense", out=3)], (2, 5, 5)),
    ("conv-gn-ln", [LayerSpec("conv2d", out=4, kernel=3, stride=2), LayerSpec("norm", norm="group", groups=2),
                    LayerSpec("relu"), LayerSpec("flatten"), LayerSpec("dense", out=5),
                    LayerSpec("norm", norm="layer"), LayerSpec("relu"), LayerSpec("dense", out=3)], (1, 6, 6)),
]
