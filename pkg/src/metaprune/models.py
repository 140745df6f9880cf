"""Model substrates with explicitly prunable units.

Three architectures are supported: a small stride-1 convnet, a two-hidden-layer
MLP, and a tiny pre-norm transformer. Each exposes its prunable units (conv
filters, dense nodes, attention heads, transformer MLP nodes) through named
layers, and supports three views of a pruned network:

* masked forward: full-size parameters, units outside the kept set contribute
  exactly zero; optional per-unit gate scores multiply kept units' outputs
* shrink-to-mask: physically compact parameters equivalent to the masked model
* importance scoring: mean post-ReLU activation, or a first-order Taylor
  estimate of each unit's effect on the loss
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelArch",
    "ModelParams",
    "Mask",
    "GateScores",
    "mlp_arch",
    "convnet_arch",
    "transformer_arch",
    "arch_fingerprint",
    "prunable_layers",
    "layer_sizes",
    "full_mask",
    "make_mask",
    "validate_mask",
    "init_gates",
    "build_model",
    "forward",
    "masked_forward",
    "shrink_to_mask",
    "unit_activation_importance",
    "unit_taylor_importance",
    "predict",
    "accuracy",
    "param_count",
    "analytic_param_count",
    "scatter_to_full",
    "donor_param_names",
    "payload_layout",
]


@dataclass(frozen=True)
class ModelArch:
    """Architecture description; ``num_classes`` sizes the final classifier."""

    kind: str
    num_classes: int
    hidden: tuple[int, ...] = ()       # mlp node counts per hidden layer
    filters: tuple[int, ...] = ()      # convnet filter counts per conv layer
    blocks: int = 0                    # transformer depth
    heads: int = 0
    head_dim: int = 0
    mlp_width: int = 0
    in_channels: int = 1
    image_hw: int = 16
    patch: int = 4

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def tokens(self) -> int:
        return (self.image_hw // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch * self.patch

    @property
    def input_dim(self) -> int:
        return self.in_channels * self.image_hw * self.image_hw

    def with_num_classes(self, m: int) -> "ModelArch":
        return replace(self, num_classes=m)


def mlp_arch(hidden: tuple[int, ...] = (64, 64), num_classes: int = 5, **kw) -> ModelArch:
    arch = ModelArch(kind="mlp", num_classes=num_classes, hidden=tuple(hidden), **kw)
    _validate_arch(arch)
    return arch


def convnet_arch(filters: tuple[int, ...] = (16, 32, 32), num_classes: int = 5, **kw) -> ModelArch:
    arch = ModelArch(kind="small_convnet", num_classes=num_classes, filters=tuple(filters), **kw)
    _validate_arch(arch)
    return arch


def transformer_arch(
    blocks: int = 2,
    heads: int = 4,
    head_dim: int = 4,
    mlp_width: int = 32,
    num_classes: int = 5,
    **kw,
) -> ModelArch:
    arch = ModelArch(
        kind="tiny_transformer",
        num_classes=num_classes,
        blocks=blocks,
        heads=heads,
        head_dim=head_dim,
        mlp_width=mlp_width,
        **kw,
    )
    _validate_arch(arch)
    return arch


def _validate_arch(arch: ModelArch) -> None:
    if arch.kind not in ("mlp", "small_convnet", "tiny_transformer"):
        raise ValueError(f"unknown arch kind {arch.kind!r}")
    if arch.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    sizes = layer_sizes(arch)
    if not sizes:
        raise ValueError("arch has no prunable layers")
    for name, n in sizes.items():
        if n < 2:
            raise ValueError(f"prunable layer {name} has {n} units; need >= 2")
    if arch.kind == "tiny_transformer" and arch.image_hw % arch.patch != 0:
        raise ValueError("image size must be divisible by patch size")


def prunable_layers(arch: ModelArch) -> list[str]:
    """Ordered prunable layer names; the classifier is never listed."""
    if arch.kind == "mlp":
        return [f"dense{i + 1}" for i in range(len(arch.hidden))]
    if arch.kind == "small_convnet":
        return [f"conv{i + 1}" for i in range(len(arch.filters))]
    names = []
    for b in range(arch.blocks):
        names += [f"block{b}.heads", f"block{b}.nodes"]
    return names


def layer_sizes(arch: ModelArch) -> dict[str, int]:
    if arch.kind == "mlp":
        return {f"dense{i + 1}": n for i, n in enumerate(arch.hidden)}
    if arch.kind == "small_convnet":
        return {f"conv{i + 1}": n for i, n in enumerate(arch.filters)}
    sizes = {}
    for b in range(arch.blocks):
        sizes[f"block{b}.heads"] = arch.heads
        sizes[f"block{b}.nodes"] = arch.mlp_width
    return sizes


def arch_fingerprint(arch: ModelArch) -> str:
    """Hash of the prunable backbone; classifier width is task-specific."""
    payload = {k: v for k, v in arch.__dict__.items() if k != "num_classes"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Mask:
    """Per-layer sorted kept-unit indices."""

    layers: dict[str, np.ndarray]

    def size(self, layer: str) -> int:
        return len(self.layers[layer])

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.layers.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.layers.keys() == other.layers.keys() and all(
            np.array_equal(self.layers[k], other.layers[k]) for k in self.layers
        )


def make_mask(arch: ModelArch, kept: dict) -> Mask:
    mask = Mask({k: np.unique(np.asarray(v, dtype=np.int64)) for k, v in kept.items()})
    validate_mask(arch, mask)
    return mask


def full_mask(arch: ModelArch) -> Mask:
    return Mask({name: np.arange(n, dtype=np.int64) for name, n in layer_sizes(arch).items()})


def validate_mask(arch: ModelArch, mask: Mask) -> None:
    sizes = layer_sizes(arch)
    if set(mask.layers) != set(sizes):
        raise ValueError(f"mask layers {sorted(mask.layers)} != arch layers {sorted(sizes)}")
    for name, idx in mask.layers.items():
        n = sizes[name]
        if len(idx) == 0:
            raise ValueError(f"mask for {name} keeps no units")
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"mask for {name} has duplicate indices")
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError(f"mask for {name} has indices outside [0, {n})")


def is_full(arch: ModelArch, mask: Mask) -> bool:
    return all(len(mask.layers[k]) == n for k, n in layer_sizes(arch).items())


@dataclass
class GateScores:
    """Trainable per-unit multipliers, aligned with the mask's kept order."""

    layers: dict[str, Tensor]


def init_gates(mask: Mask) -> GateScores:
    return GateScores(
        {name: Tensor(np.ones(len(idx)), requires_grad=True) for name, idx in mask.layers.items()}
    )


@dataclass
class ModelParams:
    """Named parameter arrays plus the kept-unit provenance of each layer.

    ``kept`` is the full mask for freshly built models and records the
    original pre-trained unit indices after shrink_to_mask.
    """

    arch: ModelArch
    arrays: dict[str, np.ndarray]
    kept: Mask

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.arrays.items()},
            Mask({k: v.copy() for k, v in self.kept.layers.items()}),
        )


def _param_specs(arch: ModelArch) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) per parameter; fan_in None means zero-init."""
    specs: list[tuple[str, tuple[int, ...], int | None]] = []
    if arch.kind == "mlp":
        d = arch.input_dim
        for i, n in enumerate(arch.hidden):
            specs.append((f"dense{i + 1}_w", (d, n), d))
            specs.append((f"dense{i + 1}_b", (n,), None))
            d = n
        specs.append(("head_w", (d, arch.num_classes), d))
        specs.append(("head_b", (arch.num_classes,), None))
    elif arch.kind == "small_convnet":
        c = arch.in_channels
        for i, f in enumerate(arch.filters):
            specs.append((f"conv{i + 1}_w", (f, c, 3, 3), c * 9))
            specs.append((f"conv{i + 1}_b", (f,), None))
            c = f
        specs.append(("head_w", (c, arch.num_classes), c))
        specs.append(("head_b", (arch.num_classes,), None))
    else:
        d, w, t = arch.embed_dim, arch.mlp_width, arch.tokens
        specs.append(("embed_w", (arch.patch_dim, d), arch.patch_dim))
        specs.append(("embed_b", (d,), None))
        specs.append(("pos", (t, d), t * d))
        for b in range(arch.blocks):
            p = f"blk{b}_"
            specs.append((p + "ln1_g", (d,), -1))
            specs.append((p + "ln1_b", (d,), None))
            for nm in ("wq", "wk", "wv", "wo"):
                specs.append((p + nm, (d, d), d))
            for nm in ("bq", "bk", "bv", "bo"):
                specs.append((p + nm, (d,), None))
            specs.append((p + "ln2_g", (d,), -1))
            specs.append((p + "ln2_b", (d,), None))
            specs.append((p + "w1", (d, w), d))
            specs.append((p + "b1", (w,), None))
            specs.append((p + "w2", (w, d), w))
            specs.append((p + "b2", (d,), None))
        specs.append(("lnf_g", (d,), -1))
        specs.append(("lnf_b", (d,), None))
        specs.append(("head_w", (d, arch.num_classes), d))
        specs.append(("head_b", (arch.num_classes,), None))
    return specs


def build_model(arch: ModelArch, seed: int) -> ModelParams:
    """Fan-in-scaled uniform initialization, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in in _param_specs(arch):
        if fan_in is None:
            arrays[name] = np.zeros(shape)
        elif fan_in == -1:  # layer-norm scale
            arrays[name] = np.ones(shape)
        elif name == "pos":
            arrays[name] = rng.uniform(-0.02, 0.02, size=shape)
        else:
            s = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(arch, arrays, full_mask(arch))


def reinit_classifier(params: ModelParams, num_classes: int, seed: int) -> ModelParams:
    """Fresh task-specific classifier; all other parameters are shared."""
    rng = np.random.default_rng(seed)
    d = params.arrays["head_w"].shape[0]
    arrays = dict(params.arrays)
    s = 1.0 / math.sqrt(d)
    arrays["head_w"] = rng.uniform(-s, s, size=(d, num_classes))
    arrays["head_b"] = np.zeros(num_classes)
    return ModelParams(params.arch.with_num_classes(num_classes), arrays, params.kept)


def as_tensors(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap arrays as Tensors sharing storage, so in-place updates persist."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.arrays.items()}


def _mult_factors(arch, mask, gates):
    """Full-width multiplier per prunable layer: 0/1 vector or scattered gates."""
    sizes = layer_sizes(arch)
    mult = {}
    for name, n in sizes.items():
        idx = mask.layers[name]
        if gates is not None:
            g = gates.layers[name]
            if g.shape != (len(idx),):
                raise ValueError(
                    f"gates for {name} cover {g.shape[0] if g.shape else 0} units, mask keeps {len(idx)}"
                )
            sel = np.zeros((len(idx), n))
            sel[np.arange(len(idx)), idx] = 1.0
            mult[name] = T.reshape(T.matmul(T.reshape(g, (1, len(idx))), Tensor(sel)), (n,))
        else:
            vec = np.zeros(n)
            vec[idx] = 1.0
            mult[name] = vec
    return mult


def _apply_mult(h: Tensor, factor, reshape_to=None):
    if factor is None:
        return h
    if isinstance(factor, Tensor):
        if reshape_to is not None:
            factor = T.reshape(factor, reshape_to)
        return T.mul(h, factor)
    if reshape_to is not None:
        factor = factor.reshape(reshape_to)
    return T.mul(h, Tensor(factor))


def _patchify(x: np.ndarray, arch: ModelArch) -> np.ndarray:
    b = x.shape[0]
    g = arch.image_hw // arch.patch
    p = arch.patch
    x = x.reshape(b, arch.in_channels, g, p, g, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, arch.patch_dim)


def _forward_graph(tensors, arch, x: np.ndarray, mult=None, caches=None):
    """Build the logits graph; caches, when given, collects per-layer unit outputs."""
    mult = mult or {}
    if arch.kind == "mlp":
        h = Tensor(x.reshape(x.shape[0], -1))
        n_layers = sum(1 for k in tensors if k.startswith("dense") and k.endswith("_w"))
        for i in range(1, n_layers + 1):
            h = T.relu(T.add(T.matmul(h, tensors[f"dense{i}_w"]), tensors[f"dense{i}_b"]))
            h = _apply_mult(h, mult.get(f"dense{i}"))
            if caches is not None:
                caches[f"dense{i}"] = h
        return T.add(T.matmul(h, tensors["head_w"]), tensors["head_b"])

    if arch.kind == "small_convnet":
        h = Tensor(x)
        n_layers = sum(1 for k in tensors if k.startswith("conv") and k.endswith("_w"))
        for i in range(1, n_layers + 1):
            w = tensors[f"conv{i}_w"]
            f = w.shape[0]
            h = T.relu(T.add(T.conv2d(h, w), T.reshape(tensors[f"conv{i}_b"], (f, 1, 1))))
            h = _apply_mult(h, mult.get(f"conv{i}"), reshape_to=(f, 1, 1))
            if caches is not None:
                caches[f"conv{i}"] = h
        pooled = T.mean(h, axis=(2, 3))
        return T.add(T.matmul(pooled, tensors["head_w"]), tensors["head_b"])

    # tiny transformer
    bsz = x.shape[0]
    dh = arch.head_dim
    tok = T.add(
        T.add(T.matmul(Tensor(_patchify(x, arch)), tensors["embed_w"]), tensors["embed_b"]),
        tensors["pos"],
    )
    t = tok.shape[1]
    n_blocks = sum(1 for k in tensors if k.endswith("_wq"))
    for b in range(n_blocks):
        p = f"blk{b}_"
        nheads = tensors[p + "wq"].shape[1] // dh
        ln1 = T.layer_norm(tok, tensors[p + "ln1_g"], tensors[p + "ln1_b"])
        qkv = []
        for nm in ("q", "k", "v"):
            z = T.add(T.matmul(ln1, tensors[p + "w" + nm]), tensors[p + "b" + nm])
            qkv.append(T.transpose(T.reshape(z, (bsz, t, nheads, dh)), (0, 2, 1, 3)))
        q, k, v = qkv
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)  # (B, H, T, dh)
        out = _apply_mult(out, mult.get(f"block{b}.heads"), reshape_to=(nheads, 1, 1))
        if caches is not None:
            caches[f"block{b}.heads"] = out
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bsz, t, nheads * dh))
        tok = T.add(tok, T.add(T.matmul(merged, tensors[p + "wo"]), tensors[p + "bo"]))
        ln2 = T.layer_norm(tok, tensors[p + "ln2_g"], tensors[p + "ln2_b"])
        hid = T.relu(T.add(T.matmul(ln2, tensors[p + "w1"]), tensors[p + "b1"]))
        hid = _apply_mult(hid, mult.get(f"block{b}.nodes"))
        if caches is not None:
            caches[f"block{b}.nodes"] = hid
        tok = T.add(tok, T.add(T.matmul(hid, tensors[p + "w2"]), tensors[p + "b2"]))
    final = T.layer_norm(tok, tensors["lnf_g"], tensors["lnf_b"])
    pooled = T.mean(final, axis=1)
    return T.add(T.matmul(pooled, tensors["head_w"]), tensors["head_b"])


def forward(params: ModelParams, batch: np.ndarray, tensors=None, caches=None) -> Tensor:
    """Plain forward of a (possibly compact) model."""
    if tensors is None:
        tensors = as_tensors(params, requires_grad=False)
    return _forward_graph(tensors, params.arch, batch, caches=caches)


def masked_forward(
    params: ModelParams,
    mask: Mask,
    gates: GateScores | None,
    batch: np.ndarray,
    tensors=None,
    caches=None,
) -> Tensor:
    """Forward where units outside the mask contribute exactly zero.

    ``params`` must be full-size for the arch; gate scores, when present,
    multiply the kept units' outputs.
    """
    if not is_full(params.arch, params.kept):
        raise ValueError("masked_forward requires full-size parameters; got a compact model")
    validate_mask(params.arch, mask)
    if gates is not None and set(gates.layers) != set(mask.layers):
        raise ValueError("gate layers do not match mask layers")
    if tensors is None:
        tensors = as_tensors(params, requires_grad=False)
    mult = _mult_factors(params.arch, mask, gates)
    return _forward_graph(tensors, params.arch, batch, mult=mult, caches=caches)


def _head_cols(idx: np.ndarray, head_dim: int) -> np.ndarray:
    return (idx[:, None] * head_dim + np.arange(head_dim)[None, :]).reshape(-1)


def shrink_to_mask(params: ModelParams, mask: Mask) -> ModelParams:
    """Physically remove pruned units; equivalent to masked_forward on all inputs."""
    arch = params.arch
    if not is_full(arch, params.kept):
        raise ValueError("shrink_to_mask expects full-size parameters")
    validate_mask(arch, mask)
    a = params.arrays
    out = {}
    if arch.kind == "mlp":
        prev = None
        for i in range(1, len(arch.hidden) + 1):
            idx = mask.layers[f"dense{i}"]
            w = a[f"dense{i}_w"]
            w = w[:, idx] if prev is None else w[np.ix_(prev, idx)]
            out[f"dense{i}_w"] = w.copy()
            out[f"dense{i}_b"] = a[f"dense{i}_b"][idx].copy()
            prev = idx
        out["head_w"] = a["head_w"][prev, :].copy()
        out["head_b"] = a["head_b"].copy()
    elif arch.kind == "small_convnet":
        prev = None
        for i in range(1, len(arch.filters) + 1):
            idx = mask.layers[f"conv{i}"]
            w = a[f"conv{i}_w"]
            w = w[idx] if prev is None else w[np.ix_(idx, prev)]
            out[f"conv{i}_w"] = w.copy()
            out[f"conv{i}_b"] = a[f"conv{i}_b"][idx].copy()
            prev = idx
        out["head_w"] = a["head_w"][prev, :].copy()
        out["head_b"] = a["head_b"].copy()
    else:
        for name in ("embed_w", "embed_b", "pos", "lnf_g", "lnf_b", "head_w", "head_b"):
            out[name] = a[name].copy()
        for b in range(arch.blocks):
            p = f"blk{b}_"
            cols = _head_cols(mask.layers[f"block{b}.heads"], arch.head_dim)
            for nm in ("wq", "wk", "wv"):
                out[p + nm] = a[p + nm][:, cols].copy()
            for nm in ("bq", "bk", "bv"):
                out[p + nm] = a[p + nm][cols].copy()
            out[p + "wo"] = a[p + "wo"][cols, :].copy()
            nodes = mask.layers[f"block{b}.nodes"]
            out[p + "w1"] = a[p + "w1"][:, nodes].copy()
            out[p + "b1"] = a[p + "b1"][nodes].copy()
            out[p + "w2"] = a[p + "w2"][nodes, :].copy()
            for nm in ("bo", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out[p + nm] = a[p + nm].copy()
    return ModelParams(arch, out, Mask({k: v.copy() for k, v in mask.layers.items()}))


def _activation_stats(caches, arch):
    """Per-layer (sum over samples and positions, positions per sample)."""
    stats = {}
    for name, act in caches.items():
        data = act.data
        if name.endswith(".heads"):
            per_unit = np.abs(data).sum(axis=(0, 2, 3))
            positions = data.shape[2] * data.shape[3]
        elif data.ndim == 4:  # conv maps (B, F, H, W)
            per_unit = data.sum(axis=(0, 2, 3))
            positions = data.shape[2] * data.shape[3]
        elif data.ndim == 3:  # transformer nodes (B, T, W)
            per_unit = data.sum(axis=(0, 1))
            positions = data.shape[1]
        else:  # dense (B, N)
            per_unit = data.sum(axis=0)
            positions = 1
        stats[name] = (per_unit, positions)
    return stats


def unit_activation_importance(
    params: ModelParams, mask: Mask, dataset: tuple[np.ndarray, np.ndarray], chunk: int = 128
) -> dict[str, np.ndarray]:
    """Mean post-ReLU activation (|attention output| for heads) per unit.

    Scores are reported over the full unit range; units outside the mask
    score exactly zero.
    """
    x, _ = dataset
    if len(x) == 0:
        raise ValueError("importance scoring needs a non-empty dataset")
    sizes = layer_sizes(params.arch)
    totals = {name: np.zeros(n) for name, n in sizes.items()}
    denom = {name: 0.0 for name in sizes}
    tensors = as_tensors(params, requires_grad=False)
    with T.no_grad():
        for lo in range(0, len(x), chunk):
            caches: dict = {}
            masked_forward(params, mask, None, x[lo : lo + chunk], tensors=tensors, caches=caches)
            for name, (per_unit, positions) in _activation_stats(caches, params.arch).items():
                totals[name] += per_unit
                denom[name] += positions * len(x[lo : lo + chunk])
    return {name: totals[name] / denom[name] for name in totals}


def _unit_axis(name: str, ndim: int) -> int:
    if name.endswith(".nodes"):
        return 2  # (B, T, W)
    if ndim >= 3:
        return 1  # conv maps (B, F, H, W) and heads (B, H, T, dh)
    return 1  # dense (B, N)


def unit_taylor_importance(
    params: ModelParams, mask: Mask, dataset: tuple[np.ndarray, np.ndarray], chunk: int = 128
) -> dict[str, np.ndarray]:
    """|mean over samples of sum(activation * dLoss/dActivation)| per unit."""
    x, y = dataset
    if len(x) == 0:
        raise ValueError("importance scoring needs a non-empty dataset")
    sizes = layer_sizes(params.arch)
    totals = {name: np.zeros(n) for name, n in sizes.items()}
    tensors = as_tensors(params, requires_grad=True)
    for lo in range(0, len(x), chunk):
        xb, yb = x[lo : lo + chunk], y[lo : lo + chunk]
        caches: dict = {}
        logits = masked_forward(params, mask, None, xb, tensors=tensors, caches=caches)
        loss = T.cross_entropy_with_logits(logits, yb)
        T.backward(loss)
        for name, act in caches.items():
            ga = act.grad * act.data
            axis = _unit_axis(name, ga.ndim)
            reduce_axes = tuple(i for i in range(ga.ndim) if i != axis)
            # undo the 1/B factor inside the mean cross-entropy gradient
            totals[name] += ga.sum(axis=reduce_axes) * len(xb)
        for t in tensors.values():
            t.grad = None
    return {name: np.abs(totals[name]) / len(x) for name in totals}


def predict(params: ModelParams, x: np.ndarray, batch: int = 256) -> np.ndarray:
    preds = []
    tensors = as_tensors(params, requires_grad=False)
    with T.no_grad():
        for lo in range(0, len(x), batch):
            logits = forward(params, x[lo : lo + batch], tensors=tensors)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, x) == y))


def param_count(params: ModelParams) -> int:
    return sum(v.size for v in params.arrays.values())


def analytic_param_count(arch: ModelArch, mask: Mask) -> int:
    """Parameter count of the compact model implied by per-layer kept counts."""
    k = mask.sizes()
    if arch.kind == "mlp":
        total, d = 0, arch.input_dim
        for i in range(1, len(arch.hidden) + 1):
            n = k[f"dense{i}"]
            total += d * n + n
            d = n
        return total + d * arch.num_classes + arch.num_classes
    if arch.kind == "small_convnet":
        total, c = 0, arch.in_channels
        for i in range(1, len(arch.filters) + 1):
            f = k[f"conv{i}"]
            total += f * c * 9 + f
            c = f
        return total + c * arch.num_classes + arch.num_classes
    d, dh = arch.embed_dim, arch.head_dim
    total = arch.patch_dim * d + d + arch.tokens * d  # embedding + positions
    for b in range(arch.blocks):
        hc = k[f"block{b}.heads"] * dh
        nc = k[f"block{b}.nodes"]
        total += 4 * d  # two layer norms
        total += 3 * (d * hc + hc)  # q, k, v slices
        total += hc * d + d  # output projection + its bias
        total += d * nc + nc + nc * d + d  # mlp in/out
    total += 2 * d  # final norm
    return total + d * arch.num_classes + arch.num_classes


def donor_param_names(arch: ModelArch) -> set[str]:
    """Parameters attributed to prunable units (eligible for donor averaging)."""
    names: set[str] = set()
    if arch.kind == "mlp":
        for i in range(1, len(arch.hidden) + 1):
            names |= {f"dense{i}_w", f"dense{i}_b"}
    elif arch.kind == "small_convnet":
        for i in range(1, len(arch.filters) + 1):
            names |= {f"conv{i}_w", f"conv{i}_b"}
    else:
        for b in range(arch.blocks):
            p = f"blk{b}_"
            names |= {p + nm for nm in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "w1", "b1", "w2")}
    return names


def scatter_to_full(params: ModelParams) -> dict[str, np.ndarray]:
    """Compact arrays placed back at their pre-trained coordinates.

    Entries the record does not carry (units it pruned, and cross terms whose
    other endpoint it pruned) are NaN; non-prunable parameters are dense.
    """
    arch = params.arch
    mask = params.kept
    a = params.arrays
    out = {name: np.full(shape, np.nan) for name, shape, _ in _param_specs(arch)}
    if arch.kind == "mlp":
        prev = None
        for i in range(1, len(arch.hidden) + 1):
            idx = mask.layers[f"dense{i}"]
            if prev is None:
                out[f"dense{i}_w"][:, idx] = a[f"dense{i}_w"]
            else:
                out[f"dense{i}_w"][np.ix_(prev, idx)] = a[f"dense{i}_w"]
            out[f"dense{i}_b"][idx] = a[f"dense{i}_b"]
            prev = idx
        out["head_w"][prev, :] = a["head_w"]
        out["head_b"][:] = a["head_b"]
    elif arch.kind == "small_convnet":
        prev = None
        for i in range(1, len(arch.filters) + 1):
            idx = mask.layers[f"conv{i}"]
            if prev is None:
                out[f"conv{i}_w"][idx] = a[f"conv{i}_w"]
            else:
                out[f"conv{i}_w"][np.ix_(idx, prev)] = a[f"conv{i}_w"]
            out[f"conv{i}_b"][idx] = a[f"conv{i}_b"]
            prev = idx
        out["head_w"][prev, :] = a["head_w"]
        out["head_b"][:] = a["head_b"]
    else:
        for name in ("embed_w", "embed_b", "pos", "lnf_g", "lnf_b", "head_w", "head_b"):
            out[name][:] = a[name]
        for b in range(arch.blocks):
            p = f"blk{b}_"
            cols = _head_cols(mask.layers[f"block{b}.heads"], arch.head_dim)
            for nm in ("wq", "wk", "wv"):
                out[p + nm][:, cols] = a[p + nm]
            for nm in ("bq", "bk", "bv"):
                out[p + nm][cols] = a[p + nm]
            out[p + "wo"][cols, :] = a[p + "wo"]
            nodes = mask.layers[f"block{b}.nodes"]
            out[p + "w1"][:, nodes] = a[p + "w1"]
            out[p + "b1"][nodes] = a[p + "b1"]
            out[p + "w2"][nodes, :] = a[p + "w2"]
            for nm in ("bo", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out[p + nm][:] = a[p + nm]
    return out


def payload_layout(arch: ModelArch) -> list[tuple[str | None, list[str]]]:
    """Serialization groups: one per prunable layer plus a trailing group of
    everything else (classifier, embeddings, norms)."""
    groups: list[tuple[str | None, list[str]]] = []
    covered: set[str] = set()
    if arch.kind == "mlp":
        for i in range(1, len(arch.hidden) + 1):
            names = [f"dense{i}_w", f"dense{i}_b"]
            groups.append((f"dense{i}", names))
            covered |= set(names)
    elif arch.kind == "small_convnet":
        for i in range(1, len(arch.filters) + 1):
            names = [f"conv{i}_w", f"conv{i}_b"]
            groups.append((f"conv{i}", names))
            covered |= set(names)
    else:
        for b in range(arch.blocks):
            p = f"blk{b}_"
            head_names = [p + nm for nm in ("wq", "bq", "wk", "bk", "wv", "bv", "wo")]
            node_names = [p + nm for nm in ("w1", "b1", "w2")]
            groups.append((f"block{b}.heads", head_names))
            groups.append((f"block{b}.nodes", node_names))
            covered |= set(head_names) | set(node_names)
    rest = [name for name, _, _ in _param_specs(arch) if name not in covered]
    groups.append((None, rest))
    return groups


def compact_shapes(arch: ModelArch, mask: Mask) -> dict[str, tuple[int, ...]]:
    """Array shapes of the compact model implied by a mask."""
    ref = shrink_to_mask(
        ModelParams(arch, {n: np.zeros(s) for n, s, _ in _param_specs(arch)}, full_mask(arch)),
        mask,
    )
    return {k: v.shape for k, v in ref.arrays.items()}
