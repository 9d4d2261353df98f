"""Small transformer encoder classifier with optional ALP layers.

Block wiring (pre-norm)::

    h -> LayerNorm -> [ALP] -> MHA -> (+h) -> LayerNorm -> MLP -> (+)

The ALP output replaces the first LayerNorm output as attention input; the
residual stream is untouched by it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .alp import AlpConfig, PrototypeBank, alp_forward_infer, alp_forward_train, init_bank
from .io import read_npz, write_npz
from .numerics import (AdamState, Tensor, adam_step, add, backward, cross_entropy, gelu, layer_norm,
                       linear, mean, mul, multi_head_attention, square, sub, tsum)

log = logging.getLogger(__name__)

WEIGHT_FORMAT_VERSION = 1
BYTES_PER_VALUE = 4  # float32 on the wire


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 2
    dim: int = 32
    heads: int = 2
    mlp: int = 64
    seq_len: int = 16
    channels: int = 6
    classes: int = 6
    head_hidden: int = 64
    variant: str = "plain"
    alp: tuple[AlpConfig, ...] | None = None

    def __post_init__(self):
        if self.variant not in ("plain", "alp"):
            raise ValueError(f"variant must be 'plain' or 'alp', got {self.variant!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if (self.alp is not None) != (self.variant == "alp"):
            raise ValueError("alp configs must be given exactly when variant == 'alp'")
        if self.alp is not None:
            object.__setattr__(self, "alp", tuple(self.alp))
            if len(self.alp) != self.blocks:
                raise ValueError(f"G schedule has {len(self.alp)} entries for {self.blocks} blocks")
        for name in ("blocks", "dim", "heads", "mlp", "seq_len", "channels", "classes", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def with_prototypes(cls, schedule: Iterable[int], **kwargs) -> "ModelConfig":
        """ALP variant with one layer per block; ``alp_*`` kwargs go to every AlpConfig."""
        alp_kw = {k[4:]: kwargs.pop(k) for k in list(kwargs) if k.startswith("alp_")}
        alps = tuple(AlpConfig(G=int(g), **alp_kw) for g in schedule)
        blocks = kwargs.pop("blocks", len(alps))
        if blocks != len(alps):
            raise ValueError(f"G schedule has {len(alps)} entries for {blocks} blocks")
        return cls(variant="alp", alp=alps, blocks=blocks, **kwargs)

    def plain(self) -> "ModelConfig":
        return replace(self, variant="plain", alp=None)

    @property
    def prototype_schedule(self) -> tuple[int, ...]:
        return tuple(a.G for a in self.alp) if self.alp else ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alp"] = [asdict(a) for a in self.alp] if self.alp else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("alp") is not None:
            d["alp"] = tuple(AlpConfig(**a) for a in d["alp"])
        return cls(**d)


# desk-scale default and the full-scale HAR configuration used for byte accounting
DESK = ModelConfig.with_prototypes((32, 16), dim=32, heads=2, mlp=64, seq_len=16, head_hidden=64)
FULL_SCALE = ModelConfig.with_prototypes((2048, 1024, 512, 256, 128, 64), dim=192, heads=3, mlp=192,
                                         seq_len=128, channels=6, classes=6, head_hidden=1024)


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, np.ndarray]
    banks: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.banks.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for group in (self.params, self.banks):
            for name, arr in group.items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                            {k: v.astype(dtype) for k, v in self.banks.items()})


def local_bank_name(block: int) -> str:
    return f"block{block}.proto.local"


def global_bank_name(block: int) -> str:
    return f"block{block}.proto.global"


def is_personal(name: str) -> bool:
    """Post-pool classifier layers; kept on the client under FedPer."""
    return name.startswith("head.")


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m = cfg.dim, cfg.mlp
    shapes = [("embed.W", (cfg.channels, d)), ("embed.b", (d,)), ("pos", (cfg.seq_len, d))]
    for i in range(cfg.blocks):
        p = f"block{i}."
        shapes += [(p + "norm1.g", (d,)), (p + "norm1.b", (d,))]
        if cfg.variant == "alp":
            shapes += [(p + "alp.glu.W", (d, 2 * d)), (p + "alp.glu.b", (2 * d,))]
        for n in "qkvo":
            shapes += [(p + f"attn.W{n}", (d, d)), (p + f"attn.b{n}", (d,))]
        shapes += [(p + "norm2.g", (d,)), (p + "norm2.b", (d,)),
                   (p + "mlp.W1", (d, m)), (p + "mlp.b1", (m,)),
                   (p + "mlp.W2", (m, d)), (p + "mlp.b2", (d,))]
    shapes += [("norm_out.g", (d,)), ("norm_out.b", (d,)),
               ("head.W1", (d, cfg.head_hidden)), ("head.b1", (cfg.head_hidden,)),
               ("head.W2", (cfg.head_hidden, cfg.classes)), ("head.b2", (cfg.classes,))]
    return shapes


def parameter_count(cfg: ModelConfig, banks: bool = False) -> int:
    """Trainable parameter count; ``banks=True`` adds both prototype banks."""
    n = sum(int(np.prod(s)) for _, s in _param_shapes(cfg))
    if banks and cfg.alp:
        n += 2 * cfg.dim * sum(cfg.prototype_schedule)
    return n


def build(config: ModelConfig, seed: int, dtype=np.float64) -> ModelWeights:
    """Deterministic initialisation from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos":
            v = 0.02 * rng.standard_normal(shape)
        elif leaf == "g":
            v = np.ones(shape)
        elif leaf.startswith("b") or leaf == "b":
            v = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            v = rng.uniform(-limit, limit, shape)
        params[name] = v.astype(dtype)
    banks = {}
    if config.alp:
        for i, acfg in enumerate(config.alp):
            banks[local_bank_name(i)] = init_bank(acfg.G, config.dim, rng, dtype=dtype).vectors
            banks[global_bank_name(i)] = init_bank(acfg.G, config.dim, rng, role="global", dtype=dtype).vectors
    return ModelWeights(config, params, banks)


def forward(weights: ModelWeights, x, mode: str = "infer", *, params: dict[str, Tensor] | None = None,
            taps: dict[int, Tensor] | None = None) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Logits ``[B, classes]`` and the prototype banks after this pass.

    In ``train`` mode the returned banks carry the EMA update; the input
    ``weights`` are never modified. ``params`` supplies leaf Tensors (for
    gradients); ``taps`` collects the attention input of each block.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = weights.config
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.channels):
        raise ValueError(f"expected input [B, {cfg.seq_len}, {cfg.channels}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite model input")
    P = params if params is not None else {k: Tensor(v) for k, v in weights.params.items()}
    banks = dict(weights.banks)
    B = x.shape[0]

    h = add(linear(Tensor(x.astype(weights.dtype, copy=False)), P["embed.W"], P["embed.b"]), P["pos"])
    for i in range(cfg.blocks):
        p = f"block{i}."
        a = layer_norm(h, P[p + "norm1.g"], P[p + "norm1.b"])
        if cfg.variant == "alp":
            acfg = cfg.alp[i]
            local = PrototypeBank(banks[local_bank_name(i)], "local")
            glob = banks.get(global_bank_name(i))
            glob = PrototypeBank(glob, "global") if glob is not None else None
            glu = (P[p + "alp.glu.W"], P[p + "alp.glu.b"])
            if mode == "train":
                a, new_local = alp_forward_train(a, local, glob, glu, acfg)
                banks[local_bank_name(i)] = new_local.vectors
            else:
                a = alp_forward_infer(a, local, glu, acfg, glob)
        if taps is not None:
            taps[i] = a
        att = multi_head_attention(a, P[p + "attn.Wq"], P[p + "attn.bq"], P[p + "attn.Wk"], P[p + "attn.bk"],
                                   P[p + "attn.Wv"], P[p + "attn.bv"], P[p + "attn.Wo"], P[p + "attn.bo"],
                                   cfg.heads)
        h = add(h, att)
        n2 = layer_norm(h, P[p + "norm2.g"], P[p + "norm2.b"])
        h = add(h, linear(gelu(linear(n2, P[p + "mlp.W1"], P[p + "mlp.b1"])), P[p + "mlp.W2"], P[p + "mlp.b2"]))
        if not np.all(np.isfinite(h.data)):
            raise FloatingPointError(f"non-finite activations in block {i}")
    h = layer_norm(h, P["norm_out.g"], P["norm_out.b"])
    pooled = mean(h, axis=1)
    z = gelu(linear(pooled, P["head.W1"], P["head.b1"]))
    logits = linear(z, P["head.W2"], P["head.b2"])
    assert logits.shape == (B, cfg.classes)
    return logits, banks


def predict(weights: ModelWeights, x, batch_size: int = 64) -> np.ndarray:
    """Class predictions in inference mode, batched in input order."""
    x = np.asarray(x)
    out = []
    for start in range(0, len(x), batch_size):
        logits, _ = forward(weights, x[start:start + batch_size], "infer")
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- local training

@dataclass(frozen=True)
class TrainHook:
    """Local-objective modifier: ``none``, ``proximal`` (needs ``mu``) or ``frozen``."""

    kind: str = "none"
    mu: float = 0.0
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("none", "proximal", "frozen"):
            raise ValueError(f"unknown hook kind {self.kind!r}")


def proximal(mu: float) -> TrainHook:
    return TrainHook("proximal", mu=mu)


def frozen_layers(prefixes: Iterable[str]) -> TrainHook:
    return TrainHook("frozen", frozen=tuple(prefixes))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train_local(weights: ModelWeights, data, cfg: TrainConfig = TrainConfig(), *,
                global_ref: ModelWeights | None = None, hook: TrainHook = TrainHook(),
                seed: int = 0, losses: list | None = None) -> ModelWeights:
    """Adam on softmax cross-entropy (+ optional proximal term).

    ``data`` is a ``(samples, labels)`` pair or anything with ``samples`` and
    ``labels`` attributes. Prototype banks ride along and are EMA-updated by
    every training-mode forward pass. Returns new weights.
    """
    X, y = _unpack(data)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if hook.kind == "proximal" and hook.mu > 0 and global_ref is None:
        raise ValueError("proximal hook needs global_ref weights")
    params = {k: v.copy() for k, v in weights.params.items()}
    banks = {k: v.copy() for k, v in weights.banks.items()}
    trainable = [n for n in params if not any(n.startswith(f) for f in hook.frozen)]
    use_prox = hook.kind == "proximal" and hook.mu > 0
    rng = np.random.default_rng(seed)
    state = AdamState()
    current = ModelWeights(weights.config, params, banks)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = {n: Tensor(v, requires_grad=False) for n, v in current.params.items()}
            for n in trainable:
                leaves[n].requires_grad = True
            logits, new_banks = forward(current, X[idx], "train", params=leaves)
            loss = cross_entropy(logits, y[idx])
            if use_prox:
                penalty = None
                for n in trainable:
                    term = tsum(square(sub(leaves[n], global_ref.params[n])))
                    penalty = term if penalty is None else add(penalty, term)
                loss = add(loss, mul(penalty, 0.5 * hook.mu))
            backward(loss)
            if losses is not None:
                losses.append(float(loss.data))
            grads = {n: leaves[n].grad for n in trainable if leaves[n].grad is not None}
            new_params = adam_step(current.params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            current = ModelWeights(weights.config, new_params, new_banks)
    return current


def _unpack(data):
    if hasattr(data, "samples"):
        return np.asarray(data.samples), np.asarray(data.labels)
    X, y = data
    return np.asarray(X), np.asarray(y)


# ---------------------------------------------------------------- embeddings

def export_embeddings(weights: ModelWeights, data, block_index: int, mode: str = "infer",
                      path: str | Path | None = None, batch_size: int = 64):
    """Token-mean attention-input embeddings of one block, one row per sample.

    That is the ALP output for the ``alp`` variant and the first LayerNorm
    output for ``plain``. Banks are never committed, in either mode. When
    ``path`` is given the matrix is written as CSV with the label in the
    last column.
    """
    if not 0 <= block_index < weights.config.blocks:
        raise IndexError(f"block index {block_index} out of range [0, {weights.config.blocks})")
    X, y = _unpack(data)
    rows = []
    for start in range(0, len(X), batch_size):
        taps: dict[int, Tensor] = {}
        forward(weights, X[start:start + batch_size], mode, taps=taps)
        rows.append(taps[block_index].data.mean(axis=1))
    emb = np.concatenate(rows) if rows else np.zeros((0, weights.config.dim))
    if path is not None:
        header = ",".join([f"e{j}" for j in range(emb.shape[1])] + ["label"])
        table = np.column_stack([emb, y])
        np.savetxt(path, table, delimiter=",", header=header, comments="",
                   fmt=["%.10g"] * emb.shape[1] + ["%d"])
    return emb, y


# ---------------------------------------------------------------- weight files

def save_weights(path: str | Path, weights: ModelWeights, manifest: dict | None = None) -> None:
    """Write an ``.npz`` container: ``param/<name>``, ``bank/<name>`` and a JSON manifest.

    Banks are stored per block, local before global.
    """
    arrays = weight_arrays(weights)
    meta = {"format": WEIGHT_FORMAT_VERSION, "config": weights.config.to_dict(),
            "order": list(arrays), **(manifest or {})}
    write_npz(path, arrays, meta)


def weight_arrays(weights: ModelWeights, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {f"{prefix}param/{k}": v for k, v in weights.params.items()}
    for i in range(weights.config.blocks):
        for name in (local_bank_name(i), global_bank_name(i)):
            if name in weights.banks:
                arrays[f"{prefix}bank/{name}"] = weights.banks[name]
    return arrays


def weights_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], prefix: str = "") -> ModelWeights:
    params, banks = {}, {}
    for key, arr in arrays.items():
        if not key.startswith(prefix):
            continue
        group, name = key[len(prefix):].split("/", 1)
        if group == "param":
            params[name] = arr
        elif group == "bank":
            banks[name] = arr
    expected = [n for n, _ in _param_shapes(config)]
    if list(params) != expected:
        params = {n: params[n] for n in expected}
    return ModelWeights(config, params, banks)


def load_weights(path: str | Path) -> tuple[ModelWeights, dict]:
    arrays, meta = read_npz(path)
    if meta is None or meta.get("format") != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format {meta and meta.get('format')!r}")
    config = ModelConfig.from_dict(meta["config"])
    return weights_from_arrays(config, arrays), meta
