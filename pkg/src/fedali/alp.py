"""Alignment-with-prototypes layer.

Training mode matches tokens against the concatenated ``[local | global]``
banks, aligns tokens with their hard-assigned global prototypes and returns
an EMA-updated local bank. Inference mode matches against the local bank
only and never mutates anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transport
from .numerics import Tensor, add, glu_apply, l2_normalize, mul, reshape

METRICS = ("wasserstein", "cosine", "euclidean")


@dataclass
class PrototypeBank:
    vectors: np.ndarray  # [G, d]
    role: str = "local"
    gamma: float | None = None

    def __post_init__(self):
        if self.role not in ("local", "global"):
            raise ValueError(f"role must be 'local' or 'global', got {self.role!r}")
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError(f"bank must be [G, d], got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("bank contains non-finite values")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class AlpConfig:
    G: int
    beta: float = 0.2
    gamma: float = 0.999
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    use_glu: bool = True
    use_global: bool = True
    local_at_inference: bool = True
    metric: str = "wasserstein"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.sinkhorn_iters < 1:
            raise ValueError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        if self.G < 1:
            raise ValueError(f"G must be >= 1, got {self.G}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")


def init_bank(G: int, d: int, rng: np.random.Generator, role="local", gamma=None, dtype=np.float64):
    """Gaussian rows projected onto the unit sphere."""
    v = rng.standard_normal((G, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PrototypeBank(v.astype(dtype), role=role, gamma=gamma)


def merge_batch(x: Tensor) -> Tensor:
    """[B, Z, d] -> [B*Z, d], row-major (batch-outer)."""
    if x.ndim != 3:
        raise ValueError(f"expected [B, Z, d], got shape {x.shape}")
    B, Z, d = x.shape
    return reshape(x, (B * Z, d))


def restore(x: Tensor, B: int, Z: int) -> Tensor:
    n, d = x.shape
    if n != B * Z:
        raise ValueError(f"cannot restore {n} rows into B={B}, Z={Z}")
    return reshape(x, (B, Z, d))


def ema_update(P: np.ndarray, xbar: np.ndarray, gamma: float) -> np.ndarray:
    """``gamma * P + (1 - gamma) * xbar``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    P = np.asarray(P)
    xbar = np.asarray(xbar)
    if P.shape != xbar.shape:
        raise ValueError(f"shape mismatch: bank {P.shape}, targets {xbar.shape}")
    if gamma == 1.0:
        return P.copy()
    if gamma == 0.0:
        return xbar.astype(P.dtype, copy=True)
    return (gamma * P + (1.0 - gamma) * xbar).astype(P.dtype, copy=False)


def _scores(x: np.ndarray, protos: np.ndarray, cfg: AlpConfig) -> transport.TransportPlan:
    if cfg.metric == "wasserstein":
        return transport.transport_plan(x, protos, cfg.epsilon, cfg.sinkhorn_iters)
    return transport.direct_scores(x, protos, cfg.metric, cfg.epsilon)


def _align(xm: Tensor, matched: np.ndarray, glu, cfg: AlpConfig, B: int, Z: int) -> Tensor:
    if cfg.beta == 0.0:
        blended = xm
    else:
        if cfg.use_glu:
            W, b = glu
            p_glu = glu_apply(Tensor(matched), W, b)
        else:
            p_glu = Tensor(matched)
        blended = add(mul(p_glu, cfg.beta), mul(xm, 1.0 - cfg.beta))
    return l2_normalize(restore(blended, B, Z), axis=-1)


def alp_forward_train(x: Tensor, local: PrototypeBank, global_: PrototypeBank | None, glu,
                      cfg: AlpConfig) -> tuple[Tensor, PrototypeBank]:
    """Training-mode pass; returns aligned tokens and the updated local bank.

    ``glu`` is a ``(W, b)`` pair of Tensors (ignored when ``cfg.use_glu`` is
    false). The input bank objects are left untouched.
    """
    B, Z, d = x.shape
    xm = merge_batch(x)
    xd = xm.data
    G = local.size
    if cfg.use_global:
        if global_ is None:
            raise ValueError("training mode needs a global prototype bank")
        if global_.vectors.shape != local.vectors.shape:
            raise ValueError(f"bank shapes differ: local {local.vectors.shape}, global {global_.vectors.shape}")
        plan = _scores(xd, np.concatenate([local.vectors, global_.vectors]), cfg)
        o_local, o_global = plan.columns(0, G), plan.columns(G, 2 * G)
        matched = global_.vectors[transport.hard_assign(o_global)]
    else:
        o_local = _scores(xd, local.vectors, cfg)
        matched = local.vectors[transport.hard_assign(o_local)]

    out = _align(xm, matched, glu, cfg, B, Z)

    k = transport.coverage_k(B * Z, G)
    xbar = transport.topk_targets(o_local.matrix.T, xd, k)
    gamma = cfg.gamma if local.gamma is None else local.gamma
    new_local = PrototypeBank(ema_update(local.vectors, xbar, gamma), role="local", gamma=local.gamma)
    return out, new_local


def alp_forward_infer(x: Tensor, local: PrototypeBank, glu, cfg: AlpConfig,
                      global_: PrototypeBank | None = None) -> Tensor:
    """Inference-mode pass against the local bank (or the global bank when
    ``cfg.local_at_inference`` is false). Pure: no bank is modified."""
    B, Z, d = x.shape
    xm = merge_batch(x)
    bank = local
    if not cfg.local_at_inference:
        if global_ is None:
            raise ValueError("local_at_inference=False needs a global bank")
        bank = global_
    plan = _scores(xm.data, bank.vectors, cfg)
    matched = bank.vectors[transport.hard_assign(plan)]
    return _align(xm, matched, glu, cfg, B, Z)
