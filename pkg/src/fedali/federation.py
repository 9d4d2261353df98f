"""Round orchestration for FedAli and the baseline strategies.

One round: broadcast, local training on every participating client,
aggregation on the server, and byte accounting of what crossed the wire.
All randomness is derived from ``(seed, round, client id)`` so a round's
outcome does not depend on the strategy name or on worker scheduling.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import consolidate
from .data import Dataset
from .io import read_npz, write_npz
from .model import (BYTES_PER_VALUE, ModelConfig, ModelWeights, TrainConfig, TrainHook, _param_shapes,
                    global_bank_name, is_personal, local_bank_name, proximal, train_local, weight_arrays,
                    weights_from_arrays)

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "fedper", "fedali", "local", "centralized")
FEDERATED = ("fedavg", "fedprox", "fedper", "fedali")


class RoundAborted(RuntimeError):
    """A client failed; the round was discarded without partial aggregation."""


@dataclass(frozen=True)
class Strategy:
    name: str
    mu: float = 0.01  # fedprox only
    normalize_global: bool = True  # fedali only

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """``fedavg``, ``fedprox``, ``fedprox(0.1)``..."""
        m = re.fullmatch(r"\s*([a-z]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse strategy {text!r}")
        name, arg = m.groups()
        if arg is not None:
            if name != "fedprox":
                raise ValueError(f"strategy {name!r} takes no argument")
            return cls(name, mu=float(arg))
        return cls(name)

    def hook(self) -> TrainHook:
        return proximal(self.mu) if self.name == "fedprox" else TrainHook()

    @property
    def has_global_model(self) -> bool:
        return self.name in ("fedavg", "fedprox", "fedali", "centralized")


@dataclass
class ClientState:
    id: int
    train: Dataset
    test: Dataset
    weights: ModelWeights
    personal: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_c(self) -> int:
        return len(self.train)


@dataclass
class CommRecord:
    round: int
    client: int
    up_weights: int = 0
    up_protos: int = 0
    down_weights: int = 0
    down_protos: int = 0
    up_banks: tuple[str, ...] = ()
    down_banks: tuple[str, ...] = ()

    @property
    def bytes_up(self) -> int:
        return self.up_weights + self.up_protos

    @property
    def bytes_down(self) -> int:
        return self.down_weights + self.down_protos


@dataclass
class CommLedger:
    records: list[CommRecord] = field(default_factory=list)

    def round_records(self, r: int) -> list[CommRecord]:
        return [rec for rec in self.records if rec.round == r]

    def totals(self, r: int) -> tuple[int, int]:
        recs = self.round_records(r)
        return sum(x.bytes_up for x in recs), sum(x.bytes_down for x in recs)

    def rows(self) -> list[dict]:
        return [{"round": x.round, "client": x.client, "up_weights": x.up_weights, "up_protos": x.up_protos,
                 "down_weights": x.down_weights, "down_protos": x.down_protos} for x in self.records]


@dataclass
class RoundReport:
    round: int
    bytes_up: int
    bytes_down: int
    wall_clock: float = 0.0
    scores: dict | None = None
    checkpoint: str | None = None

    def comparable(self) -> dict:
        """Fields that must match between reruns (wall-clock excluded)."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class ServerState:
    round: int
    weights: ModelWeights
    strategy: Strategy
    history: list[RoundReport] = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass(frozen=True)
class CommCost:
    up_weights: int
    up_protos: int
    down_weights: int
    down_protos: int

    @property
    def up(self) -> int:
        return self.up_weights + self.up_protos

    @property
    def down(self) -> int:
        return self.down_weights + self.down_protos

    @property
    def total(self) -> int:
        return self.up + self.down


# ---------------------------------------------------------------- payloads

def _nbytes(arrays) -> int:
    return sum(int(np.size(a)) for a in arrays) * BYTES_PER_VALUE


def shared_names(strategy: Strategy, config: ModelConfig) -> list[str]:
    names = [n for n, _ in _param_shapes(config)]
    if strategy.name == "fedper":
        return [n for n in names if not is_personal(n)]
    return names


def comm_cost(strategy: Strategy | str, config: ModelConfig) -> CommCost:
    """Per-client, per-round byte counts derived from the parameter layout.

    FedAli sends weights plus local banks up and weights plus global banks
    down; FedPer leaves the personal head out; local and centralized training
    exchange nothing.
    """
    if isinstance(strategy, str):
        strategy = Strategy.parse(strategy)
    if strategy.name in ("local", "centralized"):
        return CommCost(0, 0, 0, 0)
    shapes = dict(_param_shapes(config))
    w = sum(int(np.prod(shapes[n])) for n in shared_names(strategy, config)) * BYTES_PER_VALUE
    bank = 0
    if strategy.name == "fedali" and config.alp:
        bank = config.dim * sum(config.prototype_schedule) * BYTES_PER_VALUE
    return CommCost(w, bank, w, bank)


# ---------------------------------------------------------------- aggregation

def aggregate_fedavg(client_params: Sequence[dict[str, np.ndarray]], n_c: Sequence[int],
                     names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Per-tensor convex combination with weights ``n_c / n``."""
    if not client_params:
        raise ValueError("nothing to aggregate")
    if len(client_params) != len(n_c):
        raise ValueError(f"{len(client_params)} clients but {len(n_c)} sizes")
    ref = list(client_params[0])
    for i, p in enumerate(client_params[1:], start=1):
        if list(p) != ref:
            missing = set(ref) ^ set(p)
            raise ValueError(f"client {i} parameter names differ from client 0: {sorted(missing)[:5]}")
    w = np.asarray(n_c, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("sample counts must be positive")
    w = w / w.sum()
    out = {}
    for name in names if names is not None else ref:
        acc = np.zeros(client_params[0][name].shape, dtype=np.float64)
        for wi, p in zip(w, client_params):
            acc += wi * p[name]
        out[name] = acc.astype(client_params[0][name].dtype)
    return out


def aggregate_fedali(client_weights: Sequence[ModelWeights], n_c: Sequence[int], normalize: bool = True,
                     names: Sequence[str] | None = None):
    """FedAvg over weights plus per-block K-means of the uploaded local banks.

    Returns ``(params, global_banks, kmeans_results)``.
    """
    params = aggregate_fedavg([w.params for w in client_weights], n_c, names)
    config = client_weights[0].config
    banks, fits = {}, []
    for i in range(config.blocks if config.alp else 0):
        name = local_bank_name(i)
        stack = [w.banks[name] for w in client_weights]
        shape = stack[0].shape
        for c, b in enumerate(stack):
            if b.shape != shape:
                raise ValueError(f"block {i}: client {c} bank shape {b.shape} != {shape}")
        fit = consolidate(stack, n_c, normalize=normalize)
        banks[global_bank_name(i)] = fit.centroids.astype(stack[0].dtype)
        fits.append(fit)
    return params, banks, fits


# ---------------------------------------------------------------- rounds

def client_seed(seed: int, round_: int, client_id: int) -> int:
    return int(np.random.SeedSequence([seed, round_, client_id]).generate_state(1)[0])


def _start_weights(server: ServerState, client: ClientState, strategy: Strategy) -> ModelWeights:
    g = server.weights
    if strategy.name == "local":
        return client.weights
    if strategy.name == "centralized":
        return g
    params = {k: v.copy() for k, v in g.params.items()}
    if strategy.name == "fedper":
        params.update({k: v.copy() for k, v in client.personal.items()})
    banks = {}
    for name, arr in g.banks.items():
        if name.endswith(".local"):
            own = client.weights.banks.get(name)
            banks[name] = (own if own is not None else arr).copy()
        else:
            banks[name] = arr.copy()
    return ModelWeights(g.config, params, banks)


def _payload(strategy: Strategy, start: ModelWeights, trained: ModelWeights, r: int, cid: int) -> CommRecord:
    if strategy.name in ("local", "centralized"):
        return CommRecord(r, cid)
    names = shared_names(strategy, trained.config)
    rec = CommRecord(r, cid, up_weights=_nbytes(trained.params[n] for n in names),
                     down_weights=_nbytes(start.params[n] for n in names))
    if strategy.name == "fedali":
        up = tuple(n for n in trained.banks if n.endswith(".local"))
        down = tuple(n for n in start.banks if n.endswith(".global"))
        rec.up_protos = _nbytes(trained.banks[n] for n in up)
        rec.down_protos = _nbytes(start.banks[n] for n in down)
        rec.up_banks, rec.down_banks = up, down
    return rec


def _train_job(args):
    start, data, cfg, ref, hook, seed = args
    return train_local(start, data, cfg, global_ref=ref, hook=hook, seed=seed)


def run_round(server: ServerState, clients: Sequence[ClientState], strategy: Strategy | None = None,
              train_cfg: TrainConfig = TrainConfig(), seed: int = 0, participation: float = 1.0,
              workers: int = 1) -> ServerState:
    """Run one synchronous round; client weights are replaced in place on success."""
    strategy = strategy or server.strategy
    r = server.round + 1
    t0 = time.perf_counter()
    active = list(clients)
    if participation < 1.0:
        rng = np.random.default_rng([seed, r, 7919])
        k = max(1, int(round(participation * len(active))))
        pick = np.sort(rng.choice(len(active), size=k, replace=False))
        active = [active[i] for i in pick]

    jobs, starts = [], []
    for c in active:
        start = _start_weights(server, c, strategy)
        starts.append(start)
        jobs.append((start, c.train, train_cfg, server.weights, strategy.hook(), client_seed(seed, r, c.id)))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                trained = list(pool.map(_train_job, jobs))
        else:
            trained = [_train_job(j) for j in jobs]
    except Exception as exc:
        raise RoundAborted(f"round {r} aborted: {exc}") from exc

    ledger = CommLedger(list(server.ledger.records))
    for c, start, w in zip(active, starts, trained):
        c.weights = w
        if strategy.name == "fedper":
            c.personal = {k: v.copy() for k, v in w.params.items() if is_personal(k)}
        ledger.records.append(_payload(strategy, start, w, r, c.id))

    g = server.weights
    n_c = [c.n_c for c in active]
    if strategy.name == "local":
        new_global = g
    elif strategy.name == "centralized":
        new_global = trained[0]
    elif strategy.name == "fedali" and g.config.alp:
        params, banks, _ = aggregate_fedali(trained, n_c, normalize=strategy.normalize_global)
        merged = dict(g.banks)
        merged.update(banks)
        new_global = ModelWeights(g.config, params, merged)
    else:
        params = dict(g.params)
        params.update(aggregate_fedavg([w.params for w in trained], n_c, shared_names(strategy, g.config)))
        new_global = ModelWeights(g.config, params, dict(g.banks))

    up, down = ledger.totals(r)
    report = RoundReport(r, up, down, wall_clock=time.perf_counter() - t0)
    return ServerState(r, new_global, strategy, server.history + [report], ledger)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, server: ServerState, clients: Sequence[ClientState],
                    manifest: dict | None = None) -> None:
    """Server weights, every client's weights and personal layers, history and ledger."""
    arrays = weight_arrays(server.weights, "server/")
    for c in clients:
        arrays.update(weight_arrays(c.weights, f"client{c.id}/"))
        arrays.update({f"client{c.id}/personal/{k}": v for k, v in c.personal.items()})
    meta = {
        "round": server.round,
        "strategy": asdict(server.strategy),
        "config": server.weights.config.to_dict(),
        "clients": [c.id for c in clients],
        "history": [h.comparable() for h in server.history],
        "ledger": [asdict(rec) for rec in server.ledger.records],
        **(manifest or {}),
    }
    write_npz(path, arrays, meta)


def load_checkpoint(path: str | Path):
    """Returns ``(server_state, {client_id: (weights, personal)}, manifest)``."""
    arrays, meta = read_npz(path)
    config = ModelConfig.from_dict(meta["config"])
    server_w = weights_from_arrays(config, arrays, "server/")
    history = [RoundReport(**h) for h in meta["history"]]
    ledger = CommLedger([CommRecord(**{**rec, "up_banks": tuple(rec["up_banks"]),
                                       "down_banks": tuple(rec["down_banks"])}) for rec in meta["ledger"]])
    server = ServerState(meta["round"], server_w, Strategy(**meta["strategy"]), history, ledger)
    clients = {}
    for cid in meta["clients"]:
        pre = f"client{cid}/"
        w = weights_from_arrays(config, arrays, pre)
        personal = {k[len(pre + "personal/"):]: v for k, v in arrays.items() if k.startswith(pre + "personal/")}
        clients[cid] = (w, personal)
    return server, clients, meta
