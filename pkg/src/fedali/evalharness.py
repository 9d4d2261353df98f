"""Scores, checkpoint selection and the experiment runner.

Scores are percentages:

* personalization: each client model on its own test set, mean +- population std;
* generalization: each client model averaged over every client's test set
  (its own included), then mean +- std over clients;
* global: the server model on the union of all test sets.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .data import Dataset, SynthConfig, load_windows, save_dataset, stratified_split, synth_generate
from .federation import (ClientState, ServerState, Strategy, comm_cost, load_checkpoint, run_round,
                         save_checkpoint)
from .io import file_sha256, write_json, write_npz
from .model import (ModelConfig, ModelWeights, TrainConfig, build, global_bank_name, local_bank_name,
                    predict)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics

def macro_f1(predictions, labels, classes: int | None = None) -> float:
    """Unweighted mean per-class F1, in percent.

    Only classes present in ``labels`` or ``predictions`` take part; a class
    that never appears in either is excluded rather than scored 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    if true.size == 0:
        raise ValueError("macro_f1 of an empty set")
    present = np.union1d(np.unique(true), np.unique(pred))
    if classes is not None and present.max() >= classes:
        raise ValueError(f"class index {present.max()} outside declared {classes} classes")
    f1s = []
    for c in present:
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return 100.0 * float(np.mean(f1s))


def accuracy(predictions, labels) -> float:
    return 100.0 * float(np.mean(np.asarray(predictions) == np.asarray(labels)))


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    per_client: tuple[float, ...] = ()

    def __str__(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"


def _mean(values) -> float:
    # shifted so that a run of identical values averages back to itself exactly
    v = np.asarray(values, dtype=np.float64)
    return float(v[0] + (v - v[0]).mean())


def _summary(values) -> Summary:
    v = np.asarray(values, dtype=np.float64)
    return Summary(_mean(v), float(v.std()), tuple(float(x) for x in v))


def cross_predictions(models: Sequence[ModelWeights], tests: Sequence[Dataset], batch_size=64):
    """``preds[i][j]``: predictions of model ``i`` on test set ``j``."""
    return [[predict(m, t.samples, batch_size) for t in tests] for m in models]


def personalization_score(preds, tests: Sequence[Dataset], classes: int | None = None) -> Summary:
    """Diagonal of the cross-prediction matrix; empty test sets are skipped."""
    scores = []
    for i, t in enumerate(tests):
        if len(t) == 0:
            log.warning("client %d has an empty test set; excluded", i)
            continue
        scores.append(macro_f1(preds[i][i], t.labels, classes))
    return _summary(scores)


def generalization_score(preds, tests: Sequence[Dataset], classes: int | None = None) -> Summary:
    rows = []
    usable = [j for j, t in enumerate(tests) if len(t)]
    for i in range(len(preds)):
        if len(tests[i]) == 0:
            continue
        rows.append(_mean([macro_f1(preds[i][j], tests[j].labels, classes) for j in usable]))
    return _summary(rows)


def select_checkpoint(history: Sequence[tuple[int, float]]) -> int:
    """Round with the highest mean accuracy; earliest round wins ties."""
    if not history:
        raise ValueError("no evaluated rounds")
    best_round, best = history[0]
    for r, acc in history[1:]:
        if acc > best:
            best_round, best = r, acc
    return best_round


@dataclass
class ScoreReport:
    personalization: Summary | None
    generalization: Summary | None
    global_score: float | None
    round: int | None
    global_round: int | None = None

    def to_dict(self) -> dict:
        def s(x):
            return None if x is None else {"mean": x.mean, "std": x.std, "per_client": list(x.per_client)}
        return {"personalization": s(self.personalization), "generalization": s(self.generalization),
                "global": self.global_score, "round": self.round, "global_round": self.global_round}


# ---------------------------------------------------------------- configuration

class ConfigError(ValueError):
    pass


@dataclass
class StrategySpec:
    label: str
    strategy: Strategy
    fedali: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    strategies: list[StrategySpec] = field(default_factory=list)
    rounds: int = 40
    eval_every: int = 5
    checkpoint_every: int = 0
    participation: float = 1.0
    workers: int = 1
    precision: str = "float32"
    eval_batch: int = 64
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    fedali: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    fedprox_mu: float = 0.01
    source: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()[:16]


_FEDALI_KEYS = {"prototypes", "beta", "gamma", "epsilon", "sinkhorn_iters", "use_glu", "global_prototypes",
                "local_at_inference", "metric", "normalize_global"}
_FEDALI_DEFAULTS = {"prototypes": [32, 16], "beta": 0.2, "gamma": 0.999, "epsilon": 0.05, "sinkhorn_iters": 3,
                    "use_glu": True, "global_prototypes": True, "local_at_inference": True,
                    "metric": "wasserstein", "normalize_global": True}
_TRAIN_DEFAULTS = {"epochs": 5, "batch_size": 64, "lr": 1e-4}
_MODEL_DEFAULTS = {"blocks": 2, "dim": 32, "heads": 2, "mlp": 64, "head_hidden": 64}
_SYNTH_KEYS = set(SynthConfig.__dataclass_fields__) - {"seed"}
_TOP_KEYS = {"name", "seeds", "strategies", "rounds", "eval_every", "checkpoint_every", "participation",
             "workers", "precision", "eval_batch", "data", "model", "fedali", "train", "fedprox"}


def _line_index(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines for diagnostics."""
    out: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                out[p] = v.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, ())
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a YAML experiment file; raises :class:`ConfigError`
    naming the offending field and line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(text, str(path))


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{origin}: YAML error: {exc}") from None
    lines = _line_index(text)

    def fail(path: tuple, msg: str):
        where = f"line {lines[path]}, " if path in lines else ""
        raise ConfigError(f"{origin}: {where}field '{'.'.join(map(str, path))}': {msg}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for k in raw:
        if k not in _TOP_KEYS:
            fail((k,), f"unknown field (expected one of {sorted(_TOP_KEYS)})")

    def sub(key, defaults, allowed):
        d = raw.get(key) or {}
        if not isinstance(d, dict):
            fail((key,), "must be a mapping")
        for k in d:
            if k not in allowed:
                fail((key, k), f"unknown field (expected one of {sorted(allowed)})")
        return {**defaults, **d}

    cfg = ExperimentConfig(source=text)
    cfg.name = str(raw.get("name", cfg.name))
    for key, typ in (("rounds", int), ("eval_every", int), ("checkpoint_every", int), ("workers", int),
                     ("eval_batch", int), ("participation", float)):
        if key in raw:
            try:
                setattr(cfg, key, typ(raw[key]))
            except (TypeError, ValueError):
                fail((key,), f"expected {typ.__name__}, got {raw[key]!r}")
    if cfg.rounds < 1:
        fail(("rounds",), "must be >= 1")
    if cfg.eval_every < 1:
        fail(("eval_every",), "must be >= 1")
    if not 0 < cfg.participation <= 1:
        fail(("participation",), "must lie in (0, 1]")
    cfg.precision = str(raw.get("precision", cfg.precision))
    if cfg.precision not in ("float32", "float64"):
        fail(("precision",), "must be float32 or float64")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds) or not seeds:
        fail(("seeds",), "must be a non-empty list of integers")
    cfg.seeds = seeds

    cfg.fedali = sub("fedali", _FEDALI_DEFAULTS, _FEDALI_KEYS)
    cfg.train = sub("train", _TRAIN_DEFAULTS, set(_TRAIN_DEFAULTS))
    cfg.model = sub("model", _MODEL_DEFAULTS, set(_MODEL_DEFAULTS))
    fedprox = sub("fedprox", {"mu": 0.01}, {"mu"})
    cfg.fedprox_mu = float(fedprox["mu"])

    data = raw.get("data") or {}
    if not isinstance(data, dict):
        fail(("data",), "must be a mapping")
    source = data.get("source", "synthetic")
    if source not in ("synthetic", "windows"):
        fail(("data", "source"), f"must be 'synthetic' or 'windows', got {source!r}")
    for k in data:
        if k not in ("source", "synthetic", "windows", "split"):
            fail(("data", k), "unknown field")
    synth = data.get("synthetic") or {}
    for k in synth:
        if k not in _SYNTH_KEYS:
            fail(("data", "synthetic", k), f"unknown field (expected one of {sorted(_SYNTH_KEYS)})")
    windows = data.get("windows") or {}
    if source == "windows" and not windows.get("paths"):
        fail(("data", "windows"), "needs a non-empty 'paths' list (one file per client)")
    cfg.data = {"source": source, "synthetic": synth, "windows": windows, "split": float(data.get("split", 0.8))}

    items = raw.get("strategies", ["fedavg", "fedali"])
    if not isinstance(items, list) or not items:
        fail(("strategies",), "must be a non-empty list")
    specs = []
    for i, item in enumerate(items):
        if isinstance(item, str):
            name, label, overrides = item, item, {}
        elif isinstance(item, dict) and "name" in item:
            name = item["name"]
            label = item.get("label", name)
            overrides = item.get("fedali") or {}
            for k in overrides:
                if k not in _FEDALI_KEYS:
                    fail(("strategies", i), f"unknown fedali override {k!r}")
        else:
            fail(("strategies", i), "expected a strategy name or a mapping with 'name'")
        try:
            strat = Strategy.parse(str(name))
        except ValueError as exc:
            fail(("strategies", i), str(exc))
        if strat.name == "fedprox" and "(" not in str(name):
            strat = replace(strat, mu=cfg.fedprox_mu)
        merged = {**cfg.fedali, **overrides}
        if strat.name == "fedali":
            strat = replace(strat, normalize_global=bool(merged["normalize_global"]))
        specs.append(StrategySpec(label, strat, merged))
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        fail(("strategies",), f"duplicate labels {labels}")
    cfg.strategies = specs

    try:
        build_model_config(cfg, specs[0])
        for s in specs:
            build_model_config(cfg, s)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        fail(("model",), str(exc))
    return cfg


def build_model_config(cfg: ExperimentConfig, spec: StrategySpec, seq_len=None, channels=None,
                       classes=None) -> ModelConfig:
    synth = SynthConfig(**cfg.data["synthetic"]) if cfg.data["source"] == "synthetic" else None
    kw = dict(cfg.model)
    kw["seq_len"] = seq_len or (synth.seq_len if synth else int(cfg.data["windows"].get("window", 128)))
    kw["channels"] = channels or (synth.channels if synth else 6)
    kw["classes"] = classes or (synth.classes if synth else 6)
    blocks = kw.pop("blocks")
    if spec.strategy.name != "fedali":
        return ModelConfig(blocks=blocks, **kw)
    f = spec.fedali
    schedule = list(f["prototypes"])
    if len(schedule) != blocks:
        raise ValueError(f"fedali.prototypes has {len(schedule)} entries for {blocks} blocks")
    return ModelConfig.with_prototypes(schedule, alp_beta=float(f["beta"]), alp_gamma=float(f["gamma"]),
                                       alp_epsilon=float(f["epsilon"]), alp_sinkhorn_iters=int(f["sinkhorn_iters"]),
                                       alp_use_glu=bool(f["use_glu"]), alp_use_global=bool(f["global_prototypes"]),
                                       alp_local_at_inference=bool(f["local_at_inference"]),
                                       alp_metric=str(f["metric"]), **kw)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]))


# ---------------------------------------------------------------- client data

def client_datasets(cfg: ExperimentConfig, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Per-client (train, test) pairs for one seed."""
    d = cfg.data
    if d["source"] == "synthetic":
        parts = synth_generate(SynthConfig(**{**d["synthetic"], "seed": seed}))
    else:
        w = d["windows"]
        parts = [load_windows(p, int(w.get("window", 128)), float(w.get("overlap", 0.5))) for p in w["paths"]]
    return [stratified_split(p, d["split"], seed=seed * 100_003 + i) for i, p in enumerate(parts)]


# ---------------------------------------------------------------- runner

@dataclass
class EvalPoint:
    round: int
    accuracy: float
    personalization: Summary | None
    generalization: Summary | None
    global_accuracy: float | None
    global_score: float | None
    preds: list | None = None
    global_preds: np.ndarray | None = None


def server_view(weights: ModelWeights) -> ModelWeights:
    """The server holds no local banks of its own, so its model answers with
    the consolidated global banks in the local slots."""
    if not weights.config.alp:
        return weights
    banks = dict(weights.banks)
    for i in range(weights.config.blocks):
        banks[local_bank_name(i)] = weights.banks[global_bank_name(i)]
    return ModelWeights(weights.config, weights.params, banks)


def evaluate(server: ServerState, clients: Sequence[ClientState], tests: Sequence[Dataset], classes: int,
             batch_size: int = 64) -> EvalPoint:
    strategy = server.strategy
    union = Dataset.union(tests)
    pers = gen = None
    acc = float("nan")
    preds = None
    if strategy.name != "centralized":
        preds = cross_predictions([c.weights for c in clients], tests, batch_size)
        pers = personalization_score(preds, tests, classes)
        gen = generalization_score(preds, tests, classes)
        acc = float(np.mean([accuracy(preds[i][i], t.labels) for i, t in enumerate(tests) if len(t)]))
    g_acc = g_score = g_preds = None
    if strategy.has_global_model:
        g_preds = predict(server_view(server.weights), union.samples, batch_size)
        g_acc = accuracy(g_preds, union.labels)
        g_score = macro_f1(g_preds, union.labels, classes)
        if strategy.name == "centralized":
            acc = g_acc
    return EvalPoint(server.round, acc, pers, gen, g_acc, g_score, preds, g_preds)


def report_from(points: Sequence[EvalPoint], strategy: Strategy) -> tuple[ScoreReport, EvalPoint, EvalPoint | None]:
    chosen = select_checkpoint([(p.round, p.accuracy) for p in points])
    best = next(p for p in points if p.round == chosen)
    g_best = None
    if strategy.has_global_model:
        g_round = select_checkpoint([(p.round, p.global_accuracy) for p in points])
        g_best = next(p for p in points if p.round == g_round)
    rep = ScoreReport(best.personalization, best.generalization, g_best.global_score if g_best else None,
                      None if strategy.name == "centralized" else chosen, g_best.round if g_best else None)
    return rep, best, g_best


def _setup(cfg: ExperimentConfig, spec: StrategySpec, seed: int, pairs):
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    sample = pairs[0][0]
    classes = int(max(max(tr.labels.max(initial=0), te.labels.max(initial=0)) for tr, te in pairs)) + 1
    if cfg.data["source"] == "synthetic":
        classes = SynthConfig(**cfg.data["synthetic"]).classes
    mcfg = build_model_config(cfg, spec, seq_len=sample.samples.shape[1], channels=sample.samples.shape[2],
                              classes=classes)
    init = build(mcfg, seed, dtype)
    if spec.strategy.name == "centralized":
        union = Dataset.union(tr for tr, _ in pairs)
        clients = [ClientState(0, union.subset(np.arange(len(union))), Dataset.union(te for _, te in pairs),
                               init.copy())]
    else:
        clients = [ClientState(i, tr, te, init.copy()) for i, (tr, te) in enumerate(pairs)]
    for c in clients:
        c.train = Dataset(c.train.samples.astype(dtype), c.train.labels, c.train.provenance)
    return mcfg, init, clients, classes


def run_strategy(cfg: ExperimentConfig, spec: StrategySpec, seed: int, out_dir: Path | None = None,
                 resume: str | Path | None = None, pairs=None) -> dict[str, Any]:
    """Train one strategy for one seed; write artifacts when ``out_dir`` is set."""
    pairs = pairs if pairs is not None else client_datasets(cfg, seed)
    tests = [te for _, te in pairs]
    mcfg, init, clients, classes = _setup(cfg, spec, seed, pairs)
    server = ServerState(0, init, spec.strategy)
    points: list[EvalPoint] = []
    if resume is not None:
        server, saved, meta = load_checkpoint(resume)
        for c in clients:
            c.weights, c.personal = saved[c.id]
        points = [_point_from_dict(p) for p in meta.get("points", [])]
    tcfg = train_config(cfg)
    ckpt_dir = out_dir / "checkpoints" if out_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    while server.round < cfg.rounds:
        server = run_round(server, clients, spec.strategy, tcfg, seed=seed, participation=cfg.participation,
                           workers=cfg.workers)
        r = server.round
        if r % cfg.eval_every == 0 or r == cfg.rounds:
            pt = evaluate(server, clients, tests, classes, cfg.eval_batch)
            points.append(pt)
            server.history[-1].scores = _point_dict(pt)
            log.info("%s seed=%d round=%d acc=%.2f pers=%s gen=%s global=%s", spec.label, seed, r, pt.accuracy,
                     pt.personalization, pt.generalization, pt.global_score)
        if ckpt_dir and (r == cfg.rounds or (cfg.checkpoint_every and r % cfg.checkpoint_every == 0)):
            path = ckpt_dir / f"round_{r:04d}.npz"
            server.history[-1].checkpoint = path.name
            save_checkpoint(path, server, clients, {"seed": seed, "label": spec.label,
                                                    "config_digest": cfg.digest(),
                                                    "points": [_point_dict(p) for p in points]})
    elapsed = time.perf_counter() - t_start
    report, best, g_best = report_from(points, spec.strategy)
    result = {"report": report, "points": points, "server": server, "clients": clients, "seconds": elapsed,
              "best": best, "global_best": g_best, "model_config": mcfg}
    if out_dir is not None:
        _write_artifacts(out_dir, cfg, spec, seed, result, tests)
    return result


def _point_dict(p: EvalPoint) -> dict:
    def s(x):
        return None if x is None else {"mean": x.mean, "std": x.std, "per_client": list(x.per_client)}
    return {"round": p.round, "accuracy": p.accuracy, "personalization": s(p.personalization),
            "generalization": s(p.generalization), "global_accuracy": p.global_accuracy,
            "global_score": p.global_score}


def _point_from_dict(d: dict) -> EvalPoint:
    def s(x):
        return None if x is None else Summary(x["mean"], x["std"], tuple(x["per_client"]))
    return EvalPoint(d["round"], d["accuracy"], s(d["personalization"]), s(d["generalization"]),
                     d["global_accuracy"], d["global_score"])


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def _write_artifacts(out: Path, cfg: ExperimentConfig, spec: StrategySpec, seed: int, result, tests):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy", "personalization", "personalization_std", "generalization",
                    "generalization_std", "global_accuracy", "global"])
        for p in result["points"]:
            w.writerow([p.round, _fmt(p.accuracy),
                        _fmt(p.personalization and p.personalization.mean),
                        _fmt(p.personalization and p.personalization.std),
                        _fmt(p.generalization and p.generalization.mean),
                        _fmt(p.generalization and p.generalization.std),
                        _fmt(p.global_accuracy), _fmt(p.global_score)])
    server: ServerState = result["server"]
    with open(out / "ledger.csv", "w", newline="") as fh:
        rows = server.ledger.rows()
        w = csv.DictWriter(fh, fieldnames=["round", "client", "up_weights", "up_protos", "down_weights",
                                           "down_protos"])
        w.writeheader()
        w.writerows(rows)
    write_json(out / "scores.json", {"label": spec.label, "strategy": spec.strategy.name, "seed": seed,
                                     **result["report"].to_dict()})
    cost = comm_cost(spec.strategy, result["model_config"])
    write_json(out / "manifest.json", {
        "label": spec.label, "strategy": asdict(spec.strategy), "seed": seed, "config_digest": cfg.digest(),
        "rounds": cfg.rounds, "model": result["model_config"].to_dict(), "train": cfg.train,
        "optimizer": {"name": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "comm_cost_per_client": asdict(cost), "clients": len(result["clients"]),
        "history": [h.comparable() for h in server.history],
    })
    arrays = {}
    best = result["best"]
    if best.preds is not None:
        for i, row in enumerate(best.preds):
            for j, p in enumerate(row):
                arrays[f"pred_{i}_{j}"] = p
        for j, t in enumerate(tests):
            arrays[f"labels_{j}"] = t.labels
    g_best = result["global_best"]
    if g_best is not None:
        arrays["global_pred"] = g_best.global_preds
        arrays["global_labels"] = Dataset.union(tests).labels
    write_npz(out / "predictions.npz", arrays, {"round": best.round,
                                                "global_round": g_best.round if g_best else None})


def run_experiment(config_path: str | Path, out_dir: str | Path, seeds: Sequence[int] | None = None,
                   strategies: Sequence[str] | None = None, resume: str | Path | None = None) -> Path:
    """Run every (strategy, seed) pair of a config and write the artifacts tree.

    Layout: ``<out>/<label>/seed<k>/{curve.csv, scores.json, ledger.csv,
    manifest.json, predictions.npz, checkpoints/}``, ``<out>/data/seed<k>/``
    with the client test sets, ``<out>/summary.json``, ``<out>/checksums.json``
    (deterministic files only) and ``<out>/timing.json``.
    """
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = cfg.strategies
    if strategies:
        by_label = {s.label: s for s in specs}
        specs = []
        for name in strategies:
            if name in by_label:
                specs.append(by_label[name])
            else:
                try:
                    st = Strategy.parse(name)
                except ValueError as exc:
                    raise ConfigError(f"--strategies: {exc}") from None
                if st.name == "fedprox" and "(" not in name:
                    st = replace(st, mu=cfg.fedprox_mu)
                specs.append(StrategySpec(name, st, dict(cfg.fedali)))
    seeds = list(seeds) if seeds is not None else cfg.seeds
    summary, timing = {}, {}
    for seed in seeds:
        pairs = client_datasets(cfg, seed)
        ddir = out / "data" / f"seed{seed}"
        ddir.mkdir(parents=True, exist_ok=True)
        for i, (_, te) in enumerate(pairs):
            save_dataset(ddir / f"client_{i:03d}_test.npz", te)
        for spec in specs:
            sdir = out / spec.label / f"seed{seed}"
            res = run_strategy(cfg, spec, seed, sdir, resume=resume, pairs=pairs)
            summary.setdefault(spec.label, {})[str(seed)] = res["report"].to_dict()
            timing[f"{spec.label}/seed{seed}"] = res["seconds"]
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", timing)
    checksums = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in ("checksums.json", "timing.json"):
            checksums[str(p.relative_to(out))] = file_sha256(p)
    write_json(out / "checksums.json", checksums)
    return out
