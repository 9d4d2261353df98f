"""Non-IID client datasets: synthetic HAR-like sequences, partitioning, splits, ingestion.

Ingestion container (``load_windows``)
--------------------------------------
Either a ``.npz`` holding pre-windowed ``samples`` ``[N, Z, C]`` and integer
``labels`` ``[N]``, or a delimited text stream: one header row naming the
columns, then one row per time step. The header must contain a ``label``
column; an optional ``device`` column splits the rows into independent
streams. Every other column is a sensor channel, in header order.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io import write_npz

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass
class Dataset:
    samples: np.ndarray  # [N, Z, C]
    labels: np.ndarray  # [N]
    provenance: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.provenance)

    def class_counts(self, classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=classes)

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.samples).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    @staticmethod
    def union(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(np.concatenate([p.samples for p in parts]), np.concatenate([p.labels for p in parts]),
                       "union")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 6
    channels: int = 6
    seq_len: int = 16
    clients: int = 10
    samples_min: int = 80
    samples_max: int = 160
    alpha: float = 0.3
    gain_spread: float = 0.5  # client channel gains ~ exp(U(-s, s))
    max_rotation: float = np.pi  # radians, per 3-axis channel group
    noise: float = 0.3
    client_noise: float = 0.2  # extra per-client noise spread
    phase_jitter: float = 0.5
    min_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.clients < 2:
            raise ValueError(f"need at least 2 clients, got {self.clients}")
        if self.samples_min < 1 or self.samples_max < self.samples_min:
            raise ValueError("need 1 <= samples_min <= samples_max")
        if self.min_classes > self.classes:
            raise ValueError("min_classes cannot exceed classes")


def _rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    theta = rng.uniform(-max_angle, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def _class_templates(cfg: SynthConfig, rng: np.random.Generator):
    freqs = rng.uniform(0.5, 4.0, size=(cfg.classes, cfg.channels))
    amps = rng.uniform(0.5, 1.5, size=(cfg.classes, cfg.channels))
    phases = rng.uniform(0, 2 * np.pi, size=(cfg.classes, cfg.channels))
    offsets = rng.normal(0, 0.5, size=(cfg.classes, cfg.channels))
    return freqs, amps, phases, offsets


def _draw_labels(cfg: SynthConfig, crng: np.random.Generator, client: int, max_retries: int):
    n = int(crng.integers(cfg.samples_min, cfg.samples_max + 1))
    for _ in range(max_retries):
        props = crng.dirichlet(np.full(cfg.classes, cfg.alpha))
        counts = crng.multinomial(n, props)
        if (counts > 0).sum() >= min(cfg.min_classes, n):
            return props, counts
    raise RuntimeError(f"client {client}: could not draw >= {cfg.min_classes} classes "
                       f"in {max_retries} tries (alpha={cfg.alpha})")


def client_label_draws(cfg: SynthConfig, max_retries: int = 100) -> list[tuple[np.ndarray, np.ndarray]]:
    """The ``(class proportions, class counts)`` pair drawn for each client."""
    return [_draw_labels(cfg, np.random.default_rng([cfg.seed, c]), c, max_retries)
            for c in range(cfg.clients)]


def synth_generate(cfg: SynthConfig, max_retries: int = 100) -> list[Dataset]:
    """Per-client datasets with feature shift (gains, rotations, noise) and
    Dirichlet label shift. Deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    freqs, amps, phases, offsets = _class_templates(cfg, rng)
    t = np.arange(cfg.seq_len) / cfg.seq_len * 2 * np.pi
    groups = cfg.channels // 3
    out = []
    for c in range(cfg.clients):
        crng = np.random.default_rng([cfg.seed, c])
        _, counts = _draw_labels(cfg, crng, c, max_retries)
        n = int(counts.sum())
        labels = np.repeat(np.arange(cfg.classes), counts)
        labels = labels[crng.permutation(n)]

        jitter = crng.normal(0, cfg.phase_jitter, size=(n, cfg.channels))
        scale = crng.uniform(0.8, 1.2, size=(n, cfg.channels))
        arg = freqs[labels][:, None, :] * t[None, :, None] + phases[labels][:, None, :] + jitter[:, None, :]
        x = amps[labels][:, None, :] * scale[:, None, :] * np.sin(arg) + offsets[labels][:, None, :]

        gains = np.exp(crng.uniform(-cfg.gain_spread, cfg.gain_spread, size=cfg.channels))
        x = x * gains
        for g in range(groups):
            R = _rotation(crng, cfg.max_rotation)
            x[..., 3 * g:3 * g + 3] = x[..., 3 * g:3 * g + 3] @ R.T
        sigma = cfg.noise * (1.0 + cfg.client_noise * crng.uniform(-1, 1))
        x = x + crng.normal(0, sigma, size=x.shape)
        out.append(Dataset(x, labels, provenance=f"synthetic:{_cfg_digest(cfg)}:client{c}"))
    return out


def _cfg_digest(cfg) -> str:
    return hashlib.sha256(repr(sorted(asdict(cfg).items())).encode()).hexdigest()[:12]


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int = 0) -> list[np.ndarray]:
    """Split each class's indices across clients by a Dirichlet(alpha) draw.

    Returns sorted, disjoint, exhaustive index arrays. Raises if any client
    ends up empty.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n_clients == 1:
        return [np.arange(len(labels))]
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for c, chunk in enumerate(np.split(idx, cuts)):
            parts[c].append(chunk)
    result = [np.sort(np.concatenate(p)) for p in parts]
    empty = [c for c, r in enumerate(result) if len(r) == 0]
    if empty:
        sizes = [len(r) for r in result]
        raise ValueError(f"dirichlet_partition: clients {empty} received no samples "
                         f"(alpha={alpha}, n={len(labels)}, sizes={sizes}); raise alpha or use fewer clients")
    return result


def stratified_split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class split keeping ``round(ratio * count)`` samples for training.

    Classes with a single sample go entirely to training (logged). For
    larger classes at least one sample is kept for testing.
    """
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        if n < 2:
            log.warning("class %d has %d sample(s); assigning all to train", cls, n)
            n_train = n
        else:
            n_train = min(int(np.floor(ratio * n + 0.5)), n - 1)
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    tr = np.sort(np.concatenate(train))
    te = np.sort(np.concatenate(test))
    return dataset.subset(tr), dataset.subset(te)


# ---------------------------------------------------------------- sensor streams

def zscore_fit(stream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    stream = np.asarray(stream, dtype=np.float64)
    return stream.mean(axis=0), np.maximum(stream.std(axis=0), SIGMA_FLOOR)


def zscore_apply(stream: np.ndarray, stats) -> np.ndarray:
    mu, sd = stats
    return (np.asarray(stream, dtype=np.float64) - mu) / sd


def window_segment(stream, labels=None, win: int = 128, overlap: float = 0.5):
    """Sliding windows ``[W, win, C]`` with hop ``win * (1 - overlap)``.

    Window labels are the majority label (lowest label on ties). A stream
    shorter than one window yields zero windows.
    """
    stream = np.asarray(stream)
    if stream.ndim == 1:
        stream = stream[:, None]
    hop = int(round(win * (1.0 - overlap)))
    if hop < 1:
        raise ValueError(f"overlap {overlap} leaves no hop for window {win}")
    T = len(stream)
    if T < win:
        log.warning("stream of length %d is shorter than one window (%d); skipped", T, win)
        empty = np.zeros((0, win, stream.shape[1]), dtype=stream.dtype)
        return (empty, np.zeros(0, dtype=np.int64)) if labels is not None else empty
    starts = np.arange(0, T - win + 1, hop)
    windows = np.stack([stream[s:s + win] for s in starts])
    if labels is None:
        return windows
    labels = np.asarray(labels, dtype=np.int64)
    wl = np.array([np.bincount(labels[s:s + win]).argmax() for s in starts], dtype=np.int64)
    return windows, wl


def read_stream(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray, list[str]]]:
    """Parse a delimited stream file into ``{device: (channels[T, C], labels[T], names)}``."""
    path = Path(path)
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",;\t ")
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        header = [h.strip() for h in next(reader)]
        if "label" not in header:
            raise ValueError(f"{path}: header has no 'label' column: {header}")
        li = header.index("label")
        di = header.index("device") if "device" in header else None
        chan_idx = [i for i in range(len(header)) if i not in (li, di)]
        names = [header[i] for i in chan_idx]
        rows: dict[str, tuple[list, list]] = {}
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {rowno} has {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(row[i]) for i in chan_idx]
                lab = int(float(row[li]))
            except ValueError as exc:
                raise ValueError(f"{path}: non-numeric value in row {rowno}: {exc}") from None
            dev = row[di].strip() if di is not None else "0"
            bucket = rows.setdefault(dev, ([], []))
            bucket[0].append(vals)
            bucket[1].append(lab)
    return {dev: (np.asarray(v, dtype=np.float64), np.asarray(l, dtype=np.int64), names)
            for dev, (v, l) in rows.items()}


def load_windows(path: str | Path, win: int = 128, overlap: float = 0.5, stats=None) -> Dataset:
    """Load a container file into windows.

    Text streams are z-normalised per device and channel (``stats`` may map
    device -> (mean, std) fitted on training data; otherwise fitted on the
    stream itself), then windowed.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return Dataset(z["samples"], z["labels"], provenance=f"file:{_file_digest(path)}")
    xs, ys = [], []
    for dev, (chan, lab, _) in read_stream(path).items():
        dev_stats = stats[dev] if stats is not None else zscore_fit(chan)
        w, wl = window_segment(zscore_apply(chan, dev_stats), lab, win, overlap)
        if len(w):
            xs.append(w)
            ys.append(wl)
    if not xs:
        raise ValueError(f"{path}: no stream is long enough for a {win}-sample window")
    return Dataset(np.concatenate(xs), np.concatenate(ys), provenance=f"file:{_file_digest(path)}")


def save_dataset(path: str | Path, ds: Dataset) -> None:
    write_npz(path, {"samples": ds.samples, "labels": ds.labels})


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:12]
