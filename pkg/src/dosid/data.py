"""Item metadata, the semantic embedding table, and synthetic corpora.

Real embedding model calls are out of scope: tables are either loaded from
disk (precomputed offline) or synthesized with a planted 3-level cluster
hierarchy so that quantizer quality can be measured against known labels.

File formats
------------
* embedding table: ``<path>.bin`` of little-endian float32, row-major,
  with a JSON sidecar ``<path>.json`` holding ``{"n": N, "d": d, "ids": [...]}``
* interactions: JSON-lines, ``{"seq": [...], "target": ..., "label": 0|1}``
* hierarchy labels: JSON-lines, ``{"item_id": ..., "l1": ..., "l2": ..., "l3": ...}``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import substream


class FormatError(ValueError):
    """A data file does not match its declared layout."""


@dataclass
class ItemMeta:
    item_id: str
    name: str
    second_category: str
    third_category: str
    accepts_reservations: bool
    min_price: float
    min_shipping_fee: float
    dishes: list[str]

    def __post_init__(self):
        if not self.item_id:
            raise ValueError("item_id must be non-empty")
        if self.min_price < 0 or self.min_shipping_fee < 0:
            raise ValueError("prices must be >= 0")


def _fmt_yuan(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else str(value)


def render_prompt(meta: ItemMeta) -> str:
    """Render the embedding-model prompt for one item.

    With an empty dish list the final sentence is omitted entirely rather
    than emitting a dangling "Featured dishes include ." clause.
    """
    reservations = "are accepted" if meta.accepts_reservations else "are not accepted"
    text = (
        f"{meta.name} is a {meta.second_category} restaurant specializing in "
        f"{meta.third_category}. Reservations {reservations}. "
        f"The minimum order amount is {_fmt_yuan(meta.min_price)} yuan, and the "
        f"minimum delivery fee is {_fmt_yuan(meta.min_shipping_fee)} yuan."
    )
    if meta.dishes:
        text += f" Featured dishes include {', '.join(meta.dishes)}."
    return text


class SemanticEmbeddingTable:
    """N item embeddings of dimension d, keyed by item id.

    Vectors are float64 in memory but canonicalized to float32 precision so
    the float32 on-disk format round-trips bitwise.
    """

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise ValueError(f"ids/vectors mismatch: {len(ids)} ids, shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding vectors must be finite")
        self.ids = list(ids)
        self.vectors = vectors.astype(np.float32).astype(np.float64)
        self.vectors.flags.writeable = False
        self._row_of = {item_id: i for i, item_id in enumerate(self.ids)}

    @property
    def n_items(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, item_id: str) -> int:
        return self._row_of[item_id]

    def rows(self, item_ids) -> np.ndarray:
        return np.array([self._row_of[i] for i in item_ids], dtype=np.int64)


def save_table(table: SemanticEmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = table.vectors.astype("<f4").tobytes()
    path.with_suffix(".bin").write_bytes(data)
    manifest = {"n": table.n_items, "d": table.dim, "ids": table.ids}
    path.with_suffix(".json").write_text(json.dumps(manifest))


def load_table(path: str | Path) -> SemanticEmbeddingTable:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    n, d, ids = manifest["n"], manifest["d"], manifest["ids"]
    if len(ids) != n:
        raise FormatError(f"manifest claims n={n} but lists {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise FormatError("manifest contains duplicate item ids")
    raw = path.with_suffix(".bin").read_bytes()
    expected = n * d * 4
    if len(raw) != expected:
        raise FormatError(f"embedding file is {len(raw)} bytes, expected {expected} "
                          f"({n} rows x {d} float32)")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    return SemanticEmbeddingTable(ids, vectors)


@dataclass
class SyntheticHierarchy:
    """Planted 3-level cluster labels (global ids; l3 nests in l2 nests in l1)."""

    item_ids: list[str]
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    centroids: dict[str, np.ndarray] = field(default_factory=dict)
    noise_sigma: float = 0.0

    def labels_for(self, item_ids) -> np.ndarray:
        index = {i: k for k, i in enumerate(self.item_ids)}
        rows = [index[i] for i in item_ids]
        return np.stack([self.l1[rows], self.l2[rows], self.l3[rows]], axis=1)


@dataclass
class InteractionSample:
    seq: list[str]
    target: str
    label: int


@dataclass
class SyntheticConfig:
    n_items: int = 2000
    dim: int = 32
    clusters: tuple[int, int, int] = (4, 4, 4)
    noise_sigma: float = 0.05
    n_users: int = 200
    seq_len: int = 10
    n_samples: int = 20000
    positive_ratio: float = 0.5
    p_coherent: float = 0.9


# offsets of the three nesting levels shrink so the hierarchy is
# coarse-to-fine in energy, matching what a residual quantizer can peel off
LEVEL_SCALES = (1.0, 0.5, 0.25)


def gen_synthetic(cfg: SyntheticConfig, seed: int):
    """Build (table, hierarchy, samples) with a recoverable planted structure.

    Each item vector is coarse centroid + mid offset + fine offset + noise.
    Each user prefers one coarse cluster; positive samples draw their
    sequence items and target from that cluster with probability
    ``p_coherent`` per slot, negatives replace the target with a uniform
    random item.
    """
    c1, c2, c3 = cfg.clusters
    n_fine = c1 * c2 * c3
    if cfg.n_items < n_fine:
        raise ValueError(f"n_items={cfg.n_items} is below the {n_fine} fine clusters")
    if cfg.seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if min(c1, c2, c3) < 1:
        raise ValueError("cluster counts must be >= 1")

    rng = substream(seed, "data")
    coarse = rng.normal(scale=LEVEL_SCALES[0], size=(c1, cfg.dim))
    mid = rng.normal(scale=LEVEL_SCALES[1], size=(c1 * c2, cfg.dim))
    fine = rng.normal(scale=LEVEL_SCALES[2], size=(n_fine, cfg.dim))

    ids = [f"itm{i:05d}" for i in range(cfg.n_items)]
    l3 = np.arange(cfg.n_items, dtype=np.int64) % n_fine  # round-robin keeps every cluster populated
    l2 = l3 // c3
    l1 = l2 // c2
    vectors = (coarse[l1] + mid[l2] + fine[l3]
               + rng.normal(scale=cfg.noise_sigma, size=(cfg.n_items, cfg.dim)))
    table = SemanticEmbeddingTable(ids, vectors)
    hierarchy = SyntheticHierarchy(
        item_ids=ids, l1=l1, l2=l2, l3=l3,
        centroids={"l1": coarse, "l2": mid, "l3": fine},
        noise_sigma=cfg.noise_sigma,
    )

    user_pref = rng.integers(0, c1, size=cfg.n_users)
    items_of_coarse = [np.flatnonzero(l1 == c) for c in range(c1)]

    def draw_item(pref: int) -> int:
        if rng.random() < cfg.p_coherent:
            pool = items_of_coarse[pref]
            return int(pool[rng.integers(0, len(pool))])
        return int(rng.integers(0, cfg.n_items))

    samples = []
    for _ in range(cfg.n_samples):
        user = int(rng.integers(0, cfg.n_users))
        pref = int(user_pref[user])
        seq = [ids[draw_item(pref)] for _ in range(cfg.seq_len)]
        label = int(rng.random() < cfg.positive_ratio)
        if label:
            target = ids[draw_item(pref)]
        else:
            # uniform negative; collisions with coherent items are not deduplicated
            target = ids[int(rng.integers(0, cfg.n_items))]
        samples.append(InteractionSample(seq=seq, target=target, label=label))
    return table, hierarchy, samples


def save_samples(samples: list[InteractionSample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in samples:
            fh.write(json.dumps({"seq": s.seq, "target": s.target, "label": s.label}) + "\n")


def load_samples(path: str | Path) -> list[InteractionSample]:
    samples = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        label = obj["label"]
        if label not in (0, 1):
            raise FormatError(f"label must be 0 or 1, got {label!r}")
        samples.append(InteractionSample(seq=list(obj["seq"]), target=obj["target"],
                                         label=int(label)))
    return samples


def save_hierarchy(hierarchy: SyntheticHierarchy, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i, item_id in enumerate(hierarchy.item_ids):
            fh.write(json.dumps({"item_id": item_id, "l1": int(hierarchy.l1[i]),
                                 "l2": int(hierarchy.l2[i]), "l3": int(hierarchy.l3[i])}) + "\n")


def load_hierarchy(path: str | Path) -> SyntheticHierarchy:
    ids, l1, l2, l3 = [], [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        ids.append(obj["item_id"])
        l1.append(obj["l1"])
        l2.append(obj["l2"])
        l3.append(obj["l3"])
    return SyntheticHierarchy(item_ids=ids, l1=np.array(l1), l2=np.array(l2),
                              l3=np.array(l3))
