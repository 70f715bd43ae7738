"""Paired visual/textual feature datasets: synthetic generation and file I/O.

Training splits carry textual features; test splits may omit them, since the
textual modality is only available while training.

SEDA-EMB v1 layout (little-endian, float32 payloads)::

    b"SEDAEMB1" | u32 N | u32 d | u32 C | u8 label_mode | u8 has_textual | 2 zero bytes
    N records: d floats visual, [d floats textual], label payload
    label payload: u32 class id (single) or ceil(C/8) bytes LSB-first bitmask (multi)
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DatasetValidationError, FormatError, InvalidArgumentError

MAGIC = b"SEDAEMB1"
_HEADER = struct.Struct("<8sIIIBB2x")


@dataclass(eq=False)
class PairedFeatureDataset:
    visual: np.ndarray
    textual: Optional[np.ndarray]
    labels: np.ndarray  # (N,) int64 ids or (N, C) bool multi-hot
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float32)
        if self.textual is not None:
            self.textual = np.asarray(self.textual, dtype=np.float32)
        labels = np.asarray(self.labels)
        self.labels = labels.astype(bool) if labels.ndim == 2 else labels.astype(np.int64)

    @property
    def label_mode(self):
        return "multi" if self.labels.ndim == 2 else "single"

    @property
    def feature_dim(self):
        return self.visual.shape[1]

    def __len__(self):
        return self.visual.shape[0]

    def validate(self):
        """Raise ``DatasetValidationError`` if any invariant fails."""
        n = len(self)
        if self.visual.ndim != 2:
            raise DatasetValidationError("visual features must be an N x d matrix")
        if self.split not in ("train", "test"):
            raise DatasetValidationError(f"unknown split {self.split!r}")
        if self.num_classes < 2:
            raise DatasetValidationError("num_classes must be at least 2")
        if self.textual is None:
            if self.split == "train":
                raise DatasetValidationError("a train split must carry textual features")
        elif self.textual.shape != self.visual.shape:
            raise DatasetValidationError("textual and visual features differ in shape")
        if self.labels.shape[0] != n:
            raise DatasetValidationError("label count does not match sample count")
        if self.label_mode == "single":
            bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))
            if bad.size:
                raise DatasetValidationError(
                    f"record {bad[0]}: label {self.labels[bad[0]]} outside [0, {self.num_classes})",
                    index=int(bad[0]),
                )
        else:
            if self.labels.shape[1] != self.num_classes:
                raise DatasetValidationError("multi-hot labels must have num_classes columns")
            empty = np.flatnonzero(~self.labels.any(axis=1))
            if empty.size:
                raise DatasetValidationError(f"record {empty[0]}: no active class", index=int(empty[0]))
        return self

    def equals(self, other):
        """Field-for-field, bit-exact comparison."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.label_mode == other.label_mode
            and same(self.visual, other.visual)
            and same(self.textual, other.textual)
            and same(self.labels, other.labels)
        )

    def class_means(self, which="textual"):
        """C x d per-class means of ``visual`` or ``textual`` features (zeros for empty classes)."""
        feats = self.textual if which == "textual" else self.visual
        if feats is None:
            raise InvalidArgumentError(f"dataset has no {which} features")
        if self.label_mode == "single":
            member = np.eye(self.num_classes, dtype=np.float64)[self.labels]
        else:
            member = self.labels.astype(np.float64)
        counts = member.sum(axis=0)
        sums = member.T @ feats.astype(np.float64)
        return sums / np.maximum(counts, 1)[:, None]


@dataclass
class SyntheticSpec:
    """Knobs for a paired feature benchmark with controllable modality mismatch.

    Textual features are tight clusters around well-separated prototypes.
    Visual prototypes sit closer together, are blurred by ``visual_spread``,
    multiplied by ``scale_gap`` and have ``nuisance_dim`` coordinates replaced
    by class-independent noise of standard deviation ``nuisance_scale``.
    """

    feature_dim: int = 64
    num_classes: int = 20
    train_per_class: int = 200
    test_per_class: int = 50
    text_radius: float = 4.0
    text_spread: float = 0.5
    text_min_angle_deg: float = 60.0
    visual_radius: float = 1.0
    visual_spread: float = 1.0
    visual_shared: float = 0.0
    visual_modes: int = 1
    scale_gap: float = 1.0
    nuisance_dim: int = 0
    nuisance_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.feature_dim < 2 or self.num_classes < 2:
            raise InvalidArgumentError("feature_dim and num_classes must be at least 2")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise InvalidArgumentError("per-class counts must be non-negative")
        if self.text_spread < 0 or self.visual_spread < 0 or self.nuisance_scale < 0:
            raise InvalidArgumentError("spreads must be non-negative")
        if self.scale_gap <= 0:
            raise InvalidArgumentError("scale_gap must be positive")
        if not 0 <= self.nuisance_dim < self.feature_dim:
            raise InvalidArgumentError("nuisance_dim must lie in [0, feature_dim)")
        if self.visual_modes < 1:
            raise InvalidArgumentError("visual_modes must be >= 1")
        if not 0.0 <= self.visual_shared < 1.0:
            raise InvalidArgumentError("visual_shared must lie in [0, 1)")
        if self.text_radius <= 0 or self.visual_radius < 0:
            raise InvalidArgumentError("prototype radii must be positive")
        return self


PRESETS = {
    # Modalities share one distribution: one-step projection suffices.
    "easy": dict(
        visual_radius=4.0, visual_spread=0.5, scale_gap=1.0, nuisance_dim=0, visual_shared=0.0,
    ),
    # Visual prototypes crowd together, value ranges differ and some
    # coordinates carry pure noise.
    "hard": dict(
        visual_radius=1.0, visual_spread=0.3, scale_gap=4.0, nuisance_dim=16,
        nuisance_scale=1.0, visual_shared=0.3,
    ),
}


def preset(name, **overrides):
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return SyntheticSpec(**base)


def _separated_directions(rng, count, dim, min_angle_deg, max_tries=10000):
    """Unit vectors with pairwise angle at least ``min_angle_deg`` (rejection sampling)."""
    cos_max = np.cos(np.deg2rad(min_angle_deg))
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries:
            raise InvalidArgumentError(
                f"could not place {count} directions {min_angle_deg} degrees apart in {dim} dims"
            )
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) <= cos_max for u in out):
            out.append(v)
    return np.stack(out)


def _unit_rows(rng, count, dim):
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(spec):
    """Return ``(train, test)`` datasets fully determined by ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, c = spec.feature_dim, spec.num_classes
    text_protos = spec.text_radius * _separated_directions(rng, c, d, spec.text_min_angle_deg)

    # Visual directions share a common component, which shrinks their pairwise
    # separation; each class owns ``visual_modes`` such prototypes.
    modes = spec.visual_modes
    shared = _unit_rows(rng, 1, d)
    own = _unit_rows(rng, c * modes, d)
    mix = spec.visual_shared * shared + (1.0 - spec.visual_shared) * own
    norms = np.linalg.norm(mix, axis=1, keepdims=True)
    visual_protos = spec.visual_radius * mix / np.where(norms > 0, norms, 1.0)
    informative = d - spec.nuisance_dim

    def draw(per_class, split):
        labels = np.repeat(np.arange(c), per_class)
        n = labels.size
        mode = rng.integers(0, modes, size=n) if modes > 1 else np.zeros(n, dtype=np.int64)
        textual = text_protos[labels] + spec.text_spread * rng.standard_normal((n, d))
        visual = visual_protos[labels * modes + mode] + spec.visual_spread * rng.standard_normal((n, d))
        visual[:, informative:] = spec.nuisance_scale * rng.standard_normal((n, spec.nuisance_dim))
        visual *= spec.scale_gap
        perm = rng.permutation(n)
        return PairedFeatureDataset(
            visual=visual[perm],
            textual=textual[perm] if split == "train" else None,
            labels=labels[perm],
            num_classes=c,
            split=split,
        )

    train = draw(spec.train_per_class, "train")
    test = draw(spec.test_per_class, "test")
    return train, test


def scatter_ratio(features, labels, num_classes):
    """Fisher-style trace ratio of between-class to within-class scatter."""
    features = np.asarray(features, dtype=np.float64)
    overall = features.mean(axis=0)
    between = within = 0.0
    for cls in range(num_classes):
        rows = features[labels == cls]
        if not len(rows):
            continue
        mu = rows.mean(axis=0)
        between += len(rows) * float(((mu - overall) ** 2).sum())
        within += float(((rows - mu) ** 2).sum())
    return between / within


def write_dataset(path, dataset):
    dataset.validate()
    n, d = len(dataset), dataset.visual.shape[1] if dataset.visual.ndim == 2 else 0
    multi = dataset.label_mode == "multi"
    has_text = dataset.textual is not None
    parts = [_HEADER.pack(MAGIC, n, d, dataset.num_classes, int(multi), int(has_text))]
    # Assemble fixed-width records column-block by column-block.
    fields = [("visual", "<f4", d)]
    if has_text:
        fields.append(("textual", "<f4", d))
    if multi:
        nbytes = (dataset.num_classes + 7) // 8
        fields.append(("label", "u1", nbytes))
    else:
        fields.append(("label", "<u4", 1))
    rec = np.zeros(n, dtype=np.dtype([(name, fmt, (width,)) for name, fmt, width in fields]))
    rec["visual"] = dataset.visual
    if has_text:
        rec["textual"] = dataset.textual
    if multi:
        rec["label"] = np.packbits(dataset.labels, axis=1, bitorder="little")
    else:
        rec["label"][:, 0] = dataset.labels
    parts.append(rec.tobytes())
    try:
        with open(path, "wb") as fh:
            for chunk in parts:
                fh.write(chunk)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def read_dataset(path):
    """Parse a SEDA-EMB v1 file; the split is ``train`` iff textual features are present."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d, c, mode, has_text = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if mode not in (0, 1) or has_text not in (0, 1):
        raise FormatError(f"{path}: bad flag bytes")
    if blob[_HEADER.size - 2:_HEADER.size] != b"\x00\x00":
        raise FormatError(f"{path}: non-zero padding")
    fields = [("visual", "<f4", d)]
    if has_text:
        fields.append(("textual", "<f4", d))
    if mode:
        fields.append(("label", "u1", (c + 7) // 8))
    else:
        fields.append(("label", "<u4", 1))
    dtype = np.dtype([(name, fmt, (width,)) for name, fmt, width in fields])
    payload = blob[_HEADER.size:]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(f"{path}: expected {n * dtype.itemsize} payload bytes, found {len(payload)}")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    if mode:
        labels = np.unpackbits(rec["label"], axis=1, count=c, bitorder="little").astype(bool)
        labels = labels.reshape(n, c)
    else:
        labels = rec["label"][:, 0].astype(np.int64)
    ds = PairedFeatureDataset(
        visual=rec["visual"].reshape(n, d).copy(),
        textual=rec["textual"].reshape(n, d).copy() if has_text else None,
        labels=labels,
        num_classes=c,
        split="train" if has_text else "test",
    )
    return ds.validate()
