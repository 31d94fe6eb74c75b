"""Two-modality datasets: matrix files, synthetic generation and splits."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LoadError, ValidationError

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"
LABEL_MODES = (SINGLE_LABEL, MULTI_LABEL)
PAIRED = "paired"
UNPAIRED = "unpaired_unlabeled"


def write_matrix(path, matrix, comment=None):
    """Write ``matrix`` in the plain-text format (shortest round-trip reprs)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{m.shape[0]} {m.shape[1]}")
    for row in m:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise LoadError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise LoadError(f"{path}: bad header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise LoadError(f"{path}: header says {rows} rows, found {len(body)}")
    data = np.empty((rows, cols), dtype=np.float64)
    for r, line in enumerate(body):
        values = line.split()
        if len(values) != cols:
            raise LoadError(f"{path}: row {r} has {len(values)} entries, expected {cols}")
        try:
            data[r] = [float(v) for v in values]
        except ValueError as exc:
            raise LoadError(f"{path}: row {r} is not numeric") from exc
    if not np.all(np.isfinite(data)):
        raise LoadError(f"{path}: non-finite entries")
    return data


def validate_labels(labels, label_mode):
    """Raise :class:`ValidationError` naming the first column that breaks the mode's rule."""
    if label_mode not in LABEL_MODES:
        raise ConfigError(f"unknown label mode {label_mode!r}")
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] == 0:
        raise ValidationError("label matrix is empty")
    bad = np.nonzero(~np.all((labels == 0) | (labels == 1), axis=0))[0]
    if bad.size:
        raise ValidationError(f"label column {bad[0]} has non-binary entries")
    counts = labels.sum(axis=0)
    if label_mode == SINGLE_LABEL:
        bad = np.nonzero(counts != 1)[0]
        if bad.size:
            raise ValidationError(
                f"single-label column {bad[0]} has {int(counts[bad[0]])} ones, expected 1"
            )
    else:
        bad = np.nonzero(counts < 1)[0]
        if bad.size:
            raise ValidationError(f"multi-label column {bad[0]} has no active tag")


@dataclass
class ModalityDataset:
    """Features for two modalities plus labels for the first ``labels.shape[1]`` items.

    When the labels cover every column the dataset is fully annotated and
    any labeled/unlabeled split is simulated by :func:`make_splits`.
    """

    features_x: np.ndarray
    features_y: np.ndarray
    labels: np.ndarray
    label_mode: str
    pairing: str = PAIRED

    def __post_init__(self):
        self.features_x = np.asarray(self.features_x, dtype=np.float64)
        self.features_y = np.asarray(self.features_y, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        try:
            validate_labels(self.labels, self.label_mode)
        except ValidationError as exc:
            raise LoadError(str(exc)) from exc
        n_lab = self.labels.shape[1]
        if n_lab > self.n_x or n_lab > self.n_y:
            raise LoadError(f"{n_lab} label columns but only {self.n_x}/{self.n_y} samples")
        if self.pairing == PAIRED and self.n_x != self.n_y:
            raise LoadError(f"paired dataset with N_x={self.n_x} != N_y={self.n_y}")

    @property
    def n_x(self):
        return self.features_x.shape[1]

    @property
    def n_y(self):
        return self.features_y.shape[1]

    @property
    def d_x(self):
        return self.features_x.shape[0]

    @property
    def d_y(self):
        return self.features_y.shape[0]

    @property
    def d_c(self):
        return self.labels.shape[0]

    @property
    def n_labeled(self):
        return self.labels.shape[1]

    @property
    def fully_labeled(self):
        return self.pairing == PAIRED and self.n_labeled == self.n_x

    def subset(self, idx):
        """Paired, fully-labeled subset of columns ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        return ModalityDataset(self.features_x[:, idx], self.features_y[:, idx],
                               self.labels[:, idx], self.label_mode, PAIRED)


def load_dataset(features_x_path, features_y_path, labels_path, label_mode):
    fx = read_matrix(features_x_path)
    fy = read_matrix(features_y_path)
    labels = read_matrix(labels_path)
    if labels.shape[1] == 0:
        raise LoadError(f"{labels_path}: no label columns")
    pairing = PAIRED if fx.shape[1] == fy.shape[1] else UNPAIRED
    return ModalityDataset(fx, fy, labels, label_mode, pairing)


def save_dataset(data, out_dir, prefix="", extra=None):
    """Write the three matrix files and a JSON manifest; return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names = {
        "features_x": f"{prefix}features_x.txt",
        "features_y": f"{prefix}features_y.txt",
        "labels": f"{prefix}labels.txt",
    }
    write_matrix(os.path.join(out_dir, names["features_x"]), data.features_x)
    write_matrix(os.path.join(out_dir, names["features_y"]), data.features_y)
    write_matrix(os.path.join(out_dir, names["labels"]), data.labels)
    manifest = dict(names, label_mode=data.label_mode)
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"{prefix}manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("features_x", "features_y", "labels", "label_mode"):
        if key not in manifest:
            raise LoadError(f"{path}: manifest lacks {key!r}")
    return manifest


def load_manifest(path, section=None):
    """Load the dataset a manifest names; ``section`` selects a nested block such as ``"test"``."""
    manifest = read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    entry = manifest if section is None else manifest.get(section)
    if entry is None:
        return None

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    return load_dataset(resolve(entry["features_x"]), resolve(entry["features_y"]),
                        resolve(entry["labels"]), entry.get("label_mode", manifest["label_mode"]))


@dataclass
class SyntheticSpec:
    d_x: int = 32
    d_y: int = 24
    d_c: int = 10
    samples_per_class: int = 30
    noise_sigma: float = 0.1
    label_mode: str = SINGLE_LABEL
    multi_label_extra_tag_prob: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.d_x, self.d_y, self.d_c) < 2:
            raise ConfigError("all synthetic dimensions must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.multi_label_extra_tag_prob <= 1.0:
            raise ConfigError("multi_label_extra_tag_prob must lie in [0, 1]")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label mode {self.label_mode!r}")


def generate_synthetic(spec):
    """Gaussian class clusters sharing class identity across both modalities.

    Samples are ordered class by class.  In multi-label mode each sample
    also switches on every other tag with probability
    ``multi_label_extra_tag_prob`` and sits at the mean of its active
    tag centroids.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cx = rng.uniform(-1.0, 1.0, size=(spec.d_x, spec.d_c))
    cy = rng.uniform(-1.0, 1.0, size=(spec.d_y, spec.d_c))
    n = spec.d_c * spec.samples_per_class
    primary = np.repeat(np.arange(spec.d_c), spec.samples_per_class)
    labels = np.zeros((spec.d_c, n))
    labels[primary, np.arange(n)] = 1.0
    if spec.label_mode == MULTI_LABEL and spec.multi_label_extra_tag_prob > 0:
        extra = rng.random((spec.d_c, n)) < spec.multi_label_extra_tag_prob
        labels = np.maximum(labels, extra.astype(np.float64))
    active = labels / labels.sum(axis=0, keepdims=True)
    fx = cx @ active + spec.noise_sigma * rng.standard_normal((spec.d_x, n))
    fy = cy @ active + spec.noise_sigma * rng.standard_normal((spec.d_y, n))
    return ModalityDataset(fx, fy, labels, spec.label_mode, PAIRED)


def _strata(labels):
    return np.argmax(labels, axis=0)


def _choose(rng, n_total, n_pick, strata=None):
    """Random index subset of size ``n_pick``; proportional per stratum when given."""
    if strata is None:
        return np.sort(rng.permutation(n_total)[:n_pick])
    classes = np.unique(strata)
    chosen = []
    quotas = {c: n_pick * np.sum(strata == c) / n_total for c in classes}
    floors = {c: int(np.floor(q)) for c, q in quotas.items()}
    remaining = n_pick - sum(floors.values())
    order = sorted(classes, key=lambda c: (-(quotas[c] - floors[c]), c))
    for c in order[:remaining]:
        floors[c] += 1
    for c in classes:
        members = np.nonzero(strata == c)[0]
        chosen.append(rng.permutation(members)[: floors[c]])
    return np.sort(np.concatenate(chosen))


def holdout_split(data, test_fraction, seed, stratified=True):
    """Split a fully labeled paired dataset into disjoint train and test sets."""
    if not data.fully_labeled:
        raise ConfigError("holdout split needs a fully labeled paired dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = data.n_x
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ConfigError("test_fraction leaves an empty train or test set")
    test_idx = _choose(rng, n, n_test, _strata(data.labels) if stratified else None)
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return data.subset(train_idx), data.subset(test_idx)


@dataclass
class DatasetSplit:
    """Index sets over a training dataset.

    ``labeled_idx`` refers to paired items.  Unlabeled items are listed
    per modality so the unpaired setting can hold disjoint x and y items.
    """

    labeled_idx: np.ndarray
    nn_idx: np.ndarray
    val_idx: np.ndarray
    train_idx: np.ndarray
    unlabeled_x_idx: np.ndarray
    unlabeled_y_idx: np.ndarray
    unpaired: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def unlabeled_idx(self):
        return np.union1d(self.unlabeled_x_idx, self.unlabeled_y_idx)

    def to_json(self):
        out = {k: getattr(self, k).tolist() for k in
               ("labeled_idx", "nn_idx", "val_idx", "train_idx",
                "unlabeled_x_idx", "unlabeled_y_idx")}
        out["unpaired"] = self.unpaired
        return out


def _partition_labeled(rng, labeled_idx, nn_fraction, val_fraction, strata=None):
    n_lab = labeled_idx.size
    n_nn = int(round(nn_fraction * n_lab))
    n_val = int(round(val_fraction * n_lab))
    if n_nn == 0 or n_val == 0 or n_nn + n_val >= n_lab:
        raise ConfigError(
            f"fractions nn={nn_fraction}, val={val_fraction} on {n_lab} labeled "
            "samples leave an empty subset"
        )
    if strata is None:
        perm = rng.permutation(labeled_idx)
        nn, val, train = perm[:n_nn], perm[n_nn:n_nn + n_val], perm[n_nn + n_val:]
    else:
        pos = _choose(rng, n_lab, n_nn, strata)
        nn = labeled_idx[pos]
        rest = np.setdiff1d(np.arange(n_lab), pos)
        vpos = rest[_choose(rng, rest.size, n_val, strata[rest])]
        val = labeled_idx[vpos]
        train = np.setdiff1d(labeled_idx, np.concatenate([nn, val]))
    return np.sort(nn), np.sort(val), np.sort(train)


def make_splits(data, labeled_fraction=1.0, nn_fraction=0.2, val_fraction=0.1,
                unpaired=False, seed=0, stratified=False):
    """Partition training items into labeled (NN anchors, validation, LP train) and unlabeled.

    With ``unpaired`` the unlabeled items are halved at random: one half
    keeps only its x sample, the other only its y sample, so no unlabeled
    x has a partner among the unlabeled y.
    """
    if not 0.0 < nn_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ConfigError("nn_fraction and val_fraction must lie in (0, 1)")
    if nn_fraction + val_fraction >= 1.0:
        raise ConfigError("nn_fraction + val_fraction must be < 1")
    rng = np.random.default_rng(seed)

    if not data.fully_labeled:
        # labels exist for a paired prefix only; the rest is unlabeled as given
        labeled_idx = np.arange(data.n_labeled)
        ux = np.arange(data.n_labeled, data.n_x)
        uy = np.arange(data.n_labeled, data.n_y)
        strata = _strata(data.labels) if stratified else None
        nn, val, train = _partition_labeled(rng, labeled_idx, nn_fraction, val_fraction, strata)
        return DatasetSplit(labeled_idx, nn, val, train, ux, uy,
                            unpaired=data.pairing == UNPAIRED or unpaired)

    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError("labeled_fraction must lie in (0, 1]")
    n = data.n_x
    n_lab = int(round(labeled_fraction * n))
    if n_lab == 0:
        raise ConfigError("labeled_fraction leaves no labeled samples")
    all_strata = _strata(data.labels) if stratified else None
    labeled_idx = _choose(rng, n, n_lab, all_strata)
    unlabeled = np.setdiff1d(np.arange(n), labeled_idx)
    strata = all_strata[labeled_idx] if stratified else None
    nn, val, train = _partition_labeled(rng, labeled_idx, nn_fraction, val_fraction, strata)
    if unpaired and unlabeled.size:
        perm = rng.permutation(unlabeled)
        half = (perm.size + 1) // 2
        ux, uy = np.sort(perm[:half]), np.sort(perm[half:])
    else:
        ux, uy = unlabeled, unlabeled.copy()
    return DatasetSplit(labeled_idx, nn, val, train, ux, uy, unpaired=bool(unpaired))
