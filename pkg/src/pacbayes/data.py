"""Dataset ingestion: MNIST-style IDX files, schema-driven CSV, synthetic blobs.

A Dataset is an immutable (inputs, labels) pair tagged with its split;
inputs are float64 in [0,1], labels are integer class indices. Loaders
never infer encodings: CSV categorical dictionaries and label mappings are
declared in schema files (flat key=value text, see load_schema).
"""

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .core import sample_std_normal

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def parse_flat_config(path):
    """Read a flat `key = value` text file into an ordered dict.

    Blank lines and lines starting with '#' are ignored; values keep
    internal commas (lists are comma-separated). Duplicate keys or lines
    without '=' are errors naming the line.
    """
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError("%s:%d: expected key = value, got %r"
                                 % (path, lineno, stripped))
            key, _, val = stripped.partition("=")
            key = key.strip()
            if key in out:
                raise ValueError("%s:%d: duplicate key %r" % (path, lineno, key))
            out[key] = val.strip()
    return out


@dataclass
class Dataset:
    x: np.ndarray          # (n, d) float64, entries in [0,1]
    y: np.ndarray          # (n,) int64, values in [0, num_classes)
    num_classes: int
    tag: str = ""

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ValueError("inputs must be 2-D, got shape %s" % (self.x.shape,))
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("row count mismatch: %d inputs vs %d labels"
                             % (self.x.shape[0], self.y.shape[0]))
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels outside [0, %d)" % self.num_classes)
        self.x.flags.writeable = False
        self.y.flags.writeable = False

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def take(self, start, stop, tag=None):
        """Row slice as a new Dataset (shares the split's scaling)."""
        return Dataset(self.x[start:stop].copy(), self.y[start:stop].copy(),
                       self.num_classes, tag if tag is not None else self.tag)


def fingerprint(ds):
    """sha256 over the raw input/label bytes plus the class count."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.x).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    h.update(str(ds.num_classes).encode())
    return h.hexdigest()


def _open_maybe_gz(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_be32(fh, path, offset):
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("%s: truncated header at offset %d" % (path, offset))
    return struct.unpack(">i", raw)[0]


def load_mnist_idx(images_path, labels_path, limit=50000, tag="train"):
    """Parse a big-endian IDX image/label file pair into a Dataset.

    Pixels are scaled by 1/255. The result is truncated to the first
    `limit` examples (default 50000, the standard training-set size used
    for certification; the 10000-example test files are unaffected).
    Files ending in .gz are decompressed on the fly.
    """
    with _open_maybe_gz(images_path) as fh:
        magic = _read_be32(fh, images_path, 0)
        if magic != IMAGES_MAGIC:
            raise ValueError("%s: bad magic at offset 0: expected 0x%08x, "
                             "found 0x%08x" % (images_path, IMAGES_MAGIC, magic))
        count = _read_be32(fh, images_path, 4)
        rows = _read_be32(fh, images_path, 8)
        cols = _read_be32(fh, images_path, 12)
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError("%s: truncated pixel data at offset %d (expected "
                             "%d bytes, found %d)"
                             % (images_path, 16, count * rows * cols, len(raw)))
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with _open_maybe_gz(labels_path) as fh:
        magic = _read_be32(fh, labels_path, 0)
        if magic != LABELS_MAGIC:
            raise ValueError("%s: bad magic at offset 0: expected 0x%08x, "
                             "found 0x%08x" % (labels_path, LABELS_MAGIC, magic))
        lcount = _read_be32(fh, labels_path, 4)
        raw = fh.read(lcount)
        if len(raw) != lcount:
            raise ValueError("%s: truncated label data at offset %d"
                             % (labels_path, 8))
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != lcount:
        raise ValueError("image/label count mismatch: %d images in %s vs "
                         "%d labels in %s" % (count, images_path, lcount, labels_path))
    if limit is not None:
        pixels = pixels[:limit]
        labels = labels[:limit]
    return Dataset(pixels.astype(np.float64) / 255.0,
                   labels.astype(np.int64), 10, tag)


def binarize_mnist(ds):
    """Map digit labels 0-4 to class 0 and 5-9 to class 1."""
    if ds.num_classes != 10:
        raise ValueError("binarize_mnist needs a 10-class dataset, got %d "
                         "classes" % ds.num_classes)
    return Dataset(ds.x.copy(), (ds.y >= 5).astype(np.int64), 2, ds.tag)


@dataclass
class CsvSchema:
    """Declared column layout for a delimited text file.

    columns is an ordered list over *all* file columns: ("label", None),
    ("drop", None), ("numeric", None), or ("categorical", [codes...]).
    label_values fixes the class order; with label_filter, rows whose label
    is not listed are skipped (instead of being an error).
    """

    separator: str
    has_header: bool
    columns: list
    label_values: list
    label_filter: bool = False

    @property
    def num_classes(self):
        return len(self.label_values)


def load_schema(path):
    """Parse a schema file: flat key = value lines, lists comma-separated.

    Keys: separator (default ","), header (true/false), label_column (index),
    label_values, label_filter (true/false), drop_columns (indices),
    numeric_columns (indices), and categories_<i> = codes for each
    categorical column i. Every non-label, non-dropped column must be
    declared either numeric or categorical.
    """
    kv = parse_flat_config(path)
    sep = kv.get("separator", ",")
    if sep == "TAB":
        sep = "\t"
    has_header = kv.get("header", "false").lower() == "true"
    label_col = int(kv["label_column"])
    label_values = [v.strip() for v in kv["label_values"].split(",")]
    label_filter = kv.get("label_filter", "false").lower() == "true"
    drop = {int(i) for i in kv.get("drop_columns", "").split(",") if i.strip()}
    numeric = {int(i) for i in kv.get("numeric_columns", "").split(",") if i.strip()}
    cats = {}
    for key, val in kv.items():
        if key.startswith("categories_"):
            cats[int(key[len("categories_"):])] = [c.strip() for c in val.split(",")]
    ncols = int(kv["num_columns"])
    columns = []
    for i in range(ncols):
        if i == label_col:
            columns.append(("label", None))
        elif i in drop:
            columns.append(("drop", None))
        elif i in numeric:
            columns.append(("numeric", None))
        elif i in cats:
            columns.append(("categorical", cats[i]))
        else:
            raise ValueError("%s: column %d is not declared (label/drop/"
                             "numeric/categorical)" % (path, i))
    return CsvSchema(sep, has_header, columns, label_values, label_filter)


def load_csv(path, schema, seed, train_fraction=0.8):
    """Encode a delimited file per its schema and split it train/test.

    Categorical features are one-hot encoded against the declared
    dictionaries (an undeclared code is a hard error naming row and
    column). The split is a deterministic seeded shuffle; numeric features
    are min-max scaled to [0,1] with statistics from the training split
    only (a constant column scales to 0; test values are clipped into
    [0,1] afterwards). Returns (train, test) Datasets.
    """
    label_to_idx = {v: i for i, v in enumerate(schema.label_values)}
    feats, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.separator)
        for row_idx, row in enumerate(reader):
            if schema.has_header and row_idx == 0:
                continue
            if not row:
                continue
            if len(row) != len(schema.columns):
                raise ValueError("%s: row %d has %d cells, schema declares %d"
                                 % (path, row_idx, len(row), len(schema.columns)))
            vec = []
            label = None
            skip = False
            for col_idx, (kind, extra) in enumerate(schema.columns):
                cell = row[col_idx].strip()
                if kind == "drop":
                    continue
                if kind == "label":
                    if cell not in label_to_idx:
                        if schema.label_filter:
                            skip = True
                            break
                        raise ValueError("%s: row %d col %d: unknown label %r"
                                         % (path, row_idx, col_idx, cell))
                    label = label_to_idx[cell]
                elif kind == "numeric":
                    try:
                        vec.append(float(cell))
                    except ValueError:
                        raise ValueError("%s: row %d col %d: non-numeric cell %r"
                                         % (path, row_idx, col_idx, cell)) from None
                else:
                    if cell not in extra:
                        raise ValueError("%s: row %d col %d: unknown category %r"
                                         % (path, row_idx, col_idx, cell))
                    onehot = [0.0] * len(extra)
                    onehot[extra.index(cell)] = 1.0
                    vec.extend(onehot)
            if skip:
                continue
            feats.append(vec)
            labels.append(label)
    if not feats:
        raise ValueError("%s: no usable rows" % path)
    x = np.array(feats, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)

    # numeric feature positions in the encoded matrix
    numeric_pos = []
    pos = 0
    for kind, extra in schema.columns:
        if kind == "numeric":
            numeric_pos.append(pos)
            pos += 1
        elif kind == "categorical":
            pos += len(extra)

    order = np.random.Generator(np.random.Philox(key=int(seed))).permutation(len(y))
    n_train = int(round(train_fraction * len(y)))
    tr, te = order[:n_train], order[n_train:]
    x_tr, x_te = x[tr].copy(), x[te].copy()
    if numeric_pos:
        cols = np.array(numeric_pos)
        lo = x_tr[:, cols].min(axis=0)
        hi = x_tr[:, cols].max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        x_tr[:, cols] = np.where(hi > lo, (x_tr[:, cols] - lo) / span, 0.0)
        x_te[:, cols] = np.where(hi > lo, (x_te[:, cols] - lo) / span, 0.0)
        np.clip(x_te[:, cols], 0.0, 1.0, out=x_te[:, cols])
    n_cls = schema.num_classes
    return (Dataset(x_tr, y[tr], n_cls, "train"),
            Dataset(x_te, y[te], n_cls, "test"))


def synth_gaussian_blobs(n, d, classes, separation, rng, tag="synth"):
    """Balanced class-conditional spherical Gaussian blobs, scaled to [0,1].

    Class k is centered at separation * e_{k mod d} (cycled axes, doubled
    amplitude per cycle), with unit isotropic noise; rows are shuffled.
    All features are jointly min-max scaled, so slices of one call share
    the same transform - generate train and holdout together and slice.
    separation 0 makes the classes indistinguishable (Bayes error
    1 - 1/classes).
    """
    if n < 1 or d < 1 or classes < 1:
        raise ValueError("n, d, classes must all be >= 1")
    y = np.arange(n, dtype=np.int64) % classes
    centers = np.zeros((classes, d))
    for k in range(classes):
        centers[k, k % d] = separation * (1 + k // d)
    x = centers[y] + sample_std_normal(rng, n * d).reshape(n, d)
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0.0] = 1.0
    x = (x - lo) / span
    return Dataset(x, y, classes, tag)
