"""Synthetic identity-by-expression image data, its on-disk layout, and the
samplers built on it (training batches, verification pairs, authentication
sets).

On disk, a dataset directory holds:
  manifest.csv  header ``file,index,identity,expression`` (UTF-8, LF)
  images.tnsc   magic "TNSC", u32 version, u32 count, count x (u16 H, u16 W),
                then count*H*W little-endian float32 values in record order
  spec.json     the resolved generation spec (reproducibility sidecar)

Every generator and splitter here is a pure function of (inputs, seed).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ProtocolError

EXPRESSIONS = ("Neutral", "Anger", "Disgust", "Fear", "Happy", "Sad",
               "Surprise", "Contempt")

CONTAINER_MAGIC = b"TNSC"
CONTAINER_VERSION = 1
CONTAINER_NAME = "images.tnsc"
MANIFEST_NAME = "manifest.csv"
SPEC_NAME = "spec.json"


def expression_id(name_or_id, k_expr: int) -> int:
    """Accept an expression name or integer id; validate against k_expr."""
    if isinstance(name_or_id, str):
        try:
            idx = EXPRESSIONS.index(name_or_id)
        except ValueError:
            raise DataError(f"unknown expression name {name_or_id!r}") from None
    else:
        idx = int(name_or_id)
    if not 0 <= idx < k_expr:
        raise DataError(f"expression id {idx} out of range [0, {k_expr})")
    return idx


@dataclass
class SynthSpec:
    k_id: int = 20
    k_expr: int = 7
    samples_per_cell: int = 10
    image_size: int = 32
    identity_scale: float = 0.25
    expression_scale: float = 0.12
    noise_sigma: float = 0.22
    seed: int = 0

    def __post_init__(self):
        for name in ("k_id", "k_expr", "samples_per_cell", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k_expr > len(EXPRESSIONS):
            raise ConfigError(f"k_expr must be <= {len(EXPRESSIONS)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SampleRecord:
    file: str
    index: int
    identity: int
    expression: int


@dataclass
class DatasetHandle:
    """Loaded dataset: validated records plus the image stack (n, H, W)."""

    records: list
    images: np.ndarray
    k_id: int
    k_expr: int

    def __len__(self):
        return len(self.records)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records])

    @property
    def expressions(self) -> np.ndarray:
        return np.array([r.expression for r in self.records])

    def batch_images(self, indices) -> np.ndarray:
        """(m, 1, H, W) float64 batch for the model."""
        return self.images[np.asarray(indices)].astype(np.float64)[:, None, :, :]

    def subset(self, indices) -> "DatasetHandle":
        indices = np.asarray(indices)
        return DatasetHandle(records=[self.records[i] for i in indices],
                             images=self.images[indices],
                             k_id=self.k_id, k_expr=self.k_expr)

    def per_class_counts(self) -> np.ndarray:
        """(k_id, k_expr) sample counts, rows identities, columns expressions."""
        counts = np.zeros((self.k_id, self.k_expr), dtype=int)
        for r in self.records:
            counts[r.identity, r.expression] += 1
        return counts


def _smooth_field(rng, size: int, coarse: int) -> np.ndarray:
    """Bilinear upsample of a coarse uniform(-1, 1) grid: a smooth random
    field in roughly [-1, 1]."""
    grid = rng.uniform(-1.0, 1.0, (coarse, coarse))
    src = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    t = src - i0
    rows = grid[i0][:, i1] * t[None, :] + grid[i0][:, i0] * (1.0 - t[None, :])
    rows_hi = grid[i1][:, i1] * t[None, :] + grid[i1][:, i0] * (1.0 - t[None, :])
    return rows * (1.0 - t[:, None]) + rows_hi * t[:, None]


def _identity_fields(spec: SynthSpec) -> np.ndarray:
    return np.stack([
        _smooth_field(np.random.default_rng([spec.seed, 1, i]), spec.image_size, 4)
        for i in range(spec.k_id)])


def identity_patterns(spec: SynthSpec) -> np.ndarray:
    """(k_id, S, S) per-identity base images: 0.5 + scaled smooth field."""
    return 0.5 + spec.identity_scale * _identity_fields(spec)


def expression_patterns(spec: SynthSpec) -> np.ndarray:
    """(k_expr, S, S) additive deformation fields shared across identities.

    Each raw field is projected off the span of the identity fields (and the
    constant) and rescaled back to its original RMS, so at zero noise the two
    label factors are exactly non-interfering in pixel space: nearest
    prototype classifies both perfectly (the sanity ceiling) while the
    signals still overlap on every pixel.
    """
    n_pix = spec.image_size ** 2
    basis = np.concatenate([np.ones((1, n_pix)),
                            _identity_fields(spec).reshape(spec.k_id, n_pix)])
    q, _ = np.linalg.qr(basis.T)  # orthonormal columns spanning identities+constant
    fields = []
    for e in range(spec.k_expr):
        rng = np.random.default_rng([spec.seed, 2, e])
        raw = _smooth_field(rng, spec.image_size, 8).reshape(n_pix)
        resid = raw - q @ (q.T @ raw)
        rms = np.sqrt(np.mean(resid ** 2))
        if rms > 0:
            resid *= np.sqrt(np.mean(raw ** 2)) / rms
        fields.append(resid.reshape(spec.image_size, spec.image_size))
    return spec.expression_scale * np.stack(fields)


def render_image(spec: SynthSpec, identity: int, expression: int, n: int,
                 id_patterns=None, ex_patterns=None) -> np.ndarray:
    if id_patterns is None:
        id_patterns = identity_patterns(spec)
    if ex_patterns is None:
        ex_patterns = expression_patterns(spec)
    noise_rng = np.random.default_rng([spec.seed, 3, identity, expression, n])
    img = (id_patterns[identity] + ex_patterns[expression]
           + spec.noise_sigma * noise_rng.standard_normal((spec.image_size,) * 2))
    return np.clip(img, 0.0, 1.0)


def write_container(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, n))
        for _ in range(n):
            fh.write(struct.pack("<HH", h, w))
        fh.write(images.astype("<f4").tobytes())


def read_container(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack("<II", blob[4:12])
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    dims_end = 12 + 4 * count
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dimension table")
    dims = [struct.unpack("<HH", blob[12 + 4 * i:16 + 4 * i]) for i in range(count)]
    if count and any(d != dims[0] for d in dims):
        raise DataError(f"{path}: images are not uniformly sized")
    h, w = dims[0] if count else (0, 0)
    expected = count * h * w * 4
    if len(blob) != dims_end + expected:
        raise FormatError(f"{path}: expected {expected} data bytes, "
                          f"found {len(blob) - dims_end}")
    data = np.frombuffer(blob[dims_end:], dtype="<f4")
    return data.reshape(count, h, w).copy()


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetHandle:
    """Render the full identity x expression grid to disk and return the
    loaded handle. image(id, expr, n) = clip(identity pattern + shared
    expression pattern + Gaussian noise); deterministic given spec.seed."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    id_patterns = identity_patterns(spec)
    ex_patterns = expression_patterns(spec)
    images, rows = [], []
    idx = 0
    for identity in range(spec.k_id):
        for expression in range(spec.k_expr):
            for n in range(spec.samples_per_cell):
                images.append(render_image(spec, identity, expression, n,
                                           id_patterns, ex_patterns))
                rows.append((CONTAINER_NAME, idx, identity, expression))
                idx += 1
    write_container(out_dir / CONTAINER_NAME, np.stack(images))
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "index", "identity", "expression"])
        writer.writerows(rows)
    with open(out_dir / SPEC_NAME, "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return load_manifest(out_dir)


def load_manifest(dataset_dir) -> DatasetHandle:
    """Validate manifest rows against the container and the recorded spec."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"missing {MANIFEST_NAME} in {dataset_dir}")

    k_id = k_expr = None
    spec_path = dataset_dir / SPEC_NAME
    if spec_path.exists():
        spec = SynthSpec.from_dict(json.loads(spec_path.read_text()))
        k_id, k_expr = spec.k_id, spec.k_expr

    containers = {}
    records = []
    with open(manifest, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["file", "index", "identity", "expression"]:
            raise DataError(f"{manifest}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{manifest}: row {lineno}: expected 4 fields, got {len(row)}")
            fname = row[0]
            try:
                index, identity, expression = (int(v) for v in row[1:])
            except ValueError:
                raise DataError(f"{manifest}: row {lineno}: non-integer field") from None
            if fname not in containers:
                cpath = dataset_dir / fname
                if not cpath.exists():
                    raise DataError(f"{manifest}: row {lineno}: missing container {fname}")
                containers[fname] = read_container(cpath)
            if not 0 <= index < len(containers[fname]):
                raise DataError(f"{manifest}: row {lineno}: index {index} outside {fname}")
            if identity < 0 or (k_id is not None and identity >= k_id):
                raise DataError(f"{manifest}: row {lineno}: identity {identity} out of range")
            bound = k_expr if k_expr is not None else len(EXPRESSIONS)
            if not 0 <= expression < bound:
                raise DataError(f"{manifest}: row {lineno}: expression {expression} "
                                f"out of range [0, {bound})")
            records.append(SampleRecord(fname, index, identity, expression))

    if not records:
        raise DataError(f"{manifest}: no records")
    images = np.stack([containers[r.file][r.index] for r in records])
    ids = [r.identity for r in records]
    exprs = [r.expression for r in records]
    return DatasetHandle(records=records, images=images,
                         k_id=k_id if k_id is not None else max(ids) + 1,
                         k_expr=k_expr if k_expr is not None else max(max(exprs) + 1, 7))


# ---------------------------------------------------------------------------
# batching


def _repair_stratification(batches: list, identities: np.ndarray) -> list:
    """Swap samples between batches until every batch holds >= 2 identities."""
    for bi, batch in enumerate(batches):
        if len(np.unique(identities[batch])) >= 2:
            continue
        lone = identities[batch[0]]
        done = False
        for bj, other in enumerate(batches):
            if bj == bi or done:
                continue
            for pj, cand in enumerate(other):
                if identities[cand] == lone:
                    continue
                # after the swap the donor must keep >= 2 identities
                donor = other.copy()
                donor[pj] = batch[0]
                if len(np.unique(identities[donor])) >= 2:
                    batches[bj] = donor
                    batch = batch.copy()
                    batch[0] = cand
                    batches[bi] = batch
                    done = True
                    break
        if not done:
            raise DataError("cannot stratify batches: not enough identity diversity")
    return batches


def epoch_batches(handle: DatasetHandle, batch_size: int, seed: int, epoch: int,
                  stratify: bool = True) -> list:
    """One epoch's batches as index arrays: a shuffled partition of the
    dataset. A trailing singleton is merged into the previous batch."""
    n = len(handle)
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (batch statistics need it)")
    rng = np.random.default_rng([seed, 5, epoch])
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    if stratify:
        if len(np.unique(handle.identities)) < 2:
            raise DataError("stratified batching needs >= 2 identities")
        batches = _repair_stratification(batches, handle.identities)
    return batches


def make_batches(handle: DatasetHandle, batch_size: int, seed: int,
                 stratify: bool = True, epochs=None):
    """Stream batches epoch by epoch, reshuffling each epoch; ``epochs=None``
    streams forever."""
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from epoch_batches(handle, batch_size, seed, epoch, stratify)
        epoch += 1


# ---------------------------------------------------------------------------
# verification pairs


@dataclass
class PairSet:
    """Record-index pairs with same-identity flags and a fold assignment."""

    a: np.ndarray
    b: np.ndarray
    same: np.ndarray
    fold: np.ndarray

    def __len__(self):
        return len(self.a)

    @property
    def n_folds(self) -> int:
        return int(self.fold.max()) + 1 if len(self.fold) else 0


def build_pairs(handle: DatasetHandle, n_pos: int, n_neg: int, folds: int,
                seed: int) -> PairSet:
    """Sample same-identity and cross-identity record pairs and deal them
    round-robin into balanced folds (sizes differ by <= 1, both polarities in
    every fold)."""
    if folds < 2:
        raise ConfigError(f"need >= 2 folds, got {folds}")
    if n_pos < folds or n_neg < folds:
        raise ConfigError("need at least one positive and one negative per fold")
    rng = np.random.default_rng([seed, 6])
    ids = handle.identities
    by_identity = {i: np.nonzero(ids == i)[0] for i in np.unique(ids)}
    rich = [i for i, idxs in sorted(by_identity.items()) if len(idxs) >= 2]
    if not rich:
        raise DataError("no identity has >= 2 samples; cannot build positive pairs")
    if len(by_identity) < 2:
        raise DataError("need >= 2 identities for negative pairs")

    a, b, same = [], [], []
    for _ in range(n_pos):
        ident = rich[rng.integers(len(rich))]
        pick = rng.choice(by_identity[ident], size=2, replace=False)
        a.append(pick[0]); b.append(pick[1]); same.append(True)
    idents = sorted(by_identity)
    for _ in range(n_neg):
        i, j = rng.choice(len(idents), size=2, replace=False)
        a.append(int(rng.choice(by_identity[idents[i]])))
        b.append(int(rng.choice(by_identity[idents[j]])))
        same.append(False)

    fold = np.empty(n_pos + n_neg, dtype=int)
    pos_order = rng.permutation(n_pos)
    neg_order = rng.permutation(n_neg) + n_pos
    for rank, pair_idx in enumerate(pos_order):
        fold[pair_idx] = rank % folds
    for rank, pair_idx in enumerate(neg_order):
        fold[pair_idx] = (rank + n_pos) % folds
    return PairSet(a=np.array(a), b=np.array(b), same=np.array(same), fold=fold)


def save_pairs(pairs: PairSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["a", "b", "same", "fold"])
        for i in range(len(pairs)):
            writer.writerow([pairs.a[i], pairs.b[i], int(pairs.same[i]), pairs.fold[i]])


def load_pairs(path) -> PairSet:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["a", "b", "same", "fold"]:
            raise DataError(f"{path}: bad pairs header {header}")
        rows = [[int(v) for v in row] for row in reader]
    if not rows:
        raise DataError(f"{path}: no pairs")
    arr = np.array(rows)
    return PairSet(a=arr[:, 0], b=arr[:, 1], same=arr[:, 2].astype(bool), fold=arr[:, 3])


# ---------------------------------------------------------------------------
# authentication samples


@dataclass(frozen=True)
class AuthSample:
    """One challenge-response trial: a user image judged against a reference
    image, with the expression the system demanded."""

    user: int
    reference: int
    same_identity: bool
    required_expression: int

    def expression_matches(self, handle: DatasetHandle) -> bool:
        return handle.records[self.user].expression == self.required_expression


QUADRANTS = (("ID-True", "Ex-True"), ("ID-False", "Ex-True"),
             ("ID-True", "Ex-False"), ("ID-False", "Ex-False"))


def build_auth_set(handle: DatasetHandle, required_expressions, seed: int,
                   quadrant_counts=(50, 50, 50, 50)) -> list:
    """Authentication trials covering all four (identity x expression)
    quadrants, with counts given in the order
    (ID-True/Ex-True, ID-False/Ex-True, ID-True/Ex-False, ID-False/Ex-False).
    """
    required = [expression_id(e, handle.k_expr) for e in required_expressions]
    if not required:
        raise ConfigError("need at least one required expression")
    if len(quadrant_counts) != 4:
        raise ConfigError("quadrant_counts must have four entries")
    rng = np.random.default_rng([seed, 7])
    ids = handle.identities
    exprs = handle.expressions
    by_identity = {i: np.nonzero(ids == i)[0] for i in np.unique(ids)}
    idents = sorted(by_identity)

    samples = []
    for (id_name, ex_name), count in zip(QUADRANTS, quadrant_counts):
        if count < 1:
            raise ProtocolError(f"quadrant {id_name}/{ex_name} is empty (count {count})")
        id_true = id_name == "ID-True"
        ex_true = ex_name == "Ex-True"
        if not id_true and len(idents) < 2:
            raise ProtocolError(f"quadrant {id_name}/{ex_name}: dataset has a "
                                "single identity, no impostor pairs exist")
        if ex_true:
            user_pool = np.nonzero(np.isin(exprs, required))[0]
        else:
            user_pool = np.arange(len(handle))
        if len(user_pool) == 0:
            raise ProtocolError(f"quadrant {id_name}/{ex_name}: no candidate user images")
        made = 0
        guard = 0
        while made < count:
            guard += 1
            if guard > 100 * count + 1000:
                raise ProtocolError(f"quadrant {id_name}/{ex_name}: cannot fill "
                                    f"{count} samples from this dataset")
            user = int(rng.choice(user_pool))
            if ex_true:
                req = int(exprs[user])
            else:
                choices = [r for r in required if r != exprs[user]]
                if not choices:
                    continue
                req = int(choices[rng.integers(len(choices))])
            if id_true:
                pool = by_identity[ids[user]]
                pool = pool[pool != user]
                if len(pool) == 0:
                    continue
                ref = int(rng.choice(pool))
            else:
                others = [i for i in idents if i != ids[user]]
                ref = int(rng.choice(by_identity[others[rng.integers(len(others))]]))
            samples.append(AuthSample(user=user, reference=ref,
                                      same_identity=id_true, required_expression=req))
            made += 1
    return samples


def quadrant_counts_of(samples, handle: DatasetHandle) -> dict:
    """Map (ID flag, Ex flag) -> sample count, keyed like QUADRANTS."""
    counts = {q: 0 for q in QUADRANTS}
    for s in samples:
        key = ("ID-True" if s.same_identity else "ID-False",
               "Ex-True" if s.expression_matches(handle) else "Ex-False")
        counts[key] += 1
    return counts
