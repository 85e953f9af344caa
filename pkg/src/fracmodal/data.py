"""Synthetic multimodal domain suites and the embedding file format.

The generator stands in for frozen encoders: category prototypes are
orthogonal directions in R^D, each domain applies its own rotation (Cayley
transform of a scaled random skew matrix, so shift 0 means identity) plus a
bias, and tactile samples see only a fixed half of the coordinates before
the domain transform, mimicking a local receptive field. Language samples
are unrotated prototype perturbations and exist only for the source domain.

Files use a little-endian record format: magic ``OVEM``, version and
dimension as u32, record count as u64, then per record category u16,
domain u16, modality u8, pair id u64 and D float32 values. Training promotes
the stored single-precision vectors to double.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, IncompleteSampleError

MAGIC = b"OVEM"
VERSION = 1
MODALITY_CODES = {"vis": 0, "tac": 1, "lang": 2}
MODALITY_NAMES = {code: name for name, code in MODALITY_CODES.items()}

_HEADER = struct.Struct("<4sIIQ")
_RECORD = struct.Struct("<HHBQ")


@dataclass
class LabeledEmbedding:
    """One stored vector with its category, domain, modality and pair id."""

    vector: np.ndarray
    category: int
    domain: int
    modality: str
    pair_id: int


@dataclass
class PairedSample:
    """A visual/tactile pair sharing category, domain and pair id."""

    vis: np.ndarray
    tac: np.ndarray
    category: int
    domain: int
    pair_id: int


@dataclass
class EmbeddingDataset:
    """Paired samples plus (possibly empty) per-category language pools."""

    dim: int
    pairs: list[PairedSample]
    language: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def categories_present(self) -> list[int]:
        return sorted({p.category for p in self.pairs})

    def require_language(self) -> None:
        missing = [c for c in self.categories_present() if not self.language.get(c)]
        if missing:
            raise IncompleteSampleError(
                f"dataset has no language embeddings for categories {missing}"
            )


@dataclass
class DomainSuite:
    """One source domain (with language) plus unseen target domains."""

    dim: int
    classes: int
    source_train: EmbeddingDataset
    source_test: EmbeddingDataset
    targets: list[EmbeddingDataset]

    def all_domains(self) -> list[EmbeddingDataset]:
        return [self.source_train, self.source_test, *self.targets]


def _rotation(rng: np.random.Generator, dim: int, shift: float) -> np.ndarray:
    """Orthogonal matrix at 'angle' ~shift from the identity (Cayley form)."""
    raw = rng.standard_normal((dim, dim))
    skew = (raw - raw.T) / 2.0
    top = np.linalg.norm(skew, 2)
    if top > 0:
        skew = skew / top
    b = 0.5 * shift * skew
    eye = np.eye(dim)
    return np.linalg.solve(eye + b, eye - b)


def synth_suite(
    classes: int = 5,
    dim: int = 32,
    per_class: int = 40,
    targets: int = 3,
    shift: float = 0.4,
    noise: float = 0.316227766016838,
    lang_per_class: int = 80,
    seed: int = 0,
    prototype_scale: float = 2.0,
    bias_scale: float = 1.0,
) -> DomainSuite:
    """Generate a fully seed-deterministic domain suite.

    Domain 0 is the source; its pool also carries ``lang_per_class``
    language embeddings per category. Domains 1..targets are unseen.
    """
    if classes < 2:
        raise ConfigError("need at least two categories")
    if dim < 8:
        raise ConfigError("need dim >= 8")
    if per_class < 1 or targets < 1 or lang_per_class < 1:
        raise ConfigError("counts must be positive")
    rng = np.random.default_rng(seed)

    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    prototypes = prototype_scale * basis[:, :classes].T  # (C, D) orthogonal rows

    mask = np.zeros(dim)
    mask[: (dim + 1) // 2] = 1.0  # tactile keeps the first ceil(D/2) coordinates

    n_domains = targets + 1
    rotations, biases = [], []
    for _ in range(n_domains):
        rotations.append(_rotation(rng, dim, shift))
        biases.append(shift * bias_scale * rng.standard_normal(dim) / np.sqrt(dim))

    pair_counter = 0

    def make_split(domain: int, count: int) -> EmbeddingDataset:
        nonlocal pair_counter
        q, b = rotations[domain], biases[domain]
        pairs = []
        for cat in range(classes):
            proto = prototypes[cat]
            for _ in range(count):
                vis = q @ (proto + noise * rng.standard_normal(dim)) + b
                tac = q @ (mask * (proto + noise * rng.standard_normal(dim))) + b
                pairs.append(PairedSample(vis, tac, cat, domain, pair_counter))
                pair_counter += 1
        return EmbeddingDataset(dim, pairs)

    source_train = make_split(0, per_class)
    source_test = make_split(0, per_class)
    language = {
        cat: [
            prototypes[cat] + noise * rng.standard_normal(dim)
            for _ in range(lang_per_class)
        ]
        for cat in range(classes)
    }
    source_train.language = language
    target_sets = [make_split(d, per_class) for d in range(1, n_domains)]
    for t in target_sets:
        assert not t.language, "target domains must not carry language"
    return DomainSuite(dim, classes, source_train, source_test, target_sets)


def transformed_prototypes(suite_seed: int, classes: int, dim: int, shift: float,
                           targets: int = 3, prototype_scale: float = 2.0,
                           bias_scale: float = 1.0) -> np.ndarray:
    """Per-domain images of the category prototypes, for shift diagnostics.

    Replays the generator's draws so the result matches what synth_suite
    used for the same seed.
    """
    rng = np.random.default_rng(suite_seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    prototypes = prototype_scale * basis[:, :classes].T
    out = np.zeros((targets + 1, classes, dim))
    for d in range(targets + 1):
        q = _rotation(rng, dim, shift)
        b = shift * bias_scale * rng.standard_normal(dim) / np.sqrt(dim)
        out[d] = prototypes @ q.T + b
    return out


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------


def dataset_to_records(dataset: EmbeddingDataset) -> list[LabeledEmbedding]:
    records = []
    for p in dataset.pairs:
        records.append(LabeledEmbedding(p.vis, p.category, p.domain, "vis", p.pair_id))
        records.append(LabeledEmbedding(p.tac, p.category, p.domain, "tac", p.pair_id))
    lang_id = max((p.pair_id for p in dataset.pairs), default=0) + 1
    for cat in sorted(dataset.language):
        for vec in dataset.language[cat]:
            records.append(LabeledEmbedding(vec, cat, 0, "lang", lang_id))
            lang_id += 1
    return records


def save_embeddings(path, records: list[LabeledEmbedding], dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(records)))
        for rec in records:
            vec = np.asarray(rec.vector, dtype="<f4")
            if vec.shape != (dim,):
                raise FormatError(f"record vector has shape {vec.shape}, expected ({dim},)")
            code = MODALITY_CODES[rec.modality]
            fh.write(_RECORD.pack(rec.category, rec.domain, code, rec.pair_id))
            fh.write(vec.tobytes())


def load_embeddings(path) -> tuple[int, list[LabeledEmbedding]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for header", offset=len(blob))
    magic, version, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dim == 0:
        raise FormatError("zero dimension", offset=8)
    offset = _HEADER.size
    vec_bytes = 4 * dim
    records = []
    for _ in range(count):
        if offset + _RECORD.size + vec_bytes > len(blob):
            raise FormatError("truncated record", offset=offset)
        category, domain, code, pair_id = _RECORD.unpack_from(blob, offset)
        if code not in MODALITY_NAMES:
            raise FormatError(f"unknown modality code {code}", offset=offset + 4)
        offset += _RECORD.size
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise FormatError("non-finite vector entries", offset=offset)
        offset += vec_bytes
        records.append(LabeledEmbedding(vec, category, domain, MODALITY_NAMES[code], pair_id))
    if offset != len(blob):
        raise FormatError("trailing bytes after last record", offset=offset)
    return dim, records


def records_to_dataset(dim: int, records: list[LabeledEmbedding]) -> EmbeddingDataset:
    """Re-pair vis/tac records by pair id and collect language pools."""
    by_pair: dict[int, dict[str, LabeledEmbedding]] = {}
    language: dict[int, list[np.ndarray]] = {}
    for rec in records:
        if rec.modality == "lang":
            language.setdefault(rec.category, []).append(rec.vector)
            continue
        slot = by_pair.setdefault(rec.pair_id, {})
        if rec.modality in slot:
            raise FormatError(f"duplicate {rec.modality} record for pair {rec.pair_id}")
        slot[rec.modality] = rec
    pairs = []
    for pair_id in sorted(by_pair):
        slot = by_pair[pair_id]
        if set(slot) != {"vis", "tac"}:
            raise FormatError(f"pair {pair_id} is missing a modality")
        vis, tac = slot["vis"], slot["tac"]
        if (vis.category, vis.domain) != (tac.category, tac.domain):
            raise FormatError(f"pair {pair_id} mixes categories or domains")
        pairs.append(PairedSample(vis.vector, tac.vector, vis.category, vis.domain, pair_id))
    return EmbeddingDataset(dim, pairs, language)


def save_dataset(path, dataset: EmbeddingDataset) -> None:
    save_embeddings(path, dataset_to_records(dataset), dataset.dim)


def load_dataset(path) -> EmbeddingDataset:
    dim, records = load_embeddings(path)
    return records_to_dataset(dim, records)
