"""Region embedding matrices and per-voxel conditioning.

An embedding matrix holds one row per anatomical region (row 0 is the
background). Rows are L2-normalized, and a missing background row is
synthesized as the right singular vector of the smallest singular value of
the stacked region rows: the unit direction least expressible by the known
regions, which makes it a robust "none of the above" encoding.

On disk an embedding is ``<name>.scft`` ([N, C1] or [N-1, C1], f32 or f64)
plus a sidecar ``<name>.json``:

    {"labels": [...region names, background excluded...],
     "prompt_template": str, "encoder": str, "has_background_row": bool}
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import LabelOutOfRangeError, ScfregError, ZeroNormRowError
from .field import as_mask

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9


@dataclass
class EmbeddingMatrix:
    """Prepared per-region embeddings: unit-norm rows, row 0 = background."""

    matrix: np.ndarray          # [N, C1] float64
    labels: list                # N names, labels[0] == "background"
    source: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ScfregError(f"embedding matrix must be [N>=2, C1]; got {self.matrix.shape}")
        if len(self.labels) != self.matrix.shape[0]:
            raise ScfregError(
                f"{len(self.labels)} labels for {self.matrix.shape[0]} embedding rows"
            )
        if not np.all(np.isfinite(self.matrix)):
            raise ScfregError("embedding matrix contains non-finite values")

    @property
    def num_regions(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class VoxelConditioning:
    """Per-voxel region index and confidence p(x) of the assigned label."""

    region_index: np.ndarray    # int32, [S_1..S_d]
    confidence: np.ndarray      # float64 in [0,1], same shape

    def __post_init__(self):
        self.region_index = np.asarray(self.region_index, dtype=np.int32)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.region_index.shape != self.confidence.shape:
            raise ScfregError("region_index and confidence shapes differ")


def background_vector(b_tilde: np.ndarray) -> np.ndarray:
    """Unit vector maximally orthogonal to the region rows.

    Computes the SVD of the [N-1, C1] region matrix and returns the right
    singular vector of the smallest singular value. Sign is fixed so the
    first component above 1e-12 in magnitude is positive, making the
    result deterministic across runs.
    """
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    if b_tilde.ndim != 2 or b_tilde.shape[0] < 1:
        raise ScfregError(f"expected [N-1, C1] region rows, got {b_tilde.shape}")
    n_rows, dim = b_tilde.shape
    if dim < n_rows:
        logger.warning(
            "embedding dim %d < region count %d: background vector cannot be "
            "orthogonal to every region", dim, n_rows,
        )
    _, _, vt = np.linalg.svd(b_tilde, full_matrices=True)
    b0 = vt[-1]
    nz = np.nonzero(np.abs(b0) > 1e-12)[0]
    if nz.size and b0[nz[0]] < 0:
        b0 = -b0
    return b0 / np.linalg.norm(b0)


def prepare(b_raw: np.ndarray, labels, has_background_row: bool | None = None,
            source: str = "") -> EmbeddingMatrix:
    """Normalize raw embeddings and ensure a background row.

    Args:
        b_raw: [N, C1] (background row first) or [N-1, C1] (regions only).
        labels: the N-1 region names, or all N names starting with
            "background".
        has_background_row: whether row 0 of ``b_raw`` is a background row;
            inferred from the row/label counts when None. Pass False with an
            [N, C1] input to discard row 0 and recompute it.
        source: free-form provenance note (encoder, prompt template).

    Region rows are L2-normalized; a zero-norm region row is an error.
    Idempotent: preparing a prepared matrix changes nothing (within fp).
    """
    b_raw = np.asarray(b_raw, dtype=np.float64)
    if b_raw.ndim != 2:
        raise ScfregError(f"embedding input must be 2-D, got shape {b_raw.shape}")
    labels = list(labels)
    if labels and labels[0] == "background":
        labels = labels[1:]
    if has_background_row is None:
        if b_raw.shape[0] == len(labels) + 1:
            has_background_row = True
        elif b_raw.shape[0] == len(labels):
            has_background_row = False
        else:
            raise ScfregError(
                f"{b_raw.shape[0]} rows do not match {len(labels)} region labels"
            )
    regions = b_raw[1:] if has_background_row else b_raw
    if regions.shape[0] != len(labels):
        raise ScfregError(
            f"{regions.shape[0]} region rows do not match {len(labels)} labels"
        )
    norms = np.linalg.norm(regions, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormRowError(f"zero-norm region row(s) at {np.nonzero(norms == 0.0)[0]}")
    regions = regions / norms[:, None]
    if has_background_row:
        bg = b_raw[0]
        bg_norm = np.linalg.norm(bg)
        if bg_norm == 0.0:
            raise ZeroNormRowError("zero-norm background row")
        bg = bg / bg_norm
    else:
        bg = background_vector(regions)
    matrix = np.vstack([bg[None, :], regions])
    return EmbeddingMatrix(matrix=matrix, labels=["background"] + labels, source=source)


def append_region(emb: EmbeddingMatrix, row: np.ndarray, label: str) -> EmbeddingMatrix:
    """Extend a prepared matrix with one more region.

    This is the supported path for transferring a model to data with an
    extra anatomical region: the new row only adds a filter-bank entry; the
    implicit MLP and the rest of the network are untouched (the row must
    share the embedding dimension C1).
    """
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (emb.dim,):
        raise ScfregError(f"new row must have shape ({emb.dim},), got {row.shape}")
    norm = np.linalg.norm(row)
    if norm == 0.0:
        raise ZeroNormRowError("zero-norm region row")
    return EmbeddingMatrix(
        matrix=np.vstack([emb.matrix, row[None, :] / norm]),
        labels=emb.labels + [label],
        source=emb.source,
    )


def one_hot_embeddings(n: int) -> EmbeddingMatrix:
    """Identity-matrix embeddings for N regions (background = e_1);
    the no-text baseline."""
    if n < 2:
        raise ScfregError(f"need at least 2 regions (background + 1), got {n}")
    labels = ["background"] + [f"region_{i}" for i in range(1, n)]
    return EmbeddingMatrix(matrix=np.eye(n), labels=labels, source="one-hot")


def conditioning_from_mask(mask, n: int) -> VoxelConditioning:
    """Per-voxel lookup inputs from a segmentation mask.

    Hard masks (no probabilities) are fully trusted: confidence = 1
    everywhere, which reduces the filter blend to pure region filters.
    """
    mask = as_mask(mask)
    if mask.labels.min() < 0 or mask.labels.max() >= n:
        raise LabelOutOfRangeError(
            f"mask labels span [{mask.labels.min()}, {mask.labels.max()}], "
            f"embedding matrix has {n} rows"
        )
    conf = mask.probs if mask.probs is not None else np.ones(mask.shape)
    return VoxelConditioning(region_index=mask.labels, confidence=conf)


# --- embedding file I/O (the format the exporter tool writes) ---

def save_embeddings(path, matrix: np.ndarray, labels, prompt_template: str = "",
                    encoder: str = "", has_background_row: bool = False) -> None:
    """Write ``<path>`` (.scft) and its sidecar. ``labels`` excludes the
    background row regardless of ``has_background_row``."""
    tensorio.write_tensor(path, matrix)
    tensorio.write_sidecar(path, {
        "labels": list(labels),
        "prompt_template": prompt_template,
        "encoder": encoder,
        "has_background_row": bool(has_background_row),
    })


def load_embeddings(path) -> EmbeddingMatrix:
    """Read an embeddings file pair and run prepare() on it."""
    raw = np.asarray(tensorio.read_tensor(path), dtype=np.float64)
    meta = tensorio.read_sidecar(path)
    expected = len(meta["labels"]) + (1 if meta["has_background_row"] else 0)
    if raw.shape[0] != expected:
        raise ScfregError(
            f"{path}: {raw.shape[0]} rows but sidecar implies {expected}"
        )
    return prepare(
        raw,
        meta["labels"],
        has_background_row=meta["has_background_row"],
        source=meta.get("encoder", ""),
    )
