"""Knowledge base of historical bug tickets.

Three aligned stores keyed by bug id: digest embeddings, telemetry
vectors (optional per ticket), and ticket text (incident description,
resolution, rendered log digest). The base also owns the telemetry
normalization statistics and the cluster index, both derived artifacts
that go stale when tickets are inserted after they were computed.

On disk a base is a directory: a JSON manifest with counts, stats,
index parameters, and sha256 checksums; little-endian float matrices
with JSON id sidecars for the vector stores (embeddings and centroids
as float32, matching their in-memory precision; telemetry vectors as
float64 so reloaded second-round scores are bit-identical); JSONL for
ticket text.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ann
from .embed import EmbeddingVector
from .errors import (
    CorruptStore,
    DataError,
    DimensionMismatch,
    DuplicateId,
    EmptyTelemetryStore,
    NoIndex,
    VersionMismatch,
)
from .logproc import process_raw_log
from .providers import CallRecord
from .telemetry import (
    VECTOR_DIM,
    NormalizationStats,
    TelemetrySeries,
    TelemetryVector,
    align,
    vectorize,
)

FORMAT_VERSION = 1

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
EMBEDDINGS_FILE = "embeddings.f32"
EMBEDDING_IDS_FILE = "embeddings.ids.json"
TELEMETRY_FILE = "telemetry.f64"
TELEMETRY_IDS_FILE = "telemetry.ids.json"
DESCRIPTIONS_FILE = "descriptions.jsonl"
CENTROIDS_FILE = "centroids.f32"


@dataclass(frozen=True)
class BugDescription:
    """Text half of a stored ticket.

    incident_text is the report that opened the ticket; resolution_text
    is the closing post that carries the mitigation, required for any
    ticket the judge may hand to plan generation. digest_text keeps the
    rendered log digest so prompts can be assembled without reprocessing
    the raw log; labels carry evaluation ground truth when known.
    """

    incident_text: str
    resolution_text: str | None = None
    triage_note: str | None = None
    labels: dict | None = None
    digest_text: str = ""


class KnowledgeBase:
    """In-memory stores plus derived stats and index."""

    def __init__(self, embedding_dimension: int):
        if embedding_dimension < 1:
            raise ValueError(f"bad embedding dimension {embedding_dimension}")
        self.embedding_dimension = embedding_dimension
        self.embeddings: dict[str, EmbeddingVector] = {}
        self.telemetry: dict[str, TelemetryVector] = {}
        self.descriptions: dict[str, BugDescription] = {}
        self.stats: NormalizationStats | None = None
        self.index: ann.AnnIndex | None = None
        self.index_stale: bool = False

    def __len__(self) -> int:
        return len(self.descriptions)

    def __contains__(self, bug_id: str) -> bool:
        return bug_id in self.descriptions

    def bug_ids(self) -> list[str]:
        return sorted(self.descriptions)

    def _mark_dirty(self) -> None:
        if self.index is not None:
            self.index_stale = True
        self.stats = None

    def insert_ticket(
        self,
        bug_id: str,
        desc: BugDescription,
        log_emb: EmbeddingVector,
        telemetry_vector: TelemetryVector | None = None,
    ) -> None:
        """Insert already-processed artifacts. DuplicateId on reuse."""
        if not bug_id:
            raise DataError("bug id must be non-empty")
        if bug_id in self.descriptions:
            raise DuplicateId(f"bug id {bug_id!r} already stored")
        if not desc.incident_text:
            raise DataError(f"ticket {bug_id!r} has an empty incident text")
        if log_emb.dimension != self.embedding_dimension:
            raise DimensionMismatch(
                f"embedding is {log_emb.dimension}-dim, store wants "
                f"{self.embedding_dimension}"
            )
        self.descriptions[bug_id] = desc
        self.embeddings[bug_id] = log_emb
        if telemetry_vector is not None:
            self.telemetry[bug_id] = telemetry_vector
        self._mark_dirty()

    def ingest_ticket(
        self,
        bug_id: str,
        *,
        description: str,
        resolution: str | None,
        raw_log: str,
        telemetry_series: list[TelemetrySeries] | None = None,
        extractor,
        embedder,
        grid_step: float = 1.0,
        triage_note: str | None = None,
        labels: dict | None = None,
        calls: list[CallRecord] | None = None,
    ) -> BugDescription:
        """Full ingestion path: digest the log, embed the digest, reduce
        telemetry to its feature vector when present."""
        if bug_id in self.descriptions:
            raise DuplicateId(f"bug id {bug_id!r} already stored")
        digest_text = process_raw_log(raw_log, extractor, calls)
        from .embed import embed as embed_fn

        vector = embed_fn(digest_text, embedder)
        tvec = None
        if telemetry_series:
            tvec = vectorize(align(telemetry_series, grid_step))
        desc = BugDescription(
            incident_text=description,
            resolution_text=resolution,
            triage_note=triage_note,
            labels=labels,
            digest_text=digest_text,
        )
        self.insert_ticket(bug_id, desc, vector, tvec)
        return desc

    def compute_telemetry_stats(self) -> NormalizationStats:
        if not self.telemetry:
            raise EmptyTelemetryStore("no telemetry vectors to normalize over")
        ordered = [self.telemetry[i] for i in sorted(self.telemetry)]
        self.stats = NormalizationStats.from_vectors(ordered)
        return self.stats

    def build_index(self, n_clusters: int | None = None, seed: int = 0) -> ann.AnnIndex:
        if n_clusters is None:
            n_clusters = ann.default_cluster_count(len(self.embeddings))
        self.index = ann.build_index(self.embeddings, n_clusters, seed)
        self.index_stale = False
        return self.index

    def require_index(self) -> ann.AnnIndex:
        if self.index is None:
            raise NoIndex("knowledge base has no cluster index; build one first")
        if self.index_stale:
            logger.warning(
                "cluster index is stale: tickets were inserted after the "
                "last build; rebuild before querying"
            )
            raise NoIndex("cluster index is stale; rebuild before querying")
        return self.index

    # On-disk format -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write the directory format. Derived state (stats, index) is
        persisted when present; a stale index is refused."""
        if self.index is not None and self.index_stale:
            raise DataError("index is stale; rebuild before saving")
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)

        emb_ids = sorted(self.embeddings)
        emb_matrix = (
            np.stack([self.embeddings[i].components for i in emb_ids])
            if emb_ids
            else np.zeros((0, self.embedding_dimension), dtype=np.float32)
        )
        _write_matrix(root / EMBEDDINGS_FILE, emb_matrix)
        _write_json(
            root / EMBEDDING_IDS_FILE,
            [
                {"id": i, "provider_tag": self.embeddings[i].provider_tag}
                for i in emb_ids
            ],
        )

        tel_ids = sorted(self.telemetry)
        tel_matrix = (
            np.stack([self.telemetry[i].components for i in tel_ids])
            if tel_ids
            else np.zeros((0, VECTOR_DIM), dtype=np.float64)
        )
        _write_matrix(root / TELEMETRY_FILE, tel_matrix, dtype="<f8")
        _write_json(root / TELEMETRY_IDS_FILE, tel_ids)

        with open(root / DESCRIPTIONS_FILE, "w", encoding="utf-8") as fh:
            for bug_id in sorted(self.descriptions):
                rec = self.descriptions[bug_id]
                fh.write(
                    json.dumps(
                        {
                            "bug_id": bug_id,
                            "incident_text": rec.incident_text,
                            "resolution_text": rec.resolution_text,
                            "triage_note": rec.triage_note,
                            "labels": rec.labels,
                            "digest_text": rec.digest_text,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

        data_files = [
            EMBEDDINGS_FILE,
            EMBEDDING_IDS_FILE,
            TELEMETRY_FILE,
            TELEMETRY_IDS_FILE,
            DESCRIPTIONS_FILE,
        ]
        index_meta = None
        if self.index is not None:
            _write_matrix(root / CENTROIDS_FILE, self.index.centroids)
            data_files.append(CENTROIDS_FILE)
            index_meta = {
                "n_clusters": self.index.n_clusters,
                "seed": self.index.build_seed,
            }
        elif (root / CENTROIDS_FILE).exists():
            (root / CENTROIDS_FILE).unlink()

        manifest = {
            "format_version": FORMAT_VERSION,
            "embedding_dimension": self.embedding_dimension,
            "telemetry_dimension": VECTOR_DIM,
            "counts": {
                "tickets": len(self.descriptions),
                "embeddings": len(emb_ids),
                "telemetry": len(tel_ids),
            },
            "telemetry_stats": (
                None
                if self.stats is None
                else {
                    "mean": [float(v) for v in self.stats.mean],
                    "std": [float(v) for v in self.stats.std],
                }
            ),
            "index": index_meta,
            "checksums": {name: _sha256(root / name) for name in data_files},
        }
        _write_json(root / MANIFEST_FILE, manifest)

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        """Read the directory format back, verifying version, checksums,
        and cross-file consistency before rebuilding derived state."""
        root = Path(path)
        manifest_path = root / MANIFEST_FILE
        if not manifest_path.exists():
            raise CorruptStore(f"{manifest_path} is missing")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"manifest is not valid JSON: {exc}") from exc

        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatch(
                f"store format {version!r}, reader supports {FORMAT_VERSION}"
            )
        for name, expected in manifest.get("checksums", {}).items():
            target = root / name
            if not target.exists():
                raise CorruptStore(f"{name} listed in manifest but missing")
            actual = _sha256(target)
            if actual != expected:
                raise CorruptStore(
                    f"{name} checksum mismatch: manifest {expected}, file {actual}"
                )

        dim = int(manifest["embedding_dimension"])
        kb = cls(dim)

        emb_ids = _read_json(root / EMBEDDING_IDS_FILE)
        emb_matrix = _read_matrix(root / EMBEDDINGS_FILE, len(emb_ids), dim)
        for row, entry in enumerate(emb_ids):
            kb.embeddings[entry["id"]] = EmbeddingVector(
                components=emb_matrix[row], provider_tag=entry.get("provider_tag", "")
            )

        tel_dim = int(manifest.get("telemetry_dimension", VECTOR_DIM))
        if tel_dim != VECTOR_DIM:
            raise VersionMismatch(
                f"store telemetry vectors are {tel_dim}-dim, reader wants {VECTOR_DIM}"
            )
        tel_ids = _read_json(root / TELEMETRY_IDS_FILE)
        tel_matrix = _read_matrix(
            root / TELEMETRY_FILE, len(tel_ids), VECTOR_DIM, dtype="<f8"
        )
        for row, bug_id in enumerate(tel_ids):
            kb.telemetry[bug_id] = TelemetryVector(components=tel_matrix[row])

        desc_path = root / DESCRIPTIONS_FILE
        if not desc_path.exists():
            raise CorruptStore(f"{DESCRIPTIONS_FILE} is missing")
        for line_no, line in enumerate(
            desc_path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptStore(
                    f"{DESCRIPTIONS_FILE} line {line_no} is not valid JSON"
                ) from exc
            kb.descriptions[obj["bug_id"]] = BugDescription(
                incident_text=obj["incident_text"],
                resolution_text=obj.get("resolution_text"),
                triage_note=obj.get("triage_note"),
                labels=obj.get("labels"),
                digest_text=obj.get("digest_text", ""),
            )

        counts = manifest.get("counts", {})
        for key, have in (
            ("tickets", len(kb.descriptions)),
            ("embeddings", len(kb.embeddings)),
            ("telemetry", len(kb.telemetry)),
        ):
            want = counts.get(key)
            if want is not None and want != have:
                raise CorruptStore(f"manifest says {want} {key}, found {have}")
        missing = set(kb.descriptions) - set(kb.embeddings)
        if missing:
            raise CorruptStore(
                f"{len(missing)} tickets have no embedding, e.g. {sorted(missing)[0]!r}"
            )

        stats = manifest.get("telemetry_stats")
        if stats is not None:
            kb.stats = NormalizationStats(
                mean=np.asarray(stats["mean"], dtype=np.float64),
                std=np.asarray(stats["std"], dtype=np.float64),
            )

        index_meta = manifest.get("index")
        if index_meta is not None:
            centroids = _read_matrix(
                root / CENTROIDS_FILE, int(index_meta["n_clusters"]), dim
            )
            ids = sorted(kb.embeddings)
            matrix32 = np.stack([kb.embeddings[i].components for i in ids])
            kb.index = ann._finish_index(
                ids, matrix32, centroids, int(index_meta["seed"])
            )
            kb.index_stale = False
        return kb


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_matrix(path: Path, matrix: np.ndarray, dtype: str = "<f4") -> None:
    path.write_bytes(np.ascontiguousarray(matrix, dtype=dtype).tobytes())


def _read_matrix(path: Path, rows: int, cols: int, dtype: str = "<f4") -> np.ndarray:
    if not path.exists():
        raise CorruptStore(f"{path.name} is missing")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    expected = rows * cols * itemsize
    if len(raw) != expected:
        raise CorruptStore(
            f"{path.name} holds {len(raw)} bytes, expected {expected} "
            f"({rows} x {cols} {np.dtype(dtype).name})"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(rows, cols).copy()


def _write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _read_json(path: Path):
    if not path.exists():
        raise CorruptStore(f"{path.name} is missing")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptStore(f"{path.name} is not valid JSON: {exc}") from exc
