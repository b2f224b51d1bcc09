"""Dataset model: person/object/material records, ingestion, splits.

A corpus is an immutable list of labeled samples plus its taxonomy.
Directory layout for ingestion is ``root/person<k>/<object>/<material>/``
with PPM/PGM images inside; the line-oriented manifest format is
``person object material path timestamp``.  Records whose
(object, material) pair violates the mapping table are rejected and
reported, never silently skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .imaging import Image, load_image
from .semantics import DEFAULT_MAPPING, LabelTaxonomy, MappingTable


@dataclass(frozen=True)
class SampleRecord:
    """One labeled image; ``object`` and ``material`` are 1-based indices."""

    person_id: int
    object: int
    material: int
    image: Image
    t: float
    path: str = ""


@dataclass
class Corpus:
    records: List[SampleRecord]
    taxonomy: LabelTaxonomy
    mapping: MappingTable

    def __len__(self) -> int:
        return len(self.records)

    def persons(self) -> List[int]:
        return sorted({r.person_id for r in self.records})

    def presence(self) -> Dict[Tuple[int, int], bool]:
        """(person, material) cells with at least one record."""
        cells: Dict[Tuple[int, int], bool] = {}
        for r in self.records:
            cells[(r.person_id, r.material)] = True
        return cells

    def material_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for r in self.records:
            counts[r.material] = counts.get(r.material, 0) + 1
        return counts


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: List[Tuple[str, str]] = field(default_factory=list)  # (path, reason)


@dataclass(frozen=True)
class SplitPlan:
    """Train/test partition; folds are (train indices, test indices) into records."""

    kind: str  # "time_kfold" | "leave_one_person_out"
    folds: Tuple[Tuple[Tuple[int, ...], Tuple[int, ...]], ...]
    fold_persons: Tuple[int, ...] = ()  # LOPO: test person per fold


def ingest_directory(
    root,
    taxonomy: Optional[LabelTaxonomy] = None,
    mapping: Optional[MappingTable] = None,
) -> Tuple[Corpus, IngestReport]:
    """Walk ``root/person<k>/<object>/<material>/*.ppm|pgm`` into a corpus.

    Timestamps are assigned by sorted path order so re-ingestion is
    deterministic regardless of filesystem enumeration order.
    """
    mapping = mapping if mapping is not None else DEFAULT_MAPPING
    taxonomy = taxonomy if taxonomy is not None else mapping.taxonomy
    root = Path(root)
    report = IngestReport()
    records: List[SampleRecord] = []

    paths = sorted(root.glob("person*/*/*/*")) if root.exists() else []
    t = 0.0
    for p in paths:
        if p.suffix.lower() not in (".ppm", ".pgm"):
            continue
        mat_slug = p.parent.name
        obj_slug = p.parent.parent.name
        person_part = p.parent.parent.parent.name
        try:
            person_id = int(person_part.removeprefix("person"))
        except ValueError:
            report.rejected.append((str(p), f"bad person directory {person_part!r}"))
            continue
        if obj_slug not in taxonomy.object_slugs():
            report.rejected.append((str(p), f"unknown object {obj_slug!r}"))
            continue
        if mat_slug not in taxonomy.material_slugs():
            report.rejected.append((str(p), f"unknown material {mat_slug!r}"))
            continue
        if not mapping.is_valid(obj_slug, mat_slug):
            report.rejected.append((str(p), f"invalid pair ({obj_slug}, {mat_slug})"))
            continue
        records.append(
            SampleRecord(
                person_id=person_id,
                object=taxonomy.object_index(obj_slug),
                material=taxonomy.material_index(mat_slug),
                image=load_image(p),
                t=t,
                path=str(p.relative_to(root)),
            )
        )
        report.accepted += 1
        t += 1.0
    return Corpus(records, taxonomy, mapping), report


def frame_sample(frames: Sequence[Tuple[float, Image]], rate: float) -> List[Image]:
    """Greedy temporal subsampling: keep the first frame of each 1/rate window.

    Windows form a fixed grid anchored at the first frame's timestamp.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    kept: List[Image] = []
    next_start: Optional[float] = None
    t0 = 0.0
    prev_t: Optional[float] = None
    for t, img in frames:
        if prev_t is not None and t < prev_t:
            raise ValueError("timestamps must be non-decreasing")
        prev_t = t
        if next_start is None:
            t0 = t
            kept.append(img)
            next_start = t0 + 1.0 / rate
            continue
        if t >= next_start:
            kept.append(img)
            next_start = t0 + (np.floor((t - t0) * rate) + 1.0) / rate
    return kept


def make_split(
    corpus: Corpus, kind: str, k: Optional[int] = None, rng_seed: int = 0
) -> SplitPlan:
    """Build a time-contiguous k-fold plan or a leave-one-person-out plan.

    Time folds are ordered by record timestamp (ties broken by record
    index), so ingestion order never changes the plan.  ``rng_seed`` is
    accepted for interface symmetry; both plans are deterministic.
    """
    n = len(corpus.records)
    if n == 0:
        raise ValueError("cannot split an empty corpus")

    if kind == "time_kfold":
        if k is None or k < 2:
            raise ValueError("time_kfold requires k >= 2")
        if k > n:
            raise ValueError(f"k={k} exceeds corpus size {n}")
        order = sorted(range(n), key=lambda i: (corpus.records[i].t, i))
        bounds = np.linspace(0, n, k + 1).astype(int)
        folds = []
        for f in range(k):
            test = tuple(order[bounds[f] : bounds[f + 1]])
            train = tuple(order[: bounds[f]] + order[bounds[f + 1] :])
            folds.append((train, test))
        return SplitPlan(kind="time_kfold", folds=tuple(folds))

    if kind == "leave_one_person_out":
        persons = corpus.persons()
        if len(persons) < 2:
            raise ValueError("leave_one_person_out requires >= 2 persons")
        folds = []
        for p in persons:
            test = tuple(i for i, r in enumerate(corpus.records) if r.person_id == p)
            train = tuple(i for i, r in enumerate(corpus.records) if r.person_id != p)
            folds.append((train, test))
        return SplitPlan(
            kind="leave_one_person_out", folds=tuple(folds), fold_persons=tuple(persons)
        )

    raise ValueError(f"unknown split kind {kind!r}")


def check_split(corpus: Corpus, plan: SplitPlan) -> None:
    """Assert the plan partitions the corpus with disjoint train/test folds."""
    n = len(corpus.records)
    covered: Set[int] = set()
    for train, test in plan.folds:
        if set(train) & set(test):
            raise AssertionError("train/test overlap within a fold")
        covered.update(test)
    if covered != set(range(n)):
        raise AssertionError("test folds do not partition the corpus")


# --- manifest I/O -----------------------------------------------------------


def write_manifest(corpus: Corpus, root, manifest_path) -> None:
    """Write images under ``root`` and the index file listing them.

    Lines are `person object material path timestamp`; paths are
    relative to ``root``.
    """
    from .imaging import save_image

    root = Path(root)
    lines = []
    for i, r in enumerate(corpus.records):
        obj = corpus.taxonomy.object_slug(r.object)
        mat = corpus.taxonomy.material_slug(r.material)
        rel = r.path or f"person{r.person_id}/{obj}/{mat}/{i:06d}.ppm"
        out = root / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        save_image(r.image, out)
        lines.append(f"{r.person_id} {obj} {mat} {rel} {r.t:.6f}")
    with open(manifest_path, "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(
    manifest_path,
    root,
    taxonomy: Optional[LabelTaxonomy] = None,
    mapping: Optional[MappingTable] = None,
) -> Corpus:
    mapping = mapping if mapping is not None else DEFAULT_MAPPING
    taxonomy = taxonomy if taxonomy is not None else mapping.taxonomy
    root = Path(root)
    records: List[SampleRecord] = []
    with open(manifest_path, "r", encoding="utf-8") as fp:
        for line in fp:
            line = line.strip()
            if not line:
                continue
            person, obj, mat, rel, t = line.split()
            records.append(
                SampleRecord(
                    person_id=int(person),
                    object=taxonomy.object_index(obj),
                    material=taxonomy.material_index(mat),
                    image=load_image(root / rel),
                    t=float(t),
                    path=rel,
                )
            )
    return Corpus(records, taxonomy, mapping)
