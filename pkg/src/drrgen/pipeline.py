"""Batch generation over a manifest, dataset statistics, and label joins.

The generation protocol: threshold -100 HU, volume translated (0, 300, 0)
mm, and an additional -90 degree z-rotation for the lateral view.  Each
record x view renders to ``<volume_name>_<view>.png`` plus a JSON sidecar;
re-runs skip outputs whose sidecar already matches the requested
parameters.  Parallelism is at job granularity, so worker count never
changes any output byte.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DrrError, PipelineError
from .geometry import RigidTransform, default_frontal_geometry
from .nifti import load_nifti
from .render import (
    NormalizationSpec,
    Provenance,
    encode_png,
    normalize,
    read_sidecar,
    render_drr,
    resolve_workers,
    sidecar_path,
    sidecar_payload,
)
from .siddon import AttenuationModel
from .volume import load_raw

# Fixed pathology label order; classifier manifests and stats reports all
# use exactly these column names.
LABEL_NAMES = (
    "Medical material",
    "Arterial wall calcification",
    "Cardiomegaly",
    "Pericardial effusion",
    "Coronary artery wall calcification",
    "Hiatal hernia",
    "Lymphadenopathy",
    "Emphysema",
    "Atelectasis",
    "Lung nodule",
    "Lung opacity",
    "Pulmonary fibrotic sequela",
    "Pleural effusion",
    "Mosaic attenuation pattern",
    "Peribronchial thickening",
    "Consolidation",
    "Bronchiectasis",
    "Interlobular septal thickening",
)

VIEWS = ("frontal", "lateral")

PROTOCOL_THRESHOLD_HU = -100.0
PROTOCOL_TRANSLATION_MM = (0.0, 300.0, 0.0)
LATERAL_RZ_DEG = -90.0


@dataclass(frozen=True)
class StudyRecord:
    """One CT study: volume identity, patient metadata, labels, report text."""

    volume_name: str
    patient_id: str = ""
    age: float | None = None
    sex: str = "unknown"
    labels: tuple[int, ...] | None = None
    findings_text: str | None = None
    split: str | None = None
    volume_path: str | None = None

    def __post_init__(self) -> None:
        if self.labels is not None:
            if len(self.labels) != len(LABEL_NAMES):
                raise ValueError(f"expected {len(LABEL_NAMES)} labels, got {len(self.labels)}")
            if any(v not in (0, 1) for v in self.labels):
                raise ValueError("labels must be binary")
        if self.sex not in ("M", "F", "unknown"):
            object.__setattr__(self, "sex", "unknown")


@dataclass(frozen=True)
class BatchConfig:
    """Parameters shared by every job of a batch run."""

    output_dir: Path
    views: tuple[str, ...] = ("frontal",)
    threshold: float = PROTOCOL_THRESHOLD_HU
    translation: tuple[float, float, float] = PROTOCOL_TRANSLATION_MM
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    detector_px: tuple[int, int] | None = None
    detector_spacing: tuple[float, float] | None = None
    scd: float | None = None
    sdd: float | None = None
    normalization: NormalizationSpec = NormalizationSpec()
    keep_energy: bool = False
    workers: int | None = None
    volume_root: Path | None = None
    resume: bool = True

    def __post_init__(self) -> None:
        if not self.views:
            raise ValueError("views must be non-empty")
        for v in self.views:
            if v not in VIEWS:
                raise ValueError(f"unknown view {v!r}; expected one of {VIEWS}")
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.volume_root is not None:
            object.__setattr__(self, "volume_root", Path(self.volume_root))

    def view_transform(self, view: str) -> RigidTransform:
        rx, ry, rz = self.rotation
        if view == "lateral":
            rz = rz + LATERAL_RZ_DEG
        return RigidTransform(rotation=(rx, ry, rz), translation=self.translation)


@dataclass
class JobResult:
    volume_name: str
    view: str
    output: str
    status: str  # rendered | skipped | failed
    reason: str = ""
    seconds: float = 0.0


@dataclass
class BatchReport:
    """Batch outcome.  The `runtime` section and per-job `seconds` are the
    only parts allowed to differ between runs with different worker counts."""

    parameters: dict
    runtime: dict = field(default_factory=dict)
    jobs: list[JobResult] = field(default_factory=list)

    @property
    def counts(self) -> dict:
        c = {"rendered": 0, "skipped": 0, "failed": 0}
        for j in self.jobs:
            c[j.status] += 1
        return c

    def to_dict(self) -> dict:
        return {
            "engine": {"name": "drrgen", "version": __version__},
            "parameters": self.parameters,
            "runtime": self.runtime,
            "counts": self.counts,
            "jobs": [
                {
                    "volume_name": j.volume_name,
                    "view": j.view,
                    "output": j.output,
                    "status": j.status,
                    "reason": j.reason,
                    "seconds": round(j.seconds, 3),
                }
                for j in self.jobs
            ],
        }


def _load_volume_any(path: Path):
    if path.suffix == ".raw":
        return load_raw(path)
    return load_nifti(path)


def read_manifest(
    path: str | Path,
    volume_root: Path | None = None,
    findings_csv: str | Path | None = None,
) -> list[StudyRecord]:
    """Parse a generation manifest CSV.

    Requires a ``volume_name`` column.  ``volume_path`` is optional; when
    absent, names resolve against volume_root (default: the manifest's
    directory).  Label, split, and metadata columns are carried through
    when present.  Report text may live inline in a ``findings`` column or
    in a separate CSV joined on volume_name.
    """
    path = Path(path)
    root = Path(volume_root) if volume_root is not None else path.parent
    findings = _read_findings(findings_csv) if findings_csv else {}
    records = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "volume_name" not in reader.fieldnames:
                raise PipelineError(f"{path}: manifest needs a 'volume_name' column")
            has_labels = all(name in reader.fieldnames for name in LABEL_NAMES)
            for row in reader:
                name = row["volume_name"].strip()
                if not name:
                    continue
                vp = (row.get("volume_path") or "").strip()
                resolved = Path(vp) if vp else root / name
                if not resolved.is_absolute():
                    resolved = root / resolved
                labels = None
                if has_labels:
                    try:
                        labels = tuple(int(float(row[k])) for k in LABEL_NAMES)
                    except (TypeError, ValueError) as exc:
                        raise PipelineError(
                            f"{path}: unparseable label value for volume '{name}': {exc}"
                        ) from exc
                age = _parse_age(row.get("age", ""))
                records.append(
                    StudyRecord(
                        volume_name=name,
                        patient_id=(row.get("patient_id") or "").strip(),
                        age=age,
                        sex=(row.get("sex") or "unknown").strip() or "unknown",
                        labels=labels,
                        findings_text=row.get("findings") or findings.get(name),
                        split=(row.get("split") or None),
                        volume_path=str(resolved),
                    )
                )
    except OSError as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from exc
    return records


def _read_findings(path: str | Path) -> dict[str, str]:
    """volume_name -> report text from a separate findings CSV."""
    out: dict[str, str] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            if "volume_name" not in fields or "findings" not in fields:
                raise PipelineError(f"{path}: findings CSV needs volume_name and findings columns")
            for row in reader:
                name = (row.get("volume_name") or "").strip()
                if name:
                    out[name] = row.get("findings") or ""
    except OSError as exc:
        raise PipelineError(f"cannot read findings {path}: {exc}") from exc
    return out


def _parse_age(text: str) -> float | None:
    text = (text or "").strip()
    if not text:
        return None
    try:
        age = float(text)
    except ValueError:
        return None
    return age if math.isfinite(age) else None


def _requested_payload(volume, config: BatchConfig, view: str, source: str) -> dict:
    """Sidecar payload a fresh render would produce, for resume comparison.

    The energy-dump entry is nulled on both sides of the comparison; it
    names a file, not a render parameter.
    """
    geom = _job_geometry(volume, config)
    prov = Provenance(
        geometry=geom,
        transform=config.view_transform(view),
        model=AttenuationModel(threshold=config.threshold),
        volume_source=source,
        volume_sha256=volume.content_hash,
    )
    payload = sidecar_payload(prov, config.normalization, geom.detector_px, None)
    return payload


def _job_geometry(volume, config: BatchConfig):
    geom = default_frontal_geometry(volume)
    overrides = {}
    if config.detector_px is not None:
        overrides["detector_px"] = config.detector_px
    if config.detector_spacing is not None:
        overrides["detector_spacing"] = config.detector_spacing
    if config.scd is not None:
        overrides["scd"] = config.scd
    if config.sdd is not None:
        overrides["sdd"] = config.sdd
    if overrides:
        from dataclasses import replace

        geom = replace(geom, **overrides)
    return geom


def _run_job(record: StudyRecord, view: str, config: BatchConfig) -> JobResult:
    out_png = config.output_dir / f"{record.volume_name}_{view}.png"
    start = time.perf_counter()
    try:
        vol_path = Path(record.volume_path or "")
        if not vol_path.exists():
            return JobResult(
                record.volume_name, view, str(out_png), "failed",
                reason=f"volume file not found: {vol_path}",
            )
        volume = _load_volume_any(vol_path)
        source = str(vol_path.resolve())

        if config.resume and out_png.exists() and sidecar_path(out_png).exists():
            existing = read_sidecar(sidecar_path(out_png))
            requested = _requested_payload(volume, config, view, source)
            dump_name = existing["image"].get("energy_dump")
            dump_satisfied = not config.keep_energy or (
                bool(dump_name) and (out_png.parent / dump_name).exists()
            )
            existing["image"]["energy_dump"] = None
            if dump_satisfied and existing == requested:
                return JobResult(
                    record.volume_name, view, str(out_png), "skipped",
                    seconds=time.perf_counter() - start,
                )

        geom = _job_geometry(volume, config)
        image = render_drr(
            volume,
            geom,
            config.view_transform(view),
            AttenuationModel(threshold=config.threshold),
            workers=1,  # batch parallelism is per job
            volume_source=source,
        )
        gray = normalize(image, config.normalization)
        encode_png(
            gray, out_png, image.provenance, config.normalization,
            energies=image.energies if config.keep_energy else None,
        )
        return JobResult(
            record.volume_name, view, str(out_png), "rendered",
            seconds=time.perf_counter() - start,
        )
    except DrrError as exc:
        return JobResult(
            record.volume_name, view, str(out_png), "failed",
            reason=str(exc), seconds=time.perf_counter() - start,
        )


def run_batch(manifest: str | Path, config: BatchConfig) -> BatchReport:
    """Render every record x view of a manifest; per-volume failures are
    recorded in the report rather than raised."""
    records = read_manifest(manifest, config.volume_root)
    try:
        config.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create output directory {config.output_dir}: {exc}") from exc

    jobs = [(rec, view) for rec in records for view in config.views]
    workers = resolve_workers(config.workers)

    report = BatchReport(
        parameters={
            "manifest": str(manifest),
            "output_dir": str(config.output_dir),
            "views": list(config.views),
            "threshold_hu": config.threshold,
            "translation_mm": list(config.translation),
            "rotation_deg": list(config.rotation),
        },
        runtime={"workers": workers},
    )
    if workers == 1 or len(jobs) <= 1:
        results = [_run_job(rec, view, config) for rec, view in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda rv: _run_job(rv[0], rv[1], config), jobs))
    # single collector: results are ordered deterministically regardless of
    # completion order
    report.jobs = sorted(results, key=lambda j: (j.volume_name, j.view))
    return report


def write_report(report: BatchReport, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


# -- dataset statistics -------------------------------------------------------


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    """Median and quartiles as medians of the halves, excluding the median
    itself for odd counts (three patient ages {34, 45, 61} give Q1=34,
    Q3=61)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    med = float(np.median(v))
    if n < 2:
        return med, med, med
    lower = v[: n // 2]
    upper = v[(n + 1) // 2:]
    return float(np.median(lower)), med, float(np.median(upper))


def dataset_stats(
    labels_csv: str | Path,
    metadata_csv: str | Path | None = None,
    *,
    age_bin_years: int = 5,
    age_max: int = 105,
) -> dict:
    """Label distribution per split plus patient age/sex summaries.

    The per-class ratio is valid_count / train_count rounded to 3 decimals
    (0.061 for Cardiomegaly's 325/5308).  Ages that fail to parse are
    excluded and counted.
    """
    labels_csv = Path(labels_csv)
    counts = {name: {"train": 0, "valid": 0} for name in LABEL_NAMES}
    skipped_rows = 0
    try:
        with open(labels_csv, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            for name in LABEL_NAMES:
                if name not in fields:
                    raise PipelineError(f"{labels_csv}: missing label column '{name}'")
            if "split" not in fields:
                raise PipelineError(f"{labels_csv}: missing 'split' column")
            for row in reader:
                split = (row.get("split") or "").strip()
                if split not in ("train", "valid"):
                    skipped_rows += 1
                    continue
                try:
                    values = [int(float(row[name])) for name in LABEL_NAMES]
                except (TypeError, ValueError):
                    skipped_rows += 1
                    continue
                if any(v not in (0, 1) for v in values):
                    skipped_rows += 1
                    continue
                for name, v in zip(LABEL_NAMES, values):
                    counts[name][split] += v
    except OSError as exc:
        raise PipelineError(f"cannot read labels {labels_csv}: {exc}") from exc

    labels_out = {}
    for name in LABEL_NAMES:
        train = counts[name]["train"]
        valid = counts[name]["valid"]
        ratio = round(valid / train, 3) if train else None
        labels_out[name] = {"train": train, "valid": valid, "ratio": ratio}

    report = {
        "ratio_definition": "valid_count / train_count, rounded to 3 decimals",
        "labels": labels_out,
        "label_rows_skipped": skipped_rows,
    }

    if metadata_csv is not None:
        report["patients"] = _patient_stats(Path(metadata_csv), age_bin_years, age_max)
    return report


def _patient_stats(path: Path, bin_years: int, age_max: int) -> dict:
    ages: dict[str, list[float]] = {"train": [], "valid": []}
    sexes: dict[str, dict[str, int]] = {
        "train": {"M": 0, "F": 0, "unknown": 0},
        "valid": {"M": 0, "F": 0, "unknown": 0},
    }
    seen: dict[str, set] = {"train": set(), "valid": set()}
    n_rows = {"train": 0, "valid": 0}
    age_excluded = {"train": 0, "valid": 0}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            if "split" not in fields:
                raise PipelineError(f"{path}: metadata needs a 'split' column")
            for row in reader:
                split = (row.get("split") or "").strip()
                if split not in ("train", "valid"):
                    continue
                pid = (row.get("patient_id") or "").strip()
                if pid:
                    if pid in seen[split]:
                        continue
                    seen[split].add(pid)
                n_rows[split] += 1
                age = _parse_age(row.get("age", ""))
                if age is None:
                    age_excluded[split] += 1
                else:
                    ages[split].append(age)
                sex = (row.get("sex") or "").strip()
                sexes[split][sex if sex in ("M", "F") else "unknown"] += 1
    except OSError as exc:
        raise PipelineError(f"cannot read metadata {path}: {exc}") from exc

    edges = list(range(0, age_max + bin_years, bin_years))
    out = {}
    for split in ("train", "valid"):
        a = np.array(ages[split])
        entry: dict = {
            "n_patients": n_rows[split],
            "sex": sexes[split],
            "age_excluded": age_excluded[split],
        }
        if len(a):
            q1, med, q3 = _quartiles(a)
            hist, _ = np.histogram(a, bins=edges)
            entry.update(
                {
                    "age_mean": float(a.mean()),
                    "age_std": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
                    "age_median": med,
                    "age_q1": q1,
                    "age_q3": q3,
                    "age_min": float(a.min()),
                    "age_max": float(a.max()),
                    "age_histogram": {"bin_edges": edges, "counts": hist.tolist()},
                }
            )
        out[split] = entry
    return out


def format_stats_table(report: dict) -> str:
    """Aligned text rendering of a stats report."""
    lines = []
    lines.append(f"Ratio = {report['ratio_definition']}")
    lines.append("")
    name_w = max(len(n) for n in LABEL_NAMES)
    header = f"{'Label':<{name_w}}  {'Train':>8}  {'Valid':>8}  {'Ratio':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    for name in LABEL_NAMES:
        row = report["labels"][name]
        ratio = "n/a" if row["ratio"] is None else f"{row['ratio']:.3f}"
        lines.append(f"{name:<{name_w}}  {row['train']:>8}  {row['valid']:>8}  {ratio:>6}")
    if "patients" in report:
        for split in ("train", "valid"):
            p = report["patients"][split]
            lines.append("")
            lines.append(f"{split}: N={p['n_patients']}  sex M/F/unknown = "
                         f"{p['sex']['M']}/{p['sex']['F']}/{p['sex']['unknown']}")
            if "age_mean" in p:
                lines.append(
                    f"  age mean={p['age_mean']:.2f} std={p['age_std']:.2f} "
                    f"median={p['age_median']:.0f} Q1={p['age_q1']:.0f} Q3={p['age_q3']:.0f} "
                    f"range=[{p['age_min']:.0f}, {p['age_max']:.0f}]"
                )
            if p["age_excluded"]:
                lines.append(f"  ages excluded (unparseable): {p['age_excluded']}")
    return "\n".join(lines) + "\n"


# -- classifier manifest export ------------------------------------------------


def export_classifier_manifest(
    labels_csv: str | Path,
    images_dir: str | Path,
    out_csv: str | Path,
    *,
    view: str = "frontal",
) -> tuple[int, int]:
    """Write one row per generated image of the given view: path, split, labels.

    Rows are sorted by volume_name so the output is byte-identical for any
    input ordering.  Label rows without a rendered image are omitted and
    counted; returns (rows_written, rows_omitted).
    """
    labels_csv = Path(labels_csv)
    images_dir = Path(images_dir)
    out_csv = Path(out_csv)

    entries = []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for req in ("volume_name", "split", *LABEL_NAMES):
            if req not in fields:
                raise PipelineError(f"{labels_csv}: missing column '{req}'")
        for row in reader:
            name = row["volume_name"].strip()
            if not name:
                continue
            labels = [int(float(row[k])) for k in LABEL_NAMES]
            entries.append((name, (row.get("split") or "").strip(), labels))

    entries.sort(key=lambda e: e[0])
    written = 0
    omitted = 0
    tmp = out_csv.with_name(out_csv.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "split", *LABEL_NAMES])
        for name, split, labels in entries:
            png = images_dir / f"{name}_{view}.png"
            if not png.exists():
                omitted += 1
                continue
            writer.writerow([str(png), split, *labels])
            written += 1
    os.replace(tmp, out_csv)
    return written, omitted
