"""Full-image DRR rendering, intensity mapping, and PNG + sidecar output.

A render traverses one ray per detector pixel against a shared immutable
volume.  Pixels are independent, each is written by exactly one worker,
and per-ray accumulation is strictly ordered, so the energy image is
bit-identical for any worker count.  Every PNG gets a JSON sidecar with
the complete parameter set; re-rendering from a sidecar reproduces the
image byte for byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import GeometryError, RenderError
from .geometry import ProjectionGeometry, RigidTransform
from .siddon import AttenuationModel, _render_block
from .volume import CtVolume

ENERGY_DUMP_SUFFIX = ".energy.f32"


def resolve_workers(workers: int | None) -> int:
    """Explicit argument beats the DRR_WORKERS env var beats the CPU count."""
    if workers is not None:
        n = int(workers)
    elif os.environ.get("DRR_WORKERS"):
        n = int(os.environ["DRR_WORKERS"])
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    return n


@dataclass(frozen=True)
class NormalizationSpec:
    """8-bit intensity mapping.

    min-max stretches the image's own range to [0, 255] (constant images
    map to 0); fixed-range clamps to [lo, hi] first, for comparability
    across images.  Energies are accumulated attenuation, so the direct
    mapping already gives the radiograph convention (air dark, dense
    tissue bright); invert applies 255 - g for a transmission-style
    negative.
    """

    mode: str = "min-max"
    bounds: tuple[float, float] | None = None
    invert: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("min-max", "fixed-range"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if self.mode == "fixed-range":
            if self.bounds is None:
                raise ValueError("fixed-range normalization needs (lo, hi) bounds")
            lo, hi = (float(b) for b in self.bounds)
            if not lo < hi:
                raise ValueError(f"fixed-range bounds need lo < hi, got {(lo, hi)}")
            object.__setattr__(self, "bounds", (lo, hi))
        elif self.bounds is not None:
            raise ValueError("min-max normalization takes no bounds")


@dataclass(frozen=True)
class Provenance:
    """Everything needed to reproduce an energy image bit for bit."""

    geometry: ProjectionGeometry
    transform: RigidTransform
    model: AttenuationModel
    volume_source: str
    volume_sha256: str
    engine_version: str = __version__


@dataclass(frozen=True)
class EnergyImage:
    """Accumulated per-pixel energies, pre-normalization.

    energies has shape (W, H) indexed [u, v]; row-major with v fastest.
    """

    energies: np.ndarray
    provenance: Provenance

    def __post_init__(self) -> None:
        e = np.asarray(self.energies, dtype=np.float64)
        e.flags.writeable = False
        object.__setattr__(self, "energies", e)

    @property
    def size(self) -> tuple[int, int]:
        return self.energies.shape[0], self.energies.shape[1]


def _chunk_bounds(total: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, total))
    edges = np.linspace(0, total, parts + 1, dtype=np.int64)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts)]


def render_drr(
    volume: CtVolume,
    geom: ProjectionGeometry,
    transform: RigidTransform = RigidTransform(),
    model: AttenuationModel = AttenuationModel(),
    *,
    workers: int | None = None,
    volume_source: str = "",
) -> EnergyImage:
    """Render one DRR: a traversal per detector pixel.

    The rigid motion of the volume is applied as the inverse map on the
    rays, pivoting about the geometry isocenter.  Output is independent of
    the worker count.
    """
    grid = volume.grid
    pivot = np.asarray(geom.isocenter, dtype=np.float64)

    src = transform.inverse_map_points(geom.source(), pivot)
    if bool(np.all((grid.lo < src) & (src < grid.hi))):
        raise GeometryError(
            "the X-ray source lies inside the transformed volume; "
            "increase scd or translate the volume"
        )

    w, h = geom.detector_px
    pts = transform.inverse_map_points(geom.pixel_grid(), pivot)
    flat = np.ascontiguousarray(pts.reshape(w * h, 3))

    out = np.zeros(w * h)
    nworkers = resolve_workers(workers)
    chunks = _chunk_bounds(w * h, nworkers)
    if len(chunks) == 1:
        _render_block(
            src, flat, grid.voxels, grid.base, grid.step, grid.nvox,
            grid.lo, grid.hi, model.threshold, out, 0, w * h,
        )
    else:
        # the kernel releases the GIL, so plain threads scale across cores;
        # each chunk writes a disjoint slice of `out`
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _render_block,
                    src, flat, grid.voxels, grid.base, grid.step, grid.nvox,
                    grid.lo, grid.hi, model.threshold, out, start, stop,
                )
                for start, stop in chunks
            ]
            for fut in futures:
                fut.result()

    energies = out.reshape(w, h)
    if not np.isfinite(energies).all():
        u, v = np.argwhere(~np.isfinite(energies))[0]
        raise RenderError(f"non-finite energy at pixel ({int(u)}, {int(v)})")

    prov = Provenance(
        geometry=geom,
        transform=transform,
        model=model,
        volume_source=volume_source,
        volume_sha256=volume.content_hash,
    )
    return EnergyImage(energies=energies, provenance=prov)


def normalize(image: EnergyImage | np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Map energies to 8-bit gray with round-half-up.

    Returns a (W, H) uint8 array.  Constant min-max images come out all
    zero regardless of inversion (documented degenerate case).
    """
    e = image.energies if isinstance(image, EnergyImage) else np.asarray(image, dtype=np.float64)
    if spec.mode == "min-max":
        mn = float(e.min())
        mx = float(e.max())
        if mx == mn:
            return np.zeros(e.shape, dtype=np.uint8)
    else:
        mn, mx = spec.bounds
        e = np.clip(e, mn, mx)
    g = np.floor(255.0 * (e - mn) / (mx - mn) + 0.5)
    g = np.clip(g, 0.0, 255.0).astype(np.uint8)
    if spec.invert:
        g = (255 - g).astype(np.uint8)
    return g


# -- PNG + sidecar ------------------------------------------------------------


def _geometry_to_dict(geom: ProjectionGeometry) -> dict:
    return {
        "scd_mm": geom.scd,
        "sdd_mm": geom.sdd,
        "detector_px": list(geom.detector_px),
        "detector_spacing_mm": list(geom.detector_spacing),
        "detector_offset_mm": list(geom.detector_offset),
        "isocenter_mm": list(geom.isocenter),
    }


def _geometry_from_dict(d: dict) -> ProjectionGeometry:
    return ProjectionGeometry(
        scd=d["scd_mm"],
        sdd=d["sdd_mm"],
        detector_px=tuple(d["detector_px"]),
        detector_spacing=tuple(d["detector_spacing_mm"]),
        detector_offset=tuple(d["detector_offset_mm"]),
        isocenter=tuple(d["isocenter_mm"]),
    )


def sidecar_payload(
    prov: Provenance, norm: NormalizationSpec, size: tuple[int, int], energy_dump: str | None
) -> dict:
    return {
        "engine": {"name": "drrgen", "version": prov.engine_version},
        "volume": {"source": prov.volume_source, "sha256": prov.volume_sha256},
        "geometry": _geometry_to_dict(prov.geometry),
        "transform": {
            "rotation_deg": list(prov.transform.rotation),
            "translation_mm": list(prov.transform.translation),
        },
        "attenuation": {"threshold_hu": prov.model.threshold},
        "normalization": {
            "mode": norm.mode,
            "bounds": list(norm.bounds) if norm.bounds else None,
            "invert": norm.invert,
        },
        "image": {"size": list(size), "energy_dump": energy_dump},
    }


def parse_sidecar(payload: dict) -> tuple[Provenance, NormalizationSpec, tuple[int, int]]:
    norm_d = payload["normalization"]
    norm = NormalizationSpec(
        mode=norm_d["mode"],
        bounds=tuple(norm_d["bounds"]) if norm_d["bounds"] else None,
        invert=bool(norm_d["invert"]),
    )
    prov = Provenance(
        geometry=_geometry_from_dict(payload["geometry"]),
        transform=RigidTransform(
            rotation=tuple(payload["transform"]["rotation_deg"]),
            translation=tuple(payload["transform"]["translation_mm"]),
        ),
        model=AttenuationModel(threshold=payload["attenuation"]["threshold_hu"]),
        volume_source=payload["volume"]["source"],
        volume_sha256=payload["volume"]["sha256"],
        engine_version=payload["engine"]["version"],
    )
    return prov, norm, tuple(payload["image"]["size"])


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def png_bytes(gray: np.ndarray) -> bytes:
    """Encode a (W, H) uint8 array as an 8-bit grayscale PNG."""
    import io

    img = Image.fromarray(np.ascontiguousarray(gray.T), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def encode_png(
    gray: np.ndarray,
    path: str | Path,
    prov: Provenance,
    norm: NormalizationSpec = NormalizationSpec(),
    *,
    energies: np.ndarray | None = None,
) -> None:
    """Write the PNG, its JSON sidecar, and optionally a float32 energy dump.

    The sidecar lands at `<path>.json`; writes are atomic (temp + rename)
    and the sidecar goes last so a complete sidecar marks a complete output.
    """
    path = Path(path)
    try:
        dump_name = None
        if energies is not None:
            dump_name = path.name + ENERGY_DUMP_SUFFIX
            dump = np.asarray(energies, dtype="<f4").tobytes(order="C")
            _atomic_write(path.with_name(dump_name), dump)
        _atomic_write(path, png_bytes(gray))
        payload = sidecar_payload(prov, norm, (gray.shape[0], gray.shape[1]), dump_name)
        text = json.dumps(payload, indent=2) + "\n"
        _atomic_write(sidecar_path(path), text.encode("utf-8"))
    except OSError as exc:
        raise RenderError(f"cannot write render output {path}: {exc}") from exc


def sidecar_path(png_path: str | Path) -> Path:
    png_path = Path(png_path)
    return png_path.with_name(png_path.name + ".json")


def decode_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back as a (W, H) uint8 array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.uint8)
    return arr.T.copy()


def read_sidecar(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def render_from_sidecar(
    sidecar: str | Path, *, workers: int | None = None
) -> tuple[np.ndarray, bytes]:
    """Re-render the image a sidecar describes; returns (gray, png bytes).

    The volume is reloaded from the recorded source path and its content
    hash is verified before rendering.
    """
    from .nifti import load_nifti
    from .volume import load_raw

    payload = read_sidecar(sidecar)
    prov, norm, _size = parse_sidecar(payload)
    src = Path(prov.volume_source)
    if not src.is_absolute():
        src = Path(sidecar).parent / src
    if src.suffix == ".raw":
        volume = load_raw(src)
    else:
        volume = load_nifti(src)
    if volume.content_hash != prov.volume_sha256:
        raise RenderError(
            f"volume {src} content hash does not match the sidecar record"
        )
    image = render_drr(
        volume,
        prov.geometry,
        prov.transform,
        prov.model,
        workers=workers,
        volume_source=prov.volume_source,
    )
    gray = normalize(image, norm)
    return gray, png_bytes(gray)
