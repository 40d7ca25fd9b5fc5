"""Synthetic two-view tomosynthesis phantoms and their on-disk format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .numerics import seeded_stream

VOL_MAGIC = b"MM3DVOL1"
VOL_HEADER = struct.Struct("<8sIII")
INDEX_NAME = "index.json"
LABELS = ("malignant", "benign", "negative")
VIEWS = ("cc", "mlo")


class DatasetFormatError(ValueError):
    pass


@dataclass
class PhantomConfig:
    slices: int = 32
    height: int = 32
    width: int = 32
    p_malignant: float = 0.4
    p_benign: float = 0.2
    # number of lesions in a non-negative case; (0, 0) makes every case negative
    lesion_count: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (2.0, 4.0)
    malignant_contrast: tuple[float, float] = (0.10, 0.22)
    benign_contrast: tuple[float, float] = (0.08, 0.18)
    z_sigma: tuple[float, float] = (0.7, 7.0)
    tissue_amplitude: float = 0.10
    tissue_sigma: tuple[float, float, float] = (3.0, 5.0, 5.0)
    tissue_blobs: int = 3
    noise_sigma: float = 0.05
    visibility: float = 0.3
    unannotated_fraction: float = 0.6

    def __post_init__(self):
        self.lesion_count = tuple(self.lesion_count)
        self.radius = tuple(self.radius)
        self.malignant_contrast = tuple(self.malignant_contrast)
        self.benign_contrast = tuple(self.benign_contrast)
        self.z_sigma = tuple(self.z_sigma)
        self.tissue_sigma = tuple(self.tissue_sigma)

    def validate(self) -> "PhantomConfig":
        if not 4 <= self.slices <= 64:
            raise ValueError(f"slices must be in [4, 64], got {self.slices}")
        for name in ("height", "width"):
            v = getattr(self, name)
            if not 32 <= v <= 256:
                raise ValueError(f"{name} must be in [32, 256], got {v}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count bounds {self.lesion_count}")
        if not (0 <= self.p_malignant and 0 <= self.p_benign and self.p_malignant + self.p_benign <= 1):
            raise ValueError("label probabilities must be nonnegative and sum to at most 1")
        for name in ("radius", "malignant_contrast", "benign_contrast", "z_sigma"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(a, b)}")
        if max(self.malignant_contrast[1], self.benign_contrast[1]) > 0.5:
            raise ValueError("lesion contrast above 0.5 saturates the intensity range")
        # spiculation can stretch a malignant lesion to 1.6x its radius
        if 2 * (1.6 * self.radius[1] + 2) >= min(self.height, self.width):
            raise ValueError("lesion larger than image")
        if not 0 < self.visibility < 1:
            raise ValueError("visibility threshold must be in (0, 1)")
        if not 0 <= self.unannotated_fraction <= 1:
            raise ValueError("unannotated_fraction must be in [0, 1]")
        return self


@dataclass
class Volume:
    voxels: np.ndarray  # (S, H, W) float32 in [0, 1]
    view: str
    laterality: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class Finding:
    box: tuple[float, float, float, float]
    z_best: int
    z_range: tuple[int, int]
    malignant: bool
    lesion_id: int = 0  # pairs the CC and MLO findings of one lesion

    def to_dict(self) -> dict:
        return {"box": list(self.box), "z_best": self.z_best, "z_range": list(self.z_range),
                "malignant": self.malignant, "lesion_id": self.lesion_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Finding":
        return cls(tuple(float(v) for v in d["box"]), int(d["z_best"]),
                   tuple(int(v) for v in d["z_range"]), bool(d["malignant"]),
                   int(d.get("lesion_id", 0)))


@dataclass
class Case:
    case_id: str
    cc: Volume
    mlo: Volume
    label: str
    findings_cc: list[Finding] = field(default_factory=list)
    findings_mlo: list[Finding] = field(default_factory=list)
    annotated: bool = True
    split: str = ""

    def volume(self, view: str) -> Volume:
        return self.cc if view == "cc" else self.mlo

    def findings(self, view: str) -> list[Finding]:
        return self.findings_cc if view == "cc" else self.findings_mlo

    @property
    def y(self) -> int:
        return int(self.label == "malignant")


@dataclass
class _Lesion:
    malignant: bool
    x: float
    contrast: float
    radius: float
    z_sigma: float


def _tissue(rng: np.random.Generator, cfg: PhantomConfig) -> np.ndarray:
    shape = (cfg.slices, cfg.height, cfg.width)
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.tissue_sigma, mode="reflect")
    field_ /= field_.std() + 1e-12
    vol = 0.35 + cfg.tissue_amplitude * field_
    # a few broad bright structures spanning many slices (overlapping tissue)
    zz, yy, xx = np.meshgrid(np.arange(cfg.slices), np.arange(cfg.height), np.arange(cfg.width),
                             indexing="ij")
    for _ in range(cfg.tissue_blobs):
        cz = rng.uniform(0, cfg.slices - 1)
        cy, cx = rng.uniform(0, cfg.height - 1), rng.uniform(0, cfg.width - 1)
        sz = rng.uniform(3.0, 8.0)
        sy, sx = rng.uniform(3.0, 8.0, size=2)
        amp = rng.uniform(0.04, 0.12)
        vol += amp * np.exp(-0.5 * (((zz - cz) / sz) ** 2 + ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    vol += cfg.noise_sigma * rng.standard_normal(shape)
    return vol


def _lesion_profile(rng: np.random.Generator, lesion: _Lesion, cy: float, cfg: PhantomConfig) -> np.ndarray:
    """2D lesion footprint with unit peak."""
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    u, v = xx - lesion.x, yy - cy
    if lesion.malignant:
        theta = rng.uniform(0, math.pi)
        aspect = rng.uniform(0.55, 0.85)
        ur = u * math.cos(theta) + v * math.sin(theta)
        vr = -u * math.sin(theta) + v * math.cos(theta)
        rho = np.sqrt((ur / lesion.radius) ** 2 + (vr / (lesion.radius * aspect)) ** 2)
        n_spikes = int(rng.integers(5, 9))
        phase = rng.uniform(0, 2 * math.pi)
        ang = np.arctan2(vr, ur)
        star = 1.0 + 0.6 * np.maximum(np.cos(n_spikes * ang + phase), 0.0) ** 4
        prof = np.exp(-2.0 * (rho / star) ** 2)
    else:
        rho2 = (u ** 2 + v ** 2) / lesion.radius ** 2
        prof = np.exp(-2.0 * rho2)
    return prof / prof.max()


def _render_view(rng: np.random.Generator, lesions: Sequence[_Lesion], cfg: PhantomConfig,
                 draw_lesions: bool) -> tuple[np.ndarray, list[Finding]]:
    vol = _tissue(rng, cfg)
    findings: list[Finding] = []
    zs = np.arange(cfg.slices, dtype=np.float64)
    for lid, les in enumerate(lesions):
        margin = 1.6 * les.radius + 2
        cy = rng.uniform(margin, cfg.height - 1 - margin)
        zc = rng.uniform(1.0, cfg.slices - 2.0)
        prof = _lesion_profile(rng, les, cy, cfg)
        zprof = np.exp(-0.5 * ((zs - zc) / les.z_sigma) ** 2)
        if draw_lesions:
            vol += les.contrast * zprof[:, None, None] * prof[None]
        visible = np.flatnonzero(zprof > cfg.visibility)
        z_best = int(np.argmax(zprof))
        ys, xs = np.nonzero(prof >= cfg.visibility)
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        findings.append(Finding(box, z_best, (int(visible[0]), int(visible[-1])), les.malignant, lid))
    return np.clip(vol, 0.0, 1.0).astype(np.float32), findings


def generate_case(rng: np.random.Generator, cfg: PhantomConfig, case_id: str = "case00000",
                  *, draw_lesions: bool = True) -> Case:
    """Draw one two-view case. ``draw_lesions=False`` renders the identical background only."""
    cfg.validate()
    r_label, r_cc, r_mlo = rng.spawn(3)
    u = r_label.random()
    lo, hi = cfg.lesion_count
    n = int(r_label.integers(lo, hi + 1))
    if n == 0 or u >= cfg.p_malignant + cfg.p_benign:
        label = "negative"
        n = 0
    else:
        label = "malignant" if u < cfg.p_malignant else "benign"

    lesions = []
    for i in range(n):
        malignant = label == "malignant" and i == 0
        crange = cfg.malignant_contrast if malignant else cfg.benign_contrast
        radius = r_label.uniform(*cfg.radius)
        margin = 1.6 * radius + 2
        lesions.append(_Lesion(
            malignant=malignant,
            x=r_label.uniform(margin, cfg.width - 1 - margin),
            contrast=r_label.uniform(*crange),
            radius=radius,
            z_sigma=math.exp(r_label.uniform(math.log(cfg.z_sigma[0]), math.log(cfg.z_sigma[1]))),
        ))
    annotated = True
    if label == "malignant":
        annotated = bool(r_label.random() >= cfg.unannotated_fraction)
    laterality = "left" if r_label.random() < 0.5 else "right"

    cc_vox, f_cc = _render_view(r_cc, lesions, cfg, draw_lesions)
    mlo_vox, f_mlo = _render_view(r_mlo, lesions, cfg, draw_lesions)
    return Case(case_id, Volume(cc_vox, "CC", laterality), Volume(mlo_vox, "MLO", laterality),
                label, f_cc, f_mlo, annotated)


def generate_cases(n: int, cfg: PhantomConfig, base_seed: int = 0, prefix: str = "case") -> list[Case]:
    return [generate_case(seeded_stream(base_seed + i), cfg, f"{prefix}{i:05d}") for i in range(n)]


def set_annotation_fraction(cases: Sequence[Case], fraction: float, rng: np.random.Generator) -> list[Case]:
    """Mark exactly round(fraction * n_malignant) malignant cases as annotated.

    Findings are kept on every case (evaluation needs them); only the flag changes.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"annotation fraction must be in [0, 1], got {fraction}")
    mal = [i for i, c in enumerate(cases) if c.label == "malignant"]
    keep = set(rng.permutation(mal)[: int(round(fraction * len(mal)))].tolist()) if mal else set()
    out = []
    for i, c in enumerate(cases):
        annotated = (i in keep) if c.label == "malignant" else True
        out.append(Case(c.case_id, c.cc, c.mlo, c.label, c.findings_cc, c.findings_mlo, annotated, c.split))
    return out


def project_mip(v) -> np.ndarray:
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    return vox.max(axis=0)


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[: total - sum(counts)]:
        counts[j] += 1
    return counts


def split_dataset(cases: Sequence[Case], fractions: Sequence[float], rng: np.random.Generator,
                  names: Sequence[str] = ("train", "val", "test")) -> dict[str, list[Case]]:
    """Stratified random split; each label is distributed proportionally across splits."""
    fractions = list(fractions)
    if len(fractions) != len(names):
        raise ValueError("need one fraction per split name")
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    totals = _largest_remainder(len(cases), fractions)
    strata = {lab: [i for i, c in enumerate(cases) if c.label == lab] for lab in LABELS}
    strata = {k: v for k, v in strata.items() if v}

    alloc: dict[str, list[int]] = {}
    remainders = []
    for lab, idx in strata.items():
        raw = [len(idx) * f for f in fractions]
        alloc[lab] = [int(math.floor(r)) for r in raw]
        remainders += [(-(raw[j] - alloc[lab][j]), lab, j) for j in range(len(fractions))]
    deficit = [totals[j] - sum(alloc[lab][j] for lab in strata) for j in range(len(fractions))]
    left = {lab: len(idx) - sum(alloc[lab]) for lab, idx in strata.items()}
    for _, lab, j in sorted(remainders):
        if left[lab] > 0 and deficit[j] > 0:
            alloc[lab][j] += 1
            left[lab] -= 1
            deficit[j] -= 1
    for lab in strata:  # leftovers with no remainder-ranked slot still open
        for j in range(len(fractions)):
            while left[lab] > 0 and deficit[j] > 0:
                alloc[lab][j] += 1
                left[lab] -= 1
                deficit[j] -= 1

    out: dict[str, list[int]] = {n: [] for n in names}
    for lab, idx in strata.items():
        perm = [idx[i] for i in rng.permutation(len(idx))]
        start = 0
        for j, name in enumerate(names):
            if alloc[lab][j] == 0:
                raise ValueError(f"stratum {lab!r} would be empty in split {name!r}")
            out[name] += perm[start:start + alloc[lab][j]]
            start += alloc[lab][j]
    result = {}
    for name in names:
        result[name] = [_with_split(cases[i], name) for i in sorted(out[name])]
    return result


def _with_split(c: Case, split: str) -> Case:
    return Case(c.case_id, c.cc, c.mlo, c.label, c.findings_cc, c.findings_mlo, c.annotated, split)


# -- on-disk format ---------------------------------------------------------

def write_volume(path: Path, voxels: np.ndarray) -> None:
    vox = np.ascontiguousarray(voxels, dtype="<f4")
    s, h, w = vox.shape
    with open(path, "wb") as fh:
        fh.write(VOL_HEADER.pack(VOL_MAGIC, s, h, w))
        fh.write(vox.tobytes())


def read_volume(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < VOL_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)} "
                                 f"(expected {VOL_HEADER.size} header bytes)")
    magic, s, h, w = VOL_HEADER.unpack_from(raw, 0)
    if magic != VOL_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    expected = VOL_HEADER.size + 4 * s * h * w
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, got {len(raw)} "
                                 f"(payload starts at byte offset {VOL_HEADER.size})")
    return np.frombuffer(raw, dtype="<f4", offset=VOL_HEADER.size).reshape(s, h, w).astype(np.float32)


def write_dataset(cases: Sequence[Case], path, extra: dict | None = None) -> None:
    root = Path(path)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    entries = []
    for c in cases:
        files = {}
        for view in VIEWS:
            rel = f"volumes/{c.case_id}_{view}.vol"
            write_volume(root / rel, c.volume(view).voxels)
            files[view] = rel
        entries.append({
            "case_id": c.case_id, "label": c.label, "annotated": c.annotated, "split": c.split,
            "laterality": c.cc.laterality, "volumes": files,
            "findings": {v: [f.to_dict() for f in c.findings(v)] for v in VIEWS},
        })
    index = {"format": "mm3d-dataset", "version": 1, "cases": entries}
    if extra:
        index["meta"] = extra
    (root / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def read_index(path) -> dict:
    root = Path(path)
    try:
        index = json.loads((root / INDEX_NAME).read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{root}: missing {INDEX_NAME}") from None
    if index.get("format") != "mm3d-dataset":
        raise DatasetFormatError(f"{root / INDEX_NAME}: not an mm3d dataset index")
    return index


def read_dataset(path) -> list[Case]:
    root = Path(path)
    index = read_index(root)
    cases = []
    for e in index["cases"]:
        vols = {}
        for view in VIEWS:
            fpath = root / e["volumes"][view]
            if not fpath.exists():
                raise DatasetFormatError(f"case {e['case_id']}: missing volume file {e['volumes'][view]}")
            vols[view] = Volume(read_volume(fpath), view.upper(), e["laterality"])
        cases.append(Case(
            e["case_id"], vols["cc"], vols["mlo"], e["label"],
            [Finding.from_dict(d) for d in e["findings"]["cc"]],
            [Finding.from_dict(d) for d in e["findings"]["mlo"]],
            bool(e["annotated"]), e.get("split", ""),
        ))
    return cases


def config_to_dict(cfg: PhantomConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
