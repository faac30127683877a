"""Deterministic synthetic multi-domain liver phantoms.

Each case is a body ellipsoid containing a liver (a union of 2-4 overlapping
ellipsoids) and a brighter distractor organ. The clean T1 image is a
piecewise-constant tissue map with a small partial-volume blur; GED4 is a
per-case linear function of T1 plus a liver enhancement. A per-domain
intensity style ``gain * x**gamma + bias + noise`` is applied to both images.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .appearance import StyleBank, compute_histogram, save_style_bank
from .data import DatasetManifest, ManifestEntry
from .volume import Mask, Volume, write_volume

MAX_RETRIES = 10
MIN_OCCUPANCY, MAX_OCCUPANCY = 0.05, 0.40


@dataclass(frozen=True)
class DomainStyle:
    gain: float = 1.0
    gamma: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.03

    def __post_init__(self):
        vals = (self.gain, self.gamma, self.bias, self.noise_sigma)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite style parameter in {self}")
        if self.noise_sigma < 0 or self.gamma <= 0:
            raise ValueError(f"invalid style {self}")


DEFAULT_STYLES = (
    DomainStyle(gain=1.0, gamma=1.3, bias=0.0, noise_sigma=0.03),
    DomainStyle(gain=0.8, gamma=0.5, bias=-0.1, noise_sigma=0.05),
    DomainStyle(gain=1.4, gamma=0.6, bias=0.1, noise_sigma=0.04),
)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (48, 48, 24)
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 2.5)
    n_domains: int = 3
    cases_per_domain: int = 10
    heldout_domains: Tuple[int, ...] = (2,)
    n_labeled: int = 4
    n_pseudo: int = 4
    # source domains that labeled cases are drawn from (all source domains if empty)
    labeled_domains: Tuple[int, ...] = (0,)
    seed: int = 0
    styles: Optional[List[DomainStyle]] = None
    # per-case jitter of the domain style (multiplicative on gain and gamma)
    style_jitter: float = 0.1
    contrast_a: Tuple[float, float] = (0.9, 1.1)
    contrast_b: Tuple[float, float] = (-0.05, 0.05)
    enhancement: float = 0.3
    # clean T1 tissue levels
    level_air: float = 0.05
    level_body: float = 0.40
    level_liver: float = 0.55
    level_distractor: float = 1.2
    blur_mm: float = 0.8

    def __post_init__(self):
        if self.n_domains < 1 or self.cases_per_domain < 1:
            raise ValueError("n_domains and cases_per_domain must be >= 1")
        self.dims = tuple(int(d) for d in self.dims)  # type: ignore[assignment]
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)  # type: ignore[assignment]
        self.heldout_domains = tuple(int(d) for d in self.heldout_domains)
        self.labeled_domains = tuple(int(d) for d in self.labeled_domains)
        if self.styles is not None:
            self.styles = [s if isinstance(s, DomainStyle) else DomainStyle(**s) for s in self.styles]

    def domain_styles(self) -> List[DomainStyle]:
        if self.styles is not None:
            if len(self.styles) < self.n_domains:
                raise ValueError("fewer styles than domains")
            return list(self.styles[: self.n_domains])
        styles = list(DEFAULT_STYLES[: self.n_domains])
        rng = np.random.default_rng([self.seed, 0x57])
        while len(styles) < self.n_domains:
            styles.append(
                DomainStyle(
                    gain=float(rng.uniform(0.6, 1.6)),
                    gamma=float(np.exp(rng.uniform(-0.5, 0.4))),
                    bias=float(rng.uniform(-0.2, 0.2)),
                    noise_sigma=float(rng.uniform(0.02, 0.06)),
                )
            )
        return styles

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = [asdict(s) for s in self.domain_styles()]
        return d


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: Tuple[float, float, float]
    semi_axes_mm: Tuple[float, float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """``pts`` has shape (..., 3) in mm."""
        c = np.asarray(self.center_mm)
        r = np.asarray(self.semi_axes_mm)
        return np.sum(((pts - c) / r) ** 2, axis=-1) <= 1.0


@dataclass
class PhantomGeometry:
    liver: List[Ellipsoid]
    body: Ellipsoid
    distractor: Ellipsoid


@dataclass
class PhantomCase:
    case_id: str
    domain: int
    t1: Volume
    ged4: Volume
    mask: Mask
    geometry: PhantomGeometry
    style: DomainStyle


def voxel_centers_mm(dims, spacing) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def union_contains(ellipsoids: Sequence[Ellipsoid], pts: np.ndarray) -> np.ndarray:
    inside = np.zeros(pts.shape[:-1], dtype=bool)
    for e in ellipsoids:
        inside |= e.contains(pts)
    return inside


def random_geometry(spec: PhantomSpec, rng: np.random.Generator) -> PhantomGeometry:
    extent = np.asarray(spec.dims) * np.asarray(spec.spacing_mm)
    center = extent / 2
    body = Ellipsoid(tuple(center), tuple(extent * np.array([0.46, 0.46, 0.6])))
    n_lobes = int(rng.integers(2, 5))
    first_c = center + rng.uniform(-0.1, 0.1, 3) * extent
    first_r = rng.uniform(0.10, 0.30, 3) * extent
    liver = [Ellipsoid(tuple(first_c), tuple(first_r))]
    for _ in range(n_lobes - 1):
        c = first_c + rng.uniform(-0.6, 0.6, 3) * first_r
        r = rng.uniform(0.10, 0.30, 3) * extent
        liver.append(Ellipsoid(tuple(c), tuple(r)))
    # distractor: the candidate placement overlapping the liver least
    pts = voxel_centers_mm(spec.dims, spec.spacing_mm)
    liver_in = union_contains(liver, pts)
    best, best_overlap = None, None
    for _ in range(8):
        c = center + rng.uniform(-0.3, 0.3, 3) * extent
        r = rng.uniform(0.17, 0.24, 3) * extent
        e = Ellipsoid(tuple(c), tuple(r))
        overlap = int(np.sum(e.contains(pts) & liver_in))
        if best is None or overlap < best_overlap:
            best, best_overlap = e, overlap
    return PhantomGeometry(liver, body, best)  # type: ignore[arg-type]


def apply_style(x: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    styled = style.gain * np.maximum(x, 0.0) ** style.gamma + style.bias
    if style.noise_sigma > 0:
        styled = styled + rng.normal(0.0, style.noise_sigma, size=x.shape)
    return styled


def _jitter(style: DomainStyle, amount: float, rng: np.random.Generator) -> DomainStyle:
    if amount <= 0:
        return style
    return DomainStyle(
        gain=style.gain * float(np.exp(rng.uniform(-amount, amount))),
        gamma=style.gamma * float(np.exp(rng.uniform(-amount, amount))),
        bias=style.bias,
        noise_sigma=style.noise_sigma,
    )


def generate_case(spec: PhantomSpec, case_index: int, domain: int, style: DomainStyle) -> PhantomCase:
    """Generate one case; retries with a perturbed stream if liver occupancy is out of range."""
    pts = voxel_centers_mm(spec.dims, spec.spacing_mm)
    n_vox = int(np.prod(spec.dims))
    for attempt in range(MAX_RETRIES + 1):
        rng = np.random.default_rng([spec.seed, case_index, attempt])
        geom = random_geometry(spec, rng)
        liver = union_contains(geom.liver, pts)
        frac = liver.sum() / n_vox
        if MIN_OCCUPANCY <= frac <= MAX_OCCUPANCY:
            break
    else:
        raise RuntimeError(f"case {case_index}: liver occupancy out of range after {MAX_RETRIES} retries")

    body = geom.body.contains(pts)
    distractor = geom.distractor.contains(pts) & ~liver
    jit = rng.uniform(-0.03, 0.03, 3)
    clean = np.full(spec.dims, spec.level_air)
    clean[body] = spec.level_body + jit[0]
    clean[liver] = spec.level_liver + jit[1]
    clean[distractor] = spec.level_distractor + jit[2]
    sigma = [spec.blur_mm / s for s in spec.spacing_mm]
    t1_clean = gaussian_filter(clean, sigma, mode="nearest")
    enh = gaussian_filter(liver.astype(np.float64), sigma, mode="nearest")
    a = rng.uniform(*spec.contrast_a)
    b = rng.uniform(*spec.contrast_b)
    ged4_clean = a * t1_clean + b + spec.enhancement * enh

    case_style = _jitter(style, spec.style_jitter, rng)
    t1 = apply_style(t1_clean, case_style, rng)
    ged4 = apply_style(ged4_clean, case_style, rng)
    cid = f"case_{case_index:03d}"
    return PhantomCase(
        cid,
        domain,
        Volume(t1, spec.spacing_mm),
        Volume(ged4, spec.spacing_mm),
        Mask(liver, spec.spacing_mm),
        geom,
        case_style,
    )


def generate_cases(spec: PhantomSpec) -> List[PhantomCase]:
    styles = spec.domain_styles()
    cases = []
    for d in range(spec.n_domains):
        for j in range(spec.cases_per_domain):
            idx = d * spec.cases_per_domain + j
            cases.append(generate_case(spec, idx, d, styles[d]))
    return cases


def _round_robin(groups: Sequence[Sequence[PhantomCase]]) -> List[PhantomCase]:
    out = []
    for j in range(max((len(g) for g in groups), default=0)):
        out.extend(g[j] for g in groups if j < len(g))
    return out


def split_cases(spec: PhantomSpec, cases: Sequence[PhantomCase]):
    """Assign cases to splits.

    Held-out domains form the test split. Labeled cases are taken round-robin
    from ``labeled_domains``, pseudo-pool cases round-robin from the remaining
    source cases, and everything else is unlabeled.
    """
    source_domains = [d for d in range(spec.n_domains) if d not in spec.heldout_domains]
    if not source_domains:
        raise ValueError("at least one source domain is required")
    lab_domains = [d for d in source_domains if d in spec.labeled_domains] or source_domains
    by_domain = {d: [c for c in cases if c.domain == d] for d in source_domains}
    lab_order = _round_robin([by_domain[d] for d in lab_domains])
    if spec.n_labeled < 1 or spec.n_labeled > len(lab_order):
        raise ValueError("n_labeled exceeds the cases available in labeled_domains")
    labeled = lab_order[: spec.n_labeled]
    taken = {c.case_id for c in labeled}
    rest = _round_robin([[c for c in by_domain[d] if c.case_id not in taken] for d in source_domains])
    if spec.n_pseudo > len(rest):
        raise ValueError("n_pseudo exceeds the remaining source cases")
    pseudo = rest[: spec.n_pseudo]
    unlabeled = rest[spec.n_pseudo :]
    test = [c for c in cases if c.domain in spec.heldout_domains]
    key = lambda c: c.case_id  # noqa: E731
    return sorted(labeled, key=key), sorted(unlabeled, key=key), sorted(pseudo, key=key), sorted(test, key=key)


def generate_phantom_dataset(spec: PhantomSpec, out_dir) -> DatasetManifest:
    """Write every case as MVOL files plus ``manifest.json`` and a style bank."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case_dir = out / "cases"
    case_dir.mkdir(exist_ok=True)
    cases = generate_cases(spec)
    labeled, unlabeled, pseudo, test = split_cases(spec, cases)

    def entry(c: PhantomCase) -> ManifestEntry:
        paths = {}
        for kind, obj in (("t1", c.t1), ("ged4", c.ged4), ("mask", c.mask)):
            hdr = write_volume(obj, case_dir / f"{c.case_id}_{kind}")
            paths[kind] = str(hdr.relative_to(out))
        return ManifestEntry(c.case_id, paths["t1"], paths["ged4"], f"domain{c.domain}", paths["mask"])

    manifest = DatasetManifest(
        labeled=[entry(c) for c in labeled],
        unlabeled=[entry(c) for c in unlabeled],
        pseudo_pool=[entry(c) for c in pseudo],
        test=[entry(c) for c in test],
        style_bank_dir="style_bank",
        root=out,
    )
    bank_cases = sorted(labeled + unlabeled, key=lambda c: c.case_id)
    save_style_bank(StyleBank([compute_histogram(c.ged4) for c in bank_cases], spec.seed), out / "style_bank")
    manifest.save(out / "manifest.json")
    return manifest
