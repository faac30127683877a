"""Dataset manifest schema and in-memory case loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from .volume import Mask, Volume, VolumeError, read_mask, read_volume

SPLITS = ("labeled", "unlabeled", "pseudo_pool", "test")


@dataclass
class ManifestEntry:
    case_id: str
    t1: str
    ged4: str
    domain: str
    mask: Optional[str] = None


@dataclass
class DatasetManifest:
    """Case lists per split. Paths are stored relative to ``root`` when written."""

    labeled: List[ManifestEntry] = field(default_factory=list)
    unlabeled: List[ManifestEntry] = field(default_factory=list)
    pseudo_pool: List[ManifestEntry] = field(default_factory=list)
    test: List[ManifestEntry] = field(default_factory=list)
    style_bank_dir: Optional[str] = None
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        out = {s: [asdict(e) for e in getattr(self, s)] for s in SPLITS}
        out["style_bank_dir"] = self.style_bank_dir
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(raw) - set(SPLITS) - {"style_bank_dir"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        m = cls(root=path.parent, style_bank_dir=raw.get("style_bank_dir"))
        for s in SPLITS:
            setattr(m, s, [ManifestEntry(**e) for e in raw.get(s, [])])
        return m

    def validate(self) -> None:
        """Check that every referenced file exists and labeled masks match their volumes."""
        for s in SPLITS:
            for e in getattr(self, s):
                for rel in (e.t1, e.ged4) + ((e.mask,) if e.mask else ()):
                    hdr = self.resolve(rel)
                    if not hdr.is_file():
                        raise FileNotFoundError(f"{s}/{e.case_id}: missing {hdr}")
        for e in self.labeled:
            if not e.mask:
                raise ValueError(f"labeled case {e.case_id} has no mask")
            v, m = read_volume(self.resolve(e.ged4)), read_mask(self.resolve(e.mask))
            if not v.same_geometry(m):
                raise VolumeError(f"labeled case {e.case_id}: mask geometry differs from volume")


@dataclass
class Case:
    """A loaded case. ``mask`` is the training label (true or pseudo) when present."""

    case_id: str
    ged4: Volume
    domain: str
    mask: Optional[Mask] = None
    t1: Optional[Volume] = None


def load_cases(manifest: DatasetManifest, split: str, with_masks: bool = True, with_t1: bool = False) -> List[Case]:
    cases = []
    for e in getattr(manifest, split):
        ged4 = read_volume(manifest.resolve(e.ged4))
        mask = read_mask(manifest.resolve(e.mask)) if (with_masks and e.mask) else None
        t1 = read_volume(manifest.resolve(e.t1)) if with_t1 else None
        if mask is not None and not ged4.same_geometry(mask):
            raise VolumeError(f"{split}/{e.case_id}: mask geometry differs from volume")
        cases.append(Case(e.case_id, ged4, e.domain, mask, t1))
    return cases
