import json

import numpy as np
import pytest

from liverseg.data import DatasetManifest, load_cases
from liverseg.phantom import PhantomSpec, generate_phantom_dataset
from liverseg.volume import Mask, VolumeError, write_volume

from conftest import SMALL_SPEC


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate_phantom_dataset(PhantomSpec(**SMALL_SPEC), out)
    return out


def test_manifest_round_trip(dataset, tmp_path):
    m = DatasetManifest.load(dataset / "manifest.json")
    m.validate()
    raw = json.loads((dataset / "manifest.json").read_text())
    assert set(raw) == {"labeled", "unlabeled", "pseudo_pool", "test", "style_bank_dir"}
    assert set(raw["test"][0]) == {"case_id", "t1", "ged4", "mask", "domain"}
    m.save(tmp_path / "copy.json")
    back = DatasetManifest.load(tmp_path / "copy.json")
    assert back == m
    assert [e.case_id for e in back.labeled] == [e.case_id for e in m.labeled]


def test_unknown_keys_and_missing_file(dataset, tmp_path):
    raw = json.loads((dataset / "manifest.json").read_text())
    raw["extra"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(raw))
    with pytest.raises(ValueError):
        DatasetManifest.load(tmp_path / "bad.json")
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "none.json")
    m = DatasetManifest.load(dataset / "manifest.json")
    m.root = tmp_path
    with pytest.raises(FileNotFoundError):
        m.validate()


def test_validate_rejects_geometry_mismatch(dataset, tmp_path):
    m = DatasetManifest.load(dataset / "manifest.json")
    bad = write_volume(Mask(np.zeros((3, 3, 3), bool), (1, 1, 1)).to_volume(), tmp_path / "bad_mask")
    m.labeled[0].mask = str(bad)
    with pytest.raises(VolumeError):
        m.validate()
    with pytest.raises(VolumeError):
        load_cases(m, "labeled")
    m.labeled[0].mask = None
    with pytest.raises(ValueError):
        m.validate()


def test_load_cases_options(dataset):
    m = DatasetManifest.load(dataset / "manifest.json")
    lab = load_cases(m, "labeled")
    assert all(c.mask is not None and c.t1 is None for c in lab)
    unl = load_cases(m, "unlabeled", with_masks=False, with_t1=True)
    assert all(c.mask is None and c.t1.same_geometry(c.ged4) for c in unl)
    domains = {e.domain for s in ("labeled", "unlabeled", "pseudo_pool", "test") for e in getattr(m, s)}
    assert domains == {"domain0", "domain1", "domain2"}
