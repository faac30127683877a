import numpy as np
import pytest

from liverseg.phantom import (
    DomainStyle,
    Ellipsoid,
    PhantomSpec,
    generate_cases,
    generate_phantom_dataset,
    split_cases,
    union_contains,
    voxel_centers_mm,
)

SMALL = dict(dims=(20, 20, 10), cases_per_domain=4, n_labeled=2, n_pseudo=1)


def _supersampled(ellipsoids, dims, spacing, k=5):
    """Per-voxel inside fraction from a k^3 sub-grid."""
    sp = np.asarray(spacing)
    offs = (np.arange(k) + 0.5) / k - 0.5
    frac = np.zeros(dims)
    base = voxel_centers_mm(dims, spacing)
    for ox in offs:
        for oy in offs:
            for oz in offs:
                frac += union_contains(ellipsoids, base + np.array([ox, oy, oz]) * sp)
    return frac / k**3


def test_single_ellipsoid_matches_analytic_volume():
    dims, sp = (30, 30, 14), (1.0, 1.0, 2.5)
    e = Ellipsoid((15.2, 14.7, 17.0), (9.0, 6.5, 11.0))
    count = int(union_contains([e], voxel_centers_mm(dims, sp)).sum())
    analytic = 4 / 3 * np.pi * 9.0 * 6.5 * 11.0 / np.prod(sp)
    frac = _supersampled([e], dims, sp)
    shell = int(np.sum((frac > 0) & (frac < 1)))
    assert abs(count - analytic) <= shell


def test_phantom_mask_matches_geometry_oracle():
    spec = PhantomSpec(
        n_domains=1, cases_per_domain=1, heldout_domains=(), styles=[DomainStyle(noise_sigma=0.0)], style_jitter=0.0
    )
    (case,) = generate_cases(spec)
    count = case.mask.count()
    frac = _supersampled(case.geometry.liver, spec.dims, spec.spacing_mm)
    shell = int(np.sum((frac > 0) & (frac < 1)))
    assert abs(count - frac.sum()) <= shell
    assert 2 <= len(case.geometry.liver) <= 4
    extent = np.asarray(spec.dims) * np.asarray(spec.spacing_mm)
    for e in case.geometry.liver:
        full_axes = 2 * np.asarray(e.semi_axes_mm) / extent
        assert np.all(full_axes >= 0.2 - 1e-9) and np.all(full_axes <= 0.6 + 1e-9)


def test_same_seed_gives_identical_files(tmp_path):
    spec = PhantomSpec(**SMALL)
    generate_phantom_dataset(spec, tmp_path / "a")
    generate_phantom_dataset(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 0
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    other = generate_cases(PhantomSpec(**SMALL, seed=1))
    assert not np.array_equal(other[0].ged4.data, generate_cases(spec)[0].ged4.data)


def test_gamma_shift_is_detectable():
    styles = [DomainStyle(gamma=1.0, noise_sigma=0.03), DomainStyle(gamma=1.5, noise_sigma=0.03)]
    spec = PhantomSpec(n_domains=2, cases_per_domain=10, heldout_domains=(1,), styles=styles, dims=(20, 20, 10))
    cases = generate_cases(spec)
    # per-case mean liver intensity of the styled T1 image
    means = {d: [float(c.t1.data[c.mask.data.astype(bool)].mean()) for c in cases if c.domain == d] for d in (0, 1)}
    a, b = np.asarray(means[0]), np.asarray(means[1])
    se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    assert abs(a.mean() - b.mean()) > 3 * se


def test_occupancy_and_alignment():
    spec = PhantomSpec(cases_per_domain=3)
    for c in generate_cases(spec):
        occ = c.mask.count() / np.prod(spec.dims)
        assert 0.05 <= occ <= 0.40
        assert c.t1.same_geometry(c.ged4) and c.ged4.same_geometry(c.mask)
        assert np.all(np.isfinite(c.ged4.data))


def test_default_splits_partition_cases():
    spec = PhantomSpec()
    cases = generate_cases(spec)
    lab, unl, pse, test = split_cases(spec, cases)
    ids = [c.case_id for part in (lab, unl, pse, test) for c in part]
    assert sorted(ids) == sorted(c.case_id for c in cases) and len(set(ids)) == len(ids)
    assert len(lab) == 4 and len(pse) == 4 and len(test) == 10 and len(unl) == 12
    assert all(c.domain == 0 for c in lab)
    assert all(c.domain == 2 for c in test) and all(c.domain != 2 for c in unl + pse)


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainStyle(noise_sigma=-1)
    with pytest.raises(ValueError):
        DomainStyle(gain=float("inf"))
    with pytest.raises(ValueError):
        PhantomSpec(n_domains=0)
    spec = PhantomSpec(n_domains=1, heldout_domains=(0,))
    with pytest.raises(ValueError):
        split_cases(spec, [])
    # extra domains beyond the built-in styles are drawn deterministically
    assert PhantomSpec(n_domains=5).domain_styles() == PhantomSpec(n_domains=5).domain_styles()
