from collections import OrderedDict

import numpy as np
import pytest

from liverseg.appearance import flip_axes
from liverseg.backbone import ModelParams, init_params, network_forward
from liverseg.cotta import _FLIP_SETS, AdaptConfig, AdaptState, adapt_step, run_stream, stochastic_restore, write_trace
from liverseg.postproc import trim_mask
from liverseg.volume import Mask

SP = (1.0, 1.0, 2.5)


def stream(n=3, shape=(8, 8, 6), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(2,) + shape) for _ in range(n)]


def test_config_validation():
    for kw in (dict(restore_prob=1.5), dict(alpha_tta=1.0), dict(lr_tta=-1), dict(n_augment=9)):
        with pytest.raises(ValueError):
            AdaptConfig(**kw)
    c = AdaptConfig()
    assert (c.restore_prob, c.alpha_tta, c.lr_tta) == (0.01, 0.999, 0.001)


def test_zero_loss_fixed_point():
    p = init_params("seg-v1", seed=0)
    state = AdaptState.from_source(p, AdaptConfig(restore_prob=0.0))
    state, prob = adapt_step(state, stream(1)[0])
    assert state.last_loss == 0.0
    assert state.student.equals(p) and state.teacher.equals(p) and state.step == 1
    assert state.last_restored == 0


def test_restore_extremes():
    src = init_params("seg-v1", seed=0)
    drifted = init_params("seg-v1", seed=1)
    st = AdaptState(drifted.copy(), drifted.copy(), src.copy(), AdaptConfig(restore_prob=1.0))
    stochastic_restore(st)
    assert st.student.equals(src) and st.teacher.equals(drifted) and st.last_restored == src.size
    st = AdaptState(drifted.copy(), drifted.copy(), src.copy(), AdaptConfig(restore_prob=0.0))
    stochastic_restore(st)
    assert st.student.equals(drifted) and st.last_restored == 0


def test_restored_fraction_concentrates():
    n = 100_000
    src = ModelParams(OrderedDict(w=np.zeros(n, dtype=np.float32)), "seg-v1")
    cur = ModelParams(OrderedDict(w=np.ones(n, dtype=np.float32)), "seg-v1")
    st = AdaptState(cur, cur.copy(), src, AdaptConfig(restore_prob=0.01, seed=0))
    stochastic_restore(st)
    frac = float(np.mean(st.student["w"] == 0))
    assert 0.007 <= frac <= 0.013
    assert st.last_restored == int(np.sum(st.student["w"] == 0))


def test_no_op_stream_equals_frozen_teacher():
    p = init_params("seg-v1", seed=2)
    xs = stream(4)
    st = AdaptState.from_source(p, AdaptConfig(restore_prob=0.0, lr_tta=0.0, trim=False))
    masks, probs, trace = run_stream(st, xs, SP)
    for x, prob, m in zip(xs, probs, masks):
        frozen = network_forward(p, x).astype(np.float32)
        assert np.array_equal(prob, frozen)
        assert m == Mask(frozen >= 0.5, SP)
    assert st.student.equals(p) and st.teacher.equals(p)
    assert [r.restored_count for r in trace] == [0] * 4


def test_adaptation_moves_student_and_keeps_source():
    p = init_params("seg-v1", seed=2)
    teacher = init_params("seg-v1", seed=4)
    st = AdaptState.from_source(p, AdaptConfig(lr_tta=0.05, restore_prob=0.0), teacher=teacher)
    snapshot = st.source.copy()
    st, _ = adapt_step(st, stream(1)[0])
    assert st.last_loss > 0 and not st.student.equals(p)
    assert st.source.equals(snapshot) and st.source.equals(p)


def test_trace_deterministic_and_written(tmp_path):
    p = init_params("seg-v1", seed=5)
    t = init_params("seg-v1", seed=6)
    xs = stream(3)
    runs = []
    for _ in range(2):
        st = AdaptState.from_source(p, AdaptConfig(seed=7, lr_tta=0.01), teacher=t)
        runs.append(run_stream(st, xs, SP))
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))
    assert runs[0][2] == runs[1][2]
    assert [r.step for r in runs[0][2]] == [1, 2, 3]
    assert all(r.restored_count > 0 for r in runs[0][2])
    path = write_trace(runs[0][2], tmp_path / "tta_trace.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "step,l_tta,restored_count" and len(lines) == 4


def test_trim_applied_when_enabled():
    p = init_params("seg-v1", seed=2)
    xs = stream(2)
    st = AdaptState.from_source(p, AdaptConfig(restore_prob=0.0, lr_tta=0.0, trim=True))
    masks, probs, _ = run_stream(st, xs, SP)
    for m, prob in zip(masks, probs):
        assert m == trim_mask(Mask(prob >= 0.5, SP))


def test_augmented_target_is_flip_average():
    p = init_params("seg-v1", seed=2)
    x = stream(1)[0]
    st = AdaptState.from_source(p, AdaptConfig(restore_prob=0.0, lr_tta=0.0, n_augment=2))
    rng = st.rng()
    _, prob = adapt_step(st, x)
    f = _FLIP_SETS[int(rng.choice(len(_FLIP_SETS) - 1, size=1, replace=False)[0]) + 1]
    expect = (network_forward(p, x) + flip_axes(network_forward(p, flip_axes(x, f)), f)) / 2
    assert np.allclose(prob, expect, atol=1e-6)
    assert not np.allclose(prob, network_forward(p, x), atol=1e-6)


def test_errors():
    st = AdaptState.from_source(init_params("seg-v1"))
    with pytest.raises(ValueError):
        run_stream(st, [], SP)
    with pytest.raises(ValueError):
        adapt_step(st, np.zeros((8, 8, 6)))
