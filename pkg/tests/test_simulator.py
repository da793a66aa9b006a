import csv
import json
import math

import numpy as np
import pytest

from rettention import (
    Backend,
    DenoisingSchedule,
    ParameterError,
    StepKind,
    TrajectoryConfig,
    flop_count,
    full_mask,
    generate_trajectory,
    run_experiment,
    run_seeds,
    sliding_window_mask,
    sparsity,
    trace_rho,
)
from rettention.simulator import (
    RHO_TRACE_CSV_HEADER,
    STEPS_CSV_HEADER,
    coefficient_of_variation,
    frobenius_rel_error,
    mean_row_cosine,
    output_psnr,
)


def small(**kw):
    base = dict(steps=20, heads=2, tokens=16, head_dim=8, drift_alpha=0.99)
    base.update(kw)
    return TrajectoryConfig(**base)


def test_frozen_trajectory():
    traj = generate_trajectory(small(drift_alpha=1.0, steps=6))
    for inp in traj[1:]:
        np.testing.assert_array_equal(inp.q, traj[0].q)
        np.testing.assert_array_equal(inp.k, traj[0].k)
        np.testing.assert_array_equal(inp.v, traj[0].v)


def test_independent_steps_uncorrelated():
    traj = generate_trajectory(TrajectoryConfig(seed=3, steps=2, heads=4, tokens=50, head_dim=50, drift_alpha=0.0))
    a, b = traj[0].q.ravel(), traj[1].q.ravel()
    assert a.size == 10_000
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_ar1_correlation_matches_alpha():
    traj = generate_trajectory(TrajectoryConfig(seed=4, steps=2, heads=4, tokens=50, head_dim=50, drift_alpha=0.8))
    r = np.corrcoef(traj[0].k.ravel(), traj[1].k.ravel())[0, 1]
    # standard error of r is about (1 - r^2) / sqrt(n) = 0.0036
    assert abs(r - 0.8) < 0.02


@pytest.mark.parametrize("scale", [1.0, 2.5])
def test_marginal_variance_preserved(scale):
    traj = generate_trajectory(TrajectoryConfig(seed=5, steps=15, heads=2, tokens=50, head_dim=50, drift_alpha=0.7, logit_scale=scale))
    n = 2 * 50 * 50
    # sample variance of n normals has sd sigma^2 sqrt(2/(n-1))
    band = 3 * scale**2 * math.sqrt(2 / (n - 1))
    for inp in traj:
        for x in (inp.q, inp.k, inp.v):
            assert abs(x.var() - scale**2) < band


def test_trajectory_deterministic():
    a = generate_trajectory(small(seed=11))
    b = generate_trajectory(small(seed=11))
    c = generate_trajectory(small(seed=12))
    assert all(np.array_equal(x.q, y.q) and np.array_equal(x.v, y.v) for x, y in zip(a, b))
    assert not np.array_equal(a[3].q, c[3].q)


@pytest.mark.parametrize("kw", [dict(drift_alpha=1.5), dict(drift_alpha=-0.1), dict(steps=0), dict(logit_scale=0.0), dict(tokens=0)])
def test_trajectory_config_validation(kw):
    with pytest.raises(ParameterError):
        small(**kw)


def test_full_backend_is_exact():
    cfg = small()
    rep = run_experiment(generate_trajectory(cfg), sliding_window_mask(2, 16, 1), DenoisingSchedule(20, 5, 5), "full")
    assert all(s.rel_err == 0.0 and s.cosine == 1.0 and s.psnr == math.inf for s in rep.steps)
    assert rep.flop_ratio == 1.0


def test_rettention_frozen_is_exact():
    traj = generate_trajectory(small(drift_alpha=1.0))
    rep = run_experiment(traj, sliding_window_mask(2, 16, 0), DenoisingSchedule(20, 5, 5, 0.0), Backend.RETTENTION, self_check=True)
    assert max(s.rel_err for s in rep.steps) <= 1e-9


def test_rettention_beats_sparse_per_sparse_step():
    m = sliding_window_mask(2, 16, 0)
    sched = DenoisingSchedule(20, 5, 5, 0.04)
    res = run_seeds(small(), range(20), m, sched, ["sparse", "rettention"])
    sp = np.array([r.rel_errors() for r in res[Backend.SPARSE]])
    rt = np.array([r.rel_errors() for r in res[Backend.RETTENTION]])
    steps = res[Backend.SPARSE][0].sparse_steps()
    assert steps == [6, 7, 8, 9, 11, 12, 13, 14, 16, 17, 18, 19]
    assert np.all(rt[:, steps].mean(axis=0) < sp[:, steps].mean(axis=0))
    # non-sparse steps run full attention for every backend
    assert np.all(sp[:, [t for t in range(20) if t not in steps]] == 0.0)


def test_run_seeds_threaded_matches_serial():
    m = sliding_window_mask(2, 16, 1)
    sched = DenoisingSchedule(20, 5, 5)
    a = run_seeds(small(), [3, 1, 2], m, sched, ["rettention"])
    b = run_seeds(small(), [3, 1, 2], m, sched, ["rettention"], workers=3)
    assert [r.seed for r in b[Backend.RETTENTION]] == [3, 1, 2]
    assert [r.to_dict() for r in a[Backend.RETTENTION]] == [r.to_dict() for r in b[Backend.RETTENTION]]


def test_report_deterministic():
    m = sliding_window_mask(2, 16, 1)
    sched = DenoisingSchedule(20, 5, 5)
    r1 = run_experiment(generate_trajectory(small(seed=7)), m, sched, "rettention", seed=7)
    r2 = run_experiment(generate_trajectory(small(seed=7)), m, sched, "rettention", seed=7)
    assert json.dumps(r1.to_dict()) == json.dumps(r2.to_dict())


def test_run_validates_lengths_and_trace():
    traj = generate_trajectory(small(steps=5))
    m = sliding_window_mask(2, 16, 1)
    with pytest.raises(ParameterError):
        run_experiment(traj, m, DenoisingSchedule(20, 5, 5), "sparse")
    with pytest.raises(ParameterError):
        run_experiment(traj, m, DenoisingSchedule(5, 1, 2), "sparse", trace=(2, 0))


def test_psnr_and_metric_edge_cases():
    x = np.arange(12.0).reshape(1, 4, 3)
    assert output_psnr(x, x) == math.inf
    assert frobenius_rel_error(x, x) == 0.0
    assert mean_row_cosine(x, x) == pytest.approx(1.0)
    y = x + 0.11
    # range 11, rmse 0.11 -> 40 dB
    assert output_psnr(y, x) == pytest.approx(40.0)
    assert mean_row_cosine(-x[:, 1:], x[:, 1:]) == pytest.approx(-1.0)


def test_report_serialisation(tmp_path):
    traj = generate_trajectory(small())
    rep = run_experiment(traj, sliding_window_mask(2, 16, 1), DenoisingSchedule(20, 5, 5), "rettention", trace=(1, 3))
    rep.write_json(tmp_path / "report.json")
    rep.write_steps_csv(tmp_path / "steps.csv")
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["steps"][0]["psnr"] == "inf"
    assert doc["trace"] == {"head": 1, "row": 3}
    with open(tmp_path / "steps.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == STEPS_CSV_HEADER
    assert len(rows) == 21
    assert rows[1 + 6][1] == "sparse"
    assert (tmp_path / "steps.csv").read_text().splitlines()[0] == "step,kind,rel_err,cosine,psnr,full_denom,sparse_denom,rho"


def test_steps_csv_trace_matches_trace_rho(tmp_path):
    traj = generate_trajectory(small())
    m = sliding_window_mask(2, 16, 2)
    rep = run_experiment(traj, m, DenoisingSchedule(20, 5, 5), "sparse", trace=(1, 4))
    tr = trace_rho(traj, m, 1, 4)
    np.testing.assert_array_equal([s.rho for s in rep.steps], tr.rho)
    np.testing.assert_array_equal([s.full_denom for s in rep.steps], tr.full_denom)


def test_trace_frozen_constant():
    tr = trace_rho(generate_trajectory(small(drift_alpha=1.0)), sliding_window_mask(2, 16, 1), 0, 5)
    for col in (tr.full_denom, tr.sparse_denom, tr.rho):
        assert np.all(col == col[0])


def test_trace_full_mask_is_one(tmp_path):
    tr = trace_rho(generate_trajectory(small()), full_mask(2, 16), 1, 0)
    assert np.all(tr.rho == 1.0)
    np.testing.assert_allclose(tr.sparse_denom, tr.full_denom, rtol=1e-15)
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(RHO_TRACE_CSV_HEADER) == "step,full_denom,sparse_denom,rho"
    assert len(lines) == 21


def test_trace_raw_denominators_match_direct_sum():
    traj = generate_trajectory(small(steps=3, logit_scale=0.7))
    m = sliding_window_mask(2, 16, 1)
    tr = trace_rho(traj, m, 0, 7)
    for t, inp in enumerate(traj):
        logits = inp.logits()[0, 7]
        assert tr.full_denom[t] == pytest.approx(np.exp(logits).sum(), rel=1e-12)
        assert tr.sparse_denom[t] == pytest.approx(np.exp(logits[6:9]).sum(), rel=1e-12)


def test_trace_index_errors():
    traj = generate_trajectory(small(steps=2))
    with pytest.raises(ParameterError):
        trace_rho(traj, full_mask(2, 16), 2, 0)
    with pytest.raises(ParameterError):
        trace_rho(traj, full_mask(2, 16), 0, 16)


def test_coefficient_of_variation():
    assert coefficient_of_variation([2.0, 2.0, 2.0]) == 0.0
    assert coefficient_of_variation([1.0, 3.0]) == pytest.approx(0.5)


def test_flops_full_mask():
    full, sparse = flop_count(full_mask(2, 8), 4)
    assert full == sparse
    assert full.total == 2 * (2 * 2 * 64 * 4) + 3 * 2 * 64


def test_flops_diagonal_direct_count():
    full, sparse = flop_count(sliding_window_mask(1, 8, 0), 4)
    # direct count: each of 8 rows does one 4-term dot product for QK and one for AV
    assert sparse.qk == 8 * 4 * 2 and sparse.av == 8 * 4 * 2
    assert full.qk == 8 * sparse.qk and full.av == 8 * sparse.av
    assert full.softmax == 8 * sparse.softmax


def test_flop_ratio_equals_density():
    for T, w in [(16, 0), (64, 3), (128, 1)]:
        m = sliding_window_mask(2, T, w)
        full, sparse = flop_count(m, 16)
        assert sparse.total / full.total == pytest.approx(1 - sparsity(m) / 100, rel=1e-12)


def test_rettention_overhead_itemised():
    m = sliding_window_mask(2, 64, 0)
    _, plain = flop_count(m, 16)
    full, rett = flop_count(m, 16, rettention=True)
    assert rett.overhead == 2 * 2 * 64 * 16
    assert rett.total - plain.total == rett.overhead
    assert rett.overhead / full.total < 0.01


def test_report_flop_ratios():
    traj = generate_trajectory(small())
    m = sliding_window_mask(2, 16, 0)
    sched = DenoisingSchedule(20, 5, 5)
    reps = {b: run_experiment(traj, m, sched, b) for b in Backend}
    assert reps[Backend.FULL].flop_ratio == 1.0
    assert reps[Backend.POST_SOFTMAX].flop_ratio == 1.0
    assert reps[Backend.SPARSE].flop_ratio == pytest.approx(1 / 16)
    assert reps[Backend.RETTENTION].flop_ratio > reps[Backend.SPARSE].flop_ratio
    assert reps[Backend.SPARSE].flop_ratio_schedule < 1.0
    assert reps[Backend.SPARSE].aggregate(StepKind.SPARSE)["steps"] == 12


def test_extreme_logit_scale_stays_finite():
    cfg = TrajectoryConfig(seed=2, steps=10, heads=2, tokens=32, head_dim=8, drift_alpha=0.99, logit_scale=30.0)
    m = sliding_window_mask(2, 32, 1)
    rep = run_experiment(generate_trajectory(cfg), m, DenoisingSchedule(10, 2, 3), "rettention", self_check=True)
    assert all(math.isfinite(s.rel_err) and 0.0 < s.rho <= 1.0 for s in rep.steps)
