"""Latency model: exact closed-form identities, monotonicity, and a small
end-to-end measurement sanity run. The full-tolerance validation at
acceptance scale lives in the acceptance suite."""

import math

import pytest

from ssitls import perfmodel
from ssitls.crypto import SignatureSuite
from ssitls.perfmodel import (
    ModelInputs,
    Stat,
    delta_d,
    delta_v,
    estimate_for_cell,
    estimate_hybrid,
    estimate_mutual,
    estimate_unilateral,
)


def inputs(t_c=0.0, t_v=0.0, t_d=0.0, uni=0.0, mut=0.0) -> ModelInputs:
    s = lambda x: Stat(x, 0.0, 1)
    return ModelInputs(s(t_c), s(t_v), s(t_d), s(uni), s(mut))


MS = 1e-3


def test_delta_v_paper_style_arithmetic():
    # 20ms verify + 25ms resolve - 9ms chain = 36ms
    assert delta_v(inputs(t_c=9 * MS, t_v=20 * MS, t_d=25 * MS)) \
        == pytest.approx(36 * MS)


def test_delta_v_degenerate_equality():
    assert delta_v(inputs(t_c=7 * MS, t_v=7 * MS, t_d=0.0)) == pytest.approx(0.0)


def test_delta_d_is_resolution_minus_chain():
    assert delta_d(inputs(t_c=9 * MS, t_d=25 * MS)) == pytest.approx(16 * MS)


def test_mutual_estimate_adds_twice_the_delta():
    # delta_v = 36ms on a 50ms mutual baseline -> 122ms
    m = inputs(t_c=9 * MS, t_v=20 * MS, t_d=25 * MS, mut=50 * MS)
    assert estimate_mutual(m, "vc").estimate == pytest.approx(122 * MS)


def test_hybrid_is_the_midpoint_identity():
    m = inputs(t_c=3 * MS, t_v=8 * MS, t_d=21 * MS, uni=40 * MS, mut=71 * MS)
    for mode in ("vc", "did"):
        mutual = estimate_mutual(m, mode).estimate
        hybrid = estimate_hybrid(m, mode).estimate
        assert hybrid == pytest.approx(m.h_o_mut.mean + (mutual - m.h_o_mut.mean) / 2)


def test_everything_collapses_when_deltas_vanish():
    m = inputs(t_c=5 * MS, t_v=5 * MS, t_d=0.0, uni=30 * MS, mut=55 * MS)
    assert delta_v(m) == pytest.approx(0.0)
    assert delta_d(m) == pytest.approx(-5 * MS)  # resolution-free DID is cheaper
    m2 = inputs(t_c=0.0, t_v=0.0, t_d=0.0, uni=30 * MS, mut=55 * MS)
    for cell in perfmodel.ALL_CELLS:
        base = m2.h_o_mut.mean if not cell.endswith("uni") else m2.h_o_uni.mean
        assert estimate_for_cell(m2, cell).estimate == pytest.approx(base)


def test_mutual_vc_minus_did_is_twice_vc_verify():
    m = inputs(t_c=4 * MS, t_v=11 * MS, t_d=20 * MS, mut=60 * MS)
    diff = estimate_mutual(m, "vc").estimate - estimate_mutual(m, "did").estimate
    assert diff == pytest.approx(2 * m.t_v.mean)


def test_monotonic_in_resolution_time():
    base = inputs(t_c=4 * MS, t_v=6 * MS, t_d=20 * MS, uni=30 * MS, mut=60 * MS)
    bumped = inputs(t_c=4 * MS, t_v=6 * MS, t_d=27 * MS, uni=30 * MS, mut=60 * MS)
    delta = 7 * MS
    for cell in perfmodel.SSI_CELLS:
        before = estimate_for_cell(base, cell).estimate
        after = estimate_for_cell(bumped, cell).estimate
        assert after - before >= delta - 1e-12
    for cell in ("x509-uni", "x509-mut"):
        assert estimate_for_cell(base, cell).estimate \
            == estimate_for_cell(bumped, cell).estimate


def test_linear_in_each_input():
    a = inputs(t_c=2 * MS, t_v=3 * MS, t_d=5 * MS, uni=20 * MS, mut=40 * MS)
    b = inputs(t_c=4 * MS, t_v=9 * MS, t_d=15 * MS, uni=30 * MS, mut=70 * MS)
    mid = inputs(t_c=3 * MS, t_v=6 * MS, t_d=10 * MS, uni=25 * MS, mut=55 * MS)
    for cell in perfmodel.ALL_CELLS:
        expected = (estimate_for_cell(a, cell).estimate
                    + estimate_for_cell(b, cell).estimate) / 2
        assert estimate_for_cell(mid, cell).estimate == pytest.approx(expected)


def test_stat_from_samples():
    stat = Stat.from_samples([1.0, 2.0, 3.0])
    assert stat.mean == pytest.approx(2.0)
    assert stat.std == pytest.approx(math.sqrt(2 / 3))
    assert stat.n == 3
    empty = Stat.from_samples([])
    assert (empty.mean, empty.n) == (0.0, 0)


# ---------------------------------------------------------------------------
# Small measurement run: structure and internal consistency only
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_measurement():
    return perfmodel.measure(suites=[SignatureSuite.ED25519],
                             cells=["x509-uni", "vc-uni", "did-uni"],
                             runs=10, warmup=2, identity_pool=1)


def test_measure_produces_expected_grid(small_measurement):
    ms = small_measurement
    assert ms.suites() == ["ed25519"]
    for cell in ("x509-uni", "vc-uni", "did-uni"):
        records = ms.cell_records("ed25519", cell)
        assert len(records) == 10
        for r in records:
            assert r.latency > 0
            phase_total = sum(r.phases.values())
            assert phase_total <= r.latency + 0.002  # phases sit on the timed path


def test_phase_timers_locate_the_work(small_measurement):
    ms = small_measurement
    for r in ms.cell_records("ed25519", "x509-uni"):
        assert r.phases.get("chain_verify", 0) > 0
        assert r.phases.get("resolve", 0) == 0
    for r in ms.cell_records("ed25519", "vc-uni"):
        assert r.phases.get("vc_verify", 0) > 0
        assert r.phases.get("resolve", 0) > 0
    for r in ms.cell_records("ed25519", "did-uni"):
        assert r.phases.get("vc_verify", 0) == 0
        assert r.phases.get("resolve", 0) > 0


def test_model_inputs_extracted(small_measurement):
    inputs_ = small_measurement.inputs_for("ed25519")
    assert inputs_.t_c.n > 0 and inputs_.t_d.n > 0 and inputs_.t_v.n > 0
    assert inputs_.t_d.mean > inputs_.t_v.mean  # resolution includes a channel setup


def test_report_files_written(tmp_path, small_measurement):
    report = perfmodel.validate(small_measurement)
    perfmodel.write_report(small_measurement, report, tmp_path)
    assert (tmp_path / "runs.csv").exists()
    assert (tmp_path / "report.md").exists()
    overlay = tmp_path / "overlay_ed25519_vc-uni.csv"
    assert overlay.exists()
    header = overlay.read_text().splitlines()[0]
    assert header == "run_index,measured_delta_ms,model_delta_ms"
    body = overlay.read_text().splitlines()[1:]
    assert len(body) == 10
