import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dopq.errors import DimensionError, DomainError, ParameterError
from dopq.quantizers import QuantParams, uq_calibrate
from dopq.reparam import (
    LayerNormAffine,
    LinearLayer,
    ReparamBundle,
    mosf_select,
    repq_select,
    reparameterize,
    score_candidates,
    site_report,
    verify_equivalence,
)


def test_mosf_select_examples():
    assert mosf_select([1, 2, 3], [0, 1, 2]) == (2, 1)
    assert mosf_select([1, 1, 1, 1, 100], [0] * 5)[0] == 1
    assert mosf_select([0.7] * 4, [3] * 4) == (0.7, 3)
    with pytest.raises(DomainError):
        mosf_select([], [])
    with pytest.raises(DomainError):
        mosf_select([1.0, -1.0], [0, 0])


def test_repq_select_examples():
    assert repq_select([1, 1, 1, 1, 100], [0] * 5)[0] == pytest.approx(20.8, abs=1e-12)
    assert repq_select([0.7] * 4, [3] * 4) == mosf_select([0.7] * 4, [3] * 4)
    assert repq_select([1.0] * 3, [0, 0, 2])[1] == 1
    with pytest.raises(DomainError):
        repq_select([], [])


def test_score_candidates_examples():
    rows = {name: mad for name, _, mad in score_candidates([1, 1, 1, 1, 100])}
    assert rows["median"] == pytest.approx(19.8, abs=1e-12)
    assert rows["mean"] == pytest.approx(31.68, abs=1e-12)
    sym = {name: mad for name, _, mad in score_candidates([1.0, 2.0, 3.0, 4.0])}
    assert abs(sym["mean"] - sym["median"]) <= 1e-12
    const = score_candidates([2.0] * 6)
    assert const[0][0] == "median" and all(m == 0 for _, _, m in const)


def test_median_leads_every_table():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        s = rng.lognormal(0, 1.5, rng.integers(1, 80))
        rows = score_candidates(s)
        assert rows[0][0] == "median"
        assert all(rows[0][2] <= m * (1 + 1e-12) for _, _, m in rows)


def hand_case():
    ln = LayerNormAffine(np.ones(2), np.zeros(2))
    lin = LinearLayer(np.eye(2), np.zeros(2))
    b = ReparamBundle(np.array([1.0, 2.0]), np.array([1, 3]), 1.0, 1, bits=4)
    return ln, lin, b


def test_reparameterize_hand_case():
    ln, lin, b = hand_case()
    np.testing.assert_array_equal(b.r1, [1.0, 2.0])
    np.testing.assert_array_equal(b.r2, [0.0, 2.0])
    ln2, lin2 = reparameterize(ln, lin, b)
    np.testing.assert_array_equal(ln2.gamma, [1.0, 0.5])
    np.testing.assert_array_equal(ln2.beta, [0.0, 2.0])
    np.testing.assert_array_equal(lin2.W, [[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(lin2.bias, [0.0, -4.0])


def test_reparameterize_identity():
    rng = np.random.default_rng(0)
    ln = LayerNormAffine(rng.normal(size=5), rng.normal(size=5))
    lin = LinearLayer(rng.normal(size=(5, 3)), rng.normal(size=3))
    b = ReparamBundle(np.full(5, 0.3), np.full(5, 7), 0.3, 7, bits=4)
    ln2, lin2 = reparameterize(ln, lin, b)
    for a, c in ((ln.gamma, ln2.gamma), (ln.beta, ln2.beta), (lin.W, lin2.W), (lin.bias, lin2.bias)):
        np.testing.assert_array_equal(a, c)
    eq = verify_equivalence(ln, lin, b, rng.normal(size=(8, 5)))
    assert eq.fp_max_abs == 0 and eq.deq_max_abs == 0 and eq.code_agreement == 1.0


def test_dimension_and_bundle_errors():
    ln, lin, b = hand_case()
    with pytest.raises(DimensionError):
        reparameterize(LayerNormAffine(np.ones(3), np.zeros(3)), lin, b)
    with pytest.raises(DimensionError):
        LinearLayer(np.eye(2), np.zeros(3))
    with pytest.raises(DimensionError):
        LayerNormAffine(np.ones(2), np.zeros(3))
    with pytest.raises(ParameterError):
        ReparamBundle(np.ones(2), np.zeros(2), 0.0, 0, bits=4)
    with pytest.raises(ParameterError):
        ReparamBundle(np.ones(2), np.zeros(2), 1.0, 16, bits=4)
    with pytest.raises(ParameterError):
        ReparamBundle(np.ones(2), np.zeros(2), 1.0, 1.5, bits=4)
    with pytest.raises(ParameterError):
        ReparamBundle.from_params(QuantParams(4, 1.0, 0))


def random_instance(rng):
    D, out = int(rng.integers(2, 33)), int(rng.integers(1, 17))
    bits = int(rng.choice([2, 3, 4, 6, 8]))
    ln = LayerNormAffine(rng.lognormal(0, 1, D) * rng.choice([-1, 1], D), rng.normal(0, 2, D))
    lin = LinearLayer(rng.normal(size=(D, out)), rng.normal(size=out))
    xhat = rng.normal(size=(int(rng.integers(1, 40)), D))
    p = uq_calibrate(ln(xhat), bits, granularity="channel-wise", axis=-1)
    s_t = float(rng.lognormal(0, 2))
    z_t = int(rng.integers(0, 2**bits))
    return ln, lin, ReparamBundle(p.scale, p.zero_point, s_t, z_t, bits), xhat


def test_equivalence_500_instances():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        ln, lin, b, xhat = random_instance(rng)
        eq = verify_equivalence(ln, lin, b, xhat)
        assert eq.code_agreement == 1.0
        assert eq.deq_max_rel <= 1e-9 and eq.fp_max_rel <= 1e-9
        assert eq.exact


def test_equivalence_outside_calibration_range():
    # clamping happens at the same pre-clamp value on both paths
    rng = np.random.default_rng(5)
    ln, lin, b, xhat = random_instance(rng)
    eq = verify_equivalence(ln, lin, b, xhat * 5.0)
    assert eq.code_agreement == 1.0 and eq.deq_max_rel <= 1e-9


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)),
    st.floats(1e-4, 1e4),
    st.integers(0, 15),
    st.integers(0, 2**31 - 1),
)
def test_equivalence_any_shared_factors(s, s_t, z_t, seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 16, 6)
    ln = LayerNormAffine(rng.normal(size=6), rng.normal(size=6))
    lin = LinearLayer(rng.normal(size=(6, 4)), rng.normal(size=4))
    eq = verify_equivalence(ln, lin, ReparamBundle(s, z, s_t, z_t, 4), rng.normal(size=(10, 6)))
    assert eq.code_agreement == 1.0


def test_from_params_and_site_report():
    p = QuantParams(4, np.array([1.0, 1.0, 1.0, 1.0, 100.0]), np.array([1, 2, 3, 4, 5]), axis=-1)
    med = ReparamBundle.from_params(p)
    mean = ReparamBundle.from_params(p, repq_select)
    assert (med.s_tilde, med.z_tilde) == (1.0, 3)
    assert mean.s_tilde == pytest.approx(20.8) and mean.z_tilde == 3
    assert med.layer_params().axis is None and med.channel_params().axis == -1
    doc = site_report("ln1", med)
    assert doc["mad"][0]["statistic"] == "median"
    assert doc["mad"][0]["mad"] == pytest.approx(19.8)
