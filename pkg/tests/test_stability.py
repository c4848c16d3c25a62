import csv
import json
import math

import numpy as np
import pytest

from geotransport import albedo as al
from geotransport import geometry as geo
from geotransport import stability as st
from geotransport import transport as tr


def bump(amp, width, dim=2, center=None):
    return tr.Bump(amp, center, width, 1.0, dim)


@pytest.fixture(scope="module")
def disk():
    return geo.Manifold(geo.euclidean(2), 1.0, 1.2)


def test_C1_trivial_coefficients():
    assert st.constant_C1(0.0, 0.0, 3, 2.0, 1.3, 0.0) == 1.0


def test_C1_affine_in_rho():
    f = lambda r: st.constant_C1(0.5, r, 3, 2.0, 1.3, 0.01)
    assert f(0.4) - f(0.2) == pytest.approx(f(0.2) - f(0.0), rel=1e-12)
    # at eps = 0 the slope is 2 diam w_2 e^{diam Sigma} times the factor e^{2 diam Sigma}
    g = lambda r: st.constant_C1(0.5, r, 3, 2.0, 1.3, 0.0)
    assert g(1.0) - g(0.0) == pytest.approx(2 * 2.0 * math.pi * math.e * math.exp(2.0), rel=1e-12)


def test_C1_rejects_bad_input():
    with pytest.raises(ValueError):
        st.constant_C1(0.5, 0.2, 3, 2.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        st.constant_C1(0.5, -0.2, 3, 2.0, 1.0, 0.0)


def test_C_flat_disk_zero_coefficients(disk):
    c = st.constant_C(disk, 0.0, 0.0)
    # circumference of the outer circle times w_1 = 2
    assert c.vol_boundary == pytest.approx(2 * math.pi * 1.2, rel=1e-12)
    assert c.C == pytest.approx(max(2 * math.pi * 1.2 * 2, 1 / c.c0), rel=1e-12)


def test_C_monotone_in_eps(disk):
    assert st.constant_C(disk, 0.5, 0.2, eps=0.05).C > st.constant_C(disk, 0.5, 0.2, eps=0.01).C


def test_check_semantics():
    assert st.Check("x", 1.0, 1.0005).ok
    assert st.Check("x", 1.0009, 1.0).ok
    assert not st.Check("x", 1.002, 1.0).ok
    assert st.Check("x", 2.0, 1.0).violation == 1.0


def test_bal_estimate1_identical_pairs(disk):
    p = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)), tr.ZeroKernel())
    x, v = al.sample_incoming(disk, 8, 1.0)
    c = st.check_bal_estimate1(disk, p, p, x, v, 0.0)
    assert c.lhs == 0.0 and c.ok


def test_fit_C_emp():
    rows = [{"delta_upper": 2.0, "epsilon": 1.0}, {"delta_upper": 3.0, "epsilon": 1.0},
            {"delta_upper": 0.0, "epsilon": 0.0}]
    f = st.fit_C_emp(rows)
    assert f["C_emp"] == 3.0 and f["ratios"] == [2.0, 3.0]
    assert f["spread"] == pytest.approx(0.2)
    assert st.fit_C_emp([])["C_emp"] == 0.0


def test_experiment_config_validation(disk):
    p = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)), tr.ZeroKernel())
    with pytest.raises(ValueError):
        st.ExperimentConfig(disk, p, (None, None), [0.01], mode="n3")
    with pytest.raises(ValueError):
        st.ExperimentConfig(disk, p, (None, None), [0.02, 0.01], mode="n2")


def test_zero_delta_sweep_and_report(disk, tmp_path):
    base = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)),
                              tr.IsotropicKernel(bump(0.2, 0.4), 2))
    cfg = st.ExperimentConfig(disk, base, (tr.IsotropicAttenuation(bump(1.0, 0.3)), None), [0.0],
                              mode="n2", nsamples=4, seed=5)
    rep = st.run_stability_experiment(cfg)
    assert rep.all_pass and rep.rows[0]["epsilon"] == 0.0
    jp, cp = st.write_report(rep, tmp_path)
    with open(cp) as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == st.SWEEP_COLUMNS
    assert rows[1][0] == "0.0" and rows[1][-1] == "true"
    with open(jp) as f:
        d = json.load(f)
    assert d["schema_version"] == st.SCHEMA_VERSION and d["all_pass"]


def test_isometry_ballistic_only(disk):
    a = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)), tr.ZeroKernel())
    b = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.6, 0.4)), tr.ZeroKernel())
    inner, outer, gap = st.check_isometry(disk, a, b, 1.1, nsamples=8, nt=20, nw=24,
                                          multiple="omit")
    assert inner > 0 and gap <= 1e-6


def test_isometry_rejects_large_support(disk):
    a = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)), tr.ZeroKernel())
    with pytest.raises(ValueError):
        st.check_isometry(disk, a, a, 0.9)
