import math

import numpy as np
import pytest

from dcproxy.completion import CompletionConfig
from dcproxy.errors import ParseError, SingularTapError, UnsupportedCostError, ValidationError
from dcproxy.grid import (ANGLE_LIMIT, Branch, CaseData, case_stats, complex_branch_flows,
                          count_independent, derive_branch_constants, load_case, parse_matpower)

from conftest import random_phasors, two_bus_case


def test_case14_dimensions(case14):
    assert (case14.n_bus, case14.n_branch) == (14, 20)
    assert case14.pd.sum() == pytest.approx(2.59, abs=1e-12)


def test_count_independent(case14):
    assert count_independent(case14, CompletionConfig(omega_repr="polar")) == 168
    assert count_independent(case14, CompletionConfig(omega_repr="rect")) == 188


def test_count_independent_case118():
    assert count_independent(load_case("case118"), CompletionConfig()) == 1538


def test_small_case_units_and_dummy_gen(small_text):
    c = parse_matpower(small_text)
    assert c.n_bus == 3
    # out-of-service branch (status 0) dropped
    assert c.n_branch == 3
    assert c.pd[1] == pytest.approx(0.9)
    assert c.bs[1] == pytest.approx(0.19)
    # bus 2 has no generator
    assert (c.pmin[1], c.pmax[1], c.qmin[1], c.qmax[1], c.cost[1]) == (0, 0, 0, 0, 0)
    # tap 0 means nominal ratio, shift in degrees
    assert c.tap[0] == 1.0 and c.tap[1] == pytest.approx(0.98)
    assert c.shift[1] == pytest.approx(math.radians(2))
    # rateA 0 means unlimited; angle bounds 0/0 mean unbounded (clamped)
    assert np.isinf(c.rate[1]) and c.rate[0] == pytest.approx(2.5)
    assert c.angmin[2] == -ANGLE_LIMIT and c.angmax[2] == ANGLE_LIMIT
    assert c.limited.tolist() == [True, False, True]


def test_aggregation_min_cost_and_sum(small_text):
    c = parse_matpower(small_text)
    # two units at bus 1 are summed; the cheaper linear cost is kept (per unit base)
    assert c.pmax[0] == pytest.approx(2.8)
    assert c.pmin[0] == pytest.approx(0.1)
    assert c.qmax[0] == pytest.approx(1.5)
    assert c.cost[0] == pytest.approx(12 * 100)
    # out-of-service unit at bus 3 is ignored
    assert c.pmax[2] == pytest.approx(0.6)
    assert c.cost[2] == pytest.approx(30 * 100)
    assert c.metadata["multi_generator_buses"] == [1]


def test_aggregation_conserves_capacity(small_text):
    c = parse_matpower(small_text)
    # in-service pmax in the text: 200 + 80 + 60 MW
    assert c.pmax.sum() == pytest.approx(3.4)


def test_parse_deterministic(small_text):
    assert parse_matpower(small_text).dumps() == parse_matpower(small_text).dumps()


def test_malformed_row_reports_line(small_text):
    bad = small_text.replace("2	1	90	30	0	19", "2	1	90	x	0	19")
    with pytest.raises(ParseError) as err:
        parse_matpower(bad)
    assert err.value.line == 8


def test_ragged_row(small_text):
    bad = small_text.replace("1.1	0.9;\n	2", "1.1;\n	2", 1)
    with pytest.raises(ParseError):
        parse_matpower(bad)


def test_quadratic_cost_rejected(small_text):
    bad = small_text.replace("2	0	0	3	0	15	0;", "2	0	0	3	0.1	15	0;")
    with pytest.raises(UnsupportedCostError):
        parse_matpower(bad)


def test_piecewise_cost_rejected(small_text):
    bad = small_text.replace("2	0	0	3	0	15	0;", "1	0	0	2	0	0	100	1500;")
    with pytest.raises(UnsupportedCostError):
        parse_matpower(bad)


def test_undefined_bus(small_text):
    bad = small_text.replace("1	2	0.01	0.10", "1	7	0.01	0.10")
    with pytest.raises(ValidationError):
        parse_matpower(bad)


def test_missing_table(small_text):
    with pytest.raises(ParseError):
        parse_matpower(small_text.replace("mpc.gencost", "mpc.other"))


def test_zero_tap_is_singular():
    c = two_bus_case()
    bad = CaseData.build("bad", 100.0, c.buses, [c.branches[0]._replace(tap=0.0)], c.gens)
    with pytest.raises(SingularTapError):
        derive_branch_constants(bad)


def test_lossless_branch_has_no_active_shunt_term():
    k = derive_branch_constants(two_bus_case(g=0.0, b=-1.0))
    assert k.pf_w[0] == 0.0
    assert k.pt_w[0] == 0.0


def test_conjugation_symmetry_without_transformer():
    k = derive_branch_constants(two_bus_case(g=0.7, b=-3.0))
    # w_re enters both directions alike, w_im with opposite sign
    assert k.pf_r[0] == pytest.approx(k.pt_r[0])
    assert k.pf_i[0] == pytest.approx(-k.pt_i[0])
    assert k.qf_r[0] == pytest.approx(k.qt_r[0])
    assert k.qf_i[0] == pytest.approx(-k.qt_i[0])


@pytest.mark.parametrize("tap,shift", [(1.0, 0.0), (0.95, 0.0), (1.05, 0.1), (0.9, -0.2)])
def test_constants_match_complex_oracle(tap, shift):
    rng = np.random.default_rng(1)
    for _ in range(20):
        g, b = rng.uniform(0.1, 5), -rng.uniform(1, 20)
        c = two_bus_case(g=g, b=b, tap=tap, shift=shift)
        vf, vt = random_phasors(rng, 1)
        w = vf * np.conj(vt)
        k = c.constants
        pf, qf, pt, qt = k.flows(c, np.array([abs(vf[0])**2, abs(vt[0])**2]), w.real, w.imag)
        ref = complex_branch_flows(c, vf, vt)
        for got, want in zip((pf, qf, pt, qt), ref):
            assert abs(got[0] - want[0]) <= 1e-12 * (1 + abs(want[0]))


def test_case_json_roundtrip_fields(case14):
    import json
    d = json.loads(case14.dumps())
    assert d["bus"]["pd"][2] == pytest.approx(0.942)
    assert len(d["branch"]["rate"]) == 20


def test_case_stats(case14):
    s = case_stats(case14)
    assert s["n_indep_polar"] == 168 and s["unlimited_branches"] == 0


def test_arrays_read_only(case14):
    with pytest.raises(ValueError):
        case14.pd[0] = 1.0


def test_load_case_unknown():
    with pytest.raises(FileNotFoundError):
        load_case("no_such_case")
