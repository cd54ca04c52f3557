import json
import math

import numpy as np
import pytest

from dcproxy.grid import DATA_DIR, AggGen, Branch, Bus, CaseData, load_case

SMALL_CASE = """\
function mpc = small3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
%	bus_i	type	Pd	Qd	Gs	Bs	area	Vm	Va	baseKV	zone	Vmax	Vmin
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	135	1	1.1	0.9;
	2	1	90	30	0	19	1	1.0	0	135	1	1.1	0.9;
	3	2	50	10	1	0	1	1.0	0	135	1	1.05	0.95;
];
%% generator data
mpc.gen = [
	1	0	0	100	-100	1.0	100	1	200	0;
	1	0	0	50	-50	1.0	100	1	80	10;
	3	0	0	40	-40	1.0	100	1	60	0;
	3	0	0	40	-40	1.0	100	0	60	0;
];
%% branch data
mpc.branch = [
	1	2	0.01	0.10	0.02	250	250	250	0	0	1	-30	30;
	2	3	0.02	0.20	0.00	0	0	0	0.98	2	1	-30	30;
	1	3	0.01	0.10	0.00	100	100	100	0	0	0	-30	30;
	3	1	0.03	0.25	0.04	120	120	120	0	0	1	0	0;
];
%% generator cost data
mpc.gencost = [
	2	0	0	3	0	15	0;
	2	0	0	3	0	12	0;
	2	0	0	2	30	0;
	2	0	0	2	50	0;
];
"""


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def fixture14():
    with open(DATA_DIR / "case14_fixture.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def refs14():
    with open(DATA_DIR / "case14_test_refs.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def small_text():
    return SMALL_CASE


def single_bus_case(cost=5.0, pmax=10.0, pd=1.0):
    return CaseData.build("single", 100.0, [Bus(1, pd, 0.0, 0.0, 0.0, 0.9, 1.1)], [],
                          [AggGen(0.0, pmax, -1.0, 1.0, cost)])


def two_bus_case(g=1.0, b=-10.0, tap=1.0, shift=0.0, rate=2.0):
    buses = [Bus(1, 0.0, 0.0, 0.0, 0.0, 0.9, 1.1), Bus(2, 1.0, 0.3, 0.0, 0.0, 0.9, 1.1)]
    branches = [Branch(0, 1, g, b, 0.0, 0.05, 0.0, 0.05, tap, shift, rate, -0.5, 0.5)]
    gens = [AggGen(0.0, 2.0, -1.0, 1.0, 10.0), AggGen(0.0, 0.0, 0.0, 0.0, 0.0)]
    return CaseData.build("two", 100.0, buses, branches, gens)


def random_phasors(rng, n):
    vm = rng.uniform(0.9, 1.1, (2, n))
    va = rng.uniform(-math.pi / 3, math.pi / 3, (2, n))
    return vm[0] * np.exp(1j * va[0]), vm[1] * np.exp(1j * va[1])
