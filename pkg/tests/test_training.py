import numpy as np
import pytest

from dcproxy.completion import CompletionConfig, IndependentVars
from dcproxy.errors import InputError
from dcproxy.formulation import InstanceLoads
from dcproxy.proxy import ArchConfig, init_proxy, proxy_bound
from dcproxy.training import (EvalReport, SamplerConfig, TrainConfig, dual_ascent, evaluate,
                              read_jsonl, sample_instances, split_dataset, train, write_jsonl)

SMALL = ArchConfig(trunk=(16,), head=(8,))


def test_no_noise_gives_nominal(case14):
    s = sample_instances(case14, SamplerConfig(n_instances=5, alpha_low=1, alpha_high=1, sigma=0))
    np.testing.assert_array_equal(s.pd, np.tile(case14.pd, (5, 1)))
    np.testing.assert_array_equal(s.qd, np.tile(case14.qd, (5, 1)))


def test_noise_has_mean_one(case14):
    s = sample_instances(case14, SamplerConfig(n_instances=100000 // 11, alpha_low=1, alpha_high=1))
    m = case14.pd > 0
    eta = (s.pd[:, m] / case14.pd[m]).ravel()
    se = 0.05 / np.sqrt(eta.size)
    assert abs(eta.mean() - 1) <= 3 * se


def test_power_factor_kept(case14):
    s = sample_instances(case14, SamplerConfig(n_instances=20))
    m = case14.pd > 0
    np.testing.assert_allclose(s.qd[:, m] / s.pd[:, m], np.tile(case14.qd[m] / case14.pd[m], (20, 1)))


def test_total_load_range(case14):
    tot = sample_instances(case14, SamplerConfig(n_instances=2000)).pd.sum(axis=1)
    # slack: five standard deviations of the per-bus noise on the total
    rel = 0.05 * np.sqrt((case14.pd**2).sum()) / case14.pd.sum()
    assert tot.min() >= 1.9 * (1 - 5 * rel) and tot.max() <= 2.9 * (1 + 5 * rel)
    # the bulk of the range sits in the reference interval
    assert np.mean((tot >= 1.9) & (tot <= 2.9)) >= 0.95


def test_sampler_seeded(case14):
    a = sample_instances(case14, SamplerConfig(n_instances=4, seed=9))
    b = sample_instances(case14, SamplerConfig(n_instances=4, seed=9))
    assert np.array_equal(a.pd, b.pd)


def test_split_sizes_and_disjoint(case14):
    s = sample_instances(case14, SamplerConfig(n_instances=1000))
    tr, va, te = split_dataset(s, seed=2)
    assert (len(tr), len(va), len(te)) == (900, 50, 50)
    keys = [tuple(np.round(x, 12)) for part in (tr, va, te) for x in part.pd]
    assert len(set(keys)) == 1000
    tr2, _, _ = split_dataset(s, seed=2)
    assert np.array_equal(tr.pd, tr2.pd)


def test_split_bad_fractions(case14):
    with pytest.raises(ValueError):
        split_dataset(InstanceLoads.nominal(case14), (0.5, 0.5, 0.5))


def test_jsonl_roundtrip(case14, tmp_path):
    s = sample_instances(case14, SamplerConfig(n_instances=3))
    write_jsonl(tmp_path / "d.jsonl", s)
    back = read_jsonl(tmp_path / "d.jsonl")
    np.testing.assert_array_equal(back.pd, s.pd)


def test_zero_lr_keeps_params(case14):
    p = init_proxy(case14, SMALL)
    one = InstanceLoads.stack([InstanceLoads.nominal(case14)])
    q, hist = train(p, case14, one, TrainConfig(epochs=1, lr=0.0, batch_size=1), val=one)
    assert np.array_equal(q.flat(), p.flat())
    assert len(hist.epochs) == 2 and not hist.aborted


def test_short_training_improves(case14):
    p = init_proxy(case14, SMALL)
    data = sample_instances(case14, SamplerConfig(n_instances=128, seed=1))
    q, hist = train(p, case14, data, TrainConfig(epochs=3, batch_size=32, lr=1e-3))
    assert hist.split_sizes == (115, 6, 7)
    assert hist.best_val_bound >= hist.epochs[0]["val_mean_bound"]
    bsf = hist.best_so_far()
    assert all(b >= a for a, b in zip(bsf, bsf[1:]))
    assert hist.best_val_bound == max(hist.val_bounds)


def test_divergence_aborts(case14):
    p = init_proxy(case14, SMALL)
    # huge lr blows the weights up; the best checkpoint is still returned
    data = sample_instances(case14, SamplerConfig(n_instances=64, seed=1))
    q, hist = train(p, case14, data, TrainConfig(epochs=5, batch_size=8, lr=1e6))
    assert np.all(np.isfinite(q.flat()))
    _, z = proxy_bound(q, case14, data[:4])
    assert np.all(np.isfinite(z))


def test_ascent_zero_steps(case14):
    loads = InstanceLoads.nominal(case14)
    res = dual_ascent(case14, loads, steps=0)
    assert res.bound == pytest.approx(float(case14.pmin @ case14.cost))
    assert res.trajectory == [res.bound]


@pytest.mark.parametrize("rule", ["adam", "halving"])
def test_ascent_monotone_best(case14, rule):
    loads = InstanceLoads.nominal(case14)
    res = dual_ascent(case14, loads, steps=40, step_rule=rule)
    assert all(b >= a for a, b in zip(res.trajectory, res.trajectory[1:]))
    assert res.bound == max(res.iterates)
    if rule == "halving":
        assert all(b >= a for a, b in zip(res.iterates, res.iterates[1:]))


def test_ascent_from_given_start(case14, fixture14):
    from dcproxy.completion import extract_independent
    from dcproxy.formulation import DualSolution
    loads = InstanceLoads.from_json_dict(fixture14["loads"])
    xi0 = extract_independent(DualSolution.from_json_dict(fixture14["dual"]))
    res = dual_ascent(case14, loads, xi0=xi0, steps=5)
    assert res.bound >= fixture14["dual_objective"] * (1 - 1e-6)


def test_evaluate_gaps(case14):
    p = init_proxy(case14, SMALL)
    data = sample_instances(case14, SamplerConfig(n_instances=5))
    rep = evaluate(p, case14, data)
    assert not rep.has_gaps and rep.max_residual <= 1e-9
    rep2 = evaluate(p, case14, data, refs=rep.bounds)
    assert not np.any(rep2.gaps)
    s = rep2.stats()
    assert s["mean_gap"] == 0 and s["geomean_clamped"] == 5
    with pytest.raises(InputError):
        evaluate(p, case14, data, refs=rep.bounds[:3])
    with pytest.raises(InputError):
        evaluate(p, case14, data, refs=np.full(5, np.nan))


def test_eval_report_single_gap():
    rep = EvalReport(np.array([98.0]), np.array([0.02]))
    assert rep.stats()["max_gap"] == pytest.approx(0.02)
    assert "gap%" in rep.table_row("x")
    from dcproxy.formulation import optimality_gap
    assert optimality_gap(100.0, 98.0) == pytest.approx(0.02)
