from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from contdid.errors import NoStayers, TooManyFailures
from contdid.estimators import ampos_reg
from contdid.inference import BootstrapSpec, attach, bootstrap, bootstrap_many, resample_index

from .conftest import make_panel


def normal_panel(n=1000, seed=0):
    y = np.random.default_rng(seed).standard_normal((n, 2))
    return make_panel(np.zeros((n, 2)), y)


def mean_y1(panel):
    return float(panel.y[:, 0].mean())


def test_se_of_sample_mean():
    res = bootstrap(mean_y1, normal_panel(), BootstrapSpec(500, seed=1))
    assert abs(res.se - 1 / np.sqrt(1000)) < 0.2 / np.sqrt(1000)
    assert res.ci_low < 0 < res.ci_high or abs(mean_y1(normal_panel())) > 0
    assert res.n_failed == 0 and res.replicates.size == 500


def test_constant_estimator():
    res = bootstrap(lambda p: 3.0, normal_panel(50), BootstrapSpec(20))
    assert res.se == 0.0 and res.ci_low == 3.0 and res.ci_high == 3.0


def test_determinism_and_order_independence():
    panel = normal_panel(200)
    spec = BootstrapSpec(50, seed=7)
    a = bootstrap(mean_y1, panel, spec)
    b = bootstrap(mean_y1, panel, spec)
    with ThreadPoolExecutor(4) as pool:
        c = bootstrap(mean_y1, panel, spec, map_fn=pool.map)
    reverse = lambda fn, it: reversed([fn(r) for r in reversed(list(it))])  # noqa: E731
    d = bootstrap(mean_y1, panel, spec, map_fn=reverse)
    for other in (b, c, d):
        assert other.to_dict() == a.to_dict()
        np.testing.assert_array_equal(other.replicates, a.replicates)


def test_resample_index_depends_on_seed_and_replicate_only():
    np.testing.assert_array_equal(resample_index(10, 3, 5), resample_index(10, 3, 5))
    assert not np.array_equal(resample_index(100, 3, 5), resample_index(100, 3, 6))
    assert not np.array_equal(resample_index(100, 3, 5), resample_index(100, 4, 5))


def test_resampled_units_keep_their_periods():
    panel = make_panel(np.arange(20.0).reshape(10, 2), np.arange(20.0).reshape(10, 2) * 10)
    seen = []

    def record(p):
        seen.append(p)
        return 0.0

    bootstrap(record, panel, BootstrapSpec(3))
    for p in seen:
        np.testing.assert_array_equal(p.d[:, 1] - p.d[:, 0], 1.0)
        np.testing.assert_array_equal(p.y, p.d * 10)


def test_failed_replicates_counted():
    calls = iter(range(10 ** 6))

    def sometimes(p):
        if next(calls) % 4 == 0:
            raise NoStayers("resample without stayers")
        return 1.0

    res = bootstrap(sometimes, normal_panel(20), BootstrapSpec(40))
    assert res.n_failed == 10


def test_too_many_failures():
    def failing(p):
        raise NoStayers("none")

    with pytest.raises(TooManyFailures):
        bootstrap(failing, normal_panel(20), BootstrapSpec(10))
    res, errors = bootstrap_many(lambda p: {"a": 1.0, "b": float("nan")}, normal_panel(20), BootstrapSpec(10))
    assert set(res) == {"a"} and isinstance(errors["b"], TooManyFailures)


def test_spec_validation():
    for bad in (dict(replications=1), dict(ci_level=1.0), dict(seed=-1)):
        with pytest.raises(ValueError):
            BootstrapSpec(**bad)


def test_attach_to_estimate(linear_panel):
    est = ampos_reg(linear_panel)
    res = bootstrap(lambda p: ampos_reg(p, bandwidth=est.tuning["bandwidth"], trim=est.tuning["trim"]).value,
                    linear_panel, BootstrapSpec(30, seed=2))
    attach(est, res)
    assert est.ci_kind == "percentile" and est.se == res.se and est.n_boot_failed == 0
    assert est.to_dict()["ci_low"] == res.ci_low
