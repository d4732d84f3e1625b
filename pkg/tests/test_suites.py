import json

import numpy as np
import pytest

from convexint.suites import (GROUPS, SUITES, Check, SuiteResult, partition_suite, path_defect_suite,
                              run_suites, trace_suite)


class TestCheck:
    def test_relations(self):
        assert Check("a", 1.0, 2.0).passed
        assert not Check("a", 3.0, 2.0).passed
        assert Check("a", 3.0, 2.0, ">=").passed
        assert not Check("a", float("nan"), 2.0).passed
        assert Check("a", 3.0, 2.0).line().startswith("FAIL")

    def test_result_serializes(self):
        res = SuiteResult("x")
        res.add("one", 0.5, 1.0)
        res.measured["c"] = 1.5
        payload = json.loads(json.dumps(res.as_dict()))
        assert payload["passed"] and payload["checks"][0]["passed"]


def test_registry():
    assert set(GROUPS["all"]) == set(SUITES)
    for members in GROUPS.values():
        assert set(members) <= set(SUITES)
    with pytest.raises(KeyError):
        run_suites("nope")


def test_partition_reduced():
    res = partition_suite(lams=(4,), points=10, seed=3)
    assert res.passed, [c.line() for c in res.checks]
    assert res.measured["min_normalizer_lambda4"] > 0


def test_path_defect_reduced():
    res = path_defect_suite(functions=3, anchors=4, seed=1)
    assert res.passed, [c.line() for c in res.checks]
    assert res.measured["max_defect_lambda8"] < res.measured["max_defect_lambda4"]


def test_trace_reduced():
    res = trace_suite(profiles=2, seed=2)
    assert res.passed, [c.line() for c in res.checks]
    assert all(np.isfinite(v) for v in res.measured["c"].values())


def test_seed_reproducible():
    a = path_defect_suite(functions=2, anchors=2, seed=5).measured
    b = path_defect_suite(functions=2, anchors=2, seed=5).measured
    assert a == b
