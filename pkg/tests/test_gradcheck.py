import numpy as np
import pytest

from veloform import gradcheck
from veloform.fields import FieldQuery, velocity_jacobian
from veloform.gradcheck import OPERATOR_CHECKS, fresh_fields, rel_error, run_check_grads
from veloform.losses import WEIGHT_FOR_TERM


@pytest.fixture(scope="module")
def full_report():
    return run_check_grads(probes=100, loss_probes=100)


def test_fresh_init_passes(full_report):
    assert full_report.passed, full_report.to_dict()


def test_report_lists_every_check(full_report):
    names = [r.name for r in full_report.results]
    assert names == list(OPERATOR_CHECKS) + [f"grad[{t}]" for t in WEIGHT_FOR_TERM]
    assert all(r.probes == 100 for r in full_report.results)


def test_tolerances(full_report):
    tol = {r.name: r.tolerance for r in full_report.results}
    for first in ("grad_phi", "dphi_dt", "velocity_jacobian", "velocity_divergence"):
        assert tol[first] == 1e-4
    assert tol["velocity_laplacian"] == 1e-3


def test_corrupted_operator_named():
    def broken(phi, vel, x, t, z):
        auto = velocity_jacobian(vel, FieldQuery(x, t, z)).detach().numpy() * 1.001
        _, ref, tol = gradcheck._check_jacobian(phi, vel, x, t, z)
        return auto, ref, tol

    checks = dict(OPERATOR_CHECKS, velocity_jacobian=broken)
    report = run_check_grads(probes=20, loss_probes=0, operator_checks=checks)
    assert report.failures == ["velocity_jacobian"]


def test_single_loss_term():
    phi, vel = fresh_fields(seed=3)
    code = np.full(phi.code_dim, 0.1)
    [res] = gradcheck.check_loss_gradients(phi, vel, code, probes=5, terms=["L_v"])
    assert res.name == "grad[L_v]" and res.passed


def test_trained_fields_not_modified():
    phi, vel = fresh_fields()
    phi.float(), vel.float()
    before = [p.clone() for p in phi.parameters()]
    run_check_grads(phi, vel, probes=5, loss_probes=0)
    assert all(p.dtype.is_floating_point and p.dtype.itemsize == 4 for p in phi.parameters())
    assert all((a == b).all() for a, b in zip(before, phi.parameters()))


def test_rel_error():
    assert rel_error([1.0], [1.0])[0] == 0
    assert rel_error([0.0], [0.0])[0] == 0
    assert rel_error([[3.0, 4.0]], [[3.0, 4.0 + 5e-3]])[0] == pytest.approx(1e-3, rel=1e-3)


def test_nan_fails():
    r = gradcheck.CheckResult("x", float("nan"), 1e-3, 1)
    assert not r.passed
