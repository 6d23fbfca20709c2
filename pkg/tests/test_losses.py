import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from veloform.errors import ConfigError
from veloform.fields import (
    AnalyticField,
    FieldQuery,
    constant_velocity,
    dphi_dt,
    eval_velocity,
    grad_phi,
    linear_velocity,
    quadratic_velocity,
    rotation_velocity,
    sphere_sdf,
    translating_sphere_sdf,
    velocity_jacobian,
    velocity_laplacian,
)
from veloform.integrate import IntegratorConfig
from veloform.losses import (
    ABLATIONS,
    LossWeights,
    ablation,
    deviatoric_invariant,
    distortion_loss,
    eikonal_correction,
    level_set_loss,
    matching_loss,
    normal_deformation_loss,
    rate_of_deformation,
    reconstruction_terms,
    smoothness_loss,
    stretching_integrand,
    stretching_loss,
    tangent_projector,
    total_loss,
    volume_loss,
)



def T(x, dtype=torch.float64):
    return torch.as_tensor(x, dtype=dtype)

W = T([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=torch.float64)
SHEAR_D = 0.5 * T([[0.0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=torch.float64)


def unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def batch(m, n=5):
    return m.expand(n, 3, 3)


class TestEikonalCorrection:
    def test_zero_jacobian(self, rng):
        r, valid = eikonal_correction(T(rng.normal(size=(6, 3))), torch.zeros(6, 3, 3, dtype=torch.float64))
        assert torch.all(r == 0) and torch.all(valid)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.01, 100))
    def test_scaled_identity(self, k, scale):
        rng = np.random.default_rng(0)
        g = T(unit(rng, 7) * scale)
        r, _ = eikonal_correction(g, batch(k * torch.eye(3, dtype=torch.float64), 7))
        np.testing.assert_allclose(r.numpy(), -k, atol=1e-12)

    def test_skew(self, rng):
        a = rng.normal(size=(3, 3))
        r, _ = eikonal_correction(T(rng.normal(size=(4, 3))), batch(T(a - a.T), 4))
        assert r.abs().max() < 1e-12

    def test_degenerate_gradient_excluded(self):
        g = T([[0.0, 0, 0], [1.0, 0, 0]])
        diag = {}
        loss = level_set_loss(T([0.3, 0.3]), T([0.0, 0.0]), g, torch.zeros(2, 3, dtype=torch.float64),
                              batch(torch.eye(3, dtype=torch.float64), 2), diagnostics=diag)
        assert diag["degenerate_gradients"] == 1
        assert loss.item() == pytest.approx((0.3 * -1.0) ** 2)


def _level_set(phi, vel, x, t):
    qq = FieldQuery(x, t, np.zeros(0))
    return level_set_loss(
        phi(torch.as_tensor(x), torch.full((len(x), 1), t, dtype=torch.float64), None),
        dphi_dt(phi, qq), grad_phi(phi, qq), eval_velocity(vel, qq), velocity_jacobian(vel, qq),
    ).item()


class TestLevelSetLoss:
    def test_translating_sphere_cancels(self, rng):
        v = (0.3, -0.2, 0.1)
        x = rng.uniform(-1, 1, (200, 3))
        assert _level_set(translating_sphere_sdf(v), constant_velocity(v), x, 0.37) < 1e-28

    def test_static_zero_velocity(self, rng):
        x = rng.uniform(-1, 1, (50, 3))
        assert _level_set(sphere_sdf(), constant_velocity((0, 0, 0)), x, 0.5) == 0.0

    def test_static_constant_velocity(self, rng):
        c = np.array([0.2, 0.5, -0.1])
        x = rng.uniform(-1, 1, (100, 3))
        n = x / np.linalg.norm(x, axis=1, keepdims=True)
        assert _level_set(sphere_sdf(), constant_velocity(c), x, 0.5) == pytest.approx(np.mean((n @ c) ** 2), rel=1e-12)


class TestMatchingLoss:
    def test_exact_transport(self, rng):
        x0 = rng.normal(size=(10, 3))
        pairs = np.stack([x0, x0 + [0.1, 0.2, 0.3]], axis=1)
        assert matching_loss(pairs, constant_velocity((0.1, 0.2, 0.3)), torch.zeros(0)).item() < 1e-28

    def test_zero_velocity_offset(self, rng):
        x0 = rng.normal(size=(4, 3))
        d = np.array([0.3, 0.0, -0.4])
        pairs = np.stack([x0, x0 + d], axis=1)
        assert matching_loss(pairs, constant_velocity((0, 0, 0)), torch.zeros(0)).item() == pytest.approx(0.25)

    def test_rotation_rk4(self, rng):
        x0 = rng.normal(size=(50, 3))
        x1 = x0 @ Rotation.from_rotvec([0, 0, 1.0]).as_matrix().T
        loss = matching_loss(np.stack([x0, x1], 1), rotation_velocity(), torch.zeros(0), IntegratorConfig("rk4", 32))
        assert loss.item() <= 1e-6

    def test_empty(self):
        with pytest.raises(ValueError, match="no correspondences"):
            matching_loss(np.zeros((0, 2, 3)), constant_velocity((0, 0, 0)), torch.zeros(0))


class TestRegularizers:
    def test_smoothness_zero(self):
        z = torch.zeros(4, 3, dtype=torch.float64)
        assert smoothness_loss(z, z, 0.3, 1.0).item() == 0.0

    def test_smoothness_linear(self, rng):
        a = rng.normal(size=(3, 3))
        x = rng.normal(size=(20, 3))
        f = linear_velocity(a)
        qq = FieldQuery(x, 0.5, np.zeros(0))
        got = smoothness_loss(eval_velocity(f, qq), velocity_laplacian(f, qq, "exact"), 0.7, 1.0).item()
        assert got == pytest.approx(np.mean(((x @ a.T) ** 2).sum(1)), rel=1e-12)

    def test_smoothness_quadratic(self, rng):
        x = rng.normal(size=(20, 3))
        f = quadratic_velocity()
        qq = FieldQuery(x, 0.5, np.zeros(0))
        alpha, gamma = 0.3, 0.5
        got = smoothness_loss(eval_velocity(f, qq), velocity_laplacian(f, qq, "exact"), alpha, gamma).item()
        hand = np.mean((-2 * alpha + gamma * x[:, 0] ** 2) ** 2)
        assert got == pytest.approx(hand, rel=1e-12)

    def test_volume(self):
        assert volume_loss(T([0.0, 0.0])).item() == 0
        assert volume_loss(T([1.5, -1.5])).item() == pytest.approx(1.5)

    def test_rate_of_deformation(self, rng):
        a = rng.normal(size=(3, 3))
        assert rate_of_deformation(batch(T(a - a.T), 2)).abs().max() < 1e-15
        eye = torch.eye(3, dtype=torch.float64)
        assert torch.allclose(rate_of_deformation(batch(0.7 * eye, 2)), batch(0.7 * eye, 2))
        shear = T([[0.0, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=torch.float64)
        assert torch.equal(rate_of_deformation(batch(shear, 1)), batch(SHEAR_D, 1))

    def test_distortion_examples(self):
        eye = torch.eye(3, dtype=torch.float64)
        assert distortion_loss(batch(0.5 * eye, 3)).item() < 1e-15
        assert distortion_loss(batch(SHEAR_D, 3)).item() == pytest.approx(0.25, abs=1e-15)
        assert distortion_loss(torch.zeros(2, 3, 3, dtype=torch.float64)).item() == 0

    def test_distortion_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            distortion_loss(batch(W, 1))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-2, 2), st.integers(0, 1000))
    def test_deviatoric_ignores_volumetric_part(self, k, seed):
        a = np.random.default_rng(seed).normal(size=(3, 3))
        d = T(a + a.T)[None]
        shifted = d + k * torch.eye(3, dtype=torch.float64)
        assert deviatoric_invariant(shifted).item() == pytest.approx(deviatoric_invariant(d).item(), abs=1e-10)


class TestStretching:
    def test_projector(self, rng):
        p = tangent_projector(T([[0.0, 0, 3.0]]))
        assert torch.allclose(p[0], torch.diag(T([1.0, 1, 0])))
        n = T(unit(rng, 10))
        p = tangent_projector(n)
        assert (p @ n[:, :, None]).abs().max() < 1e-14
        assert (p @ p - p).abs().max() < 1e-10

    def test_zero(self):
        p = tangent_projector(T([[0.0, 0, 1]]))
        assert stretching_loss(torch.zeros(1, 3, 3, dtype=torch.float64), p).item() < 1e-14

    def test_rotation_remnant(self):
        p = tangent_projector(T([[0.0, 0, 1]]))
        assert stretching_integrand(batch(W, 1), p).item() == pytest.approx(np.sqrt(2), rel=1e-12)

    def test_tangential_scaling(self):
        k = 0.3
        j = k * torch.diag(T([1.0, 1, 0]))
        p = tangent_projector(T([[0.0, 0, 1]]))
        assert stretching_integrand(batch(j, 1), p).item() == pytest.approx(np.sqrt(2) * (k * k + 2 * k), rel=1e-12)


class TestNormalDeformation:
    def test_identity(self, rng):
        n = T(unit(rng, 5))
        assert normal_deformation_loss(n, n, torch.zeros(5, 3, 3, dtype=torch.float64)).item() < 1e-28

    def test_mismatch(self):
        ex, ey = T([[1.0, 0, 0]]), T([[0.0, 1, 0]])
        assert normal_deformation_loss(ex, ey, torch.zeros(1, 3, 3, dtype=torch.float64)).item() == pytest.approx(2.0)

    def test_rotation_second_order(self, rng):
        n = unit(rng, 50)
        errs = []
        for dt in (0.1, 0.05):
            n1 = n @ Rotation.from_rotvec([0, 0, dt]).as_matrix().T
            errs.append(normal_deformation_loss(T(n), T(n1), batch(dt * W, 50)).item())
        assert errs[0] < 0.1**4
        assert errs[0] / errs[1] == pytest.approx(16, rel=0.1)

    def test_missing_normals(self):
        with pytest.raises(ValueError):
            normal_deformation_loss(None, None, torch.zeros(1, 3, 3))


class TestReconstruction:
    def _terms(self, phi, rng):
        s0 = unit(rng, 100) * 0.5
        vol = rng.uniform(-1, 1, (200, 3))
        return reconstruction_terms(phi, s0, s0, vol, torch.zeros(0))

    def test_exact_sdf(self, rng):
        r = self._terms(sphere_sdf(radius=0.5), rng)
        assert r["boundary_0"].item() < 1e-15 and r["boundary_1"].item() < 1e-15
        assert r["eikonal"].item() < 1e-20

    def test_constant(self, rng):
        const = AnalyticField(lambda x, t: 0.1 + 0.0 * x[:, 0], 1)
        r = self._terms(const, rng)
        assert r["boundary_0"].item() == pytest.approx(0.1)
        assert r["eikonal"].item() == pytest.approx(1.0)

    def test_scaled_sdf(self, rng):
        base = sphere_sdf(radius=0.5)
        double = AnalyticField(lambda x, t: 2 * (torch.linalg.norm(x, dim=-1) - 0.5), 1)
        vol = rng.uniform(-1, 1, (200, 3))
        s0 = vol / np.linalg.norm(vol, axis=1, keepdims=True) * 0.45
        a = reconstruction_terms(base, s0, s0, vol, torch.zeros(0))
        b = reconstruction_terms(double, s0, s0, vol, torch.zeros(0))
        assert b["boundary_0"].item() == pytest.approx(2 * a["boundary_0"].item())
        assert a["eikonal"].item() < 1e-20 and b["eikonal"].item() == pytest.approx(1.0)


class TestTotalLoss:
    def test_zero_weights(self):
        w = LossWeights(lambda_i=0, lambda_m=0)
        total, parts = total_loss({"L_i": T(3.0), "L_m": T(float("nan"))}, w)
        assert total.item() == 0 and parts == {}

    def test_single_weight(self):
        w = LossWeights(lambda_i=0, lambda_s=2.5, lambda_v=0, lambda_st=0, lambda_d=0, lambda_m=0)
        total, _ = total_loss({"L_i": T(1.0), "L_s": T(0.4), "L_v": T(9.0)}, w)
        assert total.item() == pytest.approx(1.0)

    def test_default_weights_fixture(self):
        terms = {k: T(v) for k, v in dict(L_i=1.0, L_m=0.01, L_s=2.0, L_v=0.5, L_st=0.25, L_d=0.125, L_recon=0.02).items()}
        total, parts = total_loss(terms, LossWeights())
        hand = 1 * 1.0 + 10 * 0.01 + 0.1 * (2.0 + 0.5 + 0.25 + 0.125) + 100 * 0.02
        assert total.item() == pytest.approx(hand, rel=1e-12)
        assert sum(p.item() for p in parts.values()) == pytest.approx(hand, rel=1e-12)

    def test_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_recon=0)
        with pytest.raises(ConfigError):
            LossWeights(lambda_s=-1)

    def test_ablations(self):
        w = ablation(LossWeights(), "w/o both")
        assert w.lambda_d == 0 and w.lambda_st == 0 and w.lambda_i == 1
        assert set(ABLATIONS) == {"full", "w/o L_d", "w/o L_st", "w/o both"}
        with pytest.raises(ConfigError):
            ablation(LossWeights(), "nope")
