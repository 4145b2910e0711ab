import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from conftest import random_pose3d
from poselift.geometry import H36M_BONE_MM, h36m_skeleton, apply_rotation, as_matrix, center_root, project, rot_azimuth, translate_depth
from poselift.flow import CouplingFlow
from poselift.lifter import LifterNet
from poselift.numerics import grad_check_params, precision
from poselift.objective import (
    BONE_WEIGHT, BonePrior, LossConfig, bone_loss, cycle_losses, estimate_bone_prior,
    per_joint_distance, relative_bone_lengths, total_loss,
)
from poselift.subspace import fit_pca
from poselift.synthetic import SynthConfig, generate_synthetic


def _randomize_heads(net, seed=0, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in (net.depth_out, net.elev_out):
            layer.weight.copy_(scale * torch.randn(layer.weight.shape, generator=g, dtype=layer.weight.dtype))
            layer.bias.copy_(scale * torch.randn(layer.bias.shape, generator=g, dtype=layer.bias.dtype))


def _perturb_flow(flow, seed=0, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in flow.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return flow


@pytest.fixture
def world(small_synth, skel):
    """A 64-bit lifter, subspace and flow over the small synthetic set."""
    ds, _ = small_synth
    x, _ = ds.normalized()
    torch.set_default_dtype(torch.float64)
    pca = fit_pca(x, 26)
    flow = _perturb_flow(CouplingFlow(26, n_blocks=2, hidden=16, seed=0))
    net = LifterNet(17, width=32, input_scale=10.0)
    _randomize_heads(net)
    prior = estimate_bone_prior(skel, 0.1)
    return dict(x=torch.as_tensor(x), pca=pca, flow=flow, net=net, prior=prior, skel=skel)


# ---------------------------------------------------------------------------
# bone prior
# ---------------------------------------------------------------------------

def test_equal_bones_have_unit_relative_length(skel):
    # joints along a chain with unit spacing: every bone has length 1
    m = np.zeros((3, 17))
    for parent, child in skel.bones:
        m[:, child] = m[:, parent] + np.array([0.0, 1.0, 0.0]) if child % 2 else m[:, parent] + np.array([1.0, 0.0, 0.0])
    b = relative_bone_lengths(torch.as_tensor(m.reshape(1, -1)), skel)
    assert torch.allclose(b, torch.ones(16, dtype=torch.float64), atol=1e-9)


def test_relative_lengths_by_hand(skel):
    y = torch.as_tensor(random_pose3d(np.random.default_rng(0), 1)).double()
    m = as_matrix(y)[0].numpy()
    lengths = np.array([np.linalg.norm(m[:, c] - m[:, p]) for p, c in skel.bones])
    assert np.allclose(relative_bone_lengths(y, skel)[0].numpy(), lengths / lengths.mean(), atol=1e-9)


def test_collapsed_pose_rejected(skel):
    with pytest.raises(ValueError):
        relative_bone_lengths(torch.zeros(1, 51, dtype=torch.float64), skel)


def test_bone_loss_at_mode(skel):
    y = torch.as_tensor(random_pose3d(np.random.default_rng(1), 3))
    b = relative_bone_lengths(y, skel)
    for i in range(3):
        prior = BonePrior(tuple(b[i].tolist()), 0.1)
        assert bone_loss(y[i:i + 1], prior, skel).item() == pytest.approx(16 * math.log(0.1 * math.sqrt(2 * math.pi)), abs=1e-9)
        unit = BonePrior(tuple(b[i].tolist()), 1 / math.sqrt(2 * math.pi))
        assert bone_loss(y[i:i + 1], unit, skel).item() == pytest.approx(0.0, abs=1e-9)


def test_bone_loss_formula(skel):
    y = torch.as_tensor(random_pose3d(np.random.default_rng(2), 5))
    prior = estimate_bone_prior(skel, 0.25)
    b = relative_bone_lengths(y, skel).numpy()
    mu = np.array(prior.means)
    want = np.mean(((b - mu) ** 2).sum(1) / (2 * 0.25 ** 2) + 16 * np.log(0.25 * np.sqrt(2 * np.pi)))
    assert bone_loss(y, prior, skel).item() == pytest.approx(want, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_bone_loss_invariant_to_similarity(seed, scale):
    skel = h36m_skeleton()
    rng = np.random.default_rng(seed)
    y = torch.as_tensor(random_pose3d(rng, 2))
    R = torch.as_tensor(Rotation.random(random_state=seed).as_matrix())
    moved = apply_rotation(R, y) * scale + torch.tensor(rng.normal(size=(3, 1))).repeat(1, 17).reshape(-1)
    prior = estimate_bone_prior(skel, 0.1)
    assert bone_loss(moved, prior, skel).item() == pytest.approx(bone_loss(y, prior, skel).item(), rel=1e-8, abs=1e-8)


def test_prior_from_generator_poses_matches_template(skel):
    ds, _ = generate_synthetic(SynthConfig(n_samples=50), np.random.default_rng(4))
    prior = estimate_bone_prior(skel, 0.3, poses=ds.pose3d, source="poses")
    want = np.asarray(H36M_BONE_MM) / np.mean(H36M_BONE_MM)
    assert np.allclose(prior.means, want, atol=1e-6)
    assert np.mean(prior.means) == pytest.approx(1.0)
    assert prior.sigma == 0.3


def test_prior_from_config_and_errors(skel):
    prior = estimate_bone_prior(skel, 0.07)
    assert prior.means == skel.relative_bone_lengths and prior.sigma == 0.07
    bare = type(skel)(skel.joint_names, skel.root, skel.head, skel.bones)
    with pytest.raises(ValueError):
        estimate_bone_prior(bare, 0.1)
    with pytest.raises(ValueError):
        estimate_bone_prior(skel, 0.1, source="table")


def test_batch_prior_uses_stopped_batch_mean(skel):
    y = torch.as_tensor(random_pose3d(np.random.default_rng(5), 6)).requires_grad_(True)
    prior = estimate_bone_prior(skel, 0.2, source="batch")
    assert prior.from_batch
    b = relative_bone_lengths(y, skel)
    mu = b.detach().mean(0)
    mu = mu / mu.mean()
    want = (((b - mu) ** 2).sum(-1) / (2 * 0.04) + 16 * math.log(0.2 * math.sqrt(2 * math.pi))).mean()
    got = bone_loss(y, prior, skel)
    assert got.item() == pytest.approx(want.item(), rel=1e-12)
    (g1,) = torch.autograd.grad(got, y)
    (g2,) = torch.autograd.grad(want, y)
    assert torch.allclose(g1, g2)


# ---------------------------------------------------------------------------
# cycle terms
# ---------------------------------------------------------------------------

class LookupLifter(torch.nn.Module):
    """Returns the stored true depth offsets of the nearest known 2D view."""

    def __init__(self, keys, offsets):
        super().__init__()
        self.keys, self.offsets = keys, offsets

    def forward(self, x):
        idx = torch.cdist(x, self.keys).argmin(1)
        return self.offsets[idx], torch.zeros(len(x), dtype=x.dtype)


def test_perfect_inverse_zeroes_cycle_losses(skel):
    rng = np.random.default_rng(6)
    m = as_matrix(torch.as_tensor(random_pose3d(rng, 4)))
    m = m - m[..., :1] + torch.tensor([0.0, 0.0, 10.0])[:, None]
    Y = m.reshape(4, -1)
    R = rot_azimuth(torch.tensor(rng.uniform(-3, 3, 4)))
    y1 = center_root(Y, 0)
    y2 = apply_rotation(R, y1)
    x, x2 = project(Y), project(translate_depth(y2, 10.0))
    keys = torch.cat([x, x2])
    offsets = torch.cat([as_matrix(Y)[:, 2], as_matrix(translate_depth(y2, 10.0))[:, 2]]) - 10.0
    l3d, ldef, l2d, clamped = cycle_losses(x, y1, y2, R, LookupLifter(keys, offsets), skel, LossConfig())
    assert l3d.item() < 1e-6 and ldef.item() < 1e-6 and l2d.item() < 1e-9 and clamped == 0


def test_self_pairing_gives_zero_deformation(world):
    w = world
    y1 = center_root(torch.as_tensor(random_pose3d(np.random.default_rng(7), 5)), 0)
    R = rot_azimuth(torch.linspace(-2, 2, 5, dtype=torch.float64))
    y2 = apply_rotation(R, y1)
    x = project(translate_depth(y1, 10.0))
    l3d, ldef, l2d, _ = cycle_losses(x, y1, y2, R, w["net"], w["skel"], LossConfig(), pair=torch.arange(5))
    assert ldef.item() == 0.0
    assert l3d.item() >= 0 and l2d.item() >= 0


def test_single_sample_deformation_warns(world, caplog):
    w = world
    y1 = center_root(torch.as_tensor(random_pose3d(np.random.default_rng(8), 1)), 0)
    R = torch.eye(3, dtype=torch.float64)[None]
    x = project(translate_depth(y1, 10.0))
    with caplog.at_level("WARNING"):
        _, ldef, _, _ = cycle_losses(x, y1, y1, R, w["net"], w["skel"], LossConfig())
    assert ldef.item() == 0.0 and "at least 2" in caplog.text


def test_per_joint_distance_by_hand():
    a = torch.zeros(1, 6, dtype=torch.float64)
    b = torch.tensor([[3.0, 0.0, 4.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    # joint 0 moved by (3, 4, 0), joint 1 untouched
    assert per_joint_distance(a, b).item() == pytest.approx(2.5)


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

def _fixed_draw(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return dict(azimuth=(torch.rand(n, generator=g, dtype=torch.float64) * 2 - 1) * math.pi,
                eps=torch.randn(n, generator=g, dtype=torch.float64))


def _loss(w, cfg, idx, **kw):
    return total_loss(w["x"][idx], w["net"], w["flow"], w["pca"], w["prior"], w["skel"], cfg, **kw)[0]


def test_total_recomposes(world):
    rep = _loss(world, LossConfig(), torch.arange(16), generator=torch.Generator().manual_seed(0))
    parts = rep.L_NF + BONE_WEIGHT * rep.L_bone + rep.L_3D + rep.L_def + rep.L_2D
    assert abs(rep.total.item() - parts.item()) < 1e-6
    assert LossConfig().bone_weight == 50.0
    assert rep.L_3D.item() >= 0 and rep.L_2D.item() >= 0 and rep.L_def.item() >= 0


@pytest.mark.parametrize("flags, zeroed", [
    (dict(use_nf=False), {"L_NF"}),
    (dict(use_bone=False), {"L_bone"}),
    (dict(use_base=False), {"L_3D", "L_def", "L_2D"}),
    (dict(use_nf=False, use_bone=False), {"L_NF", "L_bone"}),
])
def test_ablation_flags_zero_exactly_the_named_terms(world, flags, zeroed):
    rep = _loss(world, LossConfig(**flags), torch.arange(8), **_fixed_draw(8))
    for name, v in rep.floats().items():
        if name == "total":
            continue
        if name in zeroed:
            assert v == 0.0, name
        else:
            assert v != 0.0, name


def test_elevation_ablation_keeps_term_set(world):
    rep = _loss(world, LossConfig(use_elevation=False), torch.arange(8), generator=torch.Generator().manual_seed(1))
    assert all(v != 0.0 for v in rep.floats().values())


def test_use_nf_requires_flow(world):
    w = world
    with pytest.raises(ValueError):
        total_loss(w["x"][:4], w["net"], None, None, w["prior"], w["skel"], LossConfig())


def test_finite_over_random_batches(world):
    g = torch.Generator().manual_seed(0)
    n = len(world["x"])
    for _ in range(100):
        idx = torch.randperm(n, generator=g)[:32]
        rep = _loss(world, LossConfig(), idx, generator=g)
        assert all(math.isfinite(v) for v in rep.floats().values())


def test_reprojections_rescaled_before_scoring(world):
    # a uniform image scale of the reprojection must not change the flow input
    from poselift.objective import reprojection_nll
    w = world
    x2 = w["x"][:6] * 0.1
    a = reprojection_nll(x2, w["flow"], w["pca"], w["skel"], 0.01)
    b = reprojection_nll(3.0 * x2, w["flow"], w["pca"], w["skel"], 0.01)
    assert torch.allclose(a, b, atol=1e-9)


def test_full_objective_gradient_check(world):
    w = world
    idx = torch.arange(4)
    draw = _fixed_draw(4, seed=3)
    params = list(w["net"].named_parameters())
    err = grad_check_params(lambda: _loss(w, LossConfig(), idx, **draw).total, params, coords_per_param=3)
    assert err < 1e-3


def test_gradient_reaches_every_lifter_layer(world):
    w = world
    rep = _loss(world, LossConfig(), torch.arange(8), **_fixed_draw(8))
    rep.total.backward()
    for name, p in w["net"].named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
