import numpy as np
import pytest
import torch

from udnf.geometry import CandidateSpec, Intrinsics, candidate_poses, init_candidates
from udnf.model import RenderSettings, build_model
from udnf.posenet import EncoderConfig, MultiHead, PoseEncoder, PoseNet, SingleHead, timestep_embedding


def small_cfg(**kw):
    return EncoderConfig(base_channels=8, multipliers=[1, 2], resolution=16, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(multipliers=[]).validate()
    with pytest.raises(ValueError):
        EncoderConfig(resolution=20, multipliers=[1, 1, 2]).validate()
    EncoderConfig().validate()


def test_paper_config_latent_dim():
    cfg = EncoderConfig.paper()
    assert cfg.steps == 5 and cfg.latent_dim == 4 * 64


def test_latent_dim_matches_encoder_output():
    torch.manual_seed(0)
    for cfg in (small_cfg(), small_cfg(pool="flatten"), EncoderConfig()):
        enc = PoseEncoder(cfg)
        z = enc(torch.randn(2, 3, cfg.resolution, cfg.resolution), 5)
        assert z.shape == (2, cfg.latent_dim)


def test_encoder_is_deterministic_and_time_conditioned():
    torch.manual_seed(0)
    enc = PoseEncoder(small_cfg())
    x = torch.randn(1, 3, 16, 16)
    assert torch.equal(enc(x, 3), enc(x.clone(), 3))
    assert not torch.allclose(enc(x, 3), enc(x, 70))


def test_encoder_resolution_mismatch():
    enc = PoseEncoder(small_cfg())
    with pytest.raises(ValueError):
        enc(torch.randn(1, 3, 32, 32), 1)


def test_timestep_embedding():
    e = timestep_embedding(torch.tensor([0, 10]), 8)
    assert e.shape == (2, 8)
    assert e[0, :4].tolist() == [0.0] * 4 and e[0, 4:].tolist() == [1.0] * 4
    assert torch.equal(timestep_embedding(torch.tensor([10]), 8)[0], e[1])


def test_single_head_zero_latent_gives_biases():
    head = SingleHead(16, ts_init=(0.0, 0.0, 4.0))
    omega, ts = head(torch.zeros(1, 16))
    assert omega.shape == (1, 3) and ts.shape == (1, 3)
    assert omega[0].tolist() == [0.0, 0.0, 0.0]
    assert ts[0].tolist() == [0.0, 0.0, 4.0]


@pytest.mark.parametrize("K", [1, 4, 12])
def test_multi_head_shapes(K):
    h1, scores = MultiHead(16, K)(torch.randn(2, 16))
    assert h1.shape == (2, 3 * K) and scores.shape == (2, K)
    # zero-initialized score head: uniform initial distribution
    p = torch.softmax(scores, -1)
    torch.testing.assert_close(p.sum(-1), torch.ones(2))
    torch.testing.assert_close(p, torch.full_like(p, 1 / K))


def test_posenet_modes():
    with pytest.raises(ValueError):
        PoseNet(small_cfg(), mode="triple")


def _tiny_model(head, K=4):
    cfg = small_cfg()
    spec = init_candidates("semi4") if head == "multi" else None
    render = RenderSettings(n_samples=8, bound=1.5)
    return build_model(head=head, candidates=spec, encoder=cfg, intrinsics=Intrinsics(12.0, 16, 16),
                       render=render, field_hidden=16, field_depth=2, L_pos=2, seed=1)


def test_rendered_loss_reaches_single_head_and_trunk():
    torch.manual_seed(0)
    m = _tiny_model("single")
    x = torch.rand(16, 16, 3) * 2 - 1
    omega, ts = m.head(x, 10)
    out = m.render(m.pose_from_head(omega, ts))
    loss = ((out.rgb - torch.rand(16, 16, 3)) ** 2).mean()
    loss.backward()
    assert m.posenet.head.omega.weight.grad.abs().sum() > 0
    assert m.posenet.head.ts.weight.grad.abs().sum() > 0
    assert m.posenet.encoder.stem.weight.grad.abs().sum() > 0


def test_candidate_loss_reaches_multi_trunk():
    torch.manual_seed(0)
    m = _tiny_model("multi")
    x = torch.rand(16, 16, 3) * 2 - 1
    h1, scores = m.head(x, 10)
    out = m.render(m.pose_from_head(h1, scores, 2))
    ((out.rgb - 0.3) ** 2).mean().backward()
    assert m.posenet.encoder.stem.weight.grad.abs().sum() > 0
    g = m.posenet.head.pose.weight.grad.reshape(4, 3, -1)
    assert g[2].abs().sum() > 0
    assert g[[0, 1, 3]].abs().sum() == 0


def test_permuting_candidates_permutes_outputs():
    torch.manual_seed(0)
    spec = init_candidates("sphere8")
    net = PoseNet(small_cfg(), "multi", spec.K)
    with torch.no_grad():
        net.head.score.weight.normal_()
    x = torch.randn(1, 3, 16, 16)
    h1, s = net(x, 7)
    perm = torch.tensor([3, 0, 7, 1, 6, 2, 5, 4])
    spec_p = CandidateSpec(spec.eye_candidates[perm.numpy()], spec.radius, spec.up, spec.target)
    rows = (perm[:, None] * 3 + torch.arange(3)).reshape(-1)
    with torch.no_grad():
        net.head.pose.weight.copy_(net.head.pose.weight[rows])
        net.head.pose.bias.copy_(net.head.pose.bias[rows])
        net.head.score.weight.copy_(net.head.score.weight[perm])
        net.head.score.bias.copy_(net.head.score.bias[perm])
    h1p, sp = net(x, 7)
    torch.testing.assert_close(sp[0], s[0][perm])
    before = candidate_poses(h1[0], spec)
    after = candidate_poses(h1p[0], spec_p)
    for i, j in enumerate(perm.tolist()):
        torch.testing.assert_close(after[i].matrix(), before[j].matrix())
