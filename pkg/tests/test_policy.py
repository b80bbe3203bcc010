import copy
import math

import numpy as np
import pytest
import torch

from ovnav.errors import ConfigurationError, DataError, PlannerError
from ovnav.gridcore import partition_patches
from ovnav.planner import DistanceField
from ovnav.policy import (
    BCE_EPS,
    PolicyConfig,
    PolicyModel,
    binary_cross_entropy,
    expected_param_count,
    federated_bce_loss,
    load_checkpoint,
    save_checkpoint,
    select_goal,
)

TINY = PolicyConfig(
    goal_dim=4, map_size=32, patch=16, d_model=8, d_token=4, heads=2, ffn=16, layers=2, seed=3
)


def tiny_batch(cfg=TINY, n_goals=2, seed=11):
    rng = np.random.default_rng(seed)
    maps = rng.standard_normal((1, cfg.in_channels, cfg.map_size, cfg.map_size))
    maps[:, :2] = rng.random((1, 2, cfg.map_size, cfg.map_size)) < 0.3
    goals = rng.standard_normal((1, n_goals, cfg.goal_dim))
    goals /= np.linalg.norm(goals, axis=-1, keepdims=True)
    targets = (rng.random((1, n_goals, cfg.map_size, cfg.map_size)) < 0.15).astype(float)
    to = lambda a: torch.as_tensor(a, dtype=torch.float64)
    return to(maps), to(goals), to(targets)


@pytest.mark.parametrize("side", [720, 576, 384, 256])
def test_shape_conformance(side):
    cfg = PolicyConfig(goal_dim=4, map_size=side, seed=0)
    model = PolicyModel(cfg)
    t = side // 16
    assert cfg.n_tokens == t * t
    maps = torch.zeros((1, cfg.in_channels, side, side), dtype=torch.float64)
    tokens = model.embed_tokens(maps)
    assert tokens.shape == (1, t * t, 512)
    prob = model(maps, torch.zeros((1, 4), dtype=torch.float64))
    assert prob.shape == (1, side, side)
    assert torch.isfinite(prob).all()
    assert (prob >= 0).all() and (prob <= 1).all()


def test_param_count_formula():
    for cfg in (TINY, PolicyConfig(goal_dim=16, map_size=160, seed=1)):
        model = PolicyModel(cfg)
        assert sum(p.numel() for p in model.parameters()) == expected_param_count(cfg)


def test_film_identity_when_gamma_one_beta_zero():
    model = PolicyModel(TINY)
    with torch.no_grad():
        model.film_gamma.weight.zero_()
        model.film_gamma.bias.fill_(1.0)
        model.film_beta.weight.zero_()
        model.film_beta.bias.zero_()
    maps, goals, _ = tiny_batch()
    tokens = model.embed_tokens(maps)
    f_g = model.film(tokens, goals)
    expect = model.film_h(tokens)
    assert torch.equal(f_g[0, 0], expect[0])
    assert torch.equal(f_g[0, 1], expect[0])


def test_goal_conditioning_has_effect():
    model = PolicyModel(TINY)
    maps, goals, _ = tiny_batch()
    f_m = model.encode(maps, goals)
    assert (f_m[0, 0] - f_m[0, 1]).abs().max() > 0


def test_film_matches_hand_rolled_oracle():
    # independent numpy route: gridcore patch partition + explicit matmuls
    model = PolicyModel(TINY)
    maps, goals, _ = tiny_batch()
    w = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    tok_np = partition_patches(maps[0].numpy(), TINY.patch)
    f = tok_np @ w["patch_embed.weight"].T + w["patch_embed.bias"] + w["pos_embed"]
    h = f @ w["film_h.weight"].T + w["film_h.bias"]
    out = model.film(model.embed_tokens(maps), goals)[0].detach().numpy()
    for s in range(goals.shape[1]):
        g = goals[0, s].numpy()
        gamma = g @ w["film_gamma.weight"].T + w["film_gamma.bias"]
        beta = g @ w["film_beta.weight"].T + w["film_beta.bias"]
        np.testing.assert_allclose(out[s], gamma * h + beta, atol=1e-6)


def test_decode_side_is_sixteen_times_token_side():
    model = PolicyModel(TINY)
    for t, side in ((45, 720), (20, 320), (5, 80), (8, 128)):
        f_m = torch.randn((1, 1, t * t, TINY.d_token), dtype=torch.float64)
        assert model.decode(f_m).shape == (1, 1, side, side)
    with pytest.raises(ConfigurationError):
        model.decode(torch.zeros((1, 1, 7, TINY.d_token), dtype=torch.float64))


def test_decode_zero_parameters_gives_uniform_half():
    model = PolicyModel(TINY)
    with torch.no_grad():
        for mod in (model.dec_conv, model.dec_up1, model.dec_up2):
            mod.weight.zero_()
            mod.bias.zero_()
    f_m = torch.randn((1, 1, 4, TINY.d_token), dtype=torch.float64)
    assert torch.equal(model.decode(f_m), torch.full((1, 1, 32, 32), 0.5, dtype=torch.float64))


def test_encode_dimension_errors():
    model = PolicyModel(TINY)
    maps, goals, _ = tiny_batch()
    with pytest.raises(ConfigurationError):
        model.embed_tokens(maps[:, :3])
    with pytest.raises(ConfigurationError):
        model.embed_tokens(torch.zeros((1, TINY.in_channels, 48, 48), dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        model.film(model.embed_tokens(maps), goals[..., :2])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PolicyConfig(goal_dim=4, map_size=100, patch=16)
    with pytest.raises(ConfigurationError):
        PolicyConfig(goal_dim=4, d_token=6, heads=2)
    with pytest.raises(ConfigurationError):
        PolicyConfig(goal_dim=0)


def test_rotation_permutation_equivariance():
    # permuting patch-embed columns and pos-embed rows by the token/pixel
    # permutation of a 90-degree map rotation, and rotating the decoder
    # kernels, must rotate the probability map exactly
    cfg = TINY
    m, p, t = cfg.map_size, cfg.patch, cfg.tokens_per_side
    idx = np.arange(m * m, dtype=np.float64).reshape(m, m)
    a = partition_patches(idx[None], p).astype(np.int64)
    b = partition_patches(np.ascontiguousarray(np.rot90(idx))[None], p).astype(np.int64)
    tok_of = np.empty(m * m, np.int64)
    slot_of = np.empty(m * m, np.int64)
    for i in range(t * t):
        tok_of[a[i]] = i
        slot_of[a[i]] = np.arange(p * p)
    pi = tok_of[b[:, 0]]
    assert (tok_of[b] == pi[:, None]).all(), "rotation must map whole patches to patches"
    sigma = slot_of[b[0]]
    assert (slot_of[b] == sigma[None, :]).all(), "pixel shuffle must be token-independent"

    m1 = PolicyModel(cfg)
    m2 = copy.deepcopy(m1)
    cols = (np.arange(cfg.in_channels)[:, None] * p * p + sigma[None, :]).ravel()
    with torch.no_grad():
        m2.patch_embed.weight.copy_(m1.patch_embed.weight[:, cols])
        m2.pos_embed.copy_(m1.pos_embed[pi])
        for name in ("dec_conv", "dec_up1", "dec_up2"):
            w1 = getattr(m1, name).weight
            getattr(m2, name).weight.copy_(torch.from_numpy(
                np.ascontiguousarray(np.rot90(w1.numpy(), 1, axes=(-2, -1)))))

    maps, goals, targets = tiny_batch()
    rot_maps = torch.from_numpy(np.ascontiguousarray(np.rot90(maps.numpy(), 1, axes=(-2, -1))))
    rot_targets = torch.from_numpy(
        np.ascontiguousarray(np.rot90(targets.numpy(), 1, axes=(-2, -1))))

    p1 = m1.decode(m1.encode(maps, goals))
    p2 = m2.decode(m2.encode(rot_maps, goals))
    np.testing.assert_allclose(
        p2.detach().numpy(), np.rot90(p1.detach().numpy(), 1, axes=(-2, -1)), atol=1e-12
    )
    l1 = federated_bce_loss(m1, maps, goals, targets).detach()
    l2 = federated_bce_loss(m2, rot_maps, goals, rot_targets).detach()
    assert float(l1) == pytest.approx(float(l2), abs=1e-12)


def test_bce_near_perfect_prediction():
    pred = torch.zeros((4, 4), dtype=torch.float64)
    target = torch.zeros((4, 4), dtype=torch.float64)
    loss = binary_cross_entropy(pred, target)
    assert float(loss) == pytest.approx(-math.log(1.0 - BCE_EPS), rel=1e-6)


def test_bce_uniform_half_is_ln2():
    rng = np.random.default_rng(0)
    target = torch.as_tensor((rng.random((8, 8)) < 0.5).astype(float))
    loss = binary_cross_entropy(torch.full((8, 8), 0.5, dtype=torch.float64), target)
    assert float(loss) == pytest.approx(math.log(2.0), abs=1e-12)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = PolicyModel(TINY)
    maps, goals, targets = tiny_batch()

    def loss_value():
        return federated_bce_loss(model, maps, goals, targets)

    loss = loss_value()
    model.zero_grad()
    loss.backward()
    rng = np.random.default_rng(42)
    checked = 0
    for name, param in model.named_parameters():
        grad = param.grad.reshape(-1)
        flat = param.data.reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(200, n), replace=False)
        for i in picks:
            orig = float(flat[i])
            h = 1e-6 * max(1.0, abs(orig))
            flat[i] = orig + h
            up = float(loss_value())
            flat[i] = orig - h
            down = float(loss_value())
            flat[i] = orig
            fd = (up - down) / (2 * h)
            ad = float(grad[i])
            err = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
            assert err < 1e-4, f"{name}[{i}]: fd {fd:.3e} vs autograd {ad:.3e}"
            checked += 1
    assert checked >= 800


def test_select_goal_uniform_prob_picks_nearest():
    values = np.full((6, 6), np.inf)
    values[0, :] = [0.3, 0.2, 0.5, 0.9, 1.4, 2.0]
    field = DistanceField(values, 0.05)
    assert select_goal(np.ones((6, 6)), field, tau=2.0) == (0, 1)


def test_select_goal_tau_inf_is_global_argmax():
    rng = np.random.default_rng(5)
    prob = rng.random((8, 8))
    field = DistanceField(rng.random((8, 8)) * 3.0, 0.05)
    expect = divmod(int(np.argmax(prob)), 8)
    assert select_goal(prob, field, tau=math.inf) == expect


def test_select_goal_scale_invariance():
    rng = np.random.default_rng(6)
    prob = rng.random((12, 12))
    field = DistanceField(rng.random((12, 12)) * 2.0, 0.05)
    assert select_goal(prob, field) == select_goal(prob * 37.5, field)


def test_select_goal_excludes_unreachable():
    prob = np.zeros((4, 4))
    prob[2, 2] = 1.0
    values = np.full((4, 4), np.inf)
    values[0, 0] = 1.0
    field = DistanceField(values, 0.05)
    assert select_goal(prob, field) == (0, 0)


def test_select_goal_matches_brute_force():
    rng = np.random.default_rng(77)
    for trial in range(20):
        prob = rng.random((32, 32))
        values = rng.random((32, 32)) * 4.0
        values[rng.random((32, 32)) < 0.3] = np.inf
        if not np.isfinite(values).any():
            continue
        tau = float(rng.uniform(0.5, 4.0))
        best, best_score = None, -1.0
        for r in range(32):
            for c in range(32):
                if not math.isfinite(values[r, c]):
                    continue
                s = prob[r, c] * math.exp(-values[r, c] / tau)
                if s > best_score:
                    best, best_score = (r, c), s
        assert select_goal(prob, DistanceField(values, 0.05), tau) == best


def test_select_goal_errors():
    field = DistanceField(np.full((3, 3), np.inf), 0.05)
    with pytest.raises(PlannerError):
        select_goal(np.ones((3, 3)), field)
    good = DistanceField(np.zeros((3, 3)), 0.05)
    with pytest.raises(ConfigurationError):
        select_goal(np.ones((4, 4)), good)
    with pytest.raises(ConfigurationError):
        select_goal(np.ones((3, 3)), good, tau=0.0)


def test_checkpoint_roundtrip(tmp_path):
    model = PolicyModel(TINY)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.01)
    path = tmp_path / "policy.ckpt"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2
        assert torch.equal(p1, p2), n1
    as_f32 = load_checkpoint(path, dtype=torch.float32)
    assert as_f32.dtype == torch.float32


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataError):
        load_checkpoint(path)
    path.write_bytes(b"OVCK")
    with pytest.raises(DataError):
        load_checkpoint(path)
