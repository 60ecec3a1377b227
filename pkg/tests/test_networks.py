import numpy as np
import pytest
import torch

from manifold_attack import networks as N
from manifold_attack.data_io import REGION_CROP_SIZES
from manifold_attack.errors import CheckpointLoadError, DegenerateEmbedding, ShapeMismatch


def seeded(seed=0):
    torch.manual_seed(seed)


def rand_img(b=2, s=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, s, s, generator=g)


def test_compose_attention_limits():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 8, 8, generator=g)
    c = torch.rand(2, 3, 8, 8, generator=g)
    ones = torch.ones(2, 1, 8, 8)
    assert torch.equal(N.compose_attention(c, ones, x), c)
    assert torch.equal(N.compose_attention(c, torch.zeros_like(ones), x), x)
    half = N.compose_attention(c, 0.5 * ones, x)
    assert torch.allclose(half, 0.5 * c + 0.5 * x, atol=0, rtol=0)


def test_compose_attention_shape_errors():
    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(ShapeMismatch):
        N.compose_attention(torch.rand(1, 3, 4, 4), torch.ones(1, 1, 8, 8), x)
    with pytest.raises(ShapeMismatch):
        N.compose_attention(torch.rand(1, 3, 8, 8), torch.ones(1, 3, 8, 8), x)


def test_generator_output_contracts():
    seeded(0)
    g = N.GeneratorModel(au_dim=5, in_hw=(32, 32), width=6)
    x = rand_img(3, 32)
    au = torch.rand(3, 5)
    out, color, attn = g(x, au)
    assert out.shape == x.shape and color.shape == x.shape
    assert attn.shape == (3, 1, 32, 32)
    for t in (out, color, attn):
        assert t.min() >= 0.0 and t.max() <= 1.0
    assert torch.equal(out, N.compose_attention(color, attn, x))


def test_generator_zero_attention_is_identity():
    seeded(1)
    g = N.GeneratorModel(au_dim=4, in_hw=(32, 32), width=6)
    g.set_attention_bias(float("-inf"))
    x = rand_img(2, 32, seed=3)
    out, _, attn = g(x, torch.rand(2, 4))
    assert torch.all(attn == 0.0)
    assert torch.equal(out, x)


def test_generator_eval_deterministic():
    seeded(2)
    g = N.GeneratorModel(au_dim=4, in_hw=(32, 32), width=6).eval()
    x = rand_img(2, 32, seed=5)
    au = torch.rand(2, 4)
    a, _, _ = g(x, au)
    b, _, _ = g(x, au)
    assert torch.equal(a, b)


def test_generator_shape_errors():
    g = N.GeneratorModel(au_dim=4, in_hw=(32, 32), width=6)
    with pytest.raises(ShapeMismatch):
        g(rand_img(1, 16), torch.rand(1, 4))
    with pytest.raises(ShapeMismatch):
        g(rand_img(1, 32), torch.rand(1, 3))
    with pytest.raises(ShapeMismatch):
        g(rand_img(2, 32), torch.rand(1, 4))
    with pytest.raises(ShapeMismatch):
        N.GeneratorModel(au_dim=4, in_hw=(30, 30))


def test_generator_differentiable_wrt_input_and_params():
    seeded(3)
    g = N.GeneratorModel(au_dim=2, in_hw=(16, 16), width=4)
    x = rand_img(1, 16, seed=7).requires_grad_(True)
    out, _, _ = g(x, torch.rand(1, 2))
    out.sum().backward()
    assert x.grad is not None and torch.any(x.grad != 0)
    assert g.enc[0].weight.grad is not None


def test_make_editor_scopes():
    for scope, hw in [("global", (64, 64))] + [(r, REGION_CROP_SIZES[r]) for r in REGION_CROP_SIZES]:
        m = N.make_editor(3, scope, 64, REGION_CROP_SIZES, width=4)
        assert m.in_hw == tuple(hw)
    with pytest.raises(ShapeMismatch):
        N.make_editor(3, "forehead", 64, REGION_CROP_SIZES)


def test_discriminator_contracts():
    seeded(4)
    d = N.DiscriminatorModel(au_dim=5, in_hw=(32, 32), width=8)
    x = rand_img(4, 32, seed=9)
    score, au = d(x)
    assert score.shape == (4,) and au.shape == (4, 5)
    assert torch.all(torch.isfinite(score)) and torch.all(torch.isfinite(au))
    s0, a0 = d(torch.zeros(2, 3, 32, 32))
    assert torch.all(torch.isfinite(s0)) and torch.all(torch.isfinite(a0))
    dup = torch.cat([x[:1], x[:1]])
    sd, ad = d(dup)
    assert torch.allclose(sd[0], sd[1], atol=1e-7) and torch.allclose(ad[0], ad[1], atol=1e-7)
    with pytest.raises(ShapeMismatch):
        d(rand_img(1, 16))


def test_discriminator_rectangular_patch_input():
    d = N.DiscriminatorModel(au_dim=5, in_hw=(16, 32), width=8)
    score, au = d(torch.rand(2, 3, 16, 32))
    assert score.shape == (2,) and au.shape == (2, 5)


def test_discriminator_trunk_shared_by_both_heads():
    seeded(5)
    d = N.DiscriminatorModel(au_dim=3, in_hw=(32, 32), width=8)
    x = rand_img(1, 32, seed=11)
    s0, a0 = d(x)
    with torch.no_grad():
        d.trunk[0].weight[0, 0, 0, 0] += 0.5
    s1, a1 = d(x)
    assert not torch.allclose(s0, s1)
    assert not torch.allclose(a0, a1)


def test_discriminator_input_gradient_matches_fd():
    torch.manual_seed(6)
    d = N.DiscriminatorModel(au_dim=2, in_hw=(16, 16), width=4).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    score, _ = d(x)
    grad = torch.autograd.grad(score.sum(), x)[0]
    rng = np.random.default_rng(0)
    picks = [(0, int(rng.integers(3)), int(rng.integers(16)), int(rng.integers(16))) for _ in range(4)]
    eps = 1e-5
    for idx in picks:
        xp = x.detach().clone()
        xm = x.detach().clone()
        xp[idx] += eps
        xm[idx] -= eps
        with torch.no_grad():
            fd = (d(xp)[0].sum() - d(xm)[0].sum()) / (2 * eps)
        a = grad[idx].item()
        assert abs(a - fd.item()) <= 1e-3 * max(1.0, abs(fd.item()))


def test_embed_unit_norm_and_self_similarity():
    seeded(7)
    m = N.EmbeddingModel(image_size=32, embed_dim=16, width=4)
    x = rand_img(3, 32, seed=13)
    e = m.embed(x)
    assert e.shape == (3, 16)
    assert torch.allclose(e.norm(dim=1), torch.ones(3), atol=1e-5)
    cos = (e[0] * e[0]).sum()
    assert abs(cos.item() - 1.0) < 1e-6
    with pytest.raises(ShapeMismatch):
        m.embed(rand_img(1, 16))


def test_embed_degenerate():
    m = N.EmbeddingModel(image_size=32, embed_dim=8, width=4)
    with torch.no_grad():
        m.proj.weight.zero_()
        m.proj.bias.zero_()
    with pytest.raises(DegenerateEmbedding):
        m.embed(rand_img(1, 32))


def test_logits_require_head():
    m = N.EmbeddingModel(image_size=32, embed_dim=8, width=4, n_classes=5)
    out = m.logits(rand_img(2, 32))
    assert out.shape == (2, 5)
    bare = N.EmbeddingModel(image_size=32, embed_dim=8, width=4)
    with pytest.raises(ShapeMismatch):
        bare.logits(rand_img(1, 32))


def test_checkpoint_roundtrip(tmp_path):
    seeded(8)
    for model in (
        N.GeneratorModel(au_dim=3, in_hw=(16, 16), width=4),
        N.DiscriminatorModel(au_dim=3, in_hw=(16, 16), width=4),
        N.EmbeddingModel(image_size=16, embed_dim=8, width=4, n_classes=3),
    ):
        path = tmp_path / f"{model.arch()['kind']}.pt"
        N.save_checkpoint(path, model, extra={"step": 7})
        back, extra = N.load_checkpoint(path)
        assert extra["step"] == 7
        assert not back.training
        for (ka, va), (kb, vb) in zip(model.state_dict().items(), back.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)


def test_checkpoint_refuses_version_mismatch(tmp_path):
    m = N.EmbeddingModel(image_size=16, embed_dim=8, width=4)
    path = tmp_path / "m.pt"
    N.save_checkpoint(path, m)
    payload = torch.load(path, weights_only=True)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointLoadError):
        N.load_checkpoint(path)


def test_checkpoint_refuses_shape_mismatch(tmp_path):
    m = N.GeneratorModel(au_dim=3, in_hw=(16, 16), width=4)
    path = tmp_path / "g.pt"
    N.save_checkpoint(path, m)
    payload = torch.load(path, weights_only=True)
    payload["arch"]["width"] = 8  # stored arrays no longer fit the declared arch
    torch.save(payload, path)
    with pytest.raises(CheckpointLoadError):
        N.load_checkpoint(path)


def test_checkpoint_refuses_wrong_kind_and_garbage(tmp_path):
    m = N.EmbeddingModel(image_size=16, embed_dim=8, width=4)
    path = tmp_path / "e.pt"
    N.save_checkpoint(path, m)
    with pytest.raises(CheckpointLoadError):
        N.load_checkpoint(path, expect_kind="generator")
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointLoadError):
        N.load_checkpoint(junk)
    missing_fields = tmp_path / "dict.pt"
    torch.save({"state": {}}, missing_fields)
    with pytest.raises(CheckpointLoadError):
        N.load_checkpoint(missing_fields)
