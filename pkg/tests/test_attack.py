import math

import numpy as np
import pytest
import torch

from manifold_attack import attack as A
from manifold_attack.au_space import AUSpaceConfig, AUVector
from manifold_attack import data_io as D
from manifold_attack.errors import (
    CheckpointLoadError,
    EmptyEnsemble,
    EmptyStateSet,
    MissingState,
    OutOfRange,
    ShapeMismatch,
)
from manifold_attack.losses import LossWeights
from manifold_attack.networks import EmbeddingModel, GeneratorModel


@pytest.fixture(scope="module")
def cfg():
    return AUSpaceConfig()


@pytest.fixture(scope="module")
def small_ds(cfg):
    return D.synthesize_dataset(3, 2, cfg, size=48, seed=0)


def face(identity=0, seed=0, size=48, mu=None):
    cfg = AUSpaceConfig()
    mu = np.zeros(cfg.dimension) if mu is None else mu
    img = D.render_face(D.identity_params(seed, identity), AUVector(mu), size)
    return D.FaceImage(f"id{identity:04d}_000.png", identity, img, AUVector(mu), 1.0,
                       dict(D.region_boxes(size)))


def make_ensemble(k=3, size=48, with_blackbox=True, seed=0):
    torch.manual_seed(seed)
    white = [EmbeddingModel(image_size=size, embed_dim=16, width=4) for _ in range(k)]
    black = EmbeddingModel(image_size=size, embed_dim=16, width=4) if with_blackbox else None
    return A.FREnsemble(whitebox=white, blackbox=black)


def test_policy_validation():
    A.TransformPolicy()  # defaults valid
    with pytest.raises(OutOfRange):
        A.TransformPolicy(p=1.5)
    with pytest.raises(OutOfRange):
        A.TransformPolicy(resize_scale_range=(0.0, 1.0))
    with pytest.raises(OutOfRange):
        A.TransformPolicy(resize_scale_range=(0.9, 0.5))
    with pytest.raises(OutOfRange):
        A.TransformPolicy(noise_sigma=-0.1)
    with pytest.raises(OutOfRange):
        A.TransformPolicy(mode_weights=(0.7, 0.7))


def test_transform_p_zero_is_identity():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 48, 48, generator=g)
    out = A.transform_tp(x, A.TransformPolicy(p=0.0), torch.Generator().manual_seed(1))
    assert out is x


def test_transform_degenerate_noise_is_identity():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 3, 48, 48, generator=g)
    policy = A.TransformPolicy(p=1.0, noise_sigma=0.0, mode_weights=(0.0, 1.0))
    out = A.transform_tp(x, policy, torch.Generator().manual_seed(2))
    assert torch.equal(out, x)


def test_transform_preserves_shape_and_range():
    g = torch.Generator().manual_seed(2)
    x = torch.rand(6, 3, 48, 48, generator=g)
    for policy in (
        A.TransformPolicy(p=1.0, mode_weights=(1.0, 0.0)),
        A.TransformPolicy(p=1.0, mode_weights=(0.0, 1.0), noise_sigma=0.2),
        A.TransformPolicy(p=0.7),
    ):
        out = A.transform_tp(x, policy, torch.Generator().manual_seed(3))
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_transform_fraction_matches_probability():
    p = 0.5
    trials = 10000
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, 16, 16)
    policy = A.TransformPolicy(p=p, mode_weights=(0.0, 1.0), noise_sigma=0.5)
    changed = 0
    for _ in range(trials):
        out = A.transform_tp(x, policy, gen)
        if not torch.equal(out, x):
            changed += 1
    bound = 3 * math.sqrt(p * (1 - p) / trials)
    assert abs(changed / trials - p) <= bound


def test_transform_seeded_determinism():
    x = torch.rand(4, 3, 48, 48)
    policy = A.TransformPolicy(p=1.0)
    a = A.transform_tp(x, policy, torch.Generator().manual_seed(9))
    b = A.transform_tp(x, policy, torch.Generator().manual_seed(9))
    c = A.transform_tp(x, policy, torch.Generator().manual_seed(10))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_transform_resize_pads_with_zeros():
    x = torch.ones(1, 3, 48, 48)
    policy = A.TransformPolicy(p=1.0, mode_weights=(1.0, 0.0), resize_scale_range=(0.5, 0.5))
    out = A.transform_tp(x, policy, torch.Generator().manual_seed(4))
    assert out.shape == x.shape
    assert torch.all(out[:, :, 0, :] == 0.0) and torch.all(out[:, :, -1, :] == 0.0)
    inner = out[:, :, 12:36, 12:36]
    assert inner.mean() > 0.9


def test_transform_differentiable_through_both_branches():
    for weights in ((1.0, 0.0), (0.0, 1.0)):
        x = torch.rand(2, 3, 48, 48, requires_grad=True)
        policy = A.TransformPolicy(p=1.0, mode_weights=weights, noise_sigma=0.01)
        out = A.transform_tp(x, policy, torch.Generator().manual_seed(5))
        out.sum().backward()
        assert x.grad is not None and torch.any(x.grad != 0)


def test_transform_rejects_non_batch():
    with pytest.raises(ShapeMismatch):
        A.transform_tp(torch.rand(3, 48, 48), A.TransformPolicy())


def test_ensemble_requires_whitebox():
    with pytest.raises(EmptyEnsemble):
        A.FREnsemble(whitebox=[])


def test_state_set_invariants(small_ds):
    items = [im for im in small_ds.images if im.identity == 0]
    ss = A.StateSet("0", items, "real", ["a", "b"])
    assert len(ss) == 2 and ss.tensors().shape == (2, 3, 48, 48)
    with pytest.raises(EmptyStateSet):
        A.StateSet("0", [], "real")
    with pytest.raises(OutOfRange):
        A.StateSet("0", small_ds.images[:3], "real")  # mixes identities
    with pytest.raises(OutOfRange):
        A.StateSet("0", items, "imagined")


def test_attack_loss_zero_when_embeddings_match():
    ens = make_ensemble(k=3)
    target = face(identity=1)
    adv = torch.from_numpy(target.image).unsqueeze(0).repeat(2, 1, 1, 1)
    w = LossWeights(lambda_adv=25.0)
    loss = A.attack_loss(adv, target, ens, A.TransformPolicy(p=0.0), w,
                         torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(0.0, abs=1e-5)


def test_attack_loss_range_and_orthogonal_value():
    w = LossWeights(lambda_adv=25.0)

    class StubEmbed(EmbeddingModel):
        def __init__(self, vec):
            super().__init__(image_size=48, embed_dim=2, width=4)
            self.vec = vec

        def embed(self, image):
            v = torch.tensor(self.vec, dtype=image.dtype)
            return v.unsqueeze(0).repeat(image.shape[0], 1)

    # adv embeds to (1,0); target embeds to (0,1): orthogonal on every model
    class StubPair(EmbeddingModel):
        def __init__(self):
            super().__init__(image_size=48, embed_dim=2, width=4)

        def embed(self, image):
            flat = image.mean(dim=(1, 2, 3))
            e = torch.stack([ (flat <= 0.5).float(), (flat > 0.5).float()], dim=1)
            return e

    ens = A.FREnsemble(whitebox=[StubPair(), StubPair(), StubPair()])
    target = face(identity=0)
    target.image = np.ones_like(target.image)  # mean 1 -> embeds to (0,1)
    adv = torch.zeros(2, 3, 48, 48)  # mean 0 -> embeds to (1,0)
    loss = A.attack_loss(adv, target, ens, A.TransformPolicy(p=0.0), w,
                         torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(25.0, rel=1e-6)


def test_generalized_singleton_bit_equality():
    ens = make_ensemble(k=2)
    target = face(identity=2)
    adv = torch.rand(3, 3, 48, 48)
    w = LossWeights()
    policy = A.TransformPolicy(p=1.0)
    single = A.StateSet("2", [target], "real", ["t"])
    a = A.attack_loss(adv, target, ens, policy, w, torch.Generator().manual_seed(42))
    b = A.generalized_attack_loss(adv, single, ens, policy, w, torch.Generator().manual_seed(42))
    assert a.item() == b.item()


def test_generalized_identical_copies_equal_singleton():
    ens = make_ensemble(k=2)
    target = face(identity=2)
    adv = torch.rand(2, 3, 48, 48)
    w = LossWeights()
    policy = A.TransformPolicy(p=1.0)
    copies = A.StateSet("2", [target] * 5, "real", [f"s{i}" for i in range(5)])
    single = A.StateSet("2", [target], "real", ["t"])
    a = A.generalized_attack_loss(adv, single, ens, policy, w, torch.Generator().manual_seed(7))
    b = A.generalized_attack_loss(adv, copies, ens, policy, w, torch.Generator().manual_seed(7))
    assert a.item() == pytest.approx(b.item(), abs=1e-7)


def test_generalized_subsample_estimates_exact_mean(cfg):
    ens = make_ensemble(k=2)
    mus = [np.clip(np.random.default_rng(i).uniform(0, 1, 17) * 0.5, 0, 1) for i in range(9)]
    items = [face(identity=1, mu=m) for m in mus]
    ss = A.StateSet("1", items, "real", [f"s{i}" for i in range(9)])
    adv = torch.rand(2, 3, 48, 48)
    w = LossWeights()
    policy = A.TransformPolicy(p=0.0)
    exact = A.generalized_attack_loss(
        adv, ss, ens, policy, w, torch.Generator().manual_seed(0), max_exact=9
    ).item()
    draws = [
        A.generalized_attack_loss(
            adv, ss, ens, policy, w, torch.Generator().manual_seed(1000 + t), max_exact=8
        ).item()
        for t in range(1000)
    ]
    assert abs(np.mean(draws) - exact) <= 0.02 * abs(exact)


def test_generalized_rejects_emptied_state_set():
    ens = make_ensemble(k=1, with_blackbox=False)
    adv = torch.rand(1, 3, 48, 48)
    ss = A.StateSet("0", [face(identity=0)], "real", ["t"])
    ss.items = []  # mutated after construction; the loss must still refuse
    with pytest.raises(EmptyStateSet):
        A.generalized_attack_loss(adv, ss, ens, A.TransformPolicy(), LossWeights())


def test_blackbox_receives_no_gradient():
    ens = make_ensemble(k=2, with_blackbox=True)
    gen = GeneratorModel(au_dim=17, in_hw=(48, 48), width=4)
    x = torch.rand(2, 3, 48, 48)
    au = torch.rand(2, 17)
    adv, _, _ = gen(x, au)
    target = face(identity=0)
    loss = A.attack_loss(adv, target, ens, A.TransformPolicy(p=0.5), LossWeights(),
                         torch.Generator().manual_seed(3))
    loss.backward()
    assert all(p.grad is None for p in ens.blackbox.parameters())
    assert all(p.grad is None for m in ens.whitebox for p in m.parameters())
    assert any(p.grad is not None and torch.any(p.grad != 0) for p in gen.parameters())


def test_attack_loss_bounded():
    ens = make_ensemble(k=3)
    target = face(identity=0)
    w = LossWeights(lambda_adv=25.0)
    gen = torch.Generator().manual_seed(11)
    for _ in range(5):
        adv = torch.rand(2, 3, 48, 48, generator=gen)
        loss = A.attack_loss(adv, target, ens, A.TransformPolicy(p=1.0), w,
                             torch.Generator().manual_seed(5))
        assert 0.0 - 1e-6 <= loss.item() <= 2 * 25.0 + 1e-6


def test_build_state_set_real(cfg):
    states = ["happy", "sad", "surprised"]
    from manifold_attack.au_space import preset as get_preset
    images = []
    for j, s in enumerate(states + ["neutral"]):
        mu = get_preset(s, cfg)
        img = D.render_face(D.identity_params(0, 4), mu, 48)
        images.append(D.FaceImage(f"id0004_{j:03d}.png", 4, img, mu, 1.0, dict(D.region_boxes(48))))
    other = face(identity=5)
    ds = D.FaceDataset(images + [other], 48, 17)
    ss = A.build_state_set_real(ds, 4, states, cfg)
    assert len(ss) == 3 and ss.state_names == states
    assert ss.provenance == "real" and ss.target_identity == "4"
    with pytest.raises(MissingState):
        A.build_state_set_real(ds, 4, ["fearful"], cfg)  # no fearful render present
    with pytest.raises(MissingState):
        A.build_state_set_real(ds, 99, states, cfg)
    with pytest.raises(EmptyStateSet):
        A.build_state_set_real(ds, 4, [], cfg)


def test_build_state_set_real_per_state(cfg):
    from manifold_attack.au_space import preset as get_preset
    mu = get_preset("happy", cfg)
    images = []
    for j in range(3):
        jit = np.clip(mu.as_array() + 0.01 * j, 0, 1)
        img = D.render_face(D.identity_params(0, 6), AUVector(jit), 48)
        images.append(D.FaceImage(f"id0006_{j:03d}.png", 6, img, AUVector(jit), 1.0,
                                  dict(D.region_boxes(48))))
    ds = D.FaceDataset(images, 48, 17)
    ss1 = A.build_state_set_real(ds, 6, ["happy"], cfg, per_state=1)
    ss3 = A.build_state_set_real(ds, 6, ["happy"], cfg, per_state=3)
    assert len(ss1) == 1 and len(ss3) == 3
    assert ss3.state_names == ["happy"] * 3


def test_build_state_set_generated(cfg):
    torch.manual_seed(0)
    g_exp = GeneratorModel(au_dim=17, in_hw=(48, 48), width=4)
    base = face(identity=7)
    ss = A.build_state_set_generated(g_exp, base, cfg)
    assert len(ss) == len(A.STATE_SET_DEFAULT)
    assert ss.provenance == "generated"
    seven = A.build_state_set_generated(g_exp, base, cfg, states=A.STATE_SET_DEFAULT[1:])
    assert len(seven) == 7
    wrong = GeneratorModel(au_dim=17, in_hw=(64, 64), width=4)
    with pytest.raises(CheckpointLoadError):
        A.build_state_set_generated(wrong, base, cfg)
    with pytest.raises(EmptyStateSet):
        A.build_state_set_generated(g_exp, base, cfg, states=[])


def test_state_set_save_load_roundtrip(tmp_path, cfg):
    torch.manual_seed(1)
    g_exp = GeneratorModel(au_dim=17, in_hw=(48, 48), width=4)
    g_exp.set_attention_bias(float("-inf"))  # identity editor: emits the base face
    base = face(identity=8)
    ss = A.build_state_set_generated(g_exp, base, cfg, states=["neutral", "happy", "sad"])
    A.save_state_set(ss, tmp_path)
    back = A.load_state_set(tmp_path, au_config=cfg)
    assert len(back) == 3 and back.target_identity == "8"
    assert back.state_names == ["neutral", "happy", "sad"]
    assert np.abs(back.items[0].image - ss.items[0].image).max() <= 0.5 / 255 + 1e-6

    only = A.load_state_set(tmp_path, states=["happy"], au_config=cfg)
    assert len(only) == 1 and only.state_names == ["happy"]
    with pytest.raises(MissingState):
        A.load_state_set(tmp_path, states=["fearful"], au_config=cfg)
    with pytest.raises(MissingState):
        A.load_state_set(tmp_path / "nowhere", au_config=cfg)


def test_load_state_set_max_per_state(tmp_path, cfg):
    images = []
    from manifold_attack.au_space import preset as get_preset
    mu = get_preset("happy", cfg)
    for j in range(3):
        img = D.render_face(D.identity_params(0, 9), mu, 48)
        images.append(D.FaceImage(f"id0009_{j:03d}.png", 9, img, mu, 1.0, dict(D.region_boxes(48))))
    ss = A.StateSet("9", images, "real", ["happy"] * 3)
    A.save_state_set(ss, tmp_path)
    capped = A.load_state_set(tmp_path, states=["happy"], max_per_state=2, au_config=cfg)
    assert len(capped) == 2
