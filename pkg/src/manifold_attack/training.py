"""Alternating optimization: editor pre-training and the main attack loop.

Each step updates the discriminator first, then the generator. Editors and
the recognition ensemble stay frozen; that is asserted, not assumed.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attack import (
    FREnsemble,
    StateSet,
    TransformPolicy,
    generalized_attack_loss,
)
from .au_space import AUSpaceConfig, sample_au
from .data_io import (
    REGION_CROP_SIZES,
    REGION_NAMES,
    FaceDataset,
    FaceImage,
    as_arrays,
    crop_region_t,
    region_boxes,
    split_dataset,
    toy_au_oracle,
)
from .errors import (
    DatasetTooSmall,
    ManifoldAttackError,
    NonFiniteLoss,
    OutOfRange,
)
from .evaluation import default_traversal_path, manifold_traverse, save_image_grid
from .losses import (
    LossReport,
    LossWeights,
    au_regression_loss,
    critic_loss_d,
    critic_loss_g,
    expression_terms,
    gradient_penalty,
    total_losses,
)
from .networks import (
    DiscriminatorModel,
    EmbeddingModel,
    GeneratorModel,
    load_checkpoint,
    make_editor,
    save_checkpoint,
)

EDITOR_SCOPES = ("global",) + REGION_NAMES
MODES = ("maa", "gmaa")


@dataclass
class TrainConfig:
    mode: str = "gmaa"
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.5, 0.99)
    weights: LossWeights = field(default_factory=LossWeights)
    policy: TransformPolicy = field(default_factory=TransformPolicy)
    au_config: AUSpaceConfig = field(default_factory=AUSpaceConfig)
    image_size: int = 64
    g_width: int = 10
    d_width: int = 16
    res_blocks: int = 2
    editor_steps: int = 1000
    editor_width: int = 10
    editor_lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    checkpoint_interval: int = 1000
    sample_interval: int = 1000
    literal_ssim_sign: bool = False
    max_exact_states: int = 8
    state_subsample: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise OutOfRange(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise OutOfRange(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise OutOfRange(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise OutOfRange(f"learning rate must be positive, got {self.lr}")
        if self.editor_lr <= 0:
            raise OutOfRange(f"editor learning rate must be positive, got {self.editor_lr}")
        if self.editor_steps < 0:
            raise OutOfRange(f"editor_steps must be >= 0, got {self.editor_steps}")


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss term {name} is not finite")


def _state_hash(module: torch.nn.Module) -> str:
    h = hashlib.md5()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def pretrain_editors(config: TrainConfig, dataset: FaceDataset, out_dir) -> dict:
    """Train the global and per-region editors with critic and AU terms only.

    Returns checkpoint paths keyed by scope plus 'g_exp', which reuses the
    global editor (the attack terms are exactly what it omits).
    """
    if len(dataset) < config.batch_size:
        raise DatasetTooSmall(
            f"{len(dataset)} images cannot fill batches of {config.batch_size}"
        )
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    imgs_np, aus_np, _ = as_arrays(dataset)
    imgs = torch.from_numpy(imgs_np)
    labels = torch.from_numpy(aus_np)
    boxes = region_boxes(config.image_size)
    w = config.weights
    n = imgs.shape[0]
    paths = {}
    global_model = None

    for scope in EDITOR_SCOPES:
        model = make_editor(
            config.au_config.dimension, scope, config.image_size,
            REGION_CROP_SIZES, width=config.editor_width,
        )
        d_model = DiscriminatorModel(
            config.au_config.dimension, in_hw=model.in_hw, width=config.editor_width
        )
        if scope == "global":
            inputs = imgs
        else:
            with torch.no_grad():
                inputs = crop_region_t(imgs, boxes[scope], REGION_CROP_SIZES[scope])
        opt_g = torch.optim.Adam(model.parameters(), lr=config.editor_lr, betas=config.betas)
        opt_d = torch.optim.Adam(d_model.parameters(), lr=config.editor_lr, betas=config.betas)
        loss_d_val = loss_g_val = float("nan")
        for _ in range(config.editor_steps):
            idx = torch.randint(n, (config.batch_size,), generator=gen)
            tgt = torch.randint(n, (config.batch_size,), generator=gen)
            x, mu, nu = inputs[idx], labels[idx], labels[tgt]
            fake, _, _ = model(x, nu)

            gp = gradient_penalty(lambda z: d_model(z)[0], x, fake, generator=gen)
            real_s, real_au = d_model(x)
            fake_s, _ = d_model(fake.detach())
            loss_d = critic_loss_d(real_s, fake_s, gp, w) + au_regression_loss(
                real_au, mu, w.lambda_au
            )
            _check_finite(f"editor_{scope}_d", loss_d)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            fake_s2, fake_au = d_model(fake)
            loss_g = critic_loss_g(fake_s2, w) + au_regression_loss(
                fake_au, nu, w.lambda_au
            )
            _check_finite(f"editor_{scope}_g", loss_g)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            loss_d_val, loss_g_val = float(loss_d.detach()), float(loss_g.detach())

        path = os.path.join(out_dir, f"editor_{scope}.pt")
        save_checkpoint(
            path, model,
            extra={"scope": scope, "steps": config.editor_steps,
                   "final_loss_d": loss_d_val, "final_loss_g": loss_g_val},
        )
        paths[scope] = path
        if scope == "global":
            global_model = model

    g_exp_path = os.path.join(out_dir, "g_exp.pt")
    save_checkpoint(
        g_exp_path, global_model,
        extra={"scope": "global", "alias_of": "editor_global",
               "steps": config.editor_steps},
    )
    paths["g_exp"] = g_exp_path
    return paths


def load_editors(editor_dir) -> dict:
    """Load and freeze the four editors plus the expression generator."""
    out = {}
    for name in EDITOR_SCOPES + ("g_exp",):
        fname = "g_exp.pt" if name == "g_exp" else f"editor_{name}.pt"
        model, _ = load_checkpoint(os.path.join(editor_dir, fname), expect_kind="generator")
        out[name] = _freeze(model)
    return out


def editor_roundtrip_error(
    editor: GeneratorModel,
    dataset: FaceDataset,
    au_config: AUSpaceConfig,
    n_edits: int = 50,
    seed: int = 0,
) -> float:
    """Mean l-infinity gap between requested AUs and those read off the edits."""
    rng = np.random.default_rng(seed)
    labels = [im.au for im in dataset.images]
    errs = []
    editor.eval()
    with torch.no_grad():
        for _ in range(n_edits):
            im = dataset.images[int(rng.integers(len(dataset)))]
            nu = sample_au(au_config, labels, rng=rng)
            x = torch.from_numpy(im.image).unsqueeze(0)
            edited, _, _ = editor(x, torch.from_numpy(nu.as_array()).float().unsqueeze(0))
            read = toy_au_oracle(edited.squeeze(0), au_config.dimension, strict=False)
            errs.append(np.abs(read.as_array() - nu.as_array()).max())
    return float(np.mean(errs))


def train_fr_models(
    dataset: FaceDataset,
    n_models: int = 4,
    steps: int = 400,
    batch_size: int = 32,
    lr: float = 1e-3,
    embed_dim: int = 64,
    width: int = 10,
    seed: int = 0,
) -> list:
    """Train identity classifiers to serve as the recognition ensemble.

    Each model gets its own augmentation stream so no two see identical
    noise, which keeps the held-out model honestly black-box.
    """
    if len(dataset) < batch_size:
        raise DatasetTooSmall(
            f"{len(dataset)} images cannot fill batches of {batch_size}"
        )
    imgs_np, _, ids_np = as_arrays(dataset)
    idents = sorted(set(ids_np.tolist()))
    class_of = {ident: i for i, ident in enumerate(idents)}
    labels = torch.tensor([class_of[i] for i in ids_np.tolist()])
    imgs = torch.from_numpy(imgs_np)
    size = dataset.image_size
    n = imgs.shape[0]
    models = []
    for k in range(n_models):
        torch.manual_seed(seed + 101 * k)
        model = EmbeddingModel(
            image_size=size, embed_dim=embed_dim, width=width, n_classes=len(idents)
        )
        gen = torch.Generator().manual_seed(seed + 7919 * (k + 1))
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        for _ in range(steps):
            idx = torch.randint(n, (batch_size,), generator=gen)
            x = imgs[idx]
            noise = torch.randn(x.shape, generator=gen) * 0.02
            gain = 1.0 + 0.1 * (torch.rand(x.shape[0], 1, 1, 1, generator=gen) - 0.5)
            x = (x * gain + noise).clamp(0.0, 1.0)
            loss = torch.nn.functional.cross_entropy(model.logits(x), labels[idx])
            _check_finite(f"fr_{k}", loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        models.append(model)
    return models


@dataclass
class TrainBundle:
    """Everything one optimization step touches."""

    g: GeneratorModel
    d: DiscriminatorModel
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    editors: dict
    ensemble: FREnsemble
    target_set: StateSet
    config: TrainConfig
    gen: torch.Generator
    boxes: dict


def train_step(bundle: TrainBundle, images: torch.Tensor, source_aus: torch.Tensor,
               target_aus: torch.Tensor, phase_hook=None) -> LossReport:
    """One discriminator update followed by one generator update."""
    cfg = bundle.config
    w = cfg.weights
    x, mu, nu = images, source_aus, target_aus

    with torch.no_grad():
        global_signal, _, _ = bundle.editors["global"](x, nu)
        local_signals = {}
        for region in REGION_NAMES:
            crop = crop_region_t(x, bundle.boxes[region], REGION_CROP_SIZES[region])
            local_signals[region], _, _ = bundle.editors[region](crop, nu)

    adv, _, _ = bundle.g(x, nu)

    if phase_hook:
        phase_hook("d_step")
    if w.lambda_gp > 0:
        gp = gradient_penalty(lambda z: bundle.d(z)[0], x, adv, generator=bundle.gen)
    else:
        gp = torch.zeros(())
    real_s, real_au = bundle.d(x)
    fake_s, _ = bundle.d(adv.detach())
    l_critic_d = critic_loss_d(real_s, fake_s, gp, w)
    l_au_d = au_regression_loss(real_au, mu, w.lambda_au)
    for name, term in (("gp", gp), ("critic_d", l_critic_d), ("au_d", l_au_d)):
        _check_finite(name, term)
    loss_d = l_critic_d + l_au_d
    bundle.opt_d.zero_grad()
    loss_d.backward()
    bundle.opt_d.step()

    if phase_hook:
        phase_hook("g_step")
    fake_s2, fake_au = bundle.d(adv)
    l_critic_g = critic_loss_g(fake_s2, w)
    l_au_g = au_regression_loss(fake_au, nu, w.lambda_au)
    adv_crops = {
        region: crop_region_t(adv, bundle.boxes[region], REGION_CROP_SIZES[region])
        for region in REGION_NAMES
    }
    exp_g, exp_l = expression_terms(
        adv, global_signal, local_signals, adv_crops, w, cfg.literal_ssim_sign
    )
    l_adv = generalized_attack_loss(
        adv, bundle.target_set, bundle.ensemble, cfg.policy, w,
        generator=bundle.gen, max_exact=cfg.max_exact_states,
        subsample=cfg.state_subsample,
    )
    for name, term in (
        ("critic_g", l_critic_g), ("au_g", l_au_g),
        ("exp_global", exp_g), ("exp_local", exp_l), ("adv", l_adv),
    ):
        _check_finite(name, term)
    loss_g = l_critic_g + l_au_g + exp_g + exp_l + l_adv
    bundle.opt_g.zero_grad()
    loss_g.backward()
    bundle.opt_g.step()

    return total_losses(l_critic_d, l_critic_g, gp, l_au_d, l_au_g, exp_g, exp_l, l_adv)


def _as_state_set(target, mode: str) -> StateSet:
    if isinstance(target, StateSet):
        sset = target
    elif isinstance(target, FaceImage):
        sset = StateSet(
            target_identity=str(target.identity),
            items=[target],
            provenance="real",
            state_names=["target"],
        )
    else:
        raise OutOfRange(f"target must be a StateSet or FaceImage, got {type(target)}")
    if mode == "maa" and len(sset) != 1:
        raise OutOfRange(f"maa mode attacks a single state, got {len(sset)}")
    return sset


def train_config_lines(config: TrainConfig) -> list:
    """Render a TrainConfig as flat key=value lines in the config-file grammar.

    The output parses back through the config layer, so a run directory's
    snapshot doubles as a config file for reproducing the run.
    """
    lines = []
    for key in sorted(vars(config)):
        value = getattr(config, key)
        if key == "betas":
            lines.append(f"beta1={value[0]}")
            lines.append(f"beta2={value[1]}")
        elif key == "weights":
            for sub in sorted(vars(value)):
                lines.append(f"loss.{sub}={getattr(value, sub)}")
        elif key == "policy":
            lines.append(f"policy.p={value.p}")
            lines.append(f"policy.noise_sigma={value.noise_sigma}")
            lines.append(f"policy.scale_min={value.resize_scale_range[0]}")
            lines.append(f"policy.scale_max={value.resize_scale_range[1]}")
            lines.append(f"policy.weight_resize={value.mode_weights[0]}")
            lines.append(f"policy.weight_noise={value.mode_weights[1]}")
        elif key == "au_config":
            lines.append(f"au.dimension={value.dimension}")
            lines.append(f"au.sampling_mode={value.sampling_mode}")
            lines.append(f"au.sampling_noise_sigma={value.sampling_noise_sigma}")
        else:
            lines.append(f"{key}={value}")
    return lines


def _write_config_snapshot(config: TrainConfig, run_dir, extra_lines=()) -> None:
    lines = sorted(train_config_lines(config) + list(extra_lines))
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _latest_checkpoint_step(run_dir) -> int:
    ck = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ck):
        return 0
    steps = [int(name.split("_")[1]) for name in os.listdir(ck) if name.startswith("step_")]
    return max(steps, default=0)


def _save_step_checkpoint(run_dir, step, bundle: TrainBundle) -> None:
    d = os.path.join(run_dir, "checkpoints", f"step_{step:06d}")
    os.makedirs(d, exist_ok=True)
    save_checkpoint(
        os.path.join(d, "generator.pt"), bundle.g,
        extra={"step": step, "opt_state": bundle.opt_g.state_dict()},
    )
    save_checkpoint(
        os.path.join(d, "discriminator.pt"), bundle.d,
        extra={"step": step, "opt_state": bundle.opt_d.state_dict()},
    )


def train(
    config: TrainConfig,
    dataset: FaceDataset,
    ensemble: FREnsemble,
    target,
    editors: dict,
    run_dir,
    resume: bool = False,
    phase_hook=None,
    extra_config_lines=(),
) -> str:
    """Run the attack training loop, emitting logs, checkpoints and samples.

    The run directory holds config.txt, metrics.csv (one row per step),
    checkpoints/step_<n>/ and samples/step_<n>.png. Callers with settings
    beyond the training config (the CLI) pass them as extra snapshot lines.
    """
    run_dir = os.fspath(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    os.makedirs(os.path.join(run_dir, "samples"), exist_ok=True)
    _write_config_snapshot(config, run_dir, extra_config_lines)

    target_set = _as_state_set(target, config.mode)
    train_ds, _ = split_dataset(dataset, config.holdout_fraction, seed=config.seed)
    if len(train_ds) < config.batch_size:
        raise DatasetTooSmall(
            f"train split of {len(train_ds)} cannot fill batches of {config.batch_size}"
        )

    torch.manual_seed(config.seed)
    size = config.image_size
    g = GeneratorModel(
        config.au_config.dimension, in_hw=(size, size),
        width=config.g_width, res_blocks=config.res_blocks,
    )
    d = DiscriminatorModel(config.au_config.dimension, in_hw=(size, size), width=config.d_width)
    opt_g = torch.optim.Adam(g.parameters(), lr=config.lr, betas=config.betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=config.lr, betas=config.betas)

    start_step = 0
    if resume:
        start_step = _latest_checkpoint_step(run_dir)
        if start_step > 0:
            ck = os.path.join(run_dir, "checkpoints", f"step_{start_step:06d}")
            g, extra_g = load_checkpoint(os.path.join(ck, "generator.pt"), "generator")
            d, extra_d = load_checkpoint(os.path.join(ck, "discriminator.pt"), "discriminator")
            g.train()
            d.train()
            opt_g = torch.optim.Adam(g.parameters(), lr=config.lr, betas=config.betas)
            opt_d = torch.optim.Adam(d.parameters(), lr=config.lr, betas=config.betas)
            opt_g.load_state_dict(extra_g["opt_state"])
            opt_d.load_state_dict(extra_d["opt_state"])

    for name in EDITOR_SCOPES:
        _freeze(editors[name])
    frozen = {f"editor_{name}": editors[name] for name in EDITOR_SCOPES}
    for name, model in ensemble.all_models():
        frozen[name] = model
    before = {name: _state_hash(m) for name, m in frozen.items()}

    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    imgs_np, aus_np, _ = as_arrays(train_ds)
    imgs = torch.from_numpy(imgs_np)
    labels_t = torch.from_numpy(aus_np)
    label_pool = [im.au for im in train_ds.images]
    boxes = region_boxes(size)
    bundle = TrainBundle(
        g=g, d=d, opt_g=opt_g, opt_d=opt_d, editors=editors,
        ensemble=ensemble, target_set=target_set, config=config,
        gen=gen, boxes=boxes,
    )

    metrics_path = os.path.join(run_dir, "metrics.csv")
    fresh = start_step == 0 or not os.path.exists(metrics_path)
    mode = "w" if fresh else "a"
    base_image = train_ds.images[0].image
    with open(metrics_path, mode, encoding="utf-8") as log:
        if fresh:
            log.write("step," + ",".join(LossReport.FIELDS) + "\n")
        for step in range(start_step + 1, config.steps + 1):
            idx = torch.randint(len(train_ds), (config.batch_size,), generator=gen)
            x = imgs[idx]
            mu = labels_t[idx]
            nu_rows = [
                sample_au(config.au_config, label_pool, rng=rng).as_array()
                for _ in range(config.batch_size)
            ]
            nu = torch.from_numpy(np.stack(nu_rows).astype(np.float32))
            report = train_step(bundle, x, mu, nu, phase_hook=phase_hook)
            row = [str(step)] + [format(v, ".10g") for v in report.as_row()]
            log.write(",".join(row) + "\n")

            at_interval = step % config.checkpoint_interval == 0
            if at_interval or step == config.steps:
                _save_step_checkpoint(run_dir, step, bundle)
            if step % config.sample_interval == 0 or step == config.steps:
                frames = manifold_traverse(
                    g, base_image, default_traversal_path(config.au_config), 4
                )
                g.train()
                save_image_grid(
                    frames, os.path.join(run_dir, "samples", f"step_{step:06d}.png")
                )

    after = {name: _state_hash(m) for name, m in frozen.items()}
    for name in frozen:
        if before[name] != after[name]:
            raise ManifoldAttackError(f"frozen module {name} changed during training")
    return run_dir
