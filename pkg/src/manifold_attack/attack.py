"""Targeted attack machinery: input transform, ensemble losses, state sets.

The attack drives generated faces toward a target identity's embeddings on an
ensemble of frozen white-box FR models, optionally in expectation over a set
of expression states of the target. A held-out black-box model never appears
in any loss.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .au_space import AUSpaceConfig, AUVector, preset
from .data_io import FaceDataset, FaceImage, region_boxes, load_image_png, save_image_png
from .errors import (
    CheckpointLoadError,
    EmptyEnsemble,
    EmptyStateSet,
    MissingState,
    OutOfRange,
    ShapeMismatch,
)
from .losses import LossWeights
from .networks import EmbeddingModel, GeneratorModel

STATE_SET_DEFAULT = (
    "neutral", "angry", "contemptuous", "disgusted", "fearful", "happy", "sad", "surprised",
)


@dataclass(frozen=True)
class TransformPolicy:
    """Stochastic input transform: with probability p, resize-pad or add noise."""

    p: float = 0.5
    resize_scale_range: tuple = (0.8, 1.0)
    noise_sigma: float = 0.03
    mode_weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise OutOfRange(f"transform probability must lie in [0, 1], got {self.p}")
        lo, hi = self.resize_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise OutOfRange(f"resize scale range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.noise_sigma < 0.0:
            raise OutOfRange(f"noise sigma must be >= 0, got {self.noise_sigma}")
        wr, wn = self.mode_weights
        if wr < 0 or wn < 0 or abs(wr + wn - 1.0) > 1e-9:
            raise OutOfRange(f"mode weights must be non-negative and sum to 1, got {(wr, wn)}")


def transform_tp(batch: torch.Tensor, policy: TransformPolicy, generator=None) -> torch.Tensor:
    """Apply the transform independently per item; differentiable passthrough.

    The random stream is consumed in a fixed order (one uniform per item, plus
    mode draws only for transformed items) so seeded runs are reproducible.
    """
    if batch.dim() != 4:
        raise ShapeMismatch(f"expected a (B, C, H, W) batch, got {tuple(batch.shape)}")
    b, _, h, w = batch.shape
    lo, hi = policy.resize_scale_range
    out = []
    changed = False
    for i in range(b):
        u = torch.rand(1, generator=generator).item()
        item = batch[i]
        if u < policy.p:
            m = torch.rand(1, generator=generator).item()
            if m < policy.mode_weights[0]:
                s = lo + (hi - lo) * torch.rand(1, generator=generator).item()
                nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
                if (nh, nw) != (h, w):
                    small = F.interpolate(
                        item.unsqueeze(0), size=(nh, nw), mode="bilinear", align_corners=False
                    ).squeeze(0)
                    canvas = batch.new_zeros(item.shape)
                    top, left = (h - nh) // 2, (w - nw) // 2
                    canvas[:, top:top + nh, left:left + nw] = small
                    item = canvas
                    changed = True
            else:
                if policy.noise_sigma > 0.0:
                    noise = torch.randn(item.shape, generator=generator, dtype=batch.dtype)
                    item = (item + policy.noise_sigma * noise).clamp(0.0, 1.0)
                    changed = True
                else:
                    torch.randn(item.shape, generator=generator)  # keep stream position fixed
        out.append(item)
    if not changed:
        return batch
    return torch.stack(out, dim=0)


@dataclass
class FREnsemble:
    """Frozen FR models: K white-box used in losses, one black-box held out."""

    whitebox: list
    blackbox: EmbeddingModel | None = None
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.whitebox:
            raise EmptyEnsemble("ensemble needs at least one white-box model")
        for m in self.whitebox + ([self.blackbox] if self.blackbox is not None else []):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    @property
    def k(self) -> int:
        return len(self.whitebox)

    def all_models(self):
        named = [(f"whitebox_{i}", m) for i, m in enumerate(self.whitebox)]
        if self.blackbox is not None:
            named.append(("blackbox", self.blackbox))
        return named


@dataclass
class StateSet:
    """Images of one target identity in different expression states."""

    target_identity: str
    items: list
    provenance: str
    state_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.items:
            raise EmptyStateSet("state set has no items")
        if self.provenance not in ("real", "generated"):
            raise OutOfRange(f"provenance must be 'real' or 'generated', got {self.provenance!r}")
        idents = {im.identity for im in self.items}
        if len(idents) > 1:
            raise OutOfRange(f"state set mixes identities {sorted(idents)}")
        if not self.state_names:
            self.state_names = [f"state_{i}" for i in range(len(self.items))]
        if len(self.state_names) != len(self.items):
            raise OutOfRange("state_names and items length differ")

    def __len__(self):
        return len(self.items)

    def tensors(self) -> torch.Tensor:
        return torch.from_numpy(np.stack([im.image for im in self.items]))


def _target_embeddings(targets: torch.Tensor, models) -> list:
    with torch.no_grad():
        return [m.embed(targets) for m in models]


def _ensemble_term(adv_embs, target_embs, w: LossWeights, state_idx: int):
    k = len(adv_embs)
    total = None
    for e_adv, e_t in zip(adv_embs, target_embs):
        cos = (e_adv * e_t[state_idx].unsqueeze(0)).sum(dim=1)
        term = (1.0 - cos).mean()
        total = term if total is None else total + term
    return (w.lambda_adv / k) * total


def generalized_attack_loss(
    adv: torch.Tensor,
    state_set: StateSet,
    ensemble: FREnsemble,
    policy: TransformPolicy,
    w: LossWeights,
    generator=None,
    max_exact: int = 8,
    subsample: int = 4,
) -> torch.Tensor:
    """Expected ensemble cosine loss over the target's expression states.

    The expectation is the exact mean for small state sets and a uniform
    subsample otherwise. One transform draw is shared across every model and
    state in a single evaluation.
    """
    if len(state_set) == 0:
        raise EmptyStateSet("cannot attack an empty state set")
    if not ensemble.whitebox:
        raise EmptyEnsemble("no white-box models to attack")
    n = len(state_set)
    if n <= max_exact:
        chosen = list(range(n))
    else:
        perm = torch.randperm(n, generator=generator)
        chosen = sorted(perm[:subsample].tolist())
    transformed = transform_tp(adv, policy, generator)
    targets = state_set.tensors().to(adv.dtype)
    target_embs = _target_embeddings(targets, ensemble.whitebox)
    adv_embs = [m.embed(transformed) for m in ensemble.whitebox]
    total = None
    for idx in chosen:
        term = _ensemble_term(adv_embs, target_embs, w, idx)
        total = term if total is None else total + term
    return total / len(chosen)


def attack_loss(
    adv: torch.Tensor,
    target: FaceImage,
    ensemble: FREnsemble,
    policy: TransformPolicy,
    w: LossWeights,
    generator=None,
) -> torch.Tensor:
    """Single-target ensemble cosine loss; the degenerate one-state set."""
    single = StateSet(
        target_identity=str(target.identity),
        items=[target],
        provenance="real",
        state_names=["target"],
    )
    return generalized_attack_loss(adv, single, ensemble, policy, w, generator)


def build_state_set_real(
    dataset: FaceDataset,
    identity: int,
    states,
    au_config: AUSpaceConfig,
    match_tol: float = 0.35,
    per_state: int = 1,
) -> StateSet:
    """Pick real images of the identity whose AU labels match each named state.

    For each state, images are ranked by l2 distance between their AU label
    and the state's preset code; a state with no image within match_tol is
    reported missing.
    """
    states = list(states)
    if not states:
        raise EmptyStateSet("no states requested")
    pool = [im for im in dataset.images if im.identity == identity]
    if not pool:
        raise MissingState(f"dataset has no images of identity {identity}")
    items, names = [], []
    for state in states:
        code = preset(state, au_config).values
        ranked = sorted(pool, key=lambda im: float(np.linalg.norm(im.au.values - code)))
        best = float(np.linalg.norm(ranked[0].au.values - code))
        if best > match_tol:
            raise MissingState(
                f"identity {identity} has no image within {match_tol} of state {state!r} "
                f"(closest distance {best:.3f})"
            )
        take = [im for im in ranked if float(np.linalg.norm(im.au.values - code)) <= match_tol]
        for im in take[:per_state]:
            items.append(im)
            names.append(state)
    return StateSet(str(identity), items, "real", names)


def build_state_set_generated(
    g_exp: GeneratorModel,
    base: FaceImage,
    au_config: AUSpaceConfig,
    states=STATE_SET_DEFAULT,
) -> StateSet:
    """Synthesize states by driving the expression editor over preset codes."""
    states = list(states)
    if not states:
        raise EmptyStateSet("no states requested")
    size = base.image.shape[-1]
    if g_exp.in_hw != (size, size):
        raise CheckpointLoadError(
            f"expression editor expects {g_exp.in_hw}, base image is {size}x{size}"
        )
    boxes = region_boxes(size)
    x = torch.from_numpy(base.image).unsqueeze(0)
    items = []
    with torch.no_grad():
        for state in states:
            mu = preset(state, au_config)
            out, _, _ = g_exp(x, torch.from_numpy(mu.as_array()).float().unsqueeze(0))
            items.append(
                FaceImage(
                    filename=f"gen_{state}.png",
                    identity=base.identity,
                    image=out.squeeze(0).numpy().astype(np.float32),
                    au=mu,
                    confidence=1.0,
                    regions=dict(boxes),
                )
            )
    return StateSet(str(base.identity), items, "generated", states)


def save_state_set(state_set: StateSet, out_dir) -> None:
    """Write state images plus a manifest (identity, state, filename, provenance)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["identity", "state", "filename", "provenance"])
        for i, (im, name) in enumerate(zip(state_set.items, state_set.state_names)):
            fn = f"{i:02d}_{name}.png"
            wr.writerow([state_set.target_identity, name, fn, state_set.provenance])
            save_image_png(im.image, os.path.join(out_dir, fn))


def load_state_set(in_dir, states=None, max_per_state: int | None = None, au_config=None) -> StateSet:
    """Read a saved state set; optionally filter states and cap items per state."""
    manifest = os.path.join(in_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise MissingState(f"no manifest.csv in {in_dir}")
    rows = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if i == 0 and row and row[0] == "identity":
                continue
            if row:
                rows.append(row)
    if not rows:
        raise EmptyStateSet(f"manifest in {in_dir} lists no states")
    identity = rows[0][0]
    provenance = rows[0][3]
    want = list(states) if states is not None else None
    cfg = au_config or AUSpaceConfig()
    items, names = [], []
    counts: dict = {}
    for ident, name, fn, _prov in rows:
        if want is not None and name not in want:
            continue
        if max_per_state is not None and counts.get(name, 0) >= max_per_state:
            continue
        img = load_image_png(os.path.join(in_dir, fn))
        au = preset(name, cfg) if name in cfg.preset_table else AUVector(np.zeros(cfg.dimension))
        items.append(FaceImage(fn, int(ident), img, au, 1.0, dict(region_boxes(img.shape[-1]))))
        names.append(name)
        counts[name] = counts.get(name, 0) + 1
    if want is not None:
        missing = [s for s in want if s not in counts]
        if missing:
            raise MissingState(f"states {missing} absent from {in_dir}")
    if not items:
        raise EmptyStateSet(f"no matching states in {in_dir}")
    return StateSet(identity, items, provenance, names)
