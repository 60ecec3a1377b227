"""Verification-threshold calibration, attack success rates, traversal grids.

Success of an attack is always judged the same way: cosine similarity between
embeddings, against a per-model threshold calibrated so impostor pairs pass at
the requested false-accept rate.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .au_space import AUSpaceConfig, interpolate, preset, sample_au
from .data_io import save_image_png
from .errors import EmptyInput, OutOfRange, TooFewPairs
from .networks import EmbeddingModel, GeneratorModel

TRAVERSAL_DEFAULT = ("neutral", "disgusted", "happy", "surprised")


def threshold_from_similarities(sims, far_target: float) -> float:
    """Smallest threshold whose false-accept fraction is within target.

    Candidates are the observed similarity values themselves (ties resolve
    upward); if even the largest observed value accepts too many, the
    threshold lands just above it so nothing passes.
    """
    if not (0.0 < far_target < 1.0):
        raise OutOfRange(f"far_target must lie in (0, 1), got {far_target}")
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise EmptyInput("no similarity values to calibrate on")
    n = s.size
    for t in np.unique(s):  # ascending
        if np.count_nonzero(s >= t) / n <= far_target:
            return float(t)
    return float(np.nextafter(s.max(), np.inf))


def _embed_batched(model: EmbeddingModel, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            outs.append(model.embed(images[i:i + batch]))
    return torch.cat(outs, dim=0)


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.from_numpy(np.asarray(images, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise EmptyInput(f"expected image batch, got shape {tuple(t.shape)}")
    return t.float()


def calibrate_far_threshold(model: EmbeddingModel, impostor_pairs, far_target: float) -> float:
    """Calibrate a verification threshold on pairs of distinct identities."""
    pairs = list(impostor_pairs)
    if len(pairs) < 100:
        raise TooFewPairs(f"need at least 100 impostor pairs, got {len(pairs)}")
    a = _as_batch(np.stack([np.asarray(p[0]) for p in pairs]))
    b = _as_batch(np.stack([np.asarray(p[1]) for p in pairs]))
    ea, eb = _embed_batched(model, a), _embed_batched(model, b)
    sims = (ea * eb).sum(dim=1).numpy()
    return threshold_from_similarities(sims, far_target)


def pairwise_cosines(adv_images, test_images, model: EmbeddingModel) -> np.ndarray:
    """Cosine similarity for every (adv, test) pair, shape (A, T)."""
    adv = _as_batch(adv_images)
    test = _as_batch(test_images)
    if adv.shape[0] == 0 or test.shape[0] == 0:
        raise EmptyInput("empty image set")
    ea = _embed_batched(model, adv)
    et = _embed_batched(model, test)
    return (ea @ et.T).numpy()


def attack_success_rate(adv_images, test_images, model: EmbeddingModel, threshold: float) -> float:
    """Percentage of (adv, test) pairs whose similarity clears the threshold."""
    cos = pairwise_cosines(adv_images, test_images, model)
    return 100.0 * float(np.count_nonzero(cos >= threshold)) / cos.size


def mean_confidence(adv_images, test_images, model: EmbeddingModel) -> float:
    """Similarity mapped to a 0..100 confidence-score analog, averaged over pairs."""
    cos = pairwise_cosines(adv_images, test_images, model)
    return float((50.0 * (1.0 + cos)).mean())


def manifold_traverse(g_model: GeneratorModel, base_image, au_path, steps_per_segment: int):
    """Generate frames along straight AU segments between waypoints.

    Returns segments * steps + 1 frames, endpoints included once each.
    """
    if steps_per_segment < 1:
        raise OutOfRange(f"steps_per_segment must be >= 1, got {steps_per_segment}")
    waypoints = list(au_path)
    if len(waypoints) < 2:
        raise EmptyInput("need at least two waypoints to traverse")
    base = _as_batch(base_image)
    g_model.eval()
    frames = []

    def frame(mu):
        with torch.no_grad():
            out, _, _ = g_model(base, torch.from_numpy(mu.as_array()).float().unsqueeze(0))
        return out.squeeze(0).numpy().astype(np.float32)

    frames.append(frame(waypoints[0]))
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        for k in range(1, steps_per_segment + 1):
            frames.append(frame(interpolate(a, b, k / steps_per_segment)))
    return frames


def default_traversal_path(au_config: AUSpaceConfig):
    return [preset(name, au_config) for name in TRAVERSAL_DEFAULT]


def save_image_grid(images, path, cols: int | None = None) -> None:
    """Tile (3, S, S) frames into one PNG, row-major."""
    frames = list(images)
    if not frames:
        raise EmptyInput("no frames to tile")
    n = len(frames)
    cols = cols or min(n, 8)
    rows = (n + cols - 1) // cols
    _, h, w = frames[0].shape
    canvas = np.ones((3, rows * h, cols * w), dtype=np.float32)
    for i, fr in enumerate(frames):
        r, c = divmod(i, cols)
        canvas[:, r * h:(r + 1) * h, c * w:(c + 1) * w] = fr
    save_image_png(canvas, path)


@dataclass
class EvalReport:
    asr: dict
    clean_asr: dict
    confidence: dict
    thresholds: dict
    sample_counts: dict
    seed: int
    far_target: float = 0.01

    def __post_init__(self):
        for d in (self.asr, self.clean_asr):
            for name, v in d.items():
                if not (0.0 <= v <= 100.0):
                    raise OutOfRange(f"ASR for {name} out of range: {v}")
        for name, v in self.sample_counts.items():
            if v <= 0:
                raise OutOfRange(f"sample count {name} must be positive, got {v}")

    def rows(self):
        out = []
        for name in self.asr:
            out.append(
                [
                    name,
                    f"{self.asr[name]:.4f}",
                    f"{self.clean_asr[name]:.4f}",
                    f"{self.confidence[name]:.4f}",
                    f"{self.thresholds[name]:.6f}",
                ]
            )
        return out


def write_eval_report(report: EvalReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("model,asr,clean_asr,confidence,threshold\n")
        for row in report.rows():
            fh.write(",".join(row) + "\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(
            f"attack evaluation (far_target={report.far_target}, seed={report.seed})\n"
        )
        for name, v in report.sample_counts.items():
            fh.write(f"  {name}: {v}\n")
        for row in report.rows():
            fh.write(
                f"  {row[0]}: asr={row[1]}% clean={row[2]}% confidence={row[3]} threshold={row[4]}\n"
            )


def plot_asr_bars(report: EvalReport, path) -> None:
    names = list(report.asr)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(names))
    ax.bar(x - 0.2, [report.asr[n] for n in names], width=0.4, label="attack")
    ax.bar(x + 0.2, [report.clean_asr[n] for n in names], width=0.4, label="clean")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, fontsize=8)
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def impostor_pairs_from_dataset(dataset, rng: np.random.Generator, count: int = 200):
    """Sample image pairs with distinct identities for threshold calibration."""
    by_ident: dict = {}
    for im in dataset.images:
        by_ident.setdefault(im.identity, []).append(im)
    idents = sorted(by_ident)
    if len(idents) < 2:
        raise TooFewPairs("need at least two identities for impostor pairs")
    pairs = []
    for _ in range(count):
        i, j = rng.choice(len(idents), size=2, replace=False)
        a = by_ident[idents[i]][rng.integers(len(by_ident[idents[i]]))]
        b = by_ident[idents[j]][rng.integers(len(by_ident[idents[j]]))]
        pairs.append((a.image, b.image))
    return pairs


def evaluate(
    g_model: GeneratorModel,
    ensemble,
    holdout,
    target_test_images,
    au_config: AUSpaceConfig,
    seed: int = 0,
    n_adv: int = 64,
    far_target: float = 0.01,
    out_dir=None,
    target_identity: int | None = None,
) -> EvalReport:
    """Full evaluation pass: calibrate, attack, baseline, report, artifacts.

    Adversarial examples are G(x | mu) for random source images of non-target
    identities and freshly sampled AU codes; the clean baseline scores the
    same source images untouched.
    """
    rng = np.random.default_rng(seed)
    sources = [
        im for im in holdout.images if target_identity is None or im.identity != target_identity
    ]
    if not sources:
        raise EmptyInput("holdout contains no non-target source images")
    labels = [im.au for im in holdout.images]
    picks = [sources[int(rng.integers(len(sources)))] for _ in range(n_adv)]
    clean = np.stack([im.image for im in picks])
    mus = np.stack(
        [sample_au(au_config, labels, rng=rng).as_array() for _ in range(n_adv)]
    ).astype(np.float32)
    with torch.no_grad():
        adv, _, _ = g_model(torch.from_numpy(clean), torch.from_numpy(mus))
    adv = adv.numpy()

    pairs = impostor_pairs_from_dataset(holdout, rng, count=max(200, 2 * n_adv))
    test = np.asarray(target_test_images, dtype=np.float32)

    asr, clean_asr, conf, thresholds = {}, {}, {}, {}
    for name, model in ensemble.all_models():
        t = calibrate_far_threshold(model, pairs, far_target)
        thresholds[name] = t
        asr[name] = attack_success_rate(adv, test, model, t)
        clean_asr[name] = attack_success_rate(clean, test, model, t)
        conf[name] = mean_confidence(adv, test, model)

    report = EvalReport(
        asr=asr,
        clean_asr=clean_asr,
        confidence=conf,
        thresholds=thresholds,
        sample_counts={"adv": n_adv, "target_test": test.shape[0], "impostor_pairs": len(pairs)},
        seed=seed,
        far_target=far_target,
    )
    if out_dir is not None:
        write_eval_report(report, out_dir)
        plot_asr_bars(report, os.path.join(out_dir, "asr.png"))
        frames = manifold_traverse(
            g_model, picks[0].image, default_traversal_path(au_config), steps_per_segment=4
        )
        save_image_grid(frames, os.path.join(out_dir, "traversal.png"))
    return report
