"""Metric-space checks over the generated expression manifold.

The distance between two generated images is the Euclidean distance between
their predicted AU vectors. That construction inherits symmetry and the
triangle inequality from the norm, so those axioms are asserted
unconditionally; positivity is only reported (as a collision rate), and the
continuity bound uses the measured AU round-trip error so it stays a theorem
under measurement instead of an aspiration.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_io import toy_au_oracle
from .errors import DegeneratePair, EmptyEnsemble, EmptyInput, OutOfRange
from .evaluation import attack_success_rate

CHART_ERROR_LIMIT = 0.5
CHART_FLAG = "not a manifold chart"


def _as_image_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        t = images.float()
    else:
        t = torch.from_numpy(np.asarray(images, dtype=np.float32))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def predict_au_batch(predictor, images, batch: int = 32) -> np.ndarray:
    """Run the AU predictor over a batch; tuple outputs use the AU slot."""
    t = _as_image_batch(images)
    outs = []
    with torch.no_grad():
        for i in range(0, t.shape[0], batch):
            out = predictor(t[i:i + batch])
            au = out[1] if isinstance(out, tuple) else out
            outs.append(au.double())
    return torch.cat(outs, dim=0).numpy()


def distance_matrix(preds: np.ndarray) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def _triangle_residual(d: np.ndarray) -> float:
    # worst d(i,k) - d(i,j) - d(j,k); blocked over i to bound memory
    n = d.shape[0]
    block = max(1, int(4e6 / (n * n + 1)))
    worst = -np.inf
    for start in range(0, n, block):
        stop = min(n, start + block)
        excess = d[start:stop, None, :] - d[start:stop, :, None] - d[None, :, :]
        worst = max(worst, float(excess.max()))
    return worst


@dataclass
class ManifoldProbe:
    """Frozen generator plus AU predictor anchored at one base image."""

    generator: object
    au_predictor: object
    base_image: np.ndarray
    au_dim: int = 17
    sample_count: int = 200
    seed: int = 0
    batch: int = 32
    symmetry_tol: float = 1e-7
    triangle_tol: float = 1e-7
    bound_slack: float = 1e-6

    def __post_init__(self):
        if self.sample_count < 3:
            raise OutOfRange(f"sample_count must be >= 3, got {self.sample_count}")
        self.base_image = np.asarray(self.base_image, dtype=np.float32)
        for m in (self.generator, self.au_predictor):
            if hasattr(m, "eval"):
                m.eval()

    def sample_codes(self, count: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.uniform(0.0, 1.0, size=(count or self.sample_count, self.au_dim))

    def generate(self, mus) -> torch.Tensor:
        m = np.asarray(mus, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.au_dim:
            raise OutOfRange(f"expected (n, {self.au_dim}) AU codes, got {m.shape}")
        base = torch.from_numpy(self.base_image).unsqueeze(0)
        outs = []
        with torch.no_grad():
            for i in range(0, m.shape[0], self.batch):
                mt = torch.from_numpy(m[i:i + self.batch]).float()
                x = base.expand(mt.shape[0], -1, -1, -1)
                out = self.generator(x, mt)
                if isinstance(out, tuple):
                    out = out[0]
                outs.append(out.float())
        return torch.cat(outs, dim=0)

    def predict(self, images) -> np.ndarray:
        return predict_au_batch(self.au_predictor, images, batch=self.batch)


def pseudometric_check(images, au_predictor, symmetry_tol: float = 1e-7,
                       triangle_tol: float = 1e-7) -> dict:
    """Check metric axioms of the AU-prediction distance over an image set.

    Identity must hold exactly; symmetry and triangle to tolerance. Positivity
    is reported as a collision rate, never asserted.
    """
    preds = predict_au_batch(au_predictor, images)
    n = preds.shape[0]
    if n < 3:
        raise EmptyInput(f"need at least 3 images, got {n}")
    d = distance_matrix(preds)
    identity = float(np.abs(np.diag(d)).max())
    symmetry = float(np.abs(d - d.T).max())
    triangle = max(0.0, _triangle_residual(d))
    off = ~np.eye(n, dtype=bool)
    collisions = float(np.count_nonzero(d[off] <= 1e-12)) / float(off.sum())
    return {
        "n_images": n,
        "identity_residual": identity,
        "symmetry_residual": symmetry,
        "triangle_residual": triangle,
        "collision_rate": collisions,
        "passed": identity == 0.0 and symmetry <= symmetry_tol and triangle <= triangle_tol,
    }


def au_roundtrip(probe: ManifoldProbe, aus=None) -> dict:
    """Round-trip error of AU codes through generation and prediction."""
    mus = np.asarray(aus if aus is not None else probe.sample_codes(), dtype=np.float64)
    preds = probe.predict(probe.generate(mus))
    errors = np.sqrt(((preds - mus) ** 2).sum(axis=1))
    mean = float(errors.mean())
    return {
        "errors": errors,
        "mean_error": mean,
        "eps_max": float(errors.max()),
        "chart_ok": mean <= CHART_ERROR_LIMIT,
    }


def continuity_modulus(probe: ManifoldProbe, pairs, eps_max: float) -> dict:
    """Check d(G(mu), G(nu)) <= |mu - nu| + 2 eps_max + slack for every pair.

    The bound is the triangle inequality applied to the measured round-trip
    error, so it must hold whenever eps_max was measured on the same
    checkpoint over a sample containing these codes. Pairs with mu = nu are
    bound-checked but excluded from the ratio statistics.
    """
    pair_list = list(pairs)
    if not pair_list:
        raise EmptyInput("no pairs to check")

    def arr(v):
        return v.as_array() if hasattr(v, "as_array") else np.asarray(v, dtype=np.float64)

    a = np.stack([arr(p[0]) for p in pair_list])
    b = np.stack([arr(p[1]) for p in pair_list])
    pa = probe.predict(probe.generate(a))
    pb = probe.predict(probe.generate(b))
    d = np.sqrt(((pa - pb) ** 2).sum(axis=1))
    sep = np.sqrt(((a - b) ** 2).sum(axis=1))
    bound = sep + 2.0 * eps_max + probe.bound_slack
    excess = d - bound
    degenerate = sep == 0.0
    if degenerate.all():
        raise DegeneratePair("every pair has mu = nu; no ratio statistics possible")
    ratios = d[~degenerate] / sep[~degenerate]
    return {
        "n_pairs": len(pair_list),
        "n_degenerate": int(degenerate.sum()),
        "violations": int(np.count_nonzero(excess > 0.0)),
        "max_excess": float(excess.max()),
        "ratio_mean": float(ratios.mean()),
        "ratio_median": float(np.median(ratios)),
        "ratio_max": float(ratios.max()),
    }


def adversarial_coverage(probe: ManifoldProbe, aus, models, thresholds: dict,
                         target_images) -> dict:
    """Fraction of sampled codes whose generated image verifies as the target."""
    items = list(models.all_models()) if hasattr(models, "all_models") else list(models)
    if not items:
        raise EmptyEnsemble("no face recognition models given")
    adv = probe.generate(np.asarray(aus, dtype=np.float64)).numpy()
    out = {}
    for name, model in items:
        out[name] = attack_success_rate(adv, target_images, model, thresholds[name]) / 100.0
    return out


def semantic_continuity(probe: ManifoldProbe, pairs, delta: float) -> dict:
    """Relate the prediction distance to an external AU reading of the images.

    The internal check is definitional (the distance IS the AU-prediction
    distance); the external check reads AUs back off the rendered images with
    the shading-site estimator and reports their distance and its correlation
    with d.
    """
    pair_list = list(pairs)
    if not pair_list:
        raise EmptyInput("no pairs to check")

    def arr(v):
        return v.as_array() if hasattr(v, "as_array") else np.asarray(v, dtype=np.float64)

    a = np.stack([arr(p[0]) for p in pair_list])
    b = np.stack([arr(p[1]) for p in pair_list])
    xa, xb = probe.generate(a), probe.generate(b)
    pa, pb = probe.predict(xa), probe.predict(xb)
    d = np.sqrt(((pa - pb) ** 2).sum(axis=1))
    within = d <= delta
    internal_ok = bool(np.all(d[within] <= delta))

    oracle_d = np.empty(len(pair_list))
    for i in range(len(pair_list)):
        oa = toy_au_oracle(xa[i], probe.au_dim, strict=False).as_array()
        ob = toy_au_oracle(xb[i], probe.au_dim, strict=False).as_array()
        oracle_d[i] = np.sqrt(((oa - ob) ** 2).sum())
    if d.std() == 0.0 or oracle_d.std() == 0.0:
        corr = float("nan")
    else:
        corr = float(np.corrcoef(d, oracle_d)[0, 1])
    return {
        "n_pairs": len(pair_list),
        "n_within_delta": int(within.sum()),
        "internal_ok": internal_ok,
        "oracle_correlation": corr,
        "mean_d": float(d.mean()),
        "mean_oracle_distance": float(oracle_d.mean()),
    }


@dataclass
class VerifyReport:
    eps_max: float
    roundtrip_mean: float
    chart_ok: bool
    axioms: dict
    continuity: dict
    semantic: dict
    coverage: dict = field(default_factory=dict)
    seed: int = 0
    n_samples: int = 0

    def __post_init__(self):
        for name, v in (("eps_max", self.eps_max), ("roundtrip_mean", self.roundtrip_mean)):
            if not np.isfinite(v) or v < 0:
                raise OutOfRange(f"{name} must be finite and nonnegative, got {v}")
        for key in ("identity_residual", "symmetry_residual", "triangle_residual"):
            if not np.isfinite(self.axioms[key]):
                raise OutOfRange(f"axiom residual {key} is not finite")
        if self.continuity["violations"] < 0:
            raise OutOfRange("violation count cannot be negative")
        for name, frac in self.coverage.items():
            if not (0.0 <= frac <= 1.0):
                raise OutOfRange(f"coverage for {name} out of range: {frac}")

    @property
    def passed(self) -> bool:
        return bool(
            self.chart_ok
            and self.axioms["passed"]
            and self.continuity["violations"] == 0
        )

    def summary_line(self) -> str:
        white = [v for k, v in self.coverage.items() if k.startswith("whitebox")]
        parts = [
            f"status={'PASS' if self.passed else 'FAIL'}",
            f"eps_max={self.eps_max:.6f}",
            f"roundtrip_mean={self.roundtrip_mean:.6f}",
            f"chart={'ok' if self.chart_ok else 'bad'}",
            f"axioms={'pass' if self.axioms['passed'] else 'fail'}",
            f"continuity_violations={self.continuity['violations']}",
            f"collision_rate={self.axioms['collision_rate']:.6f}",
        ]
        if white:
            parts.append(f"coverage_whitebox_mean={np.mean(white):.4f}")
        if "blackbox" in self.coverage:
            parts.append(f"coverage_blackbox={self.coverage['blackbox']:.4f}")
        return "MANIFOLD-VERIFY " + " ".join(parts)

    def to_text(self) -> str:
        lines = [
            "manifold verification report",
            f"  seed: {self.seed}",
            f"  samples: {self.n_samples}",
            "",
            "au round trip",
            f"  mean error: {self.roundtrip_mean:.6f}",
            f"  eps_max: {self.eps_max:.6f}",
            f"  chart: {'ok' if self.chart_ok else CHART_FLAG}",
            "",
            "pseudometric axioms",
        ]
        for key in ("identity_residual", "symmetry_residual", "triangle_residual",
                    "collision_rate"):
            lines.append(f"  {key}: {self.axioms[key]:.3e}")
        lines += [
            f"  passed: {self.axioms['passed']}",
            "",
            "continuity bound",
        ]
        for key in ("n_pairs", "n_degenerate", "violations"):
            lines.append(f"  {key}: {self.continuity[key]}")
        for key in ("max_excess", "ratio_mean", "ratio_median", "ratio_max"):
            lines.append(f"  {key}: {self.continuity[key]:.6f}")
        lines += ["", "semantic continuity"]
        for key, v in self.semantic.items():
            lines.append(f"  {key}: {v}")
        if self.coverage:
            lines += ["", "adversarial coverage"]
            for name, frac in self.coverage.items():
                lines.append(f"  {name}: {frac:.4f}")
        lines += ["", self.summary_line(), ""]
        return "\n".join(lines)


def verify(
    probe: ManifoldProbe,
    ensemble=None,
    thresholds: dict | None = None,
    target_images=None,
    n_pairs: int = 500,
    n_axiom_images: int = 20,
    n_semantic_pairs: int = 200,
    delta: float = 1.0,
    out_path=None,
) -> VerifyReport:
    """Full verification pass; continuity pairs are drawn from the same codes
    used to measure eps_max so the bound stays a theorem."""
    mus = probe.sample_codes()
    roundtrip = au_roundtrip(probe, mus)

    rng = np.random.default_rng(probe.seed + 1)
    n = mus.shape[0]
    idx = np.array([rng.choice(n, size=2, replace=False) for _ in range(n_pairs)])
    pairs = [(mus[i], mus[j]) for i, j in idx]
    continuity = continuity_modulus(probe, pairs, roundtrip["eps_max"])

    axioms = pseudometric_check(
        probe.generate(mus[:n_axiom_images]),
        probe.au_predictor,
        symmetry_tol=probe.symmetry_tol,
        triangle_tol=probe.triangle_tol,
    )
    semantic = semantic_continuity(probe, pairs[:n_semantic_pairs], delta)

    coverage = {}
    if ensemble is not None and thresholds is not None and target_images is not None:
        coverage = adversarial_coverage(probe, mus, ensemble, thresholds, target_images)

    report = VerifyReport(
        eps_max=roundtrip["eps_max"],
        roundtrip_mean=roundtrip["mean_error"],
        chart_ok=roundtrip["chart_ok"],
        axioms=axioms,
        continuity=continuity,
        semantic=semantic,
        coverage=coverage,
        seed=probe.seed,
        n_samples=n,
    )
    if out_path is not None:
        os.makedirs(os.path.dirname(os.fspath(out_path)) or ".", exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
    return report
