"""Command-line entry point.

One executable, eight subcommands covering the pipeline: synthesize a corpus,
pre-train FR models and expression editors, run attack training, build state
sets, evaluate, verify the manifold properties, and render traversal grids.

All relative artifact paths resolve under one workspace root: the GMAA_RUN_DIR
environment variable when set, else the working directory. Every subcommand
writes a frozen config snapshot into its output directory before doing work,
and a single --seed flag threads the root seed into every random stream.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .attack import (
    FREnsemble,
    build_state_set_generated,
    build_state_set_real,
    load_state_set,
    save_state_set,
)
from .au_space import preset
from .config import (
    RunConfig,
    build_run_config,
    parse_kv_file,
    parse_kv_lines,
    section_lines,
    write_snapshot,
)
from .data_io import load_dataset, save_dataset, split_dataset, synthesize_dataset
from .errors import (
    CheckpointLoadError,
    ConfigError,
    ManifoldAttackError,
    MissingState,
    UnknownCommand,
)
from .evaluation import (
    TRAVERSAL_DEFAULT,
    calibrate_far_threshold,
    evaluate,
    impostor_pairs_from_dataset,
    manifold_traverse,
    save_image_grid,
)
from .manifold_verify import ManifoldProbe, verify
from .networks import load_checkpoint, save_checkpoint
from .training import load_editors, pretrain_editors, train, train_fr_models

COMMANDS = (
    "synth-data",
    "train-fr",
    "pretrain-editors",
    "train",
    "make-state-set",
    "attack-eval",
    "verify-manifold",
    "traverse",
)


def _workspace_root() -> str:
    return os.environ.get("GMAA_RUN_DIR") or "."


def _resolve(path) -> str:
    p = os.fspath(path)
    return p if os.path.isabs(p) else os.path.join(_workspace_root(), p)


def _snapshot(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_snapshot(cfg, os.path.join(out_dir, "config.txt"))


def _load_config(args) -> RunConfig:
    kv = {}
    if getattr(args, "config", None):
        kv.update(parse_kv_file(args.config))
    for item in getattr(args, "overrides", None) or []:
        kv.update(parse_kv_lines([item], source="--set"))
    cfg = build_run_config(kv)
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _load_corpus(cfg: RunConfig):
    return load_dataset(
        _resolve(cfg.data.dir), cfg.train.au_config, confidence_min=cfg.data.confidence_min
    )


def _split(cfg: RunConfig, dataset):
    return split_dataset(dataset, cfg.train.holdout_fraction, seed=cfg.seed)


def _fr_role_names(n: int) -> list:
    if n < 2:
        return ["whitebox_0"][:n]
    return [f"whitebox_{i}" for i in range(n - 1)] + ["blackbox"]


def load_fr_ensemble(fr_dir) -> FREnsemble:
    """Load whitebox_*.pt (losses) and blackbox.pt (held out) from a directory."""
    fr_dir = os.fspath(fr_dir)
    if not os.path.isdir(fr_dir):
        raise CheckpointLoadError(f"FR model directory not found: {fr_dir}")
    names = sorted(n for n in os.listdir(fr_dir) if n.startswith("whitebox_") and n.endswith(".pt"))
    whitebox = [load_checkpoint(os.path.join(fr_dir, n), "embedding")[0] for n in names]
    if not whitebox:
        raise CheckpointLoadError(f"no whitebox_*.pt checkpoints in {fr_dir}")
    blackbox = None
    bb_path = os.path.join(fr_dir, "blackbox.pt")
    if os.path.exists(bb_path):
        blackbox, _ = load_checkpoint(bb_path, "embedding")
    return FREnsemble(whitebox, blackbox)


def _generator_path(checkpoint) -> str:
    """Accept a generator.pt file, a step directory, or a whole run directory."""
    ck = _resolve(checkpoint)
    if os.path.isfile(ck):
        return ck
    direct = os.path.join(ck, "generator.pt")
    if os.path.isfile(direct):
        return direct
    steps_dir = os.path.join(ck, "checkpoints")
    if os.path.isdir(steps_dir):
        steps = sorted(n for n in os.listdir(steps_dir) if n.startswith("step_"))
        if steps:
            return os.path.join(steps_dir, steps[-1], "generator.pt")
    raise CheckpointLoadError(f"no generator checkpoint under {ck}")


def _load_generator(checkpoint):
    model, _ = load_checkpoint(_generator_path(checkpoint), "generator")
    return model


def _load_generator_and_predictor(checkpoint):
    g_path = _generator_path(checkpoint)
    g, _ = load_checkpoint(g_path, "generator")
    d_path = os.path.join(os.path.dirname(g_path), "discriminator.pt")
    if not os.path.isfile(d_path):
        raise CheckpointLoadError(f"no discriminator checkpoint beside {g_path}")
    d, _ = load_checkpoint(d_path, "discriminator")
    return g, d


def _pick_base_image(cfg: RunConfig, dataset, identity: int):
    """Most neutral train-split image of the identity (smallest AU norm)."""
    train_ds, _ = _split(cfg, dataset)
    pool = [im for im in train_ds.images if im.identity == identity]
    if not pool:
        raise MissingState(f"train split has no images of identity {identity}")
    return min(pool, key=lambda im: float(np.linalg.norm(im.au.values)))


def _build_target_state_set(cfg: RunConfig, dataset, editors):
    prov = cfg.target.provenance
    if prov == "dir":
        return load_state_set(_resolve(cfg.target.dir))
    if prov == "real":
        train_ds, _ = _split(cfg, dataset)
        return build_state_set_real(
            train_ds, cfg.target.identity, cfg.target.states, cfg.train.au_config,
            per_state=cfg.target.per_state,
        )
    if prov == "generated":
        base = _pick_base_image(cfg, dataset, cfg.target.identity)
        return build_state_set_generated(
            editors["g_exp"], base, cfg.train.au_config, cfg.target.states
        )
    raise ConfigError("target.provenance", f"must be one of generated, real, dir; got {prov!r}")


def _cmd_synth_data(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.data.dir)
    _snapshot(cfg, out)
    ds = synthesize_dataset(
        cfg.data.identities, cfg.data.per_identity, cfg.train.au_config,
        size=cfg.train.image_size, seed=cfg.seed,
    )
    save_dataset(ds, out)
    print(f"synth-data: {len(ds.images)} images of {cfg.data.identities} identities -> {out}")
    return 0


def _cmd_train_fr(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.fr.dir)
    _snapshot(cfg, out)
    train_ds, _ = _split(cfg, _load_corpus(cfg))
    models = train_fr_models(
        train_ds, n_models=cfg.fr.models, steps=cfg.fr.steps, batch_size=cfg.fr.batch_size,
        lr=cfg.fr.lr, embed_dim=cfg.fr.embed_dim, width=cfg.fr.width, seed=cfg.seed,
    )
    for role, model in zip(_fr_role_names(len(models)), models):
        save_checkpoint(os.path.join(out, f"{role}.pt"), model, extra={"role": role})
    print(f"train-fr: {len(models)} models ({len(models) - 1} white-box + held-out) -> {out}")
    return 0


def _cmd_pretrain_editors(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.editors.dir)
    _snapshot(cfg, out)
    train_ds, _ = _split(cfg, _load_corpus(cfg))
    paths = pretrain_editors(cfg.train, train_ds, out)
    print(f"pretrain-editors: {len(paths)} checkpoints -> {out}")
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    run_dir = _resolve(args.run_dir)
    _snapshot(cfg, run_dir)
    ds = _load_corpus(cfg)
    ensemble = load_fr_ensemble(_resolve(cfg.fr.dir))
    editors = load_editors(_resolve(cfg.editors.dir))
    if cfg.train.mode == "maa":
        target = _pick_base_image(cfg, ds, cfg.target.identity)
    else:
        target = _build_target_state_set(cfg, ds, editors)
    train(
        cfg.train, ds, ensemble, target, editors, run_dir,
        resume=args.resume, extra_config_lines=section_lines(cfg),
    )
    print(f"train: {cfg.train.mode} run of {cfg.train.steps} steps -> {run_dir}")
    return 0


def _cmd_make_state_set(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.target.dir)
    _snapshot(cfg, out)
    ds = _load_corpus(cfg)
    if cfg.target.provenance == "generated":
        editors = load_editors(_resolve(cfg.editors.dir))
        sset = _build_target_state_set(cfg, ds, editors)
    else:
        train_ds, _ = _split(cfg, ds)
        sset = build_state_set_real(
            train_ds, cfg.target.identity, cfg.target.states, cfg.train.au_config,
            per_state=cfg.target.per_state,
        )
    save_state_set(sset, out)
    print(f"make-state-set: {len(sset)} states of identity {cfg.target.identity} -> {out}")
    return 0


def _cmd_attack_eval(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.eval.out)
    _snapshot(cfg, out)
    g = _load_generator(cfg.eval.checkpoint)
    _, holdout = _split(cfg, _load_corpus(cfg))
    ensemble = load_fr_ensemble(_resolve(cfg.fr.dir))
    ident = cfg.target.identity
    target_test = [im.image for im in holdout.images if im.identity == ident]
    if not target_test:
        raise MissingState(f"holdout split has no images of target identity {ident}")
    report = evaluate(
        g, ensemble, holdout, target_test, cfg.train.au_config,
        seed=cfg.seed, n_adv=cfg.eval.n_adv, far_target=cfg.eval.far_target,
        out_dir=out, target_identity=ident,
    )
    for name in sorted(report.asr):
        print(
            f"attack-eval: {name} asr={report.asr[name]:.2f}% "
            f"clean={report.clean_asr[name]:.2f}% confidence={report.confidence[name]:.2f}"
        )
    print(f"attack-eval: report -> {out}")
    return 0


def _cmd_verify_manifold(args, cfg: RunConfig) -> int:
    out = _resolve(cfg.verify.out)
    _snapshot(cfg, out)
    g, d = _load_generator_and_predictor(cfg.verify.checkpoint)
    _, holdout = _split(cfg, _load_corpus(cfg))
    probe = ManifoldProbe(
        generator=g, au_predictor=d, base_image=holdout.images[0].image,
        au_dim=cfg.train.au_config.dimension, sample_count=cfg.verify.samples, seed=cfg.seed,
    )
    ensemble = thresholds = target_images = None
    if args.coverage:
        ensemble = load_fr_ensemble(_resolve(cfg.fr.dir))
        rng = np.random.default_rng(cfg.seed)
        pairs = impostor_pairs_from_dataset(holdout, rng, count=max(200, 2 * cfg.eval.n_adv))
        thresholds = {
            name: calibrate_far_threshold(m, pairs, cfg.eval.far_target)
            for name, m in ensemble.all_models()
        }
        target_images = [im.image for im in holdout.images if im.identity == cfg.target.identity]
        if not target_images:
            raise MissingState(
                f"holdout split has no images of target identity {cfg.target.identity}"
            )
    report = verify(
        probe, ensemble=ensemble, thresholds=thresholds, target_images=target_images,
        n_pairs=cfg.verify.pairs, n_axiom_images=cfg.verify.axiom_images,
        n_semantic_pairs=cfg.verify.semantic_pairs, delta=cfg.verify.delta,
        out_path=os.path.join(out, "verify.txt"),
    )
    print(report.summary_line())
    print(f"verify-manifold: report -> {os.path.join(out, 'verify.txt')}")
    return 0 if report.passed else 3


def _cmd_traverse(args, cfg: RunConfig) -> int:
    out = _resolve(args.out)
    _snapshot(cfg, out)
    g = _load_generator(cfg.eval.checkpoint)
    _, holdout = _split(cfg, _load_corpus(cfg))
    names = [n.strip() for n in args.path.split(",")] if args.path else list(TRAVERSAL_DEFAULT)
    au_path = [preset(n, cfg.train.au_config) for n in names]
    frames = manifold_traverse(g, holdout.images[0].image, au_path, args.steps_per_segment)
    grid_path = os.path.join(out, "traversal.png")
    save_image_grid(frames, grid_path)
    print(f"traverse: {len(frames)} frames along {'-'.join(names)} -> {grid_path}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int, help="root seed for all random streams")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmaa",
        description="Adversarial-manifold attack pipeline on synthetic faces.",
    )
    sub = parser.add_subparsers(dest="command")

    specs = {
        "synth-data": (_cmd_synth_data, "render a labeled synthetic face corpus"),
        "train-fr": (_cmd_train_fr, "train the face recognition ensemble"),
        "pretrain-editors": (_cmd_pretrain_editors, "pre-train expression editors"),
        "train": (_cmd_train, "run MAA/GMAA attack training"),
        "make-state-set": (_cmd_make_state_set, "build a target expression state set"),
        "attack-eval": (_cmd_attack_eval, "measure attack success at calibrated FAR"),
        "verify-manifold": (_cmd_verify_manifold, "check metric and continuity properties"),
        "traverse": (_cmd_traverse, "render a manifold traversal grid"),
    }
    parsers = {}
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        p.set_defaults(func=fn)
        parsers[name] = p

    parsers["train"].add_argument("--run-dir", default="run", help="output run directory")
    parsers["train"].add_argument(
        "--resume", action="store_true", help="continue from the latest checkpoint"
    )
    parsers["verify-manifold"].add_argument(
        "--coverage", action="store_true",
        help="also measure adversarial coverage against the FR ensemble",
    )
    parsers["traverse"].add_argument(
        "--path", help="comma-separated expression names (default: built-in path)"
    )
    parsers["traverse"].add_argument(
        "--steps-per-segment", type=int, default=8, help="frames per path segment"
    )
    parsers["traverse"].add_argument("--out", default="traverse", help="output directory")
    return parser


def run(argv=None) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    head = next((a for a in argv if not a.startswith("-")), None)
    if head is not None and head not in COMMANDS:
        err = UnknownCommand(f"unknown subcommand {head!r}; choose from: {', '.join(COMMANDS)}")
        print(f"gmaa: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = _load_config(args)
        return int(args.func(args, cfg) or 0)
    except ManifoldAttackError as exc:
        print(f"gmaa {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
