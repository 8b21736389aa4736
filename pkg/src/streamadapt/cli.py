"""Command-line surface: ``gen``, ``pretrain``, ``adapt``, ``eval`` and ``selftest``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` text) and
repeated ``--set key=value`` overrides; the ``CODEPS_SEED`` environment
variable overrides the seed last.  Reports are written as one JSON record
per line; the adaptation run log holds one record per step.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ._validation import ContractViolation, InvalidInputError
from .config import load_config
from .data import STOCK_DOMAINS, generate_domain, load_sequence, render_sequence, stock_domain
from .engine import OnlineAdapter, evaluate_model, split_point
from .gradcheck import TOY_CONFIG, gradient_suite
from .imaging import CameraIntrinsics
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pretrain import SourcePretrainer
from .replay import TargetBuffer, eviction_index, rcs_probabilities, redundancy_scores, save_target_buffer

log = logging.getLogger("streamadapt")

# Stock corpus written by ``gen --stock``: (directory, domain, overrides).
STOCK_CORPUS = (
    ("source-train", "domain-urban-a", {"n_frames": 402}),
    ("source-val", "domain-urban-a", {"n_frames": 62, "layout_seed": 101}),
    ("target", "domain-urban-b", {"n_frames": 202}),
)


class CliError(Exception):
    """A user-facing failure reported as one line on stderr with exit code 1."""


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="streamadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render synthetic domain sequences to disk")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domain", choices=sorted(STOCK_DOMAINS), help="render one stock domain")
    p.add_argument("--frames", type=int, help="sequence length")
    p.add_argument("--layout-seed", type=int, help="scene layout seed")
    p.add_argument("--stock", action="store_true",
                   help="write the stock source-train, source-val and target sequences under --out")

    p = sub.add_parser("pretrain", help="supervised training on a labelled source sequence")
    _add_common(p)
    p.add_argument("--source", help="labelled source sequence directory")
    p.add_argument("--source-val", help="labelled source validation directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--steps", type=int, help="number of optimizer steps")

    p = sub.add_parser("adapt", help="online adaptation on one or more target sequences")
    _add_common(p)
    p.add_argument("--checkpoint", help="pretrained checkpoint directory")
    p.add_argument("--source", help="labelled source sequence directory")
    p.add_argument("--source-val", help="labelled source validation directory")
    p.add_argument("--target", action="append", default=None,
                   help="target sequence directory; repeat for a multi-domain schedule")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--debug-mix", action="store_true", help="write every mixed image and its pseudo-labels")

    p = sub.add_parser("eval", help="frozen evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--target", action="append", default=None,
                   help="target sequence; its held-out part is evaluated (protocol 2)")
    p.add_argument("--source-val", help="source validation directory (protocol 3)")
    p.add_argument("--out", help="report file (JSON lines); printed to stdout either way")

    p = sub.add_parser("selftest", help="gradient checks and oracle suites")
    _add_common(p)
    p.add_argument("--coords", type=int, default=200, help="coordinates per gradient check")
    return parser


def _config(args, **flag_keys):
    cfg = load_config(args.config, args.overrides)
    for key, value in flag_keys.items():
        if value is not None:
            setattr(cfg, key, value)
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return cfg


def _require(value, what):
    if not value:
        raise CliError(f"missing {what}")
    return value


def _sequence(path, what):
    path = Path(_require(path, what))
    if not path.is_dir():
        raise CliError(f"{what} directory not found: {path}")
    return load_sequence(path)


def _checkpoint(path):
    path = Path(_require(path, "--checkpoint"))
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None


def _emit(records, out=None):
    lines = [json.dumps(r, sort_keys=True) for r in records]
    for line in lines:
        print(line)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text("".join(line + "\n" for line in lines))


def cmd_gen(args):
    _config(args)
    out = Path(args.out)
    if args.stock:
        jobs = [(out / d, stock_domain(name, **changes)) for d, name, changes in STOCK_CORPUS]
    else:
        spec = stock_domain(_require(args.domain, "--domain (or --stock)"))
        changes = {"n_frames": args.frames, "layout_seed": args.layout_seed}
        jobs = [(out, spec.replace(**{k: v for k, v in changes.items() if v is not None}))]
    for path, spec in jobs:
        t0 = time.time()
        generate_domain(spec, path)
        log.info("wrote %s (%s, %d frames) in %.1f s", path, spec.name, spec.n_frames, time.time() - t0)
    return 0


def _val_extra(report):
    return {"val_miou": repr(report.miou), "val_pq": repr(report.pq), "val_frames": report.n_frames}


def cmd_pretrain(args):
    cfg = _config(args, source=args.source, source_val=args.source_val, pretrain_steps=args.steps)
    source = _sequence(cfg.source, "--source")
    samples = list(source)
    h, w = samples[0].shape
    est = SourcePretrainer(ModelConfig(height=h, width=w), cfg.pretrain_steps, cfg.pretrain_batch,
                           cfg.pretrain_lr, cfg.loss_weights(), cfg.color_jitter, cfg.seed)
    t0 = time.time()
    est.fit(samples)
    log.info("pretrained %d parameters in %.1f s", est.model_.n_parameters, time.time() - t0)
    extra = {"steps": cfg.pretrain_steps}
    records = []
    if cfg.source_val:
        report = evaluate_model(est.model_, list(_sequence(cfg.source_val, "--source-val")), 3,
                                "source-val", cfg.adaptation_config(), "pretrained")
        extra.update(_val_extra(report))
        records.append(report.to_record())
    save_checkpoint(est.model_, args.out, extra)
    print(f"checkpoint {args.out} hash {est.model_.parameter_hash()}")
    _emit(records)
    return 0


def cmd_adapt(args):
    cfg = _config(args, source=args.source, source_val=args.source_val, checkpoint=args.checkpoint,
                  output_dir=args.out, targets=tuple(args.target) if args.target else None)
    if args.debug_mix:
        cfg.debug_mix = True
    model, _ = _checkpoint(cfg.checkpoint)
    source = list(_sequence(cfg.source, "--source"))
    source_val = list(_sequence(cfg.source_val, "--source-val"))
    targets = [_sequence(t, "--target") for t in _require(cfg.targets, "--target")]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    adapter = OnlineAdapter(model, cfg.adaptation_config(), out / "debug" if cfg.debug_mix else None)
    adapter.fit(source)
    t0 = time.time()
    names = [t.path.name for t in targets]
    if len(set(names)) < len(names):
        names = [f"{i}-{n}" for i, n in enumerate(names)]
    reports = adapter.run_multi_domain(list(zip(names, targets)), source_val, out / "checkpoints")
    log.info("adapted %d steps in %.1f s", adapter.n_steps_, time.time() - t0)
    with open(out / "run_log.jsonl", "w") as fh:
        for record in adapter.log_:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    save_checkpoint(adapter.model_, out / "final", {"steps": adapter.n_steps_})
    save_target_buffer(adapter.target_buffer_, out / "target_buffer.txt")
    _emit([r.to_record() for r in reports], out / "reports.jsonl")
    print(f"final hash {adapter.parameter_hash()}")
    return 0


def cmd_eval(args):
    cfg = _config(args, checkpoint=args.checkpoint, source_val=args.source_val,
                  targets=tuple(args.target) if args.target else None)
    model, _ = _checkpoint(cfg.checkpoint)
    acfg = cfg.adaptation_config()
    if not cfg.targets and not cfg.source_val:
        raise CliError("nothing to evaluate: pass --target and/or --source-val")
    records = []
    for t in cfg.targets:
        seq = _sequence(t, "--target")
        start = split_point(len(seq), acfg.split)
        held = [seq[k] for k in range(start, len(seq))]
        if not held:
            raise CliError(f"{t}: no frames after the adaptation split")
        records.append(evaluate_model(model, held, 2, Path(t).name, acfg).to_record())
    if cfg.source_val:
        records.append(evaluate_model(model, list(_sequence(cfg.source_val, "--source-val")), 3,
                                      Path(cfg.source_val).name, acfg).to_record())
    _emit(records, args.out)
    print(f"hash {model.parameter_hash()}")
    return 0


def cmd_selftest(args):
    cfg = _config(args)
    spec = stock_domain("domain-urban-a", n_frames=6, height=TOY_CONFIG.height, width=TOY_CONFIG.width,
                        intrinsics=CameraIntrinsics(20.0, 20.0, 11.5, 7.5))
    samples = render_sequence(spec).samples(quantized=False)[:2]
    failures = []
    worst = 0.0
    for report in gradient_suite(samples, args.coords, cfg.loss_weights(), cfg.seed):
        print(report)
        worst = max(worst, report.max_rel_error)
        if not report.max_rel_error < 1e-4:
            failures.append(f"gradient check {report.loss}")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(100):
        n = int(rng.integers(1, 33))
        feats = list(rng.normal(size=(n, 4)))
        scores = redundancy_scores(np.array(feats))
        fast = eviction_index(TargetBuffer(n, list(range(n)), feats))
        if scores[fast] < scores.max() - 1e-9:
            failures.append("eviction oracle")
            break
    p = rcs_probabilities(np.array([0.6, 0.3, 0.1]), 0.1)
    q = np.exp(np.array([0.4, 0.7, 0.9]) / 0.1)
    if not np.allclose(p, q / q.sum(), rtol=1e-12):
        failures.append("rcs closed form")
    print(f"max gradient-check relative error {worst:.3e}")
    if failures:
        print("selftest FAILED: " + ", ".join(failures))
        return 1
    print("selftest passed")
    return 0


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "selftest": cmd_selftest}


def cli_main(argv=None):
    """Run one subcommand; returns the process exit code (argparse exits 2 on usage errors)."""
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, InvalidInputError, ContractViolation, FileNotFoundError, OSError) as exc:
        print(f"streamadapt {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


__all__ = ["build_parser", "cli_main", "main"]
