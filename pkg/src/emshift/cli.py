"""Command-line entry point: ``emshift {synth,pretrain,em,eval,sweep}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig
from .em_trainer import EmHistory, write_iteration_labels
from .errors import CapacityError, DomainError, PreconditionError
from .evalkit import SWEEP_FIELDS, sensitivity_sweep, write_metrics_csv, write_overlay_pgm
from .raster import write_pgm
from .segmodel import load_model, predict, save_model
from .synth import load_scene, make_scene, save_scene

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _log(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def load_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    text = Path(args.config).read_text() if args.config else ""
    if args.set:
        text += "\n" + "\n".join(args.set)
    return RunConfig.from_text(text, **overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = load_config(args)
    scene = make_scene(cfg.scene_spec())
    out = _out_dir(args)
    paths = save_scene(scene, out)
    (out / "config.txt").write_text(cfg.to_text())
    h, w, c = scene.features.values.shape
    print(f"scene {h}x{w}x{c}, {len(scene.truth)} lines, "
          f"truth length {sum(l.length for l in scene.truth):.1f}")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    scene = load_scene(args.scene)
    out = _out_dir(args)
    model, curve = pipeline.pretrain(scene, cfg, log=_log(args))
    save_model(out / "pretrained.segm", model)
    curve.to_csv(out / "pretrain_curve.csv")
    print(f"best validation dice {-min(curve.val_loss):.4f} after {len(curve)} epochs")
    return EXIT_OK


def cmd_em(args) -> int:
    cfg = load_config(args)
    scene = load_scene(args.scene)
    out = _out_dir(args)
    pretrained = load_model(args.pretrained) if args.pretrained else None
    hist_csv = out / "em_history.csv"
    EmHistory().to_csv(hist_csv)  # header first, then one block per finished iteration

    def flush(hist, it):
        hist.append_csv(hist_csv, it)
        write_iteration_labels(out, it, cfg.resolution)
        it.curve.to_csv(out / f"curve_iter{it.iteration:02d}.csv")

    model, hist = pipeline.run_em(scene, cfg, log=_log(args), pretrained=pretrained,
                                  on_iteration=flush)
    save_model(out / "em.segm", model)
    if pretrained is None:
        save_model(out / "pretrained.segm", hist.pretrained)
        hist.pretrain_curve.to_csv(out / "pretrain_curve.csv")
    labels = hist.iterations[-1].labels if hist.iterations else []
    h, w = scene.features.values.shape[:2]
    write_overlay_pgm(out / "labels_overlay.pgm", (h, w), truth=scene.truth,
                      noisy=scene.noisy, inferred=labels)
    print(f"{len(hist)} EM iterations ({hist.stopped or 'done'})")
    if hist.initial_label_dist is not None and hist.iterations:
        print(f"mean label distance {hist.initial_label_dist:.3f} -> "
              f"{hist.iterations[-1].mean_label_dist:.3f}")
    return EXIT_OK


def _parse_model_arg(text):
    name, sep, path = text.partition("=")
    if not sep:
        path = text
        name = "oracle" if text == "oracle" else Path(text).stem
    return name, path


def cmd_eval(args) -> int:
    cfg = load_config(args)
    scene = load_scene(args.scene)
    out = _out_dir(args)
    rows = []
    for spec in args.model:
        name, path = _parse_model_arg(spec)
        if path == "oracle":
            prob = pipeline.truth_prob(scene, cfg)
        else:
            prob = predict(load_model(path), scene.features)
        m, s = pipeline.evaluate_prob(prob, scene, cfg)
        rows.append((name, m))
        write_pgm(out / f"prediction_{name}.pgm", prob, lo=0.0, hi=1.0)
        print(f"{name}: P {s.precision:.3f} R {s.recall:.3f} F1 {s.f1:.3f} "
              f"(tp {m.tp} fp {m.fp} fn {m.fn})")
    write_metrics_csv(out / "metrics.csv", rows)
    return EXIT_OK


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    scene = load_scene(args.scene)
    out = _out_dir(args)
    rows = sensitivity_sweep(scene, _floats(args.eps), _ints(args.k), cfg,
                             out_csv=out / "sweep.csv", log=_log(args))
    for r in rows:
        print(" ".join(f"{k}={r[k]:.4g}" if isinstance(r[k], float) else f"{k}={r[k]}"
                       for k in SWEEP_FIELDS))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress output")

    p = argparse.ArgumentParser(prog="emshift", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="train on the noisy labels")
    s.add_argument("scene", help="scene directory written by synth")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("em", parents=[common], help="run the EM label-location refinement")
    s.add_argument("scene")
    s.add_argument("--pretrained", help="SEGM1 checkpoint; pre-trains when omitted")
    s.set_defaults(func=cmd_em)

    s = sub.add_parser("eval", parents=[common], help="score models on the test half")
    s.add_argument("scene")
    s.add_argument("--model", action="append", required=True,
                   help="[name=]checkpoint, or 'oracle' (repeatable)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="epsilon x K sensitivity sweep")
    s.add_argument("scene")
    s.add_argument("--eps", default="0.01,0.05,0.1,0.2")
    s.add_argument("--k", default="5,19")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, PreconditionError, CapacityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
