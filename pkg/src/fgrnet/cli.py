"""``fgrnet`` command line: gen-data, train, eval, explain, perturb, attack, bench.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (missing checkpoint, unreadable image, ...). Failures print
a single ``fgrnet: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .exceptions import ConfigError, FGRNetError
from .imageio import read_ppm, render_overlay, write_ppm, write_saliency
from .interpret import GRADCAM, GRADIENT, OCCLUSION, gradcam, gradient_saliency, occlusion, timing_benchmark, timing_table
from .metrics import evaluate_predictions
from .model import build_model, load_checkpoint, save_checkpoint
from .robustness import AttackConfig, default_specs, pgd_attack, robustness_table, robustness_report
from .synthdata import CLASS_NAMES, SyntheticDataset, load_dataset, make_dataset, save_dataset
from .training import predict, predict_logits, train

COMMANDS = ("gen-data", "train", "eval", "explain", "perturb", "attack", "bench")
METHODS = {"gradient": GRADIENT, "gradcam": GRADCAM, "occlusion": OCCLUSION}
CHECKPOINT = "checkpoint.fgr"
RESOLVED_CONFIG = "config.{command}.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fgrnet", description="Fundus gradability network: train, evaluate, explain, probe.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name: str, help_text: str, data=False, checkpoint=False, image=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="output directory (override [run] out)")
        if data:
            p.add_argument("--data", help="dataset directory (override [data] path)")
        if checkpoint:
            p.add_argument("--checkpoint", help=f"checkpoint file (default <out>/{CHECKPOINT})")
        if image:
            p.add_argument("--image", help="P6 image; defaults to a test image from --data")
            p.add_argument("--index", type=int, help="test-split index when reading from --data")
        return p

    p = add("gen-data", "generate a synthetic dataset")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--scheme", choices=sorted(CLASS_NAMES), help="label scheme")

    p = add("train", "train a model on a dataset", data=True)
    p.add_argument("--epochs", type=int)

    add("eval", "metrics on the test split", data=True, checkpoint=True)

    p = add("explain", "saliency map for one image", data=True, checkpoint=True, image=True)
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: predicted)")
    p.add_argument("--patch", type=int, help="occlusion patch size")

    p = add("perturb", "robustness table under the six perturbations", data=True, checkpoint=True)
    p.add_argument("--n", type=int, help="number of test images")

    p = add("attack", "targeted PGD on one image", data=True, checkpoint=True, image=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--class", dest="class_index", type=int, help="target class (default: not the predicted one)")

    p = add("bench", "latency of prediction and the three attribution methods", data=True, checkpoint=True,
            image=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--patch", type=int, help="occlusion patch size")
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        ("run", "seed"): args.seed,
        ("run", "out"): args.out,
        ("data", "path"): getattr(args, "data", None),
        ("data", "scheme"): getattr(args, "scheme", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("explain", "method"): getattr(args, "method", None),
        ("bench", "runs"): getattr(args, "runs", None),
        ("attack", "steps"): getattr(args, "steps", None),
        ("attack", "radius"): getattr(args, "radius", None),
    }
    if args.command == "gen-data":
        overrides[("data", "n")] = args.n
    if args.command == "perturb":
        overrides[("perturb", "n")] = args.n
    if args.command == "explain":
        overrides[("explain", "class")] = args.class_index
        overrides[("explain", "patch")] = args.patch
        overrides[("explain", "index")] = args.index
    if args.command == "attack":
        overrides[("attack", "target")] = args.class_index
        overrides[("attack", "index")] = args.index
    if args.command == "bench":
        overrides[("explain", "patch")] = args.patch
        overrides[("bench", "index")] = args.index
    for (section, key), value in overrides.items():
        if value is not None:
            cfg.set(section, key, value)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig) -> SyntheticDataset:
    path = cfg["data"]["path"]
    if not path:
        raise ConfigError("no dataset: pass --data or set [data] path")
    return load_dataset(path)


def _checkpoint(args, cfg: RunConfig, out: Path):
    path = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    if not path.exists():
        raise FGRNetError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    cfg.absorb_model(params.config)
    return params


def _single_image(args, cfg: RunConfig, section: str) -> tuple[np.ndarray, str]:
    if args.image:
        return read_ppm(args.image), Path(args.image).stem
    ds = _dataset(cfg)
    i = cfg[section]["index"]
    if not 0 <= i < len(ds.test):
        raise FGRNetError(f"test index {i} outside [0, {len(ds.test)})")
    return ds.test[i].image, f"test_{i:05d}"


def _check_image(params, image: np.ndarray):
    c = params.config
    if image.shape != (c.in_channels, c.input_size, c.input_size):
        raise FGRNetError(f"image shape {image.shape} does not match the model input "
                          f"{(c.in_channels, c.input_size, c.input_size)}")


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> None:
    d = cfg["data"]
    size = cfg["model"]["input_size"] or cfg.model_config().input_size
    ds = make_dataset(d["n"], d["scheme"], cfg["run"]["seed"], size=size, test_fraction=d["test_fraction"])
    save_dataset(ds, out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test images to {out}")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    cfg.set("model", "num_classes", len(CLASS_NAMES[ds.scheme]))
    mcfg = cfg.model_config()
    X, y = SyntheticDataset.arrays(ds.train)
    params, history = train(build_model(mcfg, cfg["run"]["seed"]), X, y, cfg.train_config())
    save_checkpoint(params, out / CHECKPOINT)
    (out / "history.tsv").write_text(history.to_table())
    print(f"final loss {history.epochs[-1].loss if history.epochs else history.initial_loss:.6f} "
          f"(initial {history.initial_loss:.6f}); checkpoint {out / CHECKPOINT}")


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    params = _checkpoint(args, cfg, out)
    ds = _dataset(cfg)
    X, y = SyntheticDataset.arrays(ds.test)
    report = evaluate_predictions(predict(params, X), y, params.config.num_classes, ds.class_names)
    (out / "metrics.txt").write_text(report.to_text())
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_text(), end="")


def cmd_explain(args, cfg: RunConfig, out: Path) -> None:
    params = _checkpoint(args, cfg, out)
    image, stem = _single_image(args, cfg, "explain")
    _check_image(params, image)
    e = cfg["explain"]
    cls = e["class"] if e["class"] >= 0 else int(predict_logits(params, image[None]).argmax())
    method = e["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    if method == "gradient":
        smap = gradient_saliency(params, image, cls)
    elif method == "gradcam":
        smap = gradcam(params, image, cls, rectify=e["rectify"], layer=e["layer"])
    else:
        smap = occlusion(params, image, cls, patch=e["patch"] or None, stride=e["stride"] or None,
                         baseline=e["baseline"])
    write_saliency(out / f"{stem}_{method}.sal", smap)
    polarity = "signed" if smap.signed else "magnitude"
    write_ppm(out / f"{stem}_{method}_overlay.ppm", render_overlay(image, smap, polarity))
    print(f"{smap.method} map for class {cls} written to {out}")


def cmd_perturb(args, cfg: RunConfig, out: Path) -> None:
    params = _checkpoint(args, cfg, out)
    ds = _dataset(cfg)
    X, y = SyntheticDataset.arrays(ds.test)
    rows = robustness_report(params, X, y, default_specs(cfg["run"]["seed"]), n=cfg["perturb"]["n"],
                             class_names=ds.class_names)
    table = robustness_table(rows)
    (out / "robustness.tsv").write_text(table)
    print(table, end="")


def cmd_attack(args, cfg: RunConfig, out: Path) -> None:
    params = _checkpoint(args, cfg, out)
    image, stem = _single_image(args, cfg, "attack")
    _check_image(params, image)
    a = cfg["attack"]
    target = a["target"]
    if target < 0:
        target = (int(predict_logits(params, image[None]).argmax()) + 1) % params.config.num_classes
    result = pgd_attack(params, image, AttackConfig(steps=a["steps"], step_size=a["step_size"], radius=a["radius"],
                                                    target_class=target, random_start=a["random_start"],
                                                    seed=cfg["run"]["seed"]))
    write_ppm(out / f"{stem}_adversarial.ppm", result.adversarial)
    lines = ["step\ttarget_probability\tlinf"]
    lines += [f"{i}\t{p:.6f}\t{d:.6f}" for i, (p, d) in enumerate(zip(result.probabilities, result.iterates_linf))]
    (out / f"{stem}_attack.tsv").write_text("\n".join(lines) + "\n")
    print(f"target class {target}: probability {result.probabilities[0]:.4f} -> {result.probabilities[-1]:.4f}")


def cmd_bench(args, cfg: RunConfig, out: Path) -> None:
    params = _checkpoint(args, cfg, out)
    image, _ = _single_image(args, cfg, "bench")
    _check_image(params, image)
    patch = cfg["explain"]["patch"] or None
    reports = timing_benchmark(params, image, runs=cfg["bench"]["runs"], occlusion_kw={"patch": patch})
    table = timing_table(reports)
    (out / "timing.tsv").write_text(table)
    print(table, end="")


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
    "perturb": cmd_perturb, "attack": cmd_attack, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
        cfg = _resolve(args)
    except UsageError as exc:
        print(f"fgrnet: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"fgrnet: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _out_dir(cfg)
        HANDLERS[args.command](args, cfg, out)
        cfg.write(out / RESOLVED_CONFIG.format(command=args.command))
    except ConfigError as exc:
        print(f"fgrnet: error: {exc}", file=sys.stderr)
        return 1
    except (FGRNetError, ValueError, OSError, FloatingPointError) as exc:
        print(f"fgrnet: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
