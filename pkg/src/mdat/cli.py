"""Command line: ``gen``, ``train``, ``eval``, ``curve`` and ``selfcheck``.

Training and evaluation read an optional ``key=value`` config file; explicit
flags override it, and the effective configuration is printed and written
next to the outputs as ``config.txt``.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

from . import evalkit, selfcheck
from .episodes import DatasetError, generate_synthetic, load_dataset, quantize, save_dataset
from .trainer import (CheckpointError, TrainConfig, TrainingError, config_from_pairs, config_text,
                      load_checkpoint, parse_pairs, train)


@dataclass(frozen=True)
class EvalConfig:
    eval_epsilons: tuple[float, ...] = evalkit.DEFAULT_EPSILONS
    eval_betas: tuple[float, ...] = evalkit.DEFAULT_BETAS
    eval_episodes: int = 300
    eval_seed: int = 0
    eval_attack: str = "train"  # "train" follows the checkpoint's training attack
    eval_split: str = "test"
    curve_beta_min: float = 0.0
    curve_beta_max: float = 2.0
    curve_step: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.eval_attack not in ("train", "fgsm", "pgd"):
            raise ValueError(f"eval_attack must be train, fgsm or pgd, got {self.eval_attack!r}")
        if self.eval_episodes <= 0 or self.workers <= 0:
            raise ValueError("eval_episodes and workers must be positive")
        if not self.eval_epsilons:
            raise ValueError("eval_epsilons must not be empty")


FLAG_ALIASES = {"lam": "--lambda", "episodes_per_epoch": "--episodes", "base_lr": "--lr"}


def _flag(name: str) -> str:
    return FLAG_ALIASES.get(name, "--" + name.replace("_", "-"))


def _add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    group = parser.add_argument_group(f"{cls.__name__} fields (override the config file)")
    for f in dataclasses.fields(cls):
        default = config_text(cls()).splitlines()[[g.name for g in dataclasses.fields(cls)].index(f.name)]
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="V",
                           help=f"default: {default.split('=', 1)[1]}")


def _overrides(args, cls) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            out[f.name] = v
    return out


def load_run_config(path, train_over: dict[str, str], eval_over: dict[str, str]) -> tuple[TrainConfig, EvalConfig]:
    """Defaults, then the config file, then flag overrides."""
    file_pairs: dict[str, str] = {}
    if path is not None:
        text = Path(path).read_text()
        file_pairs = parse_pairs(text, str(path))
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        eval_keys = {f.name for f in dataclasses.fields(EvalConfig)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            key = line.split("=", 1)[0].strip() if line else ""
            if key and key not in train_keys | eval_keys:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    tpairs = {k: v for k, v in file_pairs.items() if k in train_keys} | train_over
    epairs = {k: v for k, v in file_pairs.items() if k not in train_keys} | eval_over
    return config_from_pairs(TrainConfig, tpairs), config_from_pairs(EvalConfig, epairs)


def run_config_text(tcfg: TrainConfig, ecfg: EvalConfig) -> str:
    return config_text(tcfg) + config_text(ecfg)


def _echo(text: str, out_dir: Path) -> None:
    print(text, end="")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(text)


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.classes < 2 * args.way:
        print(f"error: {args.classes} classes cannot give class-disjoint splits for {args.way}-way episodes "
              f"(need at least {2 * args.way})", file=sys.stderr)
        return 2
    ds = quantize(generate_synthetic(args.classes, args.per_class, args.res, args.seed, n_way=args.way))
    manifest = save_dataset(ds, args.out)
    counts = ds.counts()
    print(f"wrote {manifest} ({counts['train']}/{counts['val']}/{counts['test']} train/val/test classes)")
    return 0


def cmd_train(args) -> int:
    tcfg, ecfg = load_run_config(args.config, _overrides(args, TrainConfig), _overrides(args, EvalConfig))
    out = Path(args.out)
    _echo(run_config_text(tcfg, ecfg), out)
    dataset = load_dataset(args.data)
    resume = best = None
    if args.resume:
        resume = load_checkpoint(out / "last.ckpt")
        if (out / "best.ckpt").exists():
            best = load_checkpoint(out / "best.ckpt")

    def progress(epoch, i, res):
        if args.verbose and i % 50 == 0:
            print(f"epoch {epoch} episode {i} loss {res.loss:.4f} eps {res.eps:.4f}", flush=True)

    result = train(tcfg, dataset, out, resume=resume, best=best, progress=progress)
    for m in result.metrics:
        print(m.line())
    print(f"best epoch {result.final.best_epoch} val_acc_clean {result.final.best_val_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, ecfg = load_run_config(args.config, {}, _overrides(args, EvalConfig))
    out = Path(args.out)
    _echo(config_text(ckpt.config) + config_text(ecfg), out.parent)
    dataset = load_dataset(args.data)
    attack = None if ecfg.eval_attack == "train" else ecfg.eval_attack
    report = evalkit.evaluate(ckpt, dataset, ecfg.eval_epsilons, attack, ecfg.eval_episodes, ecfg.eval_betas,
                              ecfg.eval_seed, ecfg.workers, ecfg.eval_split, method=args.method)
    evalkit.write_report(report, out)
    print(evalkit.report_text(report), end="")
    if args.curve:
        for eps in sorted(report.acc_adv):
            series = evalkit.f_beta_curve(report.acc_clean, report.acc_adv[eps], ecfg.curve_beta_min,
                                          ecfg.curve_beta_max, ecfg.curve_step)
            path = out.with_name(f"{out.stem}.curve_eps{eps!r}.csv")
            evalkit.write_curve(series, path)
            print(f"wrote {path}")
    return 0


def cmd_curve(args) -> int:
    if args.report is not None:
        report = evalkit.read_report(args.report)
        eps = max(report.acc_adv) if args.epsilon is None else args.epsilon
        if eps not in report.acc_adv:
            print(f"error: epsilon {eps} not in {args.report}", file=sys.stderr)
            return 2
        clean, adv = report.acc_clean, report.acc_adv[eps]
    elif args.clean is not None and args.adv is not None:
        clean, adv = args.clean, args.adv
    else:
        print("error: give --report or both --clean and --adv", file=sys.stderr)
        return 2
    series = evalkit.f_beta_curve(clean, adv, args.beta_min, args.beta_max, args.step)
    if args.out:
        evalkit.write_curve(series, args.out)
    else:
        sys.stdout.write(evalkit.CURVE_HEADER + "\n" + "".join(f"{b!r},{v!r}\n" for b, v in series))
    return 0


def cmd_selfcheck(args) -> int:
    results = selfcheck.run_all(verbose=True)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=20, help="number of classes (default: 20)")
    p.add_argument("--per-class", type=int, default=60, help="images per class (default: 60)")
    p.add_argument("--res", type=int, default=32, help="image side in pixels (default: 32)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--way", type=int, default=5, help="episode way the splits must support (default: 5)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="episodic (adversarial) training")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--config", default=None, help="key=value config file (default: none)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt (default: off)")
    p.add_argument("--verbose", action="store_true", help="print progress every 50 episodes (default: off)")
    _add_config_flags(p, TrainConfig)
    _add_config_flags(p, EvalConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean/adversarial accuracy and F-beta on test episodes")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="report csv path")
    p.add_argument("--config", default=None, help="key=value config file (default: none)")
    p.add_argument("--curve", action="store_true", help="also write F-beta curves per epsilon (default: off)")
    p.add_argument("--method", default=None, help="method label in the report (default: from the checkpoint)")
    _add_config_flags(p, EvalConfig)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="F-beta over a range of beta")
    p.add_argument("--report", default=None, help="read accuracies from an eval report (default: none)")
    p.add_argument("--epsilon", type=float, default=None, help="report row to use (default: largest epsilon)")
    p.add_argument("--clean", type=float, default=None, help="clean accuracy (default: none)")
    p.add_argument("--adv", type=float, default=None, help="adversarial accuracy (default: none)")
    p.add_argument("--beta-min", type=float, default=0.0, help="default: 0")
    p.add_argument("--beta-max", type=float, default=2.0, help="default: 2")
    p.add_argument("--step", type=float, default=0.05, help="default: 0.05")
    p.add_argument("--out", default=None, help="curve csv path (default: stdout)")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("selfcheck", help="run the built-in correctness checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, DatasetError, CheckpointError, TrainingError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
