"""Command-line entry point: ``iqvq <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines) and
repeated ``--set key=value`` overrides; explicit flags win over both. The
resolved configuration is echoed to ``config.txt`` in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as EX
from .checkpoint import Checkpoint, CheckpointError
from .corpus import gen_corpus
from .degrade import Degrader, DegradationParams, degrade, sample_params
from .fileio import (
    ConfigError,
    apply_overrides,
    config_keys,
    dump_config,
    load_config,
    read_pgm,
    read_pgm_dir,
    resolve,
    section,
    write_csv,
    write_pgm,
)
from .quality import PROXY_NAMES, QualityScorer, bin_score, ensemble, normalize, raw_scores
from .train import (
    TrainingError,
    require_stage2,
    restore_batch,
    scorer_from_checkpoint,
    stage2_model_from_checkpoint,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("iqvq")

SCORE_COLUMNS = ("image_id", "p1_raw", "p2_raw", "p3_raw", "p1_norm", "p2_norm", "p3_norm", "ensemble", "bin")
PAIR_COLUMNS = ("image_id", "sigma", "r", "delta", "q", "seed")
LOSS1_COLUMNS = ("step", "total", "l1", "per", "feat", "adv", "disc", "holdout_l1")
LOSS2_COLUMNS = ("step", "total", "feat", "index", "quality", "acc1")
ABLATION_COLUMNS = ("row", "config", "condition", "dual_codebook", "quality_loss", "ensemble_mean", "l1")


def _defaults_epilog() -> str:
    lines = ["configuration keys (key = default):"]
    for k, (_, d, doc) in config_keys().items():
        lines.append(f"  {k} = {d}" + (f"  # {doc}" if doc else ""))
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


class _HelpFormatter(argparse.RawDescriptionHelpFormatter):
    pass


def _keyed(p: argparse.ArgumentParser, flag: str, key: str, help_text: str, **kw):
    """A flag backed by configuration ``key``: unset flags fall back to the
    config file, then to the key's default (shown in ``--help``)."""
    default = config_keys()[key][1]
    p.add_argument(flag, default=None, help=f"{help_text} (default: {default}; key {key})", **kw)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="iqvq", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        _common(p)
        return p

    p = add("gen-corpus", "generate the synthetic HQ corpus as PGM files plus manifest.csv")
    _keyed(p, "--count", "corpus.count", "number of images", type=int)
    _keyed(p, "--seed", "corpus.seed", "corpus seed (image i uses seed + i)", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")

    p = add("score", "score PGM images with the three proxies and the ensemble")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="PGM file or directory (required)")
    p.add_argument("--ref", type=Path, help="corpus directory whose min/max normalize the scores "
                   "(default: the --in directory)")
    p.add_argument("--ckpt", type=Path, help="take the normalizer from a checkpoint instead (default: unset)")
    p.add_argument("--out", type=Path, help="CSV path (default: standard output)")

    p = add("gen-pairs", "synthesize LQ counterparts of a corpus directory")
    p.add_argument("--corpus", type=Path, required=True, help="HQ corpus directory (required)")
    _keyed(p, "--seed", "pairs.seed", "pair i uses seed + i", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory: hq/, lq/, pairs.csv (required)")

    p = add("train-stage1", "train the dual-codebook autoencoder")
    p.add_argument("--corpus", type=Path, required=True, help="HQ corpus directory (required)")
    p.add_argument("--holdout", type=Path, help="held-out HQ directory (default: 64 seeded images)")
    _keyed(p, "--steps", "stage1.steps", "SGD steps", type=int)
    _keyed(p, "--lr", "stage1.lr", "learning rate", type=float)
    _keyed(p, "--n-hq", "stage1.n_hq", "hq-plus codebook size, 0 for a single codebook", type=int)
    _keyed(p, "--seed", "stage1.seed", "initialization and data-order seed", type=int)
    _keyed(p, "--alpha", "stage1.alpha", "hq-plus fusion weight", type=float)
    _keyed(p, "--beta", "stage1.beta", "commitment weight", type=float)
    _keyed(p, "--s-thr", "stage1.s_thr", "score threshold routing samples to the hq-plus codebook", type=float)
    p.add_argument("--out", type=Path, required=True, help="run directory (required)")

    p = add("train-stage2", "train the quality-conditioned code predictor")
    p.add_argument("--pairs", type=Path, required=True, help="directory written by gen-pairs (required)")
    p.add_argument("--base", type=Path, required=True, help="stage-I checkpoint (required)")
    _keyed(p, "--steps", "stage2.steps", "SGD steps", type=int)
    _keyed(p, "--lr", "stage2.lr", "learning rate", type=float)
    _keyed(p, "--lambda1", "stage2.lambda1", "code-index loss weight", type=float)
    _keyed(p, "--lambda2", "stage2.lambda2", "quality loss weight", type=float)
    _keyed(p, "--seed", "stage2.seed", "initialization and data-order seed", type=int)
    p.add_argument("--no-condition", action="store_true", help="train unconditioned, bin fixed to 5 (default: off)")
    p.add_argument("--out", type=Path, required=True, help="run directory (required)")

    p = add("restore", "restore LQ images at a conditioning bin")
    p.add_argument("--ckpt", type=Path, required=True, help="stage-II checkpoint (required)")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="PGM file or directory (required)")
    _keyed(p, "--bin", "bin", "conditioning score bin in [0, 9]", type=int)
    p.add_argument("--out", type=Path, required=True, help="output PGM file or directory (required)")

    p = add("optimize-quality", "maximize the ensemble score of one restoration")
    p.add_argument("--ckpt", type=Path, required=True, help="stage-II checkpoint (required)")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="LQ PGM file (required)")
    p.add_argument("--mode", choices=("continuous", "discrete"), default="discrete",
                   help="latent space to search (default: discrete)")
    p.add_argument("--steps", type=int, help="ascent steps for continuous mode (default: key overopt.steps) "
                   "or sweeps for discrete mode (default: key overopt.sweeps)")
    _keyed(p, "--bin", "bin", "conditioning bin of the initial restore", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")

    p = add("eval", "per-bin metrics on paired data")
    p.add_argument("--ckpt", type=Path, required=True, help="stage-II checkpoint (required)")
    p.add_argument("--pairs", type=Path, help="directory written by gen-pairs (default: seeded eval set)")
    p.add_argument("--bins", default="0-9", help="bins as a range 'a-b' or a comma list (default: 0-9)")
    p.add_argument("--out", type=Path, required=True, help="metrics CSV path (required)")

    p = add("overopt-experiment", "continuous vs discrete quality optimization on the same inputs")
    p.add_argument("--ckpt", type=Path, required=True, help="stage-II checkpoint (required)")
    p.add_argument("--pairs", type=Path, help="directory written by gen-pairs (default: seeded eval set)")
    _keyed(p, "--count", "overopt.count", "number of inputs", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")

    p = add("ablate", "train and compare the four ablation configurations")
    _keyed(p, "--seed", "seed", "seed for corpus, training and evaluation", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")

    for p in sub.choices.values():
        p.epilog = _defaults_epilog()
    return parser


# ---------------------------------------------------------------- helpers


def _config(args, flags: dict) -> dict:
    cfg = load_config(args.config) if args.config else {}
    cfg = apply_overrides(cfg, args.overrides)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return resolve(cfg)


def _echo(out_dir: Path, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")


def _images(path: Path) -> tuple[list[str], np.ndarray]:
    if path.is_dir():
        return read_pgm_dir(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return [path.stem], read_pgm(path)[None]


def _pairs(path: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, hq = read_pgm_dir(path / "hq")
    lq_ids, lq = read_pgm_dir(path / "lq")
    if ids != lq_ids:
        raise ValueError(f"{path}: hq/ and lq/ contain different image ids")
    return ids, hq, lq


def _parse_bins(text: str) -> list[int]:
    text = text.strip()
    if "-" in text:
        a, b = text.split("-", 1)
        bins = list(range(int(a), int(b) + 1))
    else:
        bins = [int(t) for t in text.split(",") if t.strip()]
    if not bins or min(bins) < 0 or max(bins) > 9:
        raise ValueError(f"bins must lie in [0, 9]: {text!r}")
    return bins


def _history_rows(history, columns):
    return [{c: r.get(c, float("nan")) for c in columns} for r in history]


def _load_stage2(path: Path):
    ck = Checkpoint.load(path)
    require_stage2(ck)
    return ck, stage2_model_from_checkpoint(ck)


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(args) -> int:
    cfg = _config(args, {"corpus.count": args.count, "corpus.seed": args.seed})
    spec = section(cfg, "corpus")
    if spec.count < 64:
        raise ValueError("corpus count must be at least 64")
    images, manifest = gen_corpus(spec)
    for img, row in zip(images, manifest):
        write_pgm(args.out / f"{row['image_id']}.pgm", img)
    write_csv(args.out / "manifest.csv", manifest, ("image_id", "sigma_gt", "seed"))
    _echo(args.out, cfg)
    print(f"wrote {len(images)} images to {args.out}")
    return 0


def cmd_score(args) -> int:
    ids, X = _images(args.inp)
    if args.ckpt:
        scorer = scorer_from_checkpoint(Checkpoint.load(args.ckpt))
    else:
        ref = args.ref or (args.inp if args.inp.is_dir() else None)
        if ref is None:
            raise ValueError("scoring a single file needs --ref or --ckpt for normalization")
        scorer = QualityScorer().fit(read_pgm_dir(ref)[1])
    raw = raw_scores(X)
    norm = normalize(raw, scorer.s_min_, scorer.s_max_)
    rows = []
    for i, r, n in zip(ids, raw, norm):
        s = ensemble(n)
        rows.append(
            {
                "image_id": i,
                **{f"p{j + 1}_raw": float(r[j]) for j in range(len(PROXY_NAMES))},
                **{f"p{j + 1}_norm": float(n[j]) for j in range(len(PROXY_NAMES))},
                "ensemble": s,
                "bin": bin_score(s),
            }
        )
    if args.out:
        write_csv(args.out, rows, SCORE_COLUMNS)
    else:
        import csv

        w = csv.writer(sys.stdout)
        w.writerow(SCORE_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in SCORE_COLUMNS])
    return 0


def cmd_gen_pairs(args) -> int:
    cfg = _config(args, {"pairs.seed": args.seed})
    ids, hq = read_pgm_dir(args.corpus)
    fixed = {k: cfg[f"degrade.{k}"] for k in ("sigma", "r", "delta", "q") if cfg[f"degrade.{k}"] is not None}
    rows = []
    for i, (image_id, img) in enumerate(zip(ids, hq)):
        seed = int(cfg["pairs.seed"]) + i
        params = sample_params(np.random.default_rng([1, seed]), img.shape[0])
        if fixed:
            params = DegradationParams(**{**params.as_dict(), **fixed})
        write_pgm(args.out / "hq" / f"{image_id}.pgm", img)
        write_pgm(args.out / "lq" / f"{image_id}.pgm", degrade(img, params, seed))
        rows.append({"image_id": image_id, **params.as_dict(), "seed": seed})
    write_csv(args.out / "pairs.csv", rows, PAIR_COLUMNS)
    _echo(args.out, cfg)
    print(f"wrote {len(rows)} pairs to {args.out}")
    return 0


def cmd_train_stage1(args) -> int:
    flags = {
        "stage1.steps": args.steps,
        "stage1.lr": args.lr,
        "stage1.n_hq": args.n_hq,
        "stage1.seed": args.seed,
        "stage1.alpha": args.alpha,
        "stage1.beta": args.beta,
        "stage1.s_thr": args.s_thr,
    }
    cfg = _config(args, flags)
    s1 = section(cfg, "stage1")
    _, X = read_pgm_dir(args.corpus)
    holdout = read_pgm_dir(args.holdout)[1] if args.holdout else EX.holdout_set()
    model, history = train_stage1(X, s1, holdout=holdout)
    _echo(args.out, cfg)
    model.checkpoint({"step": s1.steps}).save(args.out / "final.ckpt")
    write_csv(args.out / "loss.csv", _history_rows(history, LOSS1_COLUMNS), LOSS1_COLUMNS)
    first, last = history[0]["holdout_l1"], history[-1]["holdout_l1"]
    print(f"stage I: held-out L1 {first:.4f} -> {last:.4f}; checkpoint {args.out / 'final.ckpt'}")
    return 0


def cmd_train_stage2(args) -> int:
    flags = {
        "stage2.steps": args.steps,
        "stage2.lr": args.lr,
        "stage2.lambda1": args.lambda1,
        "stage2.lambda2": args.lambda2,
        "stage2.seed": args.seed,
        "stage2.condition": False if args.no_condition else None,
    }
    cfg = _config(args, flags)
    s2 = section(cfg, "stage2")
    _, hq, lq = _pairs(args.pairs)
    base = Checkpoint.load(args.base)
    model, history = train_stage2(lq, hq, base, s2)
    _echo(args.out, cfg)
    model.checkpoint(base, {"step": s2.steps}).save(args.out / "final.ckpt")
    write_csv(args.out / "loss.csv", _history_rows(history, LOSS2_COLUMNS), LOSS2_COLUMNS)
    print(f"stage II: final total loss {history[-1]['total']:.4f}; checkpoint {args.out / 'final.ckpt'}")
    return 0


def cmd_restore(args) -> int:
    cfg = _config(args, {"bin": args.bin})
    if not 0 <= cfg["bin"] <= 9:
        raise ValueError("--bin must lie in [0, 9]")
    _, model = _load_stage2(args.ckpt)
    ids, X = _images(args.inp)
    out = restore_batch(model, X, cfg["bin"])
    if args.inp.is_dir():
        for i, img in zip(ids, out):
            write_pgm(args.out / f"{i}.pgm", img)
    else:
        write_pgm(args.out, out[0])
    return 0


def cmd_optimize_quality(args) -> int:
    cfg = _config(args, {"bin": args.bin})
    _, model = _load_stage2(args.ckpt)
    x = read_pgm(args.inp)
    if args.mode == "continuous":
        steps = args.steps if args.steps is not None else cfg["overopt.steps"]
        res = EX.optimize_quality_continuous(x, model, steps, cfg["overopt.step_size"], bin=cfg["bin"])
    else:
        steps = args.steps if args.steps is not None else cfg["overopt.sweeps"]
        res = EX.optimize_quality_discrete(x, model, steps, bin=cfg["bin"])
    _echo(args.out, cfg)
    write_pgm(args.out / f"{args.mode}.pgm", res.image)
    rows = [{"step": i, "train": a, "holdout": b} for i, (a, b) in enumerate(zip(res.train_trace, res.holdout_trace))]
    write_csv(args.out / f"{args.mode}_trace.csv", rows, ("step", "train", "holdout"))
    print(f"{args.mode}: ensemble {res.train_trace[0]:.4f} -> {res.train_trace[-1]:.4f}")
    return 0


def _eval_data(args, cfg, count=None):
    if args.pairs:
        _, hq, lq = _pairs(args.pairs)
    else:
        hq, lq = EX.eval_set(cfg["eval.count"])
    if count is not None:
        hq, lq = hq[:count], lq[:count]
    return hq, lq


def cmd_eval(args) -> int:
    cfg = _config(args, {})
    _, model = _load_stage2(args.ckpt)
    hq, lq = _eval_data(args, cfg)
    rows = EX.evaluate(lq, hq, model, _parse_bins(args.bins))
    write_csv(args.out, rows, EX.EVAL_COLUMNS)
    return 0


def cmd_overopt(args) -> int:
    cfg = _config(args, {"overopt.count": args.count})
    _, model = _load_stage2(args.ckpt)
    _, lq = _eval_data(args, cfg, cfg["overopt.count"])
    cases = EX.overopt_experiment(lq, model, cfg["overopt.steps"], cfg["overopt.sweeps"], bin=cfg["bin"])
    _echo(args.out, cfg)
    write_csv(args.out / "overopt.csv", EX.overopt_rows(cases))
    summary = [
        {
            "input": i,
            "continuous_train": c.continuous.train_trace[-1],
            "discrete_train": c.discrete.train_trace[-1],
            "continuous_holdout_ratio": c.continuous_drop,
            "discrete_holdout_ratio": c.discrete.holdout_trace[-1] / c.discrete.holdout_trace[0],
            "contrast_holds": int(c.contrast_holds),
        }
        for i, c in enumerate(cases)
    ]
    write_csv(args.out / "summary.csv", summary)
    print(f"contrast holds in {sum(r['contrast_holds'] for r in summary)}/{len(summary)} cases")
    return 0


def cmd_ablate(args) -> int:
    seed = args.seed
    if seed is None:
        seed = _config(args, {})["seed"]
    cfg = _config(args, {"seed": seed, "corpus.seed": seed, "stage1.seed": seed, "stage2.seed": seed})
    spec = section(cfg, "corpus")
    X, _ = gen_corpus(spec)
    L = Degrader(random_state=cfg["pairs.seed"]).transform(X)
    E_h, E_l = EX.eval_set(cfg["eval.count"])
    rows = EX.ablate(X, L, E_h, E_l, section(cfg, "stage1"), section(cfg, "stage2"))
    _echo(args.out, cfg)
    write_csv(args.out / "ablation.csv", rows, ABLATION_COLUMNS)
    for r in rows:
        print(f"({r['row']}) {r['config']:<16} ensemble {r['ensemble_mean']:.4f}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "score": cmd_score,
    "gen-pairs": cmd_gen_pairs,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "restore": cmd_restore,
    "optimize-quality": cmd_optimize_quality,
    "eval": cmd_eval,
    "overopt-experiment": cmd_overopt,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, TrainingError, ValueError, KeyError, OSError) as e:
        print(f"iqvq {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
