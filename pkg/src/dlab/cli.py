"""Command-line entry point: ``dlab <subcommand> [flags]``.

Every run resolves a flat key=value configuration (defaults, then ``--config``
file, then ``DLAB_SEED``, then explicit flags), writes it to
``<out>/manifest.txt`` and only then starts computing.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .data import (
    GeneratorConfig,
    batch_iter,
    generate_corpus,
    load_corpus,
    load_sts,
    write_dataset,
)
from .diagnostics import build_report, loss_gap_report, sts_spearman
from .encoder import load_checkpoint, save_checkpoint
from .errors import DlabError
from .logit_transform import ShuffleMode, TeacherEnsemble
from .objectives import DistillConfig
from .training import TrainConfig, distill_student, self_train, train_teacher, write_metrics

COMMANDS = ("gen-data", "train-teacher", "distill", "self-train", "evaluate", "diagnose", "sweep")

SWEEP_P = (0.05, 0.08, 0.1, 0.12, 0.15)
SWEEP_LAMBDA = (0.1, 0.2, 0.5, 1.0, 2.0)
SWEEP_TAU = (0.05, 0.02, 0.01)


class UsageError(Exception):
    pass


def _dims(text: str) -> tuple[int, int, int]:
    parts = tuple(int(x) for x in text.split(","))
    if len(parts) != 3:
        raise ValueError("dims needs three comma-separated sizes")
    return parts


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _steps(text: str):
    return None if text.strip().lower() in ("", "epoch", "none") else int(text)


# config key -> (section, field name, parser)
KEYS = {
    "topics": ("gen", "topics", int),
    "vocab": ("gen", "vocab", int),
    "train-sentences": ("gen", "train_sentences", int),
    "test-sentences": ("gen", "test_sentences", int),
    "dev-pairs": ("gen", "dev_pairs", int),
    "test-pairs": ("gen", "test_pairs", int),
    "min-len": ("gen", "min_len", int),
    "max-len": ("gen", "max_len", int),
    "topic-concentration": ("gen", "topic_concentration", float),
    "word-concentration": ("gen", "word_concentration", float),
    "background-rate": ("gen", "background_rate", float),
    "seed": ("run", "seed", int),
    "steps": ("train", "steps", _steps),
    "lr": ("train", "lr", float),
    "eval-interval": ("train", "eval_interval", int),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "eps": ("train", "eps", float),
    "ensemble-size": ("train", "ensemble_size", int),
    "dims": ("train", "dims", _dims),
    "dropout": ("train", "dropout", float),
    "teacher-dropout": ("train", "teacher_dropout", _bool),
    "threads": ("train", "threads", int),
    "tau": ("distill", "tau", float),
    "tau-s": ("distill", "tau_s", float),
    "tau-t": ("distill", "tau_t", float),
    "lambda": ("distill", "lam", float),
    "p": ("distill", "p", float),
    "batch-size": ("distill", "batch_size", int),
    "rounds": ("distill", "rounds", int),
    "shuffle": ("shuffle", "kind", str),
    "lo": ("shuffle", "lo", int),
    "hi": ("shuffle", "hi", int),
}


def _render(value) -> str:
    if value is None:
        return "epoch"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are a usage error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("_", "-")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    gen: GeneratorConfig
    train: TrainConfig

    def flat(self) -> dict[str, str]:
        sections = {
            "gen": asdict(self.gen),
            "run": {"seed": self.train.seed},
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "distill": asdict(self.train.distill),
            "shuffle": asdict(self.train.shuffle),
        }
        return {key: _render(sections[sec][name]) for key, (sec, name, _) in KEYS.items()}


def resolve_config(file_values: dict[str, str], flag_values: dict[str, str], env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = dict(file_values)
    if env.get("DLAB_SEED", "").strip():
        values["seed"] = env["DLAB_SEED"].strip()
    values.update(flag_values)
    parsed = {"gen": {}, "run": {}, "train": {}, "distill": {}, "shuffle": {}}
    for key, text in values.items():
        sec, name, conv = KEYS[key]
        try:
            parsed[sec][name] = conv(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {text!r} ({exc})") from None
    seed = parsed["run"].get("seed", 0)
    gen = replace(GeneratorConfig(), seed=seed, **parsed["gen"])
    distill = replace(DistillConfig(), **parsed["distill"])
    shuffle = replace(ShuffleMode(), p=distill.p, **parsed["shuffle"])
    train = replace(TrainConfig(), seed=seed, distill=distill, shuffle=shuffle, **parsed["train"])
    return RunConfig(gen, train)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--data", help="dataset directory written by gen-data")
    for key, (_, name, _) in KEYS.items():
        common.add_argument(f"--{key}", dest=f"cfg_{name}_{key}", metavar="V", default=None)

    parser = argparse.ArgumentParser(prog="dlab", description="Contrastive distillation lab.", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"dlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.add_parser("gen-data", parents=[common], help="write synthetic corpus splits and STS pair files")
    sub.add_parser("train-teacher", parents=[common], help="contrastive training of one model")
    d = sub.add_parser("distill", parents=[common], help="distill a student from teacher checkpoints")
    d.add_argument("--teachers", nargs="+", required=True, metavar="CKPT")
    d.add_argument("--round", type=int, default=1)
    sub.add_parser("self-train", parents=[common], help="teachers followed by rounds of distillation")
    e = sub.add_parser("evaluate", parents=[common], help="Spearman of a checkpoint on a pair file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pairs", help="TSV pair file (default: <data>/test.tsv)")
    g = sub.add_parser("diagnose", parents=[common], help="variance diagnostics report")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--teachers", nargs="*", default=[], metavar="CKPT")
    g.add_argument("--batches", type=int, default=30, help="training batches to sample")
    w = sub.add_parser("sweep", parents=[common], help="grid over p, lambda and temperatures")
    w.add_argument("--teachers", nargs="+", required=True, metavar="CKPT")
    w.add_argument("--grid-p", default=",".join(map(str, SWEEP_P)))
    w.add_argument("--grid-lambda", default=",".join(map(str, SWEEP_LAMBDA)))
    w.add_argument("--grid-tau-s", default=",".join(map(str, SWEEP_TAU)))
    w.add_argument("--grid-tau-t", default=",".join(map(str, SWEEP_TAU)))
    return parser


def _flag_values(ns) -> dict[str, str]:
    out = {}
    for dest, value in vars(ns).items():
        if dest.startswith("cfg_") and value is not None:
            out[dest.rsplit("_", 1)[1]] = value
    return out


def _load_data(ns, cfg: RunConfig):
    if not ns.data:
        raise UsageError("--data is required for this command")
    root = Path(ns.data)
    vocab = cfg.gen.vocab
    manifest = root / "data-manifest.txt"
    if manifest.exists():
        for line in manifest.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            if key == "vocab":
                vocab = int(value)
    train = load_corpus(root / "train.txt", vocab, "train")
    test = load_corpus(root / "test.txt", vocab, "test")
    dev = load_sts(root / "dev.tsv", vocab)
    test_pairs = load_sts(root / "test.tsv", vocab)
    return train, test, dev, test_pairs


def _teachers(paths) -> TeacherEnsemble:
    return TeacherEnsemble([load_checkpoint(p)[0] for p in paths])


def _save(out: Path, ckpt, name: str | None = None) -> None:
    save_checkpoint(out / (name or f"checkpoint-r{ckpt.round}.bin"), ckpt.params, ckpt.meta())


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}") from None


def execute(ns, cfg: RunConfig, log) -> None:
    out = Path(ns.out)
    tc = cfg.train
    cmd = ns.command
    if cmd == "gen-data":
        data = generate_corpus(cfg.gen)
        write_dataset(out, data, cfg.gen)
        log(f"wrote {len(data.train)} train / {len(data.test)} test sentences to {out}")
        return
    if cmd == "evaluate":
        params, _ = load_checkpoint(ns.checkpoint)
        if ns.pairs:
            pairs = load_sts(ns.pairs, params.vocab)
        else:
            pairs = _load_data(ns, cfg)[3]
        score = sts_spearman(params, pairs)
        _write_rows(out / "report.csv", ("name", "split", "value"), [("sts_spearman", "pairs", score)])
        log(f"spearman {score:.4f}")
        return

    train, test, dev, test_pairs = _load_data(ns, cfg)
    if cmd == "train-teacher":
        ckpt = train_teacher(train, dev, tc)
        _save(out, ckpt)
        write_metrics(out / "metrics.csv", ckpt.metrics)
        log(f"best dev spearman {ckpt.dev_score:.4f} at step {ckpt.step}")
    elif cmd == "distill":
        ckpt = distill_student(train, dev, _teachers(ns.teachers), tc, ns.round)
        _save(out, ckpt)
        write_metrics(out / "metrics.csv", ckpt.metrics)
        log(f"best dev spearman {ckpt.dev_score:.4f} at step {ckpt.step}")
    elif cmd == "self-train":
        rounds = self_train(train, dev, tc, tc.distill.rounds)
        for members in rounds:
            for k, ckpt in enumerate(members):
                _save(out, ckpt, None if k == 0 else f"checkpoint-r{ckpt.round}-m{k}.bin")
                if k or ckpt is not rounds[-1][0]:
                    write_metrics(out / f"metrics-r{ckpt.round}-m{k}.csv", ckpt.metrics)
        final = rounds[-1][0]
        write_metrics(out / "metrics.csv", final.metrics)
        log(f"final student dev spearman {final.dev_score:.4f}")
    elif cmd == "diagnose":
        params, _ = load_checkpoint(ns.checkpoint)
        n = min(tc.distill.batch_size, len(train))
        batches = batch_iter(train, n, tc.seed, 0)[: ns.batches]
        ensemble = _teachers(ns.teachers) if ns.teachers else None
        report = build_report(params, batches, test_pairs, ensemble)
        if ensemble is not None:
            test_batches = batch_iter(test, min(n, len(test)), tc.seed, 0)[: ns.batches]
            report.loss_gap["student"] = loss_gap_report(params, ensemble, batches, test_batches,
                                                         tc.distill.tau_s, tc.distill.tau_t)
        report.write(out / "report.csv", out / "sharpness.csv")
        log(f"kl first {report.kl_first:.4g}, kl second {report.kl_second:.4g}")
    elif cmd == "sweep":
        ensemble = _teachers(ns.teachers)
        grid = itertools.product(_floats(ns.grid_p), _floats(ns.grid_lambda),
                                 _floats(ns.grid_tau_s), _floats(ns.grid_tau_t))
        rows = []
        for p, lam, tau_s, tau_t in grid:
            distill = replace(tc.distill, p=p, lam=lam, tau_s=tau_s, tau_t=tau_t)
            shuffle = replace(tc.shuffle, p=p) if tc.shuffle.kind != "none" else tc.shuffle
            ckpt = distill_student(train, dev, ensemble, replace(tc, distill=distill, shuffle=shuffle))
            score = sts_spearman(ckpt.params, test_pairs)
            rows.append((p, lam, tau_s, tau_t, ckpt.step, float(ckpt.dev_score), score))
            log(f"p={p} lambda={lam} tau_s={tau_s} tau_t={tau_t}: dev {ckpt.dev_score:.4f} test {score:.4f}")
        _write_rows(out / "sweep.csv", ("p", "lambda", "tau_s", "tau_t", "step", "dev_spearman", "test_spearman"), rows)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2

    def log(msg):
        print(f"dlab {ns.command}: {msg}", file=sys.stderr)

    try:
        file_values = {}
        if ns.config:
            file_values = parse_config_text(Path(ns.config).read_text(encoding="utf-8"), ns.config)
        cfg = resolve_config(file_values, _flag_values(ns))
    except UsageError as exc:
        print(f"dlab: usage error: {exc}", file=sys.stderr)
        return 2
    except (DlabError, OSError) as exc:
        print(f"dlab: error: {exc}", file=sys.stderr)
        return 1

    out = Path(ns.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"command={ns.command}"] + [f"{k}={v}" for k, v in cfg.flat().items()]
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        execute(ns, cfg, log)
    except UsageError as exc:
        print(f"dlab: usage error: {exc}", file=sys.stderr)
        return 2
    except (DlabError, OSError) as exc:
        print(f"dlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
