"""Command-line pipeline: preprocess, build-concepts, finetune, tcav, report.

Every command reads an INI file (``--config``). Relative paths resolve
against the config file's directory; outputs go to ``[experiment]
output_dir``. Exit codes: 0 success, 1 config error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .concepts import ConceptDataset, build_anatomical_concepts, build_labeled_concepts, sample_random_concept_sets
from .dsp import PreprocessConfig, epoch_and_scale, preprocess, stack_windows
from .edf import ScreeningCriteria, map_channels, read_annotation_table, read_edf, screen_recording
from .eegw import load_windows, save_windows
from .errors import ConfigError, DataError, EegTcavError
from .inverse import eloreta, load_lead_field
from .model import BOTTLENECKS, Bottleneck, FineTuneHyper, LhbConfig, balanced_accuracy, fine_tune, init_weights, load_weights, predict, save_weights
from .report import read_csv, write_csv, write_svg
from .tcav import TcavHyper, run_tcav
from .cav import CavHyper

logger = logging.getLogger("eegtcav")


@dataclass
class Context:
    cfg: configparser.ConfigParser
    base: Path
    out: Path
    seed: int
    timestamp: bool

    def get(self, section, key, fallback=None):
        return self.cfg.get(section, key, fallback=fallback)

    def require(self, section, key) -> str:
        value = self.cfg.get(section, key, fallback=None)
        if value is None or not value.strip():
            raise ConfigError(f"[{section}] {key} is required")
        return value.strip()

    def path(self, value: str) -> Path:
        p = Path(os.path.expanduser(value))
        return p if p.is_absolute() else self.base / p

    def existing(self, section, key) -> Path:
        p = self.path(self.require(section, key))
        if not p.exists():
            raise ConfigError(f"[{section}] {key}: {p} does not exist")
        return p

    def output(self, section, key, default: str) -> Path:
        value = self.get(section, key, default)
        p = Path(value)
        return p if p.is_absolute() else self.out / p

    def number(self, section, key, default, cast=float):
        try:
            return cast(self.cfg.get(section, key, fallback=str(default)))
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None


def load_context(path, seed=None, timestamp=True) -> Context:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cfg.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    base = path.resolve().parent
    out = Path(cfg.get("experiment", "output_dir", fallback="out"))
    out = out if out.is_absolute() else base / out
    if seed is None:
        try:
            seed = cfg.getint("experiment", "seed", fallback=0)
        except ValueError:
            raise ConfigError("[experiment] seed must be an integer") from None
    return Context(cfg, base, out, int(seed), timestamp)


def _list(value) -> list:
    return [v.strip() for v in (value or "").split(",") if v.strip()]


# --------------------------------------------------------------------------
# Recording ingestion shared by preprocess and build-concepts
# --------------------------------------------------------------------------


def _screening(ctx: Context) -> ScreeningCriteria:
    s = "screening"
    return ScreeningCriteria(
        min_channels=ctx.number(s, "min_channels", 19, int),
        min_duration_s=ctx.number(s, "min_duration_s", 60.0),
        min_sampling_hz=ctx.number(s, "min_sampling_hz", 100.0),
        max_abs_amplitude_uv=ctx.number(s, "max_abs_amplitude_uv", 500.0),
    )


def _preprocess_config(ctx: Context) -> PreprocessConfig:
    s = "preprocess"
    return PreprocessConfig(
        highpass_hz=ctx.number(s, "highpass_hz", 0.1),
        lowpass_hz=ctx.number(s, "lowpass_hz", 100.0),
        notch_band_hz=(ctx.number(s, "notch_low_hz", 58.0), ctx.number(s, "notch_high_hz", 62.0)),
        target_rate_hz=ctx.number(s, "target_rate_hz", 256.0),
    )


def load_recordings(ctx: Context, edf_dir: Path, annotation_dir=None):
    """Read, screen, map and filter every EDF in a directory.

    Returns ``(recordings, summary)`` where summary lists
    ``(file, accepted, reasons)``. Unreadable files are skipped.
    """
    criteria = _screening(ctx)
    pconf = _preprocess_config(ctx)
    files = sorted(p for p in edf_dir.iterdir() if p.suffix.lower() == ".edf") if edf_dir.is_dir() else []
    recordings, summary = [], []
    for f in files:
        try:
            rec = read_edf(f)
            if annotation_dir is not None:
                table = annotation_dir / (f.stem + ".csv")
                if table.exists():
                    rec = rec.with_annotations(list(rec.annotations) + read_annotation_table(table))
            verdict = screen_recording(rec, criteria)
            if not verdict:
                summary.append((f.name, False, verdict.reasons))
                continue
            rec = map_channels(rec)
            rec = preprocess(rec, pconf)
            if rec is None:
                summary.append((f.name, False, ["preprocessing"]))
                continue
        except DataError as exc:
            logger.warning("skipping %s: %s", f.name, exc)
            summary.append((f.name, False, [str(exc)]))
            continue
        recordings.append(rec)
        summary.append((f.name, True, []))
    return recordings, summary


def _print_summary(summary) -> None:
    for name, ok, reasons in summary:
        print(f"{name}: {'accepted' if ok else 'rejected (' + ', '.join(reasons) + ')'}")
    n_ok = sum(ok for _, ok, _ in summary)
    print(f"{n_ok} accepted / {len(summary) - n_ok} rejected")


def _provenance(ctx: Context, **extra) -> dict:
    return {"tool": "eegtcav", "version": __version__, "seed": ctx.seed, **extra}


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_preprocess(ctx: Context) -> int:
    s = "preprocess"
    edf_dir = ctx.existing(s, "edf_dir")
    ann = ctx.get(s, "annotation_dir")
    recordings, summary = load_recordings(ctx, edf_dir, ctx.path(ann) if ann else None)
    _print_summary(summary)
    window_len = ctx.number(s, "window_len_s", 4.0)
    use_spans = ctx.cfg.getboolean(s, "use_annotations", fallback=False)
    windows = []
    for rec in recordings:
        windows.extend(epoch_and_scale(rec, list(rec.annotations) if use_spans else None, window_len_s=window_len))
    if not windows:
        raise DataError("no windows produced")
    dest = ctx.output(s, "output", "windows.eegw")
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_windows(dest, windows, _provenance(ctx, command="preprocess", files=[n for n, ok, _ in summary if ok]))
    print(f"wrote {len(windows)} windows to {dest}")
    return 0


def _concept_sections(ctx: Context):
    return [sec for sec in ctx.cfg.sections() if sec.startswith("concept:")]


def cmd_build_concepts(ctx: Context) -> int:
    sections = _concept_sections(ctx)
    if not sections:
        raise ConfigError("no [concept:NAME] sections in config")
    out_dir = ctx.output("concepts", "output_dir", "concepts")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for sec in sections:
        name = sec.split(":", 1)[1].strip()
        kind = ctx.require(sec, "kind").lower()
        if kind == "random":
            src = ctx.existing(sec, "source")
            pool, _ = load_windows(src)
            sets = sample_random_concept_sets(
                pool,
                n_sets=ctx.number(sec, "n_sets", 50, int),
                max_examples=ctx.number(sec, "max_examples", 40, int),
                seed=ctx.number(sec, "seed", ctx.seed, int),
            )
            sub = out_dir / name
            sub.mkdir(exist_ok=True)
            for cd in sets:
                save_windows(sub / f"{cd.name}.eegw", cd.windows, _provenance(ctx, concept=cd.name, **cd.provenance))
            written += len(sets)
            print(f"{name}: {len(sets)} random sets in {sub}")
            continue
        edf_dir = ctx.existing(sec, "edf_dir")
        ann = ctx.get(sec, "annotation_dir")
        recordings, summary = load_recordings(ctx, edf_dir, ctx.path(ann) if ann else None)
        _print_summary(summary)
        if kind == "labeled":
            labels = _list(ctx.get(sec, "labels", ctx.get(sec, "label", name)))
            window_len = ctx.number(sec, "window_len_s", 4.0)
            for label in labels:
                try:
                    cd = build_labeled_concepts(recordings, label, window_len)
                except EegTcavError as exc:
                    exc.args = (f"concept {name!r}: {exc}",)
                    raise
                dest = out_dir / f"{label}.eegw"
                save_windows(dest, cd.windows, _provenance(ctx, concept=label, **cd.provenance))
                written += 1
                print(f"{label}: {len(cd)} windows -> {dest}")
        elif kind == "anatomical":
            lf = load_lead_field(ctx.existing(sec, "lead_field"))
            inv = eloreta(lf, alpha=ctx.number(sec, "alpha", 1e-4))
            groups = build_anatomical_concepts(
                recordings,
                ctx.get(sec, "band", "alpha"),
                lf,
                inv,
                min_examples=ctx.number(sec, "min_examples", 40, int),
            )
            for cd in groups.values():
                dest = out_dir / f"{name}-{cd.name}.eegw"
                save_windows(dest, cd.windows, _provenance(ctx, concept=cd.name, sparse=cd.sparse, **cd.provenance))
                written += 1
                print(f"{cd.name}: {len(cd)} windows{' (sparse)' if cd.sparse else ''} -> {dest}")
        else:
            raise ConfigError(f"[{sec}] unknown kind {kind!r}")
    if not written:
        raise DataError("no concept files written")
    return 0


def _model_config(ctx: Context, s: str) -> LhbConfig:
    size = ctx.get(s, "model", "full").strip().lower()
    if size == "tiny":
        return LhbConfig.tiny(norm_groups=ctx.number(s, "norm_groups", 8, int))
    if size == "full":
        return LhbConfig()
    raise ConfigError(f"[{s}] model must be 'tiny' or 'full'")


def cmd_finetune(ctx: Context) -> int:
    s = "finetune"
    windows, _ = load_windows(ctx.existing(s, "windows"))
    classes = _list(ctx.require(s, "classes"))
    chosen = [w for w in windows if w.label in classes]
    if not chosen:
        raise DataError(f"no windows labeled {classes}")
    labels = np.array([classes.index(w.label) for w in chosen])
    x = stack_windows(chosen)
    init = ctx.get(s, "weights")
    if init:
        weights = load_weights(ctx.existing(s, "weights"))
    else:
        cfg = _model_config(ctx, s)
        if cfg.num_classes != len(classes):
            from dataclasses import replace

            cfg = replace(cfg, num_classes=len(classes))
        logger.info("no initial weights given; initializing from seed %d", ctx.seed)
        weights = init_weights(cfg, ctx.seed)
    hyper = FineTuneHyper(
        epochs=ctx.number(s, "epochs", 30, int),
        batch_size=ctx.number(s, "batch_size", 80, int),
        learning_rate=ctx.number(s, "learning_rate", 1e-4),
        seed=ctx.seed,
    )
    weights, history = fine_tune(weights, x, labels, hyper)
    acc = balanced_accuracy(labels, predict(weights, x).argmax(axis=1))
    dest = ctx.output(s, "output", "model.lhbw")
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_weights(dest, weights)
    loss_path = ctx.output(s, "loss_csv", "loss.csv")
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(history, start=1):
            writer.writerow([i, f"{v:.10g}"])
    print(f"training balanced accuracy {acc:.4f}")
    print(f"wrote {dest} and {loss_path}")
    return 0


def _load_concept(path: Path) -> ConceptDataset:
    windows, prov = load_windows(path)
    if not windows:
        raise DataError(f"{path} holds no windows")
    return ConceptDataset(prov.get("concept", path.stem), windows, windows[0].duration_s, prov or {"kind": "file"})


def _glob(ctx: Context, value: str) -> list:
    out = []
    for item in _list(value):
        p = ctx.path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.eegw")))
        elif any(c in item for c in "*?["):
            out.extend(sorted(p.parent.glob(p.name)))
        elif p.exists():
            out.append(p)
        else:
            raise ConfigError(f"{p} does not exist")
    return out


def cmd_tcav(ctx: Context) -> int:
    s = "tcav"
    weights = load_weights(ctx.existing(s, "weights"))
    target, _ = load_windows(ctx.existing(s, "target"))
    target_label = ctx.get(s, "target_label")
    if target_label:
        target = [w for w in target if w.label == target_label]
    if not target:
        raise DataError("no target windows")
    concepts = [_load_concept(p) for p in _glob(ctx, ctx.require(s, "concepts"))]
    randoms = [_load_concept(p) for p in _glob(ctx, ctx.require(s, "random_sets"))]
    if not concepts:
        raise ConfigError("[tcav] concepts matched no files")
    names = _list(ctx.get(s, "bottlenecks", "all"))
    try:
        bottlenecks = list(BOTTLENECKS) if names in ([], ["all"]) else [Bottleneck.parse(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    hyper = TcavHyper(
        max_examples=ctx.number(s, "max_examples", 40, int),
        significance=ctx.number(s, "significance", 0.05),
        seed=ctx.seed,
        cav=CavHyper(seed=ctx.seed),
    )
    results = run_tcav(
        weights, target, concepts, randoms, bottlenecks, ctx.number(s, "target_class", 0, int), hyper
    )
    csv_path = ctx.output(s, "output_csv", "tcav.csv")
    svg_path = ctx.output(s, "output_svg", "tcav.svg")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(csv_path, results)
    write_svg(svg_path, results, ctx.get(s, "title", "TCAV scores"), ctx.timestamp)
    for r in results:
        star = "*" if r.significant else " "
        print(f"{star} {r.concept_id:<24} {r.bottleneck.value:<20} {r.mean_score:.3f}  p={r.p_corrected:.3g}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def cmd_report(ctx: Context) -> int:
    s = "report"
    src = ctx.get(s, "csv")
    src = ctx.path(src) if src else ctx.output("tcav", "output_csv", "tcav.csv")
    if not src.exists():
        raise ConfigError(f"report input {src} does not exist")
    rows = read_csv(src)
    dest = ctx.output(s, "output_svg", "report.svg")
    dest.parent.mkdir(parents=True, exist_ok=True)
    title = ctx.get(s, "title") or ctx.get("tcav", "title", "TCAV scores")
    write_svg(dest, rows, title, ctx.timestamp)
    print(f"wrote {dest}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "build-concepts": cmd_build_concepts,
    "finetune": cmd_finetune,
    "tcav": cmd_tcav,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegtcav", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI experiment file")
        p.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        p.add_argument("--no-timestamp", action="store_true", help="omit the SVG timestamp")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _limit_threads(n) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    # only effective before numpy's BLAS starts its pool, so best effort
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _limit_threads(args.threads)
        ctx = load_context(args.config, args.seed, not args.no_timestamp)
        return COMMANDS[args.command](ctx)
    except EegTcavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
