"""Command-line entry point: synth, train, score, calibrate, segment, split,
assign and eval.

Every option can come from a flat ``key=value`` config file (``--config``)
and be overridden on the command line with ``--key value``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from osdkit import augment, diarization, inference, scoring
from osdkit.audio import AudioError, features, read_wav
from osdkit.model import (
    CheckpointError,
    ModelConfig,
    NumericError,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from osdkit.train import TrainConfig, train

log = logging.getLogger("osdkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    conv_channels: str = "128,128,128"
    gru_hidden: int = 256
    gru_layers: int = 2
    head_hidden: int = 256
    num_classes: int = 3
    dropout: float = 0.5
    se_reduction: int = 16
    # training (full-scale runs used batch_size 1024, epochs 60)
    batch_size: int = 32
    epochs: int = 10
    lr_max: float = 1e-3
    lr_min: float = 0.0
    seed: int | None = None
    dtype: str = "float64"
    aug_overlap: bool = True
    overlap_quota: float = 1.0
    aug_resample: bool = True
    aug_noise: bool = False
    noise_snr_db: float = 20.0
    # synthetic corpus
    n_clips: int = 200
    duration_s: float = 10.0
    # inputs / outputs
    manifest: str | None = None
    out_dir: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    input: str | None = None
    scores: str | None = None
    threshold: str | None = None
    target_precision: float = 0.9
    min_duration: float = 0.0
    sad: str | None = None
    osd: str | None = None
    pieces: str | None = None
    ranking: str | None = None
    file_id: str = "file"
    ref: str | None = None
    hyp: str | None = None
    mode: str = "der"
    collar: float = 0.0
    # keys given in a config file or on the command line
    explicit: frozenset = field(default=frozenset(), repr=False)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            conv_channels=tuple(int(c) for c in str(self.conv_channels).split(",")),
            gru_hidden=self.gru_hidden,
            gru_layers=self.gru_layers,
            head_hidden=self.head_hidden,
            num_classes=self.num_classes,
            dropout=self.dropout,
            se_reduction=self.se_reduction,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            seed=self.seed,
            aug_overlap=self.aug_overlap,
            overlap_quota=self.overlap_quota,
            aug_resample=self.aug_resample,
            aug_noise=self.aug_noise,
            noise_snr_db=self.noise_snr_db,
        )


MODEL_KEYS = ("conv_channels", "gru_hidden", "gru_layers", "head_hidden",
              "num_classes", "dropout", "se_reduction")


def _option_fields():
    return [f for f in fields(RunConfig) if f.name != "explicit"]


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _convert(name, raw):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    raw = str(raw).strip()
    try:
        if "bool" in ftype:
            return _BOOL[raw.lower()]
        if "int" in ftype:
            return None if raw.lower() == "none" else int(raw)
        if "float" in ftype:
            return float(raw)
    except (KeyError, ValueError):
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    known = {f.name for f in _option_fields()}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def write_config_file(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        for f in _option_fields():
            value = getattr(cfg, f.name)
            if value is not None:
                fh.write(f"{f.name}={value}\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _require(cfg, *names):
    for name in names:
        if getattr(cfg, name) in (None, ""):
            raise UsageError(f"missing required option --{name.replace('_', '-')}")


def _require_files(cfg, *names):
    _require(cfg, *names)
    for name in names:
        if not Path(getattr(cfg, name)).exists():
            raise UsageError(f"--{name.replace('_', '-')}: {getattr(cfg, name)} does not exist")


def _out_dir(cfg) -> Path:
    _require(cfg, "out_dir")
    path = Path(cfg.out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return path


# --- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    """Write a seeded synthetic labelled corpus (WAV, labels, manifest, RTTM)."""
    _require(cfg, "seed")
    out = _out_dir(cfg)
    pool = augment.speaker_pool(cfg.seed)
    entries, rttm = [], []
    for k in range(cfg.n_clips):
        clip, speakers = augment.synth_clip(cfg.seed, k, cfg.duration_s, pool)
        stem = f"clip_{k:04d}"
        augment.save_clip(clip, out / f"{stem}.wav", out / f"{stem}.lab")
        entries.append((f"{stem}.wav", f"{stem}.lab"))
        rttm += [diarization.RttmRecord(stem, 1, on, off - on, spk) for on, off, spk in speakers]
    augment.write_manifest(entries, out / "manifest.tsv")
    diarization.write_rttm(rttm, out / "reference.rttm")
    log.info("wrote %d clips to %s", cfg.n_clips, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    """Train a model on a manifest; writes per-epoch checkpoints and a loss log."""
    _require(cfg, "seed")
    _require_files(cfg, "manifest")
    out = _out_dir(cfg)
    mcfg = cfg.model_config()
    clips = [augment.load_clip(w, lab) for w, lab in augment.read_manifest(cfg.manifest)]
    if not clips:
        raise ValueError(f"{cfg.manifest}: empty manifest")
    model = build_model(mcfg, cfg.seed, np.dtype(cfg.dtype))
    write_config_file(cfg, out / "run.cfg")
    with open(out / "loss.log", "w") as loss_log:

        def on_step(epoch, step, loss, lr):
            loss_log.write(f"{epoch}\t{step}\t{loss!r}\t{lr!r}\n")
            loss_log.flush()

        def on_epoch(epoch, model, adam):
            save_checkpoint(model, adam, out / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch})
            log.info("epoch %d done", epoch)

        try:
            train(model, clips, cfg.train_config(), on_step, on_epoch)
        except NumericError as exc:
            n_done = sum(1 for _ in open(out / "loss.log"))
            raise NumericError(f"{exc} at step {n_done}") from None
    save_checkpoint(model, None, out / "model.ckpt")
    return EXIT_OK


def _load_model(cfg):
    _require_files(cfg, "checkpoint")
    expected = cfg.model_config() if cfg.explicit & set(MODEL_KEYS) else None
    model, _, _ = load_checkpoint(cfg.checkpoint, expected)
    if cfg.dtype != "float64":
        model.astype(np.dtype(cfg.dtype))
    return model


def cmd_score(cfg: RunConfig) -> int:
    """Score a WAV file or a manifest with a trained checkpoint."""
    _require_files(cfg, "input")
    model = _load_model(cfg)
    out = _out_dir(cfg)
    src = Path(cfg.input)
    if src.suffix.lower() == ".wav":
        jobs = [(src, None)]
    else:
        jobs = augment.read_manifest(src)
    entries = []
    for wav, lab in jobs:
        track = inference.sliding_score(model, features(read_wav(wav)))
        target = out / f"{Path(wav).stem}.scores"
        inference.write_scores(track, target)
        entries.append((target.name, str(Path(lab).resolve()) if lab is not None else ""))
    if any(lab for _, lab in entries):
        augment.write_manifest(entries, out / "scores.tsv")
    return EXIT_OK


def _threshold(cfg) -> float:
    _require(cfg, "threshold")
    path = Path(cfg.threshold)
    if path.exists():
        for line in path.read_text().splitlines():
            if line.startswith("threshold="):
                return float(line.split("=", 1)[1])
        raise ValueError(f"{path}: no threshold= line")
    try:
        return float(cfg.threshold)
    except ValueError:
        raise UsageError(f"--threshold must be a number or a threshold file: {cfg.threshold}") from None


def _fmt(x):
    return "NA" if x is None else f"{x:.6f}"


def format_report(metrics: dict) -> str:
    lines = [f"{'metric':<12}{'value':>12}"]
    lines += [f"{k:<12}{_fmt(v):>12}" for k, v in metrics.items()]
    lines.append("")
    lines += [f"{k}={_fmt(v)}" for k, v in metrics.items()]
    return "\n".join(lines) + "\n"


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = None if v == "NA" else float(v)
    return out


def cmd_calibrate(cfg: RunConfig) -> int:
    """Pick the threshold reaching a target frame precision on scored data."""
    _require_files(cfg, "scores")
    _require(cfg, "out")
    pairs = [
        (inference.read_scores(s), augment.read_labels(lab))
        for s, lab in augment.read_manifest(cfg.scores)
    ]
    thr, precision, recall = inference.calibrate_threshold(pairs, cfg.target_precision)
    Path(cfg.out).write_text(
        f"threshold={thr!r}\nprecision={precision:.6f}\nrecall={recall:.6f}\n"
        f"target_precision={cfg.target_precision}\n"
    )
    return EXIT_OK


def cmd_segment(cfg: RunConfig) -> int:
    """Turn a score track into overlap segments."""
    _require_files(cfg, "scores")
    _require(cfg, "out")
    track = inference.read_scores(cfg.scores)
    segs = inference.scores_to_segments(track, _threshold(cfg), cfg.min_duration)
    diarization.write_segments(segs, cfg.out)
    return EXIT_OK


def cmd_split(cfg: RunConfig) -> int:
    """Cut SAD segments into single-speaker and overlap pieces."""
    _require_files(cfg, "sad", "osd")
    _require(cfg, "out")
    pieces = diarization.split_all(diarization.read_segments(cfg.sad), diarization.read_segments(cfg.osd))
    diarization.write_pieces(pieces, cfg.out)
    return EXIT_OK


def cmd_assign(cfg: RunConfig) -> int:
    """Write RTTM with the second-ranked speaker added on overlap pieces."""
    _require_files(cfg, "pieces", "ranking")
    _require(cfg, "out")
    stats: dict = {}
    records = diarization.assign_second_speaker(
        diarization.read_pieces(cfg.pieces), diarization.read_rankings(cfg.ranking), cfg.file_id,
        stats=stats,
    )
    if stats:
        log.warning("%d overlap pieces had a single-speaker ranking", stats["single_speaker_overlaps"])
    diarization.write_rttm(records, cfg.out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Compute DER or frame precision/recall and write a report."""
    _require_files(cfg, "ref", "hyp")
    _require(cfg, "out")
    if cfg.mode == "der":
        res = scoring.compute_der(diarization.read_rttm(cfg.ref), diarization.read_rttm(cfg.hyp), cfg.collar)
        metrics = {"der": res.der, "fa": res.false_alarm, "miss": res.miss,
                   "conf": res.confusion, "ref_speech_s": res.total_ref_speech}
    elif cfg.mode == "osd":
        ref = augment.read_labels(cfg.ref)
        first = Path(cfg.hyp).read_text().split("\n", 1)[0]
        if "\t" in first:
            pred = inference.read_scores(cfg.hyp)
            pr = scoring.frame_precision_recall(pred, ref, _threshold(cfg))
        else:
            pr = scoring.frame_precision_recall(diarization.read_segments(cfg.hyp), ref)
        metrics = {"precision": pr.precision, "recall": pr.recall}
    else:
        raise UsageError(f"--mode must be 'der' or 'osd', got {cfg.mode!r}")
    Path(cfg.out).write_text(format_report(metrics))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "calibrate": cmd_calibrate,
    "segment": cmd_segment,
    "split": cmd_split,
    "assign": cmd_assign,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osdkit", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value config file")
        for f in _option_fields():
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, metavar=f.name.upper())
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} does not exist")
        values.update(read_config_file(args.config))
    for f in _option_fields():
        if hasattr(args, f.name):
            values[f.name] = _convert(f.name, getattr(args, f.name))
    return dataclasses.replace(RunConfig(), explicit=frozenset(values), **values)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, ValueError, AudioError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
