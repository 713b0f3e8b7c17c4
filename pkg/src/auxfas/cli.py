"""Command-line entry point: dataset generation, training, evaluation and analysis.

Every command that writes an output directory also writes ``config.ini``,
the effective run configuration after file and command-line overrides.
Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container, face_model as fm, metrics, net, rppg, synthgen, trainer
from .container import FormatError, atomic_write
from .net import NetConfig
from .trainer import Checkpoint, NumericalError, TrainConfig

log = logging.getLogger("auxfas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict[str, str] = field(default_factory=lambda: {"train": "", "test": "", "calibration": ""})
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        cp["net"] = {k: _fmt(v) for k, v in self.net.to_dict().items()}
        cp["train"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.train).items() if k != "seed"}
        cp["data"] = dict(self.data)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, path: str | None = None, overrides: Sequence[str] = ()) -> "RunConfig":
        """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
        values: dict[str, dict[str, str]] = {}
        if path:
            cp = configparser.ConfigParser()
            try:
                with open(path) as fh:
                    cp.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            for sec in cp.sections():
                values.setdefault(sec, {}).update(cp[sec])
        for item in overrides:
            key, sep, val = item.partition("=")
            sec, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            values.setdefault(sec, {})[name] = val.strip()
        return cls._from_values(values)

    @classmethod
    def _from_values(cls, values: dict[str, dict[str, str]]) -> "RunConfig":
        unknown = set(values) - {"run", "net", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        run = values.get("run", {})
        if set(run) - {"seed"}:
            raise ConfigError(f"unknown key(s) in [run]: {sorted(set(run) - {'seed'})}")
        base = cls()
        data = dict(base.data)
        bad = set(values.get("data", {})) - set(data)
        if bad:
            raise ConfigError(f"unknown key(s) in [data]: {sorted(bad)}")
        data.update(values.get("data", {}))
        try:
            net_cfg = _build(NetConfig, base.net, values.get("net", {}), "net")
            train_cfg = _build(TrainConfig, base.train, values.get("train", {}), "train", skip=("seed",))
            seed = int(run.get("seed", base.seed))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(net_cfg, train_cfg, data, seed)


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, (list, tuple)):
        return tuple(int(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip())
    return type(default)(raw)


def _build(cls, base, values: dict[str, str], section: str, skip: Sequence[str] = ()):
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    kw = {k: _parse(v, getattr(base, k)) for k, v in values.items()}
    return dataclasses.replace(base, **kw)


def _echo(out: Path, cfg: RunConfig) -> None:
    atomic_write(out / "config.ini", cfg.to_ini().encode())


# ---------------------------------------------------------------------------
# files

def write_pgm(path, img: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    img = np.asarray(img, dtype=np.float64)
    scale = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    px = np.round(np.clip(scale, 0.0, 1.0) * 255).astype(np.uint8)
    kind = b"P6" if px.ndim == 3 else b"P5"
    h, w = px.shape[:2]
    atomic_write(path, kind + f"\n{w} {h}\n255\n".encode() + px.tobytes())


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def load_dataset(directory) -> list[synthgen.VideoClip]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read dataset manifest in {d}: {exc}") from exc
    return [container.read_clip(d / e["dir"]) for e in manifest["clips"]]


def save_model(path, ck: Checkpoint, cfg: RunConfig) -> None:
    arrays = ck.to_arrays()
    arrays["meta/run_config"] = np.frombuffer(cfg.to_ini().encode(), dtype=np.uint8).astype(np.int64)
    container.save(path, arrays)


def load_model(path) -> tuple[Checkpoint, RunConfig]:
    arrays = container.load(path)
    if "meta/run_config" not in arrays:
        raise FormatError(f"{path} carries no run configuration")
    text = bytes(np.asarray(arrays["meta/run_config"], dtype=np.uint8).tolist()).decode()
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = RunConfig._from_values({s: dict(cp[s]) for s in cp.sections()})
    return Checkpoint.from_arrays(arrays), cfg


def _vmap():
    return fm.build_vertex_index_map(synthgen.model_basis())


def infer_all(clips, params, cfg: NetConfig, vmap) -> list[net.ClipOutput]:
    return [net.infer_clip(np.asarray(c.frames), c.posed_shapes(), params, cfg, vmap) for c in clips]


def _scored(clips, outs) -> metrics.ScoredSet:
    return metrics.ScoredSet([f"clip_{i:04d}" for i in range(len(clips))], [c.is_live for c in clips],
                             [o.score for o in outs])


def _floats(text: str | None) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")]) if text else np.zeros(0)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    clips = synthgen.gen_dataset(args.subjects, args.clips, args.frames, args.fps, args.size, seed=cfg.seed,
                                 first_subject=args.first_subject)
    entries = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:04d}"
        container.write_clip(out / name, clip)
        entries.append({"dir": name, "label": clip.label, "subject": clip.subject_id,
                        "heart_rate_hz": clip.heart_rate})
    container.save_basis(out / "basis.axsp", synthgen.model_basis())
    write_json(out / "manifest.json", {
        "clips": entries, "frames": args.frames, "fps": args.fps, "size": args.size, "seed": cfg.seed,
        "subjects": list(range(args.first_subject, args.first_subject + args.subjects)),
    })
    _echo(out, cfg)
    live = sum(e["label"] == "live" for e in entries)
    print(f"wrote {len(entries)} clips ({live} live, {len(entries) - live} spoof) to {out}")
    return EXIT_OK


def cmd_render_depth(args, cfg: RunConfig) -> int:
    basis = container.load_basis(args.basis) if args.basis else synthgen.model_basis()
    a_id, a_exp = np.zeros(basis.n_id), np.zeros(basis.n_exp)
    for dst, src in ((a_id, _floats(args.alpha_id)), (a_exp, _floats(args.alpha_exp))):
        if src.size > dst.size:
            raise UsageError(f"got {src.size} coefficients, basis has {dst.size}")
        dst[:src.size] = src
    base = fm.canonical_pose(args.size, args.size)
    pose = fm.Pose(base.s * args.scale, fm.rotation(*np.deg2rad([args.yaw, args.pitch, args.roll])),
                   base.t + np.array([args.shift_x, args.shift_y, 0.0]))
    depth = fm.ground_truth_depth(basis, fm.ShapeParams(a_id, a_exp), pose, args.size, args.size)
    out = Path(args.out)
    write_pgm(out / "depth.pgm", depth)
    container.save(out / "depth.axsp", {"depth": depth})
    _echo(out, cfg)
    print(f"depth map: {int(np.count_nonzero(depth))} face pixels, written to {out}")
    return EXIT_OK


def cmd_extract_rppg(args, cfg: RunConfig) -> int:
    clip = container.read_clip(args.clip)
    spec = rppg.extract(np.asarray(clip.frames), clip.posed_shapes(), clip.basis.forehead, clip.fps)
    result = {"peak_bin": spec.peak_bin, "peak_hz": spec.peak_hz, "raw_norm": spec.raw_norm,
              "hz_per_bin": spec.hz_per_bin, "f": spec.f.tolist()}
    if args.out:
        out = Path(args.out)
        write_json(out / "rppg.json", result)
        _echo(out, cfg)
    print(f"peak bin {spec.peak_bin} ({spec.peak_hz:.3f} Hz), pre-normalization norm {spec.raw_norm:.4g}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    data = args.data or cfg.data["train"]
    if not data:
        raise UsageError("train needs --data or data.train in the config")
    clips = load_dataset(data)
    resume = None
    if args.resume:
        resume, _ = load_model(args.resume)
    _echo(out, cfg)
    records: list[dict] = []

    def on_checkpoint(ck: Checkpoint) -> None:
        save_model(out / f"ckpt_epoch_{ck.epoch:02d}.axsp", ck, cfg)
        save_model(out / "model.axsp", ck, cfg)
        atomic_write(out / "train_log.jsonl", "".join(json.dumps(r) + "\n" for r in records).encode())
        log.info("epoch %d checkpoint written", ck.epoch)

    trainer.train(clips, cfg.net, cfg.train_config(), _vmap(), resume=resume,
                  on_record=records.append, on_checkpoint=on_checkpoint)
    print(f"trained {cfg.train.epochs} epochs on {len(clips)} clips; model at {out / 'model.axsp'}")
    return EXIT_OK


def _read_scores(path) -> metrics.ScoredSet:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in ("live", "spoof"):
            raise FormatError(f"{path}:{n}: expected 'id live|spoof score'")
        entries.append((parts[0], parts[1], float(parts[2])))
    return metrics.ScoredSet.from_entries(entries)


def _threshold(args, scored: metrics.ScoredSet, params=None, net_cfg=None, vmap=None) -> tuple[float, str]:
    if args.threshold is not None:
        return args.threshold, "given"
    if getattr(args, "calibration", None):
        cal = load_dataset(args.calibration)
        return metrics.eer_threshold(_scored(cal, infer_all(cal, params, net_cfg, vmap))), "calibration EER"
    return metrics.eer_threshold(scored), "EER on evaluated set"


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    params = net_cfg = vmap = None
    if args.scores:
        scored = _read_scores(args.scores)
    else:
        if not (args.model and args.data):
            raise UsageError("eval needs --scores, or --model with --data")
        ck, cfg = load_model(args.model)
        params, net_cfg, vmap = ck.params, cfg.net, _vmap()
        clips = load_dataset(args.data)
        scored = _scored(clips, infer_all(clips, params, net_cfg, vmap))
    tau, how = _threshold(args, scored, params, net_cfg, vmap)
    report = metrics.rates_at_threshold(scored, tau)
    roc = metrics.roc(scored)
    summary = {**report.to_dict(), "threshold_rule": how,
               "tdr_at_fdr": {str(f): metrics.tdr_at_fdr(scored, f) for f in (0.01, 0.1)},
               "n_live": int(scored.labels.sum()), "n_spoof": int((~scored.labels).sum())}
    write_json(out / "report.json", summary)
    atomic_write(out / "roc.tsv", ("fdr\ttdr\n" + "".join(f"{f:.6f}\t{t:.6f}\n" for f, t in roc)).encode())
    atomic_write(out / "scores.tsv", "".join(
        f"{i}\t{'live' if l else 'spoof'}\t{s!r}\n" for i, l, s in zip(scored.ids, scored.labels, scored.scores)
    ).encode())
    _echo(out, cfg)
    print(f"APCER {report.apcer:.2f}%  BPCER {report.bpcer:.2f}%  ACER {report.acer:.2f}%  "
          f"HTER {report.hter:.2f}%  (threshold {tau:.6g}, {how})")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    ck, cfg = load_model(args.model)
    clip = container.read_clip(args.clip)
    out = net.infer_clip(np.asarray(clip.frames), clip.posed_shapes(), ck.params, cfg.net, _vmap())
    print(f"{out.score!r}")
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ck, cfg = load_model(args.model)
    clips = load_dataset(args.data)
    vmap = _vmap()
    outs = infer_all(clips, ck.params, cfg.net, vmap)
    labels = np.array([c.is_live for c in clips])
    scored = _scored(clips, outs)
    depths = np.stack([o.depth for o in outs])
    rppgs = np.stack([o.rppg for o in outs])
    gt_depth = np.stack([c.gt_depth[-1] for c in clips])
    gt_rppg = np.stack([c.gt_rppg for c in clips])
    mse = {"depth": metrics.estimation_mse(depths, gt_depth, labels),
           "rppg": metrics.estimation_mse(rppgs, gt_rppg, labels)}
    write_json(out / "mse.json", mse)
    if outs[0].frontal is not None:
        stats = metrics.frontal_map_stats(np.stack([o.frontal.mean(axis=0) for o in outs]), labels)
        arrays = {}
        for name, (mean, std) in stats.items():
            arrays[f"{name}_mean"], arrays[f"{name}_std"] = mean, std
        hi = max(float(np.max(np.abs(a))) for a in arrays.values()) or 1.0
        for k, a in arrays.items():
            write_pgm(out / f"frontal_{k}.pgm", a, -hi if k.endswith("mean") else 0.0, hi)
        container.save(out / "frontal_stats.axsp", arrays)
    tau, how = _threshold(args, scored)
    fails = metrics.attribute_failures(depths, rppgs, labels, cfg.net.lam, tau)
    write_json(out / "failures.json", {**fails.to_dict(), "threshold": tau, "threshold_rule": how})
    _echo(out, cfg)
    print(f"depth MSE live {mse['depth']['live']:.4g} spoof {mse['depth']['spoof']:.4g}; "
          f"rPPG MSE live {mse['rppg']['live']:.4g} spoof {mse['rppg']['spoof']:.4g}; "
          f"{fails.failed} failures, {fails.attributed} attributed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--config", help="INI file with [run] [net] [train] [data] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="auxfas", description="Depth and rPPG supervised face anti-spoofing")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--clips", type=int, required=True, help="live clips per subject (spoofs: twice this)")
    g.add_argument("--frames", type=int, default=150)
    g.add_argument("--fps", type=float, default=30.0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--first-subject", type=int, default=0)

    r = sub.add_parser("render-depth", parents=[common], help="render a ground-truth depth map")
    r.add_argument("--basis", help="basis container; defaults to the procedural model")
    r.add_argument("--alpha-id", help="comma-separated identity coefficients")
    r.add_argument("--alpha-exp", help="comma-separated expression coefficients")
    for name in ("yaw", "pitch", "roll"):
        r.add_argument(f"--{name}", type=float, default=0.0, help="degrees")
    r.add_argument("--scale", type=float, default=1.0, help="relative to the canonical scale")
    r.add_argument("--shift-x", type=float, default=0.0)
    r.add_argument("--shift-y", type=float, default=0.0)
    r.add_argument("--size", type=int, default=64)

    e = sub.add_parser("extract-rppg", parents=[common], help="ground-truth rPPG spectrum of a clip")
    e.add_argument("--clip", required=True)

    t = sub.add_parser("train", parents=[common], help="two-stream training")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--resume", help="checkpoint to continue from")

    v = sub.add_parser("eval", parents=[common], help="error rates and ROC")
    v.add_argument("--model")
    v.add_argument("--data")
    v.add_argument("--scores", help="whitespace-separated 'id live|spoof score' lines instead of a model")
    v.add_argument("--threshold", type=float)
    v.add_argument("--calibration", help="dataset whose EER threshold is applied")

    s = sub.add_parser("score", parents=[common], help="liveness score of one clip")
    s.add_argument("--model", required=True)
    s.add_argument("--clip", required=True)

    a = sub.add_parser("analyze", parents=[common], help="frontal-map statistics, MSE, failure attribution")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--threshold", type=float)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data, "render-depth": cmd_render_depth, "extract-rppg": cmd_extract_rppg,
    "train": cmd_train, "eval": cmd_eval, "score": cmd_score, "analyze": cmd_analyze,
}
NEEDS_OUT = {"gen-data", "render-depth", "train", "eval", "analyze"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in NEEDS_OUT and not args.out:
            raise UsageError(f"{args.command} needs --out")
        cfg = RunConfig.load(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, rppg.RppgError, metrics.MetricsError, fm.DegenerateShapeError, fm.PoseError,
            OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
