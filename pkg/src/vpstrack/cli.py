"""Command-line entry point.

Subcommands: simulate, track, train, evaluate, ablate.

Settings are resolved as built-in defaults < ``--config`` file < explicit flags.
The config file is flat ``key = value`` text; ``#`` starts a comment.

Exit codes: 0 ok, 2 bad arguments, 3 malformed input files, 4 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import experiments
from .association import MODES, FusionWeights, TrackerConfig, track_sequence
from .errors import DimensionMismatch, FormatError, LengthMismatch, VpsError
from .instance_tracker import TrainConfig, load_checkpoint, save_checkpoint, train
from .pixel_tracker import CorrelationMatrix
from .seqio import read_flows, read_frames, read_sequence, write_frames, write_jsonl
from .simulator import PRESETS, generate, preset, spec_from_dict, training_pairs, write_sequence
from .vpq import vpq_report

log = logging.getLogger("vpstrack")

EXIT_OK, EXIT_ARGS, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "hybrid"
    tau_match: float = 0.3
    theta: float = 0.01
    mutual_check: bool = True
    temporal: bool = True
    memory_window: int = 2
    w_instance: float = 0.5
    w_pixel: float = 0.5
    bias: float = 0.0
    h_roi: int = 32
    w_roi: int = 64
    d_embed: int = 64
    epochs: int = 500
    lr: float = 1e-2
    seed: int = 0
    checkpoint: str = ""
    flow_sigma: float = 1.5

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("tau_match", "theta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.1:
                raise ConfigError(f"{name} must lie in [0, 1.1], got {v}")
        for name in ("h_roi", "w_roi", "d_embed", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.memory_window < 0:
            raise ConfigError("memory_window must be >= 0")
        if self.lr <= 0 or self.flow_sigma < 0:
            raise ConfigError("lr must be > 0 and flow_sigma >= 0")
        return self

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(
            mode=self.mode, tau_match=self.tau_match, theta=self.theta, mutual_check=self.mutual_check,
            temporal=self.temporal, memory_window=self.memory_window,
            weights=FusionWeights(self.w_instance, self.w_pixel, self.bias), h_roi=self.h_roi, w_roi=self.w_roi,
        )


def _coerce(name: str, raw: str, typ) -> object:
    if typ == "bool" or typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    conv = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return conv(raw.strip())
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def read_config_file(path: str) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in values:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values).validate()


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tau", dest="tau_match", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--mutual", dest="mutual_check", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--temporal", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--memory-window", type=int)
    p.add_argument("--w-instance", type=float)
    p.add_argument("--w-pixel", type=float)
    p.add_argument("--bias", type=float)
    p.add_argument("--h-roi", type=int)
    p.add_argument("--w-roi", type=int)
    p.add_argument("--d-embed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="embedding head checkpoint (.vpse)")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    if bool(args.preset) == bool(args.spec):
        raise ConfigError("give exactly one of --preset or --spec")
    if args.preset:
        spec = preset(args.preset, args.seed or 0)
    else:
        try:
            spec = spec_from_dict(json.loads(Path(args.spec).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise FormatError(f"bad scene spec: {e}") from None
    out = write_sequence(generate(spec), args.out)
    print(f"wrote {len(list((out / 'frames').glob('*.vpsg')))} frames to {out}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = resolve_config(args)
    frames = read_frames(args.frames)
    flows = read_flows(args.flows or args.frames)
    params = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    if params is None and cfg.mode != "pixel":
        params = experiments.train_head(epochs=min(cfg.epochs, 50), seed=cfg.seed, h_roi=cfg.h_roi,
                                        w_roi=cfg.w_roi, d_embed=cfg.d_embed, lr=cfg.lr)
    out = Path(args.out)
    dump_dir = Path(args.dump_matrices) if args.dump_matrices else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def dump(t: int, m: CorrelationMatrix) -> None:
        (dump_dir / f"{t:06d}.tsv").write_text(m.to_tsv())

    result = track_sequence(frames, flows, cfg.tracker(), params, on_matrix=dump if dump_dir else None)
    write_frames(result.frames, out)
    write_jsonl(result.provenance, out / "provenance.jsonl")
    _dump_json({"config": asdict(cfg)}, out / "run.json")
    print(f"tracked {len(frames)} frames -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    seqs = [read_sequence(p) for p in args.sequences]
    data = training_pairs(seqs, cfg.h_roi, cfg.w_roi)
    result = train(data, TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, d_embed=cfg.d_embed))
    save_checkpoint(result.params, args.checkpoint_out)
    _dump_json({"config": asdict(cfg), "loss": result.loss_trace}, Path(str(args.checkpoint_out) + ".loss.json"))
    print(f"trained {cfg.epochs} epochs on {len(data)} pairs, final loss {result.loss_trace[-1]:.6f}")
    return EXIT_OK


def _windows(raw: str) -> list[int]:
    try:
        ws = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad window list {raw!r}") from None
    if not ws or min(ws) < 1:
        raise ConfigError("windows must be positive integers")
    return ws


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args) if args.config else None
    windows = _windows(args.windows)
    pred, gt = read_frames(args.pred), read_frames(args.gt)
    header = {"pred": str(args.pred), "gt": str(args.gt), "windows": args.windows}
    if cfg is not None:
        header.update({f"config.{k}": v for k, v in asdict(cfg).items()})
    report = vpq_report(pred, gt, windows, header=header)
    out = Path(args.report_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(report.to_table())
    print(report.to_table(), end="")
    return EXIT_OK


def _ablation_table(title: str, columns: list[str], rows: list[tuple[str, list[float]]]) -> str:
    w0 = max(len(r[0]) for r in rows) + 2
    w = max(10, max(len(c) for c in columns) + 2)
    lines = [title, "".ljust(w0) + "".join(c.rjust(w) for c in columns)]
    for label, vals in rows:
        lines.append(label.ljust(w0) + "".join(f"{v:.2f}".rjust(w) for v in vals))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    params = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else experiments.train_head(
        epochs=50, seed=cfg.seed, h_roi=cfg.h_roi, w_roi=cfg.w_roi, d_embed=cfg.d_embed, lr=cfg.lr
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.tracker()
    presets = [x.strip() for x in args.presets.split(",") if x.strip()]
    unknown = sorted(set(presets) - set(PRESETS))
    if unknown or not presets:
        raise ConfigError(f"unknown presets {unknown}; choose from {PRESETS}")
    if args.suite == "trackers":
        rows = experiments.ablate_trackers(params, presets, cfg.flow_sigma, base, cfg.seed)
        table = _ablation_table(
            f"# VPQ per preset; flow noise sigma = {cfg.flow_sigma}",
            presets + ["mean"],
            [
                (f"{r['mode']} {'+' if r['mutual_check'] else '-'}mutual {'+' if r['temporal'] else '-'}temporal",
                 [r["vpq"][p] for p in presets] + [r["mean"]])
                for r in rows
            ],
        )
    elif args.suite == "theta":
        rows = experiments.theta_sweep(params, "occlusion_reappear", experiments.THETAS, 0.0, base, cfg.seed)
        table = _ablation_table(
            "# VPQ on occlusion_reappear per temporal threshold",
            [f"theta={t}" for t in experiments.THETAS],
            [(r["mode"], [r["vpq"][t] for t in experiments.THETAS]) for r in rows],
        )
        rows = [{"mode": r["mode"], "vpq": {str(k): v for k, v in r["vpq"].items()}} for r in rows]
    else:
        raise ConfigError(f"unknown suite {args.suite!r}")
    _dump_json({"config": asdict(cfg), "suite": args.suite, "rows": rows}, out / "ablation.json")
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpstrack", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic sequence directory")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--spec", help="scene spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="assign persistent instance ids")
    p.add_argument("--frames", required=True, help="directory of .vpsg frames (or a sequence dir)")
    p.add_argument("--flows", help="directory of .flo flows (defaults to the frames sequence dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-matrices", help="write each adjacent-frame matrix as TSV here")
    _add_run_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="train the embedding head on simulator sequences")
    p.add_argument("--sequences", nargs="+", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="VPQ report of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--windows", default="1,2,3,4", help="window lengths in evaluated frames")
    p.add_argument("--report-out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="tracker grid or theta sweep over presets")
    p.add_argument("--suite", choices=("trackers", "theta"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--presets", default=",".join(PRESETS), help="comma-separated presets (trackers suite)")
    p.add_argument("--flow-sigma", type=float)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_ARGS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except (FormatError, DimensionMismatch, LengthMismatch, FileNotFoundError, UnicodeDecodeError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (AssertionError, VpsError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
