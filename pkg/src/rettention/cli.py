"""Command-line entry point: ``rettention {run,compare,trace-rho,mask-stats}``.

Configuration is a JSON document; any field can be overridden with a flag
named by its dotted path, e.g. ``--trajectory.drift_alpha 0.95``. The seed
resolves as config file < ``RETTENTION_SEED`` < flag.

Exit codes: 0 success, 2 configuration error, 3 numeric or invariant failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import (
    CacheMissError,
    ConfigError,
    InvalidMaskError,
    InvariantError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .masks import (
    SparseMask,
    VideoLayout,
    block_diagonal_mask,
    framewise_window_mask,
    full_mask,
    sliding_window_mask,
    sparsity,
    window_for_sparsity,
)
from .schedule import DenoisingSchedule
from .simulator import Backend, TrajectoryConfig, fmt_float, generate_trajectory, run_experiment, trace_rho

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMPARE_CSV_HEADER = ("backend", "mean_rel_err", "mean_cosine", "flop_ratio")
SEED_ENV = "RETTENTION_SEED"
MASK_KINDS = ("window", "framewise", "full", "block")

# Default operating point for the ratio experiments.
DEFAULT_TARGET_SPARSITY = 96.9


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "window"
    w: Optional[int] = None
    target_sparsity: Optional[float] = DEFAULT_TARGET_SPARSITY
    frames: Optional[int] = None
    spatial_tokens: Optional[int] = None
    block: Optional[int] = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ConfigError(f"mask.kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if self.kind in ("window", "framewise") and (self.w is None) == (self.target_sparsity is None):
            raise ConfigError("window masks need exactly one of mask.w or mask.target_sparsity")
        if self.kind == "block" and self.block is None:
            raise ConfigError("block masks need mask.block")

    def layout(self, tokens: int) -> VideoLayout:
        frames, spatial = self.frames, self.spatial_tokens
        if frames is None and spatial is None:
            raise ConfigError("framewise masks need mask.frames or mask.spatial_tokens")
        if spatial is None:
            spatial = tokens // frames
        if frames is None:
            frames = tokens // spatial
        if frames * spatial != tokens:
            raise ConfigError(f"frames ({frames}) x spatial_tokens ({spatial}) != tokens ({tokens})")
        return VideoLayout(frames, spatial)

    def build(self, heads: int, tokens: int) -> tuple[SparseMask, Optional[int]]:
        """Return the mask and, for window kinds, the half-width actually used."""
        if self.kind == "full":
            return full_mask(heads, tokens), None
        if self.kind == "block":
            return block_diagonal_mask(heads, tokens, self.block), None
        if self.kind == "window":
            w = self.w if self.w is not None else window_for_sparsity(tokens, self.target_sparsity)
            return sliding_window_mask(heads, tokens, w), w
        layout = self.layout(tokens)
        # framewise sparsity equals the spatial window's sparsity on S_f tokens
        w = self.w if self.w is not None else window_for_sparsity(layout.spatial_tokens, self.target_sparsity)
        return framewise_window_mask(heads, layout, w), w


@dataclass(frozen=True)
class RunConfig:
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    schedule: DenoisingSchedule = field(default_factory=DenoisingSchedule)
    backend: Backend = Backend.RETTENTION
    output_dir: str = "rettention_out"
    trace: tuple[int, int] = (0, 0)
    self_check: bool = True

    def __post_init__(self):
        if self.schedule.total_steps != self.trajectory.steps:
            raise ConfigError(
                f"schedule.total_steps ({self.schedule.total_steps}) != trajectory.steps ({self.trajectory.steps})"
            )

    def to_dict(self) -> dict:
        return {
            "trajectory": asdict(self.trajectory),
            "mask": asdict(self.mask),
            "schedule": self.schedule.to_dict(),
            "backend": self.backend.value,
            "output_dir": self.output_dir,
            "trace": {"head": self.trace[0], "row": self.trace[1]},
            "self_check": self.self_check,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Build a config from a (possibly partial) document merged over defaults.

        ``schedule.total_steps`` follows ``trajectory.steps`` unless given.
        """
        base = RunConfig.defaults_dict()
        _merge(base, doc)
        if "total_steps" not in (doc.get("schedule") or {}):
            base["schedule"]["total_steps"] = base["trajectory"]["steps"]
        try:
            return cls(
                trajectory=TrajectoryConfig(**base["trajectory"]),
                mask=MaskSpec(**base["mask"]),
                schedule=DenoisingSchedule.from_dict(base["schedule"]),
                backend=Backend(base["backend"]),
                output_dir=str(base["output_dir"]),
                trace=(int(base["trace"]["head"]), int(base["trace"]["row"])),
                self_check=bool(base["self_check"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def defaults_dict() -> dict:
        return {
            "trajectory": asdict(TrajectoryConfig()),
            "mask": asdict(MaskSpec()),
            "schedule": DenoisingSchedule().to_dict(),
            "backend": Backend.RETTENTION.value,
            "output_dir": "rettention_out",
            "trace": {"head": 0, "row": 0},
            "self_check": True,
        }


def _merge(base: dict, over: dict, prefix: str = "") -> None:
    if not isinstance(over, dict):
        raise ConfigError(f"expected an object at {prefix or 'top level'}")
    for key, value in over.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _set_dotted(doc: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _dotted_keys(doc: dict, prefix: str = "") -> list[str]:
    keys = []
    for key, value in doc.items():
        if isinstance(value, dict):
            keys += _dotted_keys(value, f"{prefix}{key}.")
        else:
            keys.append(prefix + key)
    return keys


# short aliases for the most common overrides
ALIASES = {
    "--backend": "backend",
    "--seed": "trajectory.seed",
    "--drift-alpha": "trajectory.drift_alpha",
    "--logit-scale": "trajectory.logit_scale",
    "--lambda": "schedule.lambda",
    "--warmup": "schedule.warmup_full_steps",
    "--period": "schedule.cache_period",
    "--target-sparsity": "mask.target_sparsity",
    "--window": "mask.w",
    "--heads": "trajectory.heads",
    "--tokens": "trajectory.tokens",
    "--head-dim": "trajectory.head_dim",
    "--output-dir": "output_dir",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--steps", type=int, help="trajectory and schedule length")
    p.add_argument("--no-self-check", action="store_true", help="skip identity checks during the run")
    for flag, dotted in ALIASES.items():
        p.add_argument(flag, dest=dotted, default=None, metavar="VALUE", help=f"alias for --{dotted}")
    for dotted in _dotted_keys(RunConfig.defaults_dict()):
        if f"--{dotted}" not in ALIASES:
            p.add_argument(f"--{dotted}", dest=dotted, default=None, metavar="VALUE")


def load_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    doc = copy.deepcopy(doc)
    if environ.get(SEED_ENV):
        try:
            _set_dotted(doc, "trajectory.seed", int(environ[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if args.steps is not None:
        _set_dotted(doc, "trajectory.steps", args.steps)
        _set_dotted(doc, "schedule.total_steps", args.steps)
    for dotted in _dotted_keys(RunConfig.defaults_dict()):
        value = getattr(args, dotted, None)
        if value is not None:
            _set_dotted(doc, dotted, _parse_value(value))
    # an explicit w on the command line replaces a target sparsity from file or defaults
    if getattr(args, "mask.w", None) is not None and getattr(args, "mask.target_sparsity", None) is None:
        _set_dotted(doc, "mask.target_sparsity", None)
    if getattr(args, "mask.target_sparsity", None) is not None and getattr(args, "mask.w", None) is None:
        _set_dotted(doc, "mask.w", None)
    if args.no_self_check:
        doc["self_check"] = False
    return RunConfig.from_dict(doc)


def _prepare(cfg: RunConfig):
    t = cfg.trajectory
    mask, w = cfg.mask.build(t.heads, t.tokens)
    return generate_trajectory(t), mask, w


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(cfg: RunConfig) -> int:
    traj, mask, w = _prepare(cfg)
    report = run_experiment(
        traj, mask, cfg.schedule, cfg.backend, trace=cfg.trace, self_check=cfg.self_check, seed=cfg.trajectory.seed
    )
    report.config = cfg.to_dict() | {"resolved_window": w}
    out = _out_dir(cfg)
    report.write_json(out / "report.json")
    report.write_steps_csv(out / "steps.csv")
    agg = report.aggregate()
    print(
        f"seed={cfg.trajectory.seed} backend={cfg.backend.value} sparsity={report.sparsity:.4f}% "
        f"mean_rel_err={agg['mean_rel_err']:.6g} flop_ratio={report.flop_ratio:.6g} -> {out}"
    )
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    traj, mask, _ = _prepare(cfg)
    out = _out_dir(cfg)
    rows = []
    for backend in Backend:
        rep = run_experiment(
            traj, mask, cfg.schedule, backend, trace=cfg.trace, self_check=cfg.self_check, seed=cfg.trajectory.seed
        )
        agg = rep.aggregate()
        rows.append((backend.value, agg["mean_rel_err"], agg["mean_cosine"], rep.flop_ratio))
    with open(out / "compare.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(COMPARE_CSV_HEADER)
        for name, err, cos, ratio in rows:
            wr.writerow([name, fmt_float(err), fmt_float(cos), fmt_float(ratio)])
    print(f"seed={cfg.trajectory.seed} sparsity={sparsity(mask):.4f}%")
    for name, err, cos, ratio in rows:
        print(f"  {name:<13} rel_err={err:.6g} cosine={cos:.6g} flop_ratio={ratio:.6g}")
    return EXIT_OK


def cmd_trace_rho(cfg: RunConfig, head: Optional[int], row: Optional[int]) -> int:
    h0 = cfg.trace[0] if head is None else head
    i0 = cfg.trace[1] if row is None else row
    traj, mask, _ = _prepare(cfg)
    tr = trace_rho(traj, mask, h0, i0)
    out = _out_dir(cfg)
    tr.write_csv(out / "rho_trace.csv")
    print(f"seed={cfg.trajectory.seed} head={h0} row={i0} steps={len(tr)} -> {out / 'rho_trace.csv'}")
    return EXIT_OK


def cmd_mask_stats(args: argparse.Namespace) -> int:
    if args.mask_file:
        try:
            mask = SparseMask.load_json(args.mask_file)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read mask {args.mask_file}: {exc}") from exc
        w = None
    else:
        if args.w is not None and args.target_sparsity is not None:
            raise ConfigError("give at most one of --w and --target-sparsity")
        target = args.target_sparsity
        if args.kind in ("window", "framewise") and args.w is None and target is None:
            target = DEFAULT_TARGET_SPARSITY
        spec = MaskSpec(
            kind=args.kind,
            w=args.w,
            target_sparsity=target if args.w is None else None,
            frames=args.frames,
            spatial_tokens=args.spatial_tokens,
            block=args.block,
        )
        mask, w = spec.build(args.heads, args.tokens)
    sizes = mask.row_sizes
    print(f"h={mask.heads}")
    print(f"T={mask.tokens}")
    print(f"included={mask.included_count}")
    print(f"sparsity={sparsity(mask):.6f}%")
    print(f"row_min={int(sizes.min())}")
    print(f"row_max={int(sizes.max())}")
    if w is not None:
        print(f"w={w}")
    if args.export:
        mask.save_json(args.export)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rettention", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one backend and write report.json + steps.csv")
    _add_config_args(p)

    p = sub.add_parser("compare", help="run all backends on one trajectory and write compare.csv")
    _add_config_args(p)

    p = sub.add_parser("trace-rho", help="write per-step denominators and ratio for one (head, row)")
    _add_config_args(p)
    p.add_argument("--head", type=int)
    p.add_argument("--row", type=int)

    p = sub.add_parser("mask-stats", help="print mask size and sparsity")
    p.add_argument("--kind", choices=MASK_KINDS, default="window")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--tokens", type=int, default=128)
    p.add_argument("--w", type=int)
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--spatial-tokens", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--mask-file", help="read a mask JSON document instead of building one")
    p.add_argument("--export", help="write the mask as a JSON document")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mask-stats":
            return cmd_mask_stats(args)
        cfg = load_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        return cmd_trace_rho(cfg, args.head, args.row)
    except (NumericError, InvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParameterError, ShapeError, InvalidMaskError, CacheMissError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
