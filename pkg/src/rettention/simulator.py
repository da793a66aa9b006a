"""Synthetic denoising trajectories and multi-step experiment runs.

Q, K and V each follow an independent Gaussian AR(1) process across steps::

    X_0 ~ N(0, s^2)
    X_t = alpha * X_{t-1} + sqrt(1 - alpha^2) * xi_t,   xi_t ~ N(0, s^2)

so the marginal variance stays ``s^2`` and ``alpha`` dials step-to-step
redundancy from frozen (1) to independent (0).

Every run evaluates full attention on the same inputs as the oracle and
scores the selected backend against it.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionInputs,
    compute_denominator_ratio,
    full_attention,
    post_softmax_masked,
    rettention_attention,
    sparse_attention,
)
from .errors import CacheMissError, InvariantError, ParameterError, ShapeError
from .masks import SparseMask, sparsity
from .schedule import AttentionCache, DenoisingSchedule, StepKind, advance_cache, capture_cache

STEPS_CSV_HEADER = ("step", "kind", "rel_err", "cosine", "psnr", "full_denom", "sparse_denom", "rho")
RHO_TRACE_CSV_HEADER = ("step", "full_denom", "sparse_denom", "rho")

SELF_CHECK_TOL = 1e-9


class Backend(str, enum.Enum):
    FULL = "full"
    SPARSE = "sparse"
    POST_SOFTMAX = "post_softmax"
    RETTENTION = "rettention"


@dataclass(frozen=True)
class TrajectoryConfig:
    seed: int = 0
    steps: int = 20
    heads: int = 2
    tokens: int = 128
    head_dim: int = 16
    drift_alpha: float = 0.99
    logit_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if min(self.heads, self.tokens, self.head_dim) < 1:
            raise ParameterError("heads, tokens and head_dim must all be >= 1")
        if not 0.0 <= self.drift_alpha <= 1.0:
            raise ParameterError(f"drift_alpha must lie in [0, 1], got {self.drift_alpha}")
        if not self.logit_scale > 0.0:
            raise ParameterError(f"logit_scale must be > 0, got {self.logit_scale}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.heads, self.tokens, self.head_dim)


def generate_trajectory(cfg: TrajectoryConfig) -> list[AttentionInputs]:
    rng = np.random.default_rng(cfg.seed)
    a = cfg.drift_alpha
    b = math.sqrt(1.0 - a * a)
    s = cfg.logit_scale
    x = [rng.normal(0.0, s, size=cfg.shape) for _ in range(3)]
    out = [AttentionInputs(*x)]
    for _ in range(1, cfg.steps):
        x = [a * xi + b * rng.normal(0.0, s, size=cfg.shape) for xi in x]
        out.append(AttentionInputs(*x))
    return out


# --- FLOP accounting ---------------------------------------------------------


@dataclass(frozen=True)
class FlopCount:
    """Itemised multiply-add cost of one attention call (2 flops per MAC)."""

    qk: int
    softmax: int
    av: int
    overhead: int = 0

    @property
    def total(self) -> int:
        return self.qk + self.softmax + self.av + self.overhead


def _attention_flops(included: int, d_h: int) -> FlopCount:
    # softmax: max, exp-subtract and divide per included entry
    return FlopCount(qk=2 * included * d_h, softmax=3 * included, av=2 * included * d_h)


def flop_count(mask: SparseMask, d_h: int, rettention: bool = False) -> tuple[FlopCount, FlopCount]:
    """Cost of full attention and of sparse attention under ``mask``.

    With ``rettention=True`` the sparse count includes the per-row ratio scale
    and the residual add, ``h*T*d_h`` flops each.
    """
    h, T, _ = mask.shape
    full = _attention_flops(h * T * T, d_h)
    sparse = _attention_flops(mask.included_count, d_h)
    if rettention:
        sparse = replace(sparse, overhead=2 * h * T * d_h)
    return full, sparse


# --- metrics -----------------------------------------------------------------


def frobenius_rel_error(method: np.ndarray, oracle: np.ndarray) -> float:
    ref = np.linalg.norm(oracle)
    diff = np.linalg.norm(method - oracle)
    if ref == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(diff / ref)


def mean_row_cosine(method: np.ndarray, oracle: np.ndarray) -> float:
    num = np.sum(method * oracle, axis=-1)
    den = np.linalg.norm(method, axis=-1) * np.linalg.norm(oracle, axis=-1)
    cos = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 1.0)
    return float(cos.mean())


def output_psnr(method: np.ndarray, oracle: np.ndarray) -> float:
    """``20 log10(range / RMSE)`` with the oracle's value range; ``inf`` on exact match."""
    rmse = math.sqrt(float(np.mean((method - oracle) ** 2)))
    if rmse == 0.0:
        return math.inf
    rng = float(oracle.max() - oracle.min())
    if rng == 0.0:
        return -math.inf
    return 20.0 * math.log10(rng / rmse)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    kind: StepKind
    rel_err: float
    cosine: float
    psnr: float
    full_denom: float
    sparse_denom: float
    rho: float


@dataclass
class MetricsReport:
    backend: Backend
    seed: Optional[int]
    sparsity: float
    trace_index: tuple[int, int]
    steps: list[StepMetrics]
    flops_full: FlopCount
    flops_method: FlopCount
    flops_schedule_method: int
    flops_schedule_full: int
    config: dict = field(default_factory=dict)

    @property
    def flop_ratio(self) -> float:
        """Cost of the method at a sparse step relative to full attention."""
        return self.flops_method.total / self.flops_full.total

    @property
    def flop_ratio_schedule(self) -> float:
        return self.flops_schedule_method / self.flops_schedule_full

    def rel_errors(self, kind: Optional[StepKind] = None) -> np.ndarray:
        return np.array([s.rel_err for s in self.steps if kind is None or s.kind is kind])

    def sparse_steps(self) -> list[int]:
        return [s.step for s in self.steps if s.kind is StepKind.SPARSE]

    def aggregate(self, kind: Optional[StepKind] = None) -> dict:
        rows = [s for s in self.steps if kind is None or s.kind is kind]
        if not rows:
            return {"steps": 0, "mean_rel_err": None, "mean_cosine": None, "min_psnr": None}
        return {
            "steps": len(rows),
            "mean_rel_err": float(np.mean([s.rel_err for s in rows])),
            "max_rel_err": float(np.max([s.rel_err for s in rows])),
            "mean_cosine": float(np.mean([s.cosine for s in rows])),
            "min_psnr": float(np.min([s.psnr for s in rows])),
        }

    def to_dict(self) -> dict:
        return _json_safe(
            {
                "backend": self.backend.value,
                "seed": self.seed,
                "sparsity": self.sparsity,
                "trace": {"head": self.trace_index[0], "row": self.trace_index[1]},
                "flops": {
                    "full": asdict(self.flops_full) | {"total": self.flops_full.total},
                    "method": asdict(self.flops_method) | {"total": self.flops_method.total},
                    "flop_ratio": self.flop_ratio,
                    "schedule_full": self.flops_schedule_full,
                    "schedule_method": self.flops_schedule_method,
                    "flop_ratio_schedule": self.flop_ratio_schedule,
                },
                "aggregate": {
                    "all": self.aggregate(),
                    "sparse_steps": self.aggregate(StepKind.SPARSE),
                },
                "steps": [asdict(s) | {"kind": s.kind.value} for s in self.steps],
                "config": self.config,
            }
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(STEPS_CSV_HEADER)
            for s in self.steps:
                w.writerow(
                    [s.step, s.kind.value]
                    + [fmt_float(x) for x in (s.rel_err, s.cosine, s.psnr, s.full_denom, s.sparse_denom, s.rho)]
                )


def fmt_float(x: float) -> str:
    """Locale-independent shortest round-trip representation."""
    return repr(float(x))


def _json_safe(obj):
    # JSON has no infinities; encode them as strings
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# --- experiment runs ---------------------------------------------------------


def _check_inputs(traj: Sequence[AttentionInputs], mask: SparseMask) -> None:
    if not traj:
        raise ParameterError("trajectory is empty")
    for t, inp in enumerate(traj):
        if mask.shape != (inp.heads, inp.tokens, inp.tokens):
            raise ShapeError(f"step {t}: mask {mask.shape} does not match inputs {inp.q.shape}")


def _self_check_capture(inp: AttentionInputs, mask: SparseMask, cache: AttentionCache, full_out) -> None:
    scale = max(1.0, float(np.abs(inp.v).max()))
    recon = rettention_attention(inp, mask, cache).out
    err = float(np.abs(recon - full_out.out).max())
    if err > SELF_CHECK_TOL * scale:
        raise InvariantError(f"reshape + residual differs from full attention by {err:.3e} at capture")
    post = post_softmax_masked(inp, mask)
    if not np.allclose(post.row_mass, cache.rho_base, rtol=0.0, atol=SELF_CHECK_TOL):
        raise InvariantError("post-softmax row mass disagrees with the captured ratio")
    if not np.all((cache.rho_base > 0.0) & (cache.rho_base <= 1.0)):
        raise InvariantError("captured ratio outside (0, 1]")
    if not np.allclose(full_out.row_mass, 1.0, rtol=0.0, atol=SELF_CHECK_TOL):
        raise InvariantError("full softmax rows do not sum to one")


def run_experiment(
    traj: Sequence[AttentionInputs],
    mask: SparseMask,
    sched: DenoisingSchedule,
    backend: Backend | str,
    trace: tuple[int, int] = (0, 0),
    self_check: bool = False,
    seed: Optional[int] = None,
) -> MetricsReport:
    """Run ``backend`` over the trajectory and score each step against full attention.

    Non-sparse steps (warmup and caching) run full attention for every backend;
    sparse steps run the selected backend. The rettention backend captures its
    cache at non-sparse steps and advances it by ``sched.ramp_lambda`` each step.

    Raises:
        CacheMissError: if a sparse step precedes any capture.
        InvariantError: if ``self_check`` is on and an identity fails.
    """
    backend = Backend(backend)
    _check_inputs(traj, mask)
    if len(traj) != sched.total_steps:
        raise ParameterError(f"trajectory has {len(traj)} steps, schedule expects {sched.total_steps}")
    h0, i0 = trace
    if not (0 <= h0 < mask.heads and 0 <= i0 < mask.tokens):
        raise ParameterError(f"trace index {trace} out of range for h={mask.heads}, T={mask.tokens}")

    d_h = traj[0].head_dim
    use_rett = backend is Backend.RETTENTION
    fl_full, fl_sparse = flop_count(mask, d_h, rettention=use_rett)
    fl_method = {
        Backend.FULL: fl_full,
        Backend.POST_SOFTMAX: fl_full,
        Backend.SPARSE: fl_sparse,
        Backend.RETTENTION: fl_sparse,
    }[backend]

    cache: Optional[AttentionCache] = None
    steps: list[StepMetrics] = []
    sched_method = 0
    for t, inp in enumerate(traj):
        kind = sched.classify(t)
        oracle = full_attention(inp)
        stats = compute_denominator_ratio(inp, mask)

        if kind.is_full:
            out = oracle.out
            sched_method += fl_full.total
            if use_rett:
                cache, cap_full = capture_cache(inp, mask, t)
                sched_method += fl_sparse.total
                if self_check:
                    _self_check_capture(inp, mask, cache, cap_full)
        else:
            sched_method += fl_method.total
            if backend is Backend.FULL:
                out = oracle.out
            elif backend is Backend.SPARSE:
                out = sparse_attention(inp, mask).out
            elif backend is Backend.POST_SOFTMAX:
                out = post_softmax_masked(inp, mask).out
            else:
                if cache is None:
                    raise CacheMissError(f"sparse step {t} reached before any caching step")
                cache = advance_cache(cache, sched.ramp_lambda)
                if self_check and cache.captured_at >= t:
                    raise InvariantError("cache read at or before its capture step")
                out = rettention_attention(inp, mask, cache).out
            if self_check and not np.all(np.isfinite(out)):
                raise InvariantError(f"non-finite output at step {t}")

        steps.append(
            StepMetrics(
                step=t,
                kind=kind,
                rel_err=frobenius_rel_error(out, oracle.out),
                cosine=mean_row_cosine(out, oracle.out),
                psnr=output_psnr(out, oracle.out),
                full_denom=float(stats.raw_full_denom()[h0, i0]),
                sparse_denom=float(stats.raw_sparse_denom()[h0, i0]),
                rho=float(stats.rho[h0, i0]),
            )
        )

    return MetricsReport(
        backend=backend,
        seed=seed,
        sparsity=sparsity(mask),
        trace_index=(h0, i0),
        steps=steps,
        flops_full=fl_full,
        flops_method=fl_method,
        flops_schedule_method=sched_method,
        flops_schedule_full=fl_full.total * len(traj),
    )


def run_seeds(
    cfg: TrajectoryConfig,
    seeds: Sequence[int],
    mask: SparseMask,
    sched: DenoisingSchedule,
    backends: Sequence[Backend | str],
    workers: Optional[int] = None,
) -> dict[Backend, list[MetricsReport]]:
    """Run several backends over one trajectory per seed.

    Seeds are independent and may run on worker threads; results come back
    in seed order regardless of completion order.
    """
    backends = [Backend(b) for b in backends]

    def one(seed):
        traj = generate_trajectory(replace(cfg, seed=seed))
        return [run_experiment(traj, mask, sched, b, seed=seed) for b in backends]

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            per_seed = list(ex.map(one, seeds))
    else:
        per_seed = [one(s) for s in seeds]
    return {b: [reports[j] for reports in per_seed] for j, b in enumerate(backends)}


@dataclass(frozen=True)
class RhoTrace:
    """Per-step unshifted denominators and their ratio for one ``(head, row)``."""

    head: int
    row: int
    full_denom: np.ndarray
    sparse_denom: np.ndarray
    rho: np.ndarray

    def __len__(self) -> int:
        return len(self.rho)

    def rows(self):
        for t in range(len(self)):
            yield t, float(self.full_denom[t]), float(self.sparse_denom[t]), float(self.rho[t])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(RHO_TRACE_CSV_HEADER)
            for t, fd, sd, r in self.rows():
                w.writerow([t, fmt_float(fd), fmt_float(sd), fmt_float(r)])


def coefficient_of_variation(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = float(np.mean(x))
    return float(np.std(x)) / abs(m) if m != 0.0 else math.inf


def trace_rho(traj: Sequence[AttentionInputs], mask: SparseMask, head: int, row: int) -> RhoTrace:
    _check_inputs(traj, mask)
    if not (0 <= head < mask.heads and 0 <= row < mask.tokens):
        raise ParameterError(f"(head={head}, row={row}) out of range for h={mask.heads}, T={mask.tokens}")
    fd, sd, rho = [], [], []
    for inp in traj:
        stats = compute_denominator_ratio(inp, mask)
        fd.append(stats.raw_full_denom()[head, row])
        sd.append(stats.raw_sparse_denom()[head, row])
        rho.append(stats.rho[head, row])
    return RhoTrace(head, row, np.array(fd), np.array(sd), np.array(rho))
