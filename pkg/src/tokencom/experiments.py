"""Preset experiments, metrics rows and their CSV / plot-data files."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig
from .env import FLAG_NAMES
from .errors import ConfigurationError
from .training import BaselineKind, EpisodeRecord, evaluate, train

SWEEP_DEFAULTS = {
    "freezing-vs-episode": (),
    "freezing-vs-resolution": (360.0, 720.0, 1080.0),
    "psnr-vs-users": (2.0, 4.0, 8.0),
    "psnr-vs-power": (20.0, 30.0, 40.0),
}
HEIGHT_TO_WIDTH = {360: 640, 720: 1280, 1080: 1920}
KIND_ORDER = {k: i for i, k in enumerate(BaselineKind)}


@dataclass(frozen=True)
class MetricsRow:
    preset: str
    sweep_value: float
    baseline: str
    seed: int
    episode: int
    mean_reward: float
    utility: float
    freezing_pct: float
    psnr_db: float
    viol_power: int = 0
    viol_rb_cap: int = 0
    viol_bitrate: int = 0
    viol_quality: int = 0
    viol_rb_range: int = 0
    viol_min_rate: int = 0
    viol_pair_index: int = 0
    viol_binary: int = 0

    @classmethod
    def from_record(cls, preset: str, sweep_value: float, kind: BaselineKind, seed: int,
                    rec: EpisodeRecord, episode: int | None = None) -> "MetricsRow":
        viol = dict(zip((f"viol_{n}" for n in FLAG_NAMES), rec.violations))
        return cls(preset, float(sweep_value), kind.value, seed, rec.episode if episode is None else episode,
                   rec.mean_reward, rec.mean_utility, rec.freezing_pct, rec.mean_psnr, **viol)

    def sort_key(self):
        return (self.preset, self.sweep_value, KIND_ORDER[BaselineKind(self.baseline)], self.seed, self.episode)


COLUMNS = tuple(f.name for f in fields(MetricsRow))
_TYPES = {f.name: f.type for f in fields(MetricsRow)}


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def emit_csv(rows: Iterable[MetricsRow], path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc.strerror}") from exc


def read_csv(path: str | Path) -> list[MetricsRow]:
    casts = {"str": str, "float": float, "int": int}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ConfigurationError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(**{k: casts[_TYPES[k]](v) for k, v in row.items()}) for row in reader]


def aggregate(values: Sequence[float]) -> tuple[float, float, int]:
    """Mean and sample standard deviation over the finite entries."""
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), 0
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std, int(v.size)


PLOT_METRICS = ("utility", "freezing_pct", "psnr_db", "mean_reward")


def emit_plotdata(rows: Sequence[MetricsRow], directory: str | Path) -> list[Path]:
    """One whitespace-separated file per (preset, baseline) with mean and std over seeds.

    The x column is the episode for per-episode presets and the sweep value otherwise.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.preset, r.baseline), []).append(r)
    written = []
    for (preset, baseline), rs in sorted(groups.items()):
        per_episode = len({r.episode for r in rs}) > 1
        xs: dict[float, list[MetricsRow]] = {}
        for r in rs:
            xs.setdefault(float(r.episode if per_episode else r.sweep_value), []).append(r)
        head = ["x"] + [f"{m}_{s}" for m in PLOT_METRICS for s in ("mean", "std")] + ["seeds"]
        lines = ["# " + " ".join(head)]
        for x in sorted(xs):
            cols = [_fmt(x)]
            for m in PLOT_METRICS:
                mean, std, _ = aggregate([getattr(r, m) for r in xs[x]])
                cols += [_fmt(mean), _fmt(std)]
            cols.append(str(len(xs[x])))
            lines.append(" ".join(cols))
        path = directory / f"{preset}_{baseline}.dat"
        try:
            path.write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write plot data to {path}: {exc.strerror}") from exc
        written.append(path)
    return written


# ---------------------------------------------------------------- presets

def sweep_values(cfg: ExperimentConfig) -> tuple[float, ...]:
    if cfg.preset == "freezing-vs-episode":
        return (float(cfg.H),)
    return tuple(cfg.sweep) or SWEEP_DEFAULTS[cfg.preset]


def point_config(base: ExperimentConfig, preset: str, value: float, users: int | None = None) -> ExperimentConfig:
    """Config for one sweep point of ``preset``."""
    changes = {}
    if users is not None:
        changes["U"] = users
    if preset == "freezing-vs-resolution":
        height = int(value)
        if height not in HEIGHT_TO_WIDTH:
            raise ConfigurationError(f"unknown resolution {value}; choose from {sorted(HEIGHT_TO_WIDTH)}")
        changes.update(H=height, W=HEIGHT_TO_WIDTH[height])
    elif preset == "psnr-vs-users":
        changes["U"] = int(value)
    elif preset == "psnr-vs-power":
        changes["P_BS_dBm"] = float(value)
    if "U" in changes:
        changes["kappa"] = min(base.kappa, changes["U"])
        if base.user_gain_dB and len(base.user_gain_dB) != changes["U"]:
            changes["user_gain_dB"] = ()
    return base.with_values(**changes)


@dataclass(frozen=True)
class Cell:
    preset: str
    label: str
    sweep_value: float
    kind: BaselineKind
    seed: int
    cfg: ExperimentConfig
    calibrate_with: ExperimentConfig

    @property
    def key(self):
        return (self.label, self.sweep_value, KIND_ORDER[self.kind], self.seed)

    @property
    def name(self) -> str:
        return f"{self.label}_{self.kind.value}_{_fmt(self.sweep_value)}_seed{self.seed}"


def plan_cells(cfg: ExperimentConfig) -> list[Cell]:
    base = cfg.desk_scaled()
    user_groups = base.sweep_users if (base.preset == "freezing-vs-resolution" and base.sweep_users) else (None,)
    cells = []
    for users in user_groups:
        label = base.preset if users is None else f"{base.preset}-u{users}"
        for value in sweep_values(base):
            point = point_config(base, base.preset, value, users)
            for kind in base.kinds:
                for seed in base.seeds:
                    cells.append(Cell(base.preset, label, value, kind, seed, point, base))
    return sorted(cells, key=lambda c: c.key)


def run_cell(cell: Cell, checkpoint_dir: Path | None = None) -> list[MetricsRow]:
    cfg = cell.cfg
    ec = cfg.episode_config(kind=cell.kind, calibrate_with=cell.calibrate_with)
    per_episode = cell.preset == "freezing-vs-episode"
    learner, log = train(ec, cell.kind, cfg.agent_settings(), cell.seed, eval_every=1 if per_episode else 0)
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        learner.save(checkpoint_dir / f"{cell.name}.npz")
    if per_episode:
        return [MetricsRow.from_record(cell.label, cell.sweep_value, cell.kind, cell.seed, r)
                for r in log.evaluations]
    ev = evaluate(learner, ec, cfg.eval_episodes, cell.seed)
    return [MetricsRow.from_record(cell.label, cell.sweep_value, cell.kind, cell.seed,
                                   summarize(ev.records), episode=cfg.episodes)]


def summarize(records: Sequence[EpisodeRecord]) -> EpisodeRecord:
    """Average of evaluation episodes; PSNR is averaged over episodes that delivered video."""
    psnr = [r.mean_psnr for r in records if np.isfinite(r.mean_psnr)]
    return EpisodeRecord(
        episode=len(records),
        mean_reward=float(np.mean([r.mean_reward for r in records])),
        mean_utility=float(np.mean([r.mean_utility for r in records])),
        freezing_pct=float(np.mean([r.freezing_pct for r in records])),
        mean_psnr=float(np.mean(psnr)) if psnr else float("nan"),
        violations=tuple(int(v) for v in np.sum([r.violations for r in records], axis=0)),
        epsilon=0.0, noise=0.0, wall_clock=0.0,
    )


def _run_cell_task(args):
    cell, ckpt = args
    return cell.key, run_cell(cell, ckpt)


def run_preset(cfg: ExperimentConfig, out: str | Path | None = None, workers: int = 1,
               cache: dict | None = None, progress: Callable[[Cell], None] | None = None) -> list[MetricsRow]:
    """Train and evaluate every (sweep point, baseline, seed) cell of the preset.

    ``cache`` maps a cell's config/kind/seed to its rows so that callers running
    several presets can reuse identical cells. Output files are written under
    ``out`` when given.
    """
    cells = plan_cells(cfg)
    ckpt = Path(out) / "checkpoints" if out is not None else None
    results: dict = {}
    todo = []
    for cell in cells:
        ck = _cache_key(cell)
        if cache is not None and ck in cache:
            results[cell.key] = [_relabel(r, cell) for r in cache[ck]]
        else:
            todo.append(cell)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for key, rows in pool.map(_run_cell_task, [(c, ckpt) for c in todo]):
                results[key] = rows
    else:
        for cell in todo:
            if progress:
                progress(cell)
            results[cell.key] = run_cell(cell, ckpt)
    if cache is not None:
        for cell in todo:
            cache[_cache_key(cell)] = results[cell.key]
    rows = sorted((r for c in cells for r in results[c.key]), key=MetricsRow.sort_key)
    if out is not None:
        emit_csv(rows, Path(out) / "metrics.csv")
        emit_plotdata(rows, Path(out) / "series")
    return rows


def _cache_key(cell: Cell):
    # everything that influences a cell's rows, independent of preset labels
    ec = cell.cfg.episode_config(kind=cell.kind, calibrate_with=cell.calibrate_with)
    per_episode = cell.preset == "freezing-vs-episode"
    return (repr(ec), repr(cell.cfg.agent_settings()), cell.kind, cell.seed, per_episode,
            cell.cfg.eval_episodes)


def _relabel(row: MetricsRow, cell: Cell) -> MetricsRow:
    d = asdict(row)
    d.update(preset=cell.label, sweep_value=cell.sweep_value)
    return MetricsRow(**d)
