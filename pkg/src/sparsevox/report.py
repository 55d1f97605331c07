"""Per-cloud evaluation rows, corpus averages, delimited output and figures."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .baseline import encode_pc_order0
from .codec import decode_pc, encode_pc
from .errors import SparseVoxError
from .pc_io import PointCloud
from .sparse_nn import ModelWeights

AVERAGE = "average"


@dataclass
class EvalRow:
    name: str
    n_points: int
    total_bits: int
    bpov: float
    octree_share_pct: float
    encode_seconds: float
    decode_seconds: float
    baseline_bpov: float
    gain_pct: float  # reduction relative to the order-0 baseline
    gpcc_bpov: float | None = None
    gpcc_gain_pct: float | None = None
    lossless: bool = True

    def check(self) -> None:
        if abs(self.bpov * self.n_points - self.total_bits) > 1e-6 * max(self.total_bits, 1):
            raise ValueError(f"{self.name}: bpov does not match total bits / points")
        if not 0.0 <= self.octree_share_pct <= 100.0:
            raise ValueError(f"{self.name}: octree share outside [0, 100]")


def _gain(ours: float, ref: float | None) -> float | None:
    if ref is None or ref <= 0:
        return None
    return 100.0 * (1.0 - ours / ref)


def evaluate_cloud(name: str, pc: PointCloud, weights: ModelWeights, block_size: int = 64,
                   gpcc_bpov: float | None = None, verify: bool = True) -> EvalRow:
    data, stats = encode_pc(pc, weights, block_size)
    decode_seconds = float("nan")
    lossless = True
    if verify:
        t0 = time.perf_counter()
        lossless = decode_pc(data, weights) == pc
        decode_seconds = time.perf_counter() - t0
    _, base = encode_pc_order0(pc, block_size)
    return EvalRow(
        name=name, n_points=len(pc), total_bits=stats.total_bits, bpov=stats.bpov,
        octree_share_pct=100.0 * stats.octree_share, encode_seconds=stats.seconds,
        decode_seconds=decode_seconds, baseline_bpov=base.bpov, gain_pct=_gain(stats.bpov, base.bpov),
        gpcc_bpov=gpcc_bpov, gpcc_gain_pct=_gain(stats.bpov, gpcc_bpov), lossless=lossless)


def _evaluate_job(args) -> EvalRow:
    return evaluate_cloud(*args)


class EvalReport:
    def __init__(self, rows: list[EvalRow]):
        if not rows:
            raise ValueError("empty report")
        self.rows = list(rows)

    def average(self) -> EvalRow:
        """Corpus row: bpov weighted by points, octree share by bits, times as per-cloud means."""
        rows = self.rows
        n = sum(r.n_points for r in rows)
        bits = sum(r.total_bits for r in rows)
        octree_bits = sum(r.octree_share_pct / 100.0 * r.total_bits for r in rows)
        base_bits = sum(r.baseline_bpov * r.n_points for r in rows)
        bpov = bits / n
        gpcc = None
        if all(r.gpcc_bpov is not None for r in rows):
            gpcc = sum(r.gpcc_bpov * r.n_points for r in rows) / n
        return EvalRow(
            name=AVERAGE, n_points=n, total_bits=bits, bpov=bpov,
            octree_share_pct=100.0 * octree_bits / bits,
            encode_seconds=sum(r.encode_seconds for r in rows) / len(rows),
            decode_seconds=sum(r.decode_seconds for r in rows) / len(rows),
            baseline_bpov=base_bits / n, gain_pct=_gain(bpov, base_bits / n),
            gpcc_bpov=gpcc, gpcc_gain_pct=_gain(bpov, gpcc), lossless=all(r.lossless for r in rows))

    def all_rows(self) -> list[EvalRow]:
        return self.rows + [self.average()]

    def to_json(self) -> str:
        return json.dumps({"clouds": [asdict(r) for r in self.rows], "average": asdict(self.average())}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(EvalRow)]
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.all_rows():
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "csv":
            return self.to_csv()
        raise ValueError(f"unknown report format {fmt!r}")

    def save_figures(self, out_dir, stem: str = "eval") -> list[Path]:
        """Bar chart of per-cloud bpov against the baseline, and bpov against point count."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        import numpy as np

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = self.rows
        x = np.arange(len(rows))
        paths = []

        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(rows) + 2), 3.2))
        ax.bar(x - 0.2, [r.bpov for r in rows], 0.4, label="learned")
        ax.bar(x + 0.2, [r.baseline_bpov for r in rows], 0.4, label="order-0")
        if all(r.gpcc_bpov is not None for r in rows):
            ax.plot(x, [r.gpcc_bpov for r in rows], "k_", markersize=14, label="G-PCC")
        ax.set_xticks(x)
        ax.set_xticklabels([r.name for r in rows], rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("bits per occupied voxel")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        paths.append(out_dir / f"{stem}_bpov.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        pts = [r.n_points for r in rows]
        ax.scatter(pts, [r.bpov for r in rows], s=14, label="learned")
        ax.scatter(pts, [r.baseline_bpov for r in rows], s=14, marker="x", label="order-0")
        ax.set_xscale("log")
        ax.set_xlabel("points")
        ax.set_ylabel("bits per occupied voxel")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        paths.append(out_dir / f"{stem}_bpov_vs_points.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
        return paths


def evaluate_corpus(items: list[tuple[str, PointCloud]], weights: ModelWeights, block_size: int = 64,
                    gpcc: dict[str, float] | None = None, workers: int = 1, verify: bool = True) -> EvalReport:
    """Evaluate every (name, cloud); clouds run in parallel processes when ``workers > 1``."""
    if not items:
        raise SparseVoxError("empty corpus")
    gpcc = gpcc or {}
    jobs = [(name, pc, weights, block_size, gpcc.get(name), verify) for name, pc in items]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_evaluate_job, jobs))
    else:
        rows = [_evaluate_job(j) for j in jobs]
    return EvalReport(rows)


def read_gpcc_table(path) -> dict[str, float]:
    """Two-column CSV (name, bpov) of externally measured G-PCC results."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "name":
                continue
            out[row[0]] = float(row[1])
    return out
