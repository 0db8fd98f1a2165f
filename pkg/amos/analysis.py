"""
分析导出：判别损失直方图、γ 轨迹降采样、按 step 对齐的准确率曲线，
切换点不连续检测、课程动态摘要，以及用 Pillow 绘制并纵向拼接的长图
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from amos.errors import AnalysisError
from amos.trainer import REPLACED_LOSSES_FILE

logger = logging.getLogger(__name__)

# 增大 PIL 像素上限，长图可能很高
Image.MAX_IMAGE_PIXELS = 500000000

MAX_GAMMA_ROWS = 500
HISTOGRAM_BINS = 20
FINAL_FRACTION = 0.1
EDGE_FRACTION = 0.05

PANEL_SIZE = (900, 320)
MARGIN = 50
PALETTE = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
           (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127)]


# ---- 读取 ----

@dataclass
class MetricsTable:
    path: Path
    columns: Dict[str, np.ndarray]

    @property
    def steps(self) -> np.ndarray:
        return self.columns["step"].astype(np.int64)

    @property
    def depths(self) -> List[int]:
        return [int(c[len("gamma_mean_"):]) for c in self.columns if c.startswith("gamma_mean_")]

    @property
    def run_name(self) -> str:
        return self.path.parent.name or self.path.stem

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise AnalysisError(f"{self.path} is missing column {name!r}")
        return self.columns[name]

    def final_mask(self, fraction: float = FINAL_FRACTION) -> np.ndarray:
        steps = self.steps
        return steps > steps.max() * (1.0 - fraction)


def _to_float(value: str) -> float:
    return float(value) if value != "" else float("nan")


def read_metrics(path: os.PathLike, required: Sequence[str] = ("step",)) -> MetricsTable:
    path = Path(path)
    if not path.exists():
        raise AnalysisError(f"metrics file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = list(reader)
    if not header:
        raise AnalysisError(f"metrics file {path} is empty")
    missing = [c for c in required if c not in header]
    if missing:
        raise AnalysisError(f"{path} is missing columns: {', '.join(missing)}")
    if not rows:
        raise AnalysisError(f"metrics file {path} has no rows")
    data = np.array([[_to_float(v) for v in row] for row in rows], dtype=np.float64)
    return MetricsTable(path=path, columns={name: data[:, i] for i, name in enumerate(header)})


def _required_columns(depths: Sequence[int]) -> List[str]:
    return ["step", "rtd_acc_replaced"] + [f"gamma_mean_{d}" for d in depths]


# ---- 导出 ----

@dataclass
class HistogramData:
    head: int
    edges: np.ndarray
    counts: np.ndarray
    contributing: int


def disc_loss_histogram(losses_path: os.PathLike, bins: int = HISTOGRAM_BINS,
                        fraction: float = FINAL_FRACTION) -> List[HistogramData]:
    """最后 fraction 步内，按 argmax γ 归属到各头的替换词判别损失直方图；各头共用分箱"""
    table = read_metrics(losses_path, required=("step", "head", "loss"))
    mask = table.final_mask(fraction)
    heads = table.columns["head"][mask].astype(np.int64)
    losses = table.columns["loss"][mask]
    if losses.size == 0:
        return []
    upper = float(losses.max()) if losses.max() > 0 else 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    result = []
    for head in np.unique(heads):
        values = losses[heads == head]
        counts, _ = np.histogram(values, bins=edges)
        result.append(HistogramData(head=int(head), edges=edges, counts=counts, contributing=int(values.size)))
    return result


def downsample(steps: np.ndarray, values: np.ndarray, max_rows: int = MAX_GAMMA_ROWS) -> Tuple[np.ndarray, np.ndarray]:
    """连续分块求均值（保持单纯形）；每块以最后一个 step 作标签"""
    n = steps.shape[0]
    chunk = max(1, math.ceil(n / max_rows))
    starts = np.arange(0, n, chunk)
    means = np.add.reduceat(values, starts, axis=0) / np.diff(np.append(starts, n))[:, None]
    labels = steps[np.minimum(starts + chunk, n) - 1]
    return labels, means


@dataclass
class AnalysisExport:
    histogram: Optional[Path]
    gamma: List[Path] = field(default_factory=list)
    accuracy: Optional[Path] = None


def _unique_names(tables: Sequence[MetricsTable]) -> List[str]:
    names = []
    for i, table in enumerate(tables):
        name = table.run_name
        names.append(name if name not in names else f"{name}_{i}")
    return names


def export_analysis(metrics_files: Sequence[os.PathLike], out_dir: os.PathLike) -> AnalysisExport:
    """
    (a) 最后 10% 步的逐头判别损失直方图；(b) γ 轨迹，至多 500 行；
    (c) 各运行的替换词准确率曲线，按 step 对齐（step 列必须完全相同）
    """
    if not metrics_files:
        raise AnalysisError("no metrics files given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for path in metrics_files:
        table = read_metrics(path)
        if not table.depths:
            raise AnalysisError(f"{path} is missing columns: gamma_mean_<d>")
        for name in _required_columns(table.depths):
            table.column(name)
        tables.append(table)
    names = _unique_names(tables)
    export = AnalysisExport(histogram=None)

    hist_rows = []
    for name, table in zip(names, tables):
        losses_path = table.path.parent / REPLACED_LOSSES_FILE
        if not losses_path.exists():
            logger.warning("no %s beside %s, histogram skipped for this run", REPLACED_LOSSES_FILE, table.path)
            continue
        for hist in disc_loss_histogram(losses_path):
            for low, high, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
                hist_rows.append([name, hist.head, repr(float(low)), repr(float(high)), int(count)])
    if hist_rows:
        export.histogram = out / "disc_loss_histogram.csv"
        _write_csv(export.histogram, ["run", "head", "bin_low", "bin_high", "count"], hist_rows)

    for name, table in zip(names, tables):
        columns = [f"gamma_mean_{d}" for d in table.depths]
        values = np.stack([table.column(c) for c in columns], axis=1)
        steps, means = downsample(table.steps, values)
        path = out / f"gamma_{name}.csv"
        _write_csv(path, ["step"] + columns,
                   [[int(s)] + [repr(float(v)) for v in row] for s, row in zip(steps, means)])
        export.gamma.append(path)

    reference = tables[0].steps
    for table in tables[1:]:
        if table.steps.shape != reference.shape or np.any(table.steps != reference):
            raise AnalysisError(f"cannot align {table.path} with {tables[0].path}: logged steps differ "
                                f"(different logging intervals or run lengths)")
    export.accuracy = out / "rtd_accuracy.csv"
    accuracy = [t.column("rtd_acc_replaced") for t in tables]
    _write_csv(export.accuracy, ["step"] + names,
               [[int(s)] + ["" if np.isnan(a[i]) else repr(float(a[i])) for a in accuracy]
                for i, s in enumerate(reference)])
    logger.info("exported analysis for %d runs to %s", len(tables), out)
    return export


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---- 动态检查 ----

@dataclass
class Discontinuity:
    step: int
    jump: float
    noise: float

    @property
    def significant(self) -> bool:
        return self.jump > self.noise


def detect_discontinuities(steps: np.ndarray, values: np.ndarray, switch_steps: Sequence[int],
                           window: Optional[int] = None) -> List[Discontinuity]:
    """切换点前后各 window 个记录的均值之差，与两侧标准差中较大者比较"""
    keep = ~np.isnan(values)
    steps, values = steps[keep], values[keep]
    window = window or max(3, len(steps) // 20)
    found = []
    for switch in switch_steps:
        before = values[steps < switch][-window:]
        after = values[steps >= switch][:window]
        if before.size < 2 or after.size < 2:
            raise AnalysisError(f"not enough records around switch step {switch}")
        found.append(Discontinuity(step=int(switch), jump=float(abs(after.mean() - before.mean())),
                                   noise=float(max(before.std(), after.std()))))
    return found


@dataclass
class CurriculumSummary:
    depths: List[int]
    gen_loss: Dict[int, float]
    disc_loss: Dict[int, Optional[float]]
    gamma_first: float
    gamma_last: float

    @property
    def gen_loss_decreasing(self) -> bool:
        losses = [self.gen_loss[d] for d in self.depths]
        return all(b <= a for a, b in zip(losses, losses[1:]))

    @property
    def deep_disc_loss_higher(self) -> bool:
        deep, shallow = self.disc_loss.get(self.depths[-1]), self.disc_loss.get(self.depths[0])
        return deep is not None and shallow is not None and deep >= shallow

    @property
    def gamma_rises(self) -> bool:
        return self.gamma_last > self.gamma_first


def curriculum_summary(metrics_file: os.PathLike) -> CurriculumSummary:
    """最后 10% 步的逐头 MLM 损失与判别损失；最深头 γ 在前 5% 与后 5% 的均值"""
    table = read_metrics(metrics_file)
    depths = table.depths
    if not depths:
        raise AnalysisError(f"{metrics_file} has no gamma_mean_<d> columns")
    final = table.final_mask()
    gen_loss = {d: float(np.nanmean(table.column(f"l_gen_head_{d}")[final])) for d in depths}
    disc_loss: Dict[int, Optional[float]] = {}
    for d in depths:
        values = table.column(f"disc_loss_head_{d}")[final]
        disc_loss[d] = None if np.all(np.isnan(values)) else float(np.nanmean(values))
    steps = table.steps
    gamma = table.column(f"gamma_mean_{depths[-1]}")
    first = steps <= steps.max() * EDGE_FRACTION
    last = steps > steps.max() * (1.0 - EDGE_FRACTION)
    if not first.any():
        first = steps == steps.min()
    return CurriculumSummary(depths=depths, gen_loss=gen_loss, disc_loss=disc_loss,
                             gamma_first=float(np.nanmean(gamma[first])),
                             gamma_last=float(np.nanmean(gamma[last])))


# ---- 绘图 ----

def draw_panel(title: str, series: Dict[str, Tuple[np.ndarray, np.ndarray]],
               size: Tuple[int, int] = PANEL_SIZE) -> Image.Image:
    """一张折线图面板；NaN 处断开"""
    width, height = size
    panel = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(panel)
    font = ImageFont.load_default()
    draw.text((MARGIN, 12), title, fill="black", font=font)

    finite = [v[~np.isnan(v)] for _, v in series.values()]
    finite = [v for v in finite if v.size]
    plot = (MARGIN, MARGIN, width - MARGIN, height - MARGIN)
    draw.rectangle(plot, outline=(160, 160, 160))
    if not finite:
        return panel
    all_x = np.concatenate([x for x, _ in series.values()])
    lo, hi = float(min(v.min() for v in finite)), float(max(v.max() for v in finite))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    x_span = (x_hi - x_lo) or 1.0

    def to_pixel(x: float, y: float) -> Tuple[float, float]:
        px = plot[0] + (x - x_lo) / x_span * (plot[2] - plot[0])
        py = plot[3] - (y - lo) / (hi - lo) * (plot[3] - plot[1])
        return px, py

    draw.text((4, plot[1]), f"{hi:.3g}", fill="black", font=font)
    draw.text((4, plot[3] - 10), f"{lo:.3g}", fill="black", font=font)
    draw.text((plot[2] - 40, plot[3] + 6), f"{int(x_hi)}", fill="black", font=font)
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        segment: List[Tuple[float, float]] = []
        for x, y in zip(xs, ys):
            if np.isnan(y):
                if len(segment) > 1:
                    draw.line(segment, fill=color, width=2)
                segment = []
                continue
            segment.append(to_pixel(float(x), float(y)))
        if len(segment) > 1:
            draw.line(segment, fill=color, width=2)
        draw.text((plot[2] - 160, plot[1] + 6 + 12 * i), label, fill=color, font=font)
    return panel


def merge_images(images: Sequence[Image.Image], output_path: os.PathLike) -> Path:
    """面板纵向拼接成一张长图"""
    widths, heights = zip(*(i.size for i in images))
    merged = Image.new("RGB", (max(widths), sum(heights)), "white")
    y_offset = 0
    for img in images:
        merged.paste(img, (0, y_offset))
        y_offset += img.height
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    merged.save(output_path, format="PNG", optimize=True)
    return output_path


def render_charts(metrics_files: Sequence[os.PathLike], output_path: os.PathLike) -> Path:
    """每个量一张面板：逐头 MLM 损失、γ 均值、替换词准确率、判别损失"""
    tables = [read_metrics(p) for p in metrics_files]
    if not tables:
        raise AnalysisError("no metrics files given")
    names = _unique_names(tables)
    panels = []
    for name, table in zip(names, tables):
        depths = table.depths
        panels.append(draw_panel(f"{name}: generator MLM loss per head",
                                 {f"head {d}": (table.steps, table.column(f"l_gen_head_{d}")) for d in depths}))
        panels.append(draw_panel(f"{name}: mean mixture weight per head",
                                 {f"head {d}": (table.steps, table.column(f"gamma_mean_{d}")) for d in depths}))
    panels.append(draw_panel("replaced-token accuracy",
                             {n: (t.steps, t.column("rtd_acc_replaced")) for n, t in zip(names, tables)}))
    panels.append(draw_panel("discriminator loss",
                             {n: (t.steps, t.column("l_disc")) for n, t in zip(names, tables)}))
    path = merge_images(panels, output_path)
    logger.info("rendered %d chart panels to %s", len(panels), path)
    return path
