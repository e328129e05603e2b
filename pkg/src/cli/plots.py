"""
レポートの図表出力
評価レポート・拡張実験レポート・データセット統計を棒グラフとヒストグラムの画像にする
"""

import logging
import os
from typing import List, Sequence, Union

import numpy as np
import pandas as pd
import plotly.express as px

from ..augment.experiment import ExperimentReport
from ..metrics.report import MetricReport

logger = logging.getLogger(__name__)

Report = Union[MetricReport, ExperimentReport, pd.DataFrame]
COLORS = px.colors.qualitative.Set2


def histogram_table(values: Sequence[float], bins: int = 20) -> pd.DataFrame:
    """
    ヒストグラムの度数表 (度数の合計は有限値の個数に一致する)

    Returns:
        pd.DataFrame: left, right, center, count
    """
    data = np.asarray(values, dtype=np.float64)
    data = data[np.isfinite(data)]
    if data.size == 0:
        return pd.DataFrame(columns=["left", "right", "center", "count"])
    counts, edges = np.histogram(data, bins=bins)
    return pd.DataFrame({
        "left": edges[:-1],
        "right": edges[1:],
        "center": (edges[:-1] + edges[1:]) / 2.0,
        "count": counts,
    })


def _write(fig, path: str, image_format: str) -> str:
    fig.update_layout(template="plotly_white", width=800, height=500)
    fig.write_image(path, format=image_format)
    logger.info(f"図を保存: {path}")
    return path


def _histogram(values: Sequence[float], title: str, x_label: str, path: str, image_format: str) -> List[str]:
    table = histogram_table(values)
    if table.empty:
        return []
    fig = px.bar(table, x="center", y="count", title=title, color_discrete_sequence=[COLORS[0]])
    fig.update_layout(xaxis_title=x_label, yaxis_title="枚数", bargap=0.0, showlegend=False)
    return [_write(fig, path, image_format)]


def _metric_plots(report: MetricReport, out_dir: str, image_format: str) -> List[str]:
    files = []
    scores = {name: getattr(report, name) for name in ("fid", "ssim", "seg_score") if getattr(report, name) is not None}
    if scores:
        df = pd.DataFrame(list(scores.items()), columns=["指標", "値"])
        fig = px.bar(df, x="指標", y="値", title="評価指標", color="指標", color_discrete_sequence=COLORS, text_auto=".3f")
        fig.update_layout(showlegend=False)
        files.append(_write(fig, os.path.join(out_dir, f"metrics.{image_format}"), image_format))

    per_class = {k: v for k, v in report.iou_per_class.items() if v is not None and np.isfinite(v)}
    if per_class:
        df = pd.DataFrame(list(per_class.items()), columns=["クラス", "IoU"])
        fig = px.bar(df, x="クラス", y="IoU", title="クラス別IoU", color_discrete_sequence=[COLORS[1]])
        files.append(_write(fig, os.path.join(out_dir, f"iou_per_class.{image_format}"), image_format))

    files += _histogram(report.per_image_ssim, "画像ごとのSSIM", "SSIM",
                        os.path.join(out_dir, f"ssim_hist.{image_format}"), image_format)
    files += _histogram(report.per_image_iou, "画像ごとのIoU", "IoU",
                        os.path.join(out_dir, f"iou_hist.{image_format}"), image_format)
    return files


def _experiment_plots(report: ExperimentReport, out_dir: str, image_format: str) -> List[str]:
    df = report.to_dataframe()
    if df.empty:
        return []
    value_columns = [c for c in df.columns if c.startswith("iou_")]
    long = df.melt(id_vars=["configuration"], value_vars=value_columns, var_name="クラス", value_name="IoU")
    long = long.dropna(subset=["IoU"])
    long["クラス"] = long["クラス"].str.replace("iou_", "", regex=False)
    fig = px.bar(
        long,
        x="configuration",
        y="IoU",
        color="クラス",
        barmode="group",
        title="構成別IoU",
        color_discrete_sequence=COLORS,
    )
    fig.update_layout(xaxis_title="構成", yaxis_title="IoU")
    return [_write(fig, os.path.join(out_dir, f"augmentation_iou.{image_format}"), image_format)]


def _statistics_plots(table: pd.DataFrame, out_dir: str, image_format: str) -> List[str]:
    if table.empty:
        return []
    files = []
    if "instances" in table.columns:
        fig = px.bar(table, x="class", y="instances", title="クラス別インスタンス数", color="class",
                     color_discrete_sequence=COLORS)
        fig.update_layout(xaxis_title="クラス", yaxis_title="インスタンス数", showlegend=False)
        files.append(_write(fig, os.path.join(out_dir, f"class_counts.{image_format}"), image_format))
    if "rms" in table.columns:
        files += _histogram(table["rms"].tolist(), "画像ごとのRMS", "RMS",
                            os.path.join(out_dir, f"rms_hist.{image_format}"), image_format)
    return files


def emit_plots(report: Report, out_dir: str, image_format: str = "png") -> List[str]:
    """
    レポートを画像に出力

    空のレポートでは何も出力しない。

    Args:
        report: MetricReport、ExperimentReport、または統計表 (class/instances 列か rms 列を持つ)
        out_dir (str): 出力先
        image_format (str): png / svg / pdf

    Returns:
        List[str]: 出力したファイル
    """
    os.makedirs(out_dir, exist_ok=True)
    if isinstance(report, MetricReport):
        return _metric_plots(report, out_dir, image_format)
    if isinstance(report, ExperimentReport):
        return _experiment_plots(report, out_dir, image_format)
    return _statistics_plots(report, out_dir, image_format)
