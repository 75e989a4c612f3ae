"""Report tables (per-class AP, round-trip, ablation) and their text / JSON export"""
import json
import math
from typing import Dict, Optional

import pandas as pd

from modules.evaluation import EvalReport


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{digits}f}"


def generate_eval_table(report: EvalReport) -> pd.DataFrame:
    """One row per class plus a final mAP row"""
    data = {
        "Class": [],
        "AP": [],
        "TP": [],
        "FP": [],
        "GT": [],
    }

    for class_id in sorted(report.per_class):
        result = report.per_class[class_id]
        data["Class"].append(result.name)
        data["AP"].append(_fmt(result.ap))
        data["TP"].append(result.tp)
        data["FP"].append(result.fp)
        data["GT"].append(result.num_gt)

    data["Class"].append("mAP")
    data["AP"].append(_fmt(report.map))
    data["TP"].append(sum(r.tp for r in report.per_class.values()))
    data["FP"].append(sum(r.fp for r in report.per_class.values()))
    data["GT"].append(sum(r.num_gt for r in report.per_class.values()))

    df = pd.DataFrame(data)
    return df


def generate_class_columns_table(report: EvalReport) -> pd.DataFrame:
    """Transposed eval table: one column per class plus mAP, one row per metric"""
    df = generate_eval_table(report).set_index("Class").T
    return df.rename_axis(index="Metric", columns=None).reset_index()


def generate_roundtrip_table(report: Dict, label: str = "") -> pd.DataFrame:
    """Single-row summary of a round-trip report"""
    df = pd.DataFrame({
        "Variant": [label or report.get("perturbation", "none")],
        "Scenes": [report["scenes"]],
        "Instances": [report["instances"]],
        "Missed": [report["missed"]],
        "Spurious": [report["spurious"]],
        "Min IoU": [_fmt(report["min_iou"])],
        "Mean IoU": [_fmt(report["mean_iou"])],
        "Max dir err": [_fmt(report["max_direction_err"], 6)],
        "Failures": [len(report["failures"])],
    })
    return df


def generate_ablation_table(ablation: Dict) -> pd.DataFrame:
    """Side-by-side rows for the variants of one ablation run"""
    frames = [generate_roundtrip_table(r, name) for name, r in ablation["variants"].items()]
    return pd.concat(frames, ignore_index=True)


def format_table(df: pd.DataFrame) -> str:
    """Aligned plain-text table"""
    return df.to_string(index=False) + "\n"


def report_to_json(report: Dict) -> str:
    """Deterministic JSON (sorted keys, fixed indentation)"""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
