"""The ablation matrix: one teacher per seed, then one student per row, all evaluated on held-out sequences."""
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.cust_logger import logger
from src.data_classes import CLASS_NAMES, AblationFlags, AppConfig, build_config, config_to_dict
from src.evaluate import EvalReport, evaluate
from src.train import Benchmark, build_benchmark, train_ddet, train_sdet

ABLATION_ROWS = (
    ("Baseline", "none"),
    ("+Distillation", "+distill"),
    ("+S2D", "+distill,+s2d"),
    ("+PCR", "+distill,+s2d,+pcr"),
    ("-Distillation", "+s2d,+pcr"),
)


@dataclass
class AblationRow:
    label: str
    flags: AblationFlags
    reports: List[EvalReport] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    def mean_ap(self, class_id: str) -> float:
        return float(np.mean([r.per_class[class_id].ap for r in self.reports])) if self.reports else 0.0

    def mean_feature_mse(self) -> Optional[float]:
        values = [r.feature_mse for r in self.reports if r.feature_mse is not None]
        return float(np.mean(values)) if values else None


def seeded_config(cfg: AppConfig, seed: int) -> AppConfig:
    raw = config_to_dict(cfg)
    raw["train"]["seed"] = seed
    raw["arch"]["init_seed"] = seed
    return build_config(raw)


def run_ablation(cfg: AppConfig, out_dir: str, seeds: Sequence[int] = (0,), workers: int = 1,
                 benchmark: Optional[Benchmark] = None) -> List[AblationRow]:
    benchmark = benchmark or build_benchmark(cfg, workers=workers)
    rows = [AblationRow(label, AblationFlags.parse(text)) for label, text in ABLATION_ROWS]
    for seed in seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        base = seeded_config(cfg, seed)
        ddet = train_ddet(benchmark.train, base, os.path.join(seed_dir, "ddet"),
                          os.path.join(seed_dir, "ddet.metrics.jsonl"), workers)
        for i, row in enumerate(rows):
            raw = config_to_dict(base)
            raw["train"]["stage"] = "sdet"
            raw["train"]["ablation"] = config_to_dict(row.flags)
            row_cfg = build_config(raw)
            name = f"sdet_row{i}"
            result = train_sdet(benchmark.train, ddet.checkpoint, row_cfg, os.path.join(seed_dir, name),
                                os.path.join(seed_dir, f"{name}.metrics.jsonl"), workers)
            report = evaluate(result.checkpoint, benchmark.heldout, row_cfg, teacher_ckpt=ddet.checkpoint)
            row.reports.append(report)
            row.seeds.append(seed)
            logger.info({"timestamp": datetime.now().isoformat(), "msg": "ablation row done",
                         "data": {"seed": seed, "row": row.label, "mean_ap": report.mean_ap(),
                                  "feature_mse": report.feature_mse}})
    return rows


def format_markdown(rows: Sequence[AblationRow]) -> str:
    header = "| Method | " + " | ".join(f"{c.capitalize()} AP" for c in CLASS_NAMES) + " | Feature MSE |"
    lines = [header, "|" + "---|" * (len(CLASS_NAMES) + 2)]
    for row in rows:
        mse = row.mean_feature_mse()
        aps = " | ".join(f"{row.mean_ap(c):.4f}" for c in CLASS_NAMES)
        lines.append(f"| {row.label} | {aps} | {'-' if mse is None else f'{mse:.6f}'} |")
    return "\n".join(lines)


def rows_to_json(rows: Sequence[AblationRow]) -> List[Dict]:
    return [{"label": r.label, "ablation": r.flags.label(),
             "ap": {c: r.mean_ap(c) for c in CLASS_NAMES}, "feature_mse": r.mean_feature_mse(),
             "per_seed": [rep.model_dump(mode="json") for rep in r.reports]} for r in rows]


### Directional checks ###

@dataclass
class DirectionalCheck:
    name: str
    margin: float    # > 0 (or >= 0 for slack checks) when the expected order holds
    passed: bool


def directional_checks(rows: Sequence[AblationRow], ap_slack: float = 0.02) -> List[DirectionalCheck]:
    """Expected ordering of the matrix: vehicle AP rises Baseline < +Distillation < +S2D, +PCR stays
       within `ap_slack` of +S2D, and the held-out feature MSE of +S2D is below Baseline for every seed.
    """
    by_label = {r.label: r for r in rows}
    base, distill, s2d, pcr = (by_label[k] for k in ("Baseline", "+Distillation", "+S2D", "+PCR"))
    checks = []

    def expect_below(name: str, low: float, high: float, slack: float = 0.0) -> None:
        margin = high - low + slack
        checks.append(DirectionalCheck(name, float(margin), bool(margin >= 0 if slack else margin > 0)))

    expect_below("vehicle AP: Baseline < +Distillation", base.mean_ap("vehicle"), distill.mean_ap("vehicle"))
    expect_below("vehicle AP: +Distillation < +S2D", distill.mean_ap("vehicle"), s2d.mean_ap("vehicle"))
    expect_below(f"vehicle AP: +PCR >= +S2D - {ap_slack}", s2d.mean_ap("vehicle"), pcr.mean_ap("vehicle"), ap_slack)
    for seed, b, s in zip(base.seeds, base.reports, s2d.reports):
        if b.feature_mse is not None and s.feature_mse is not None:
            expect_below(f"feature MSE seed {seed}: +S2D < Baseline", s.feature_mse, b.feature_mse)
    return checks


def format_checks(checks: Sequence[DirectionalCheck]) -> str:
    return "\n".join(f"[{'ok' if c.passed else 'FAIL'}] {c.name} (margin {c.margin:+.6f})" for c in checks)
