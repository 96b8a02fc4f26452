"""Loss-curve plots and summaries from a training metrics JSONL file."""
import json
import os
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from src.errors import EmptyInputError, FormatError

LOSS_TERMS = ("total", "reg", "hm", "s2d", "mask", "offset", "hm_dis")


def load_metrics(path: str) -> List[Dict]:
    records = []
    try:
        with open(path) as f:
            for n, line in enumerate(f, 1):
                if line.strip():
                    records.append(json.loads(line))
    except FileNotFoundError as e:
        raise FormatError(f"metrics file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} line {n} is not JSON: {e}") from e
    if not records:
        raise EmptyInputError(f"{path} holds no metric records")
    return records


def plot_losses(records: List[Dict], out_path: str) -> List[str]:
    """One log-scale curve per loss term present; returns the plotted term names."""
    terms = [t for t in LOSS_TERMS if any(t in r for r in records)]
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(8, 7), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    for term in terms:
        steps = [r["step"] for r in records if term in r]
        values = [max(r[term], 1e-12) for r in records if term in r]
        ax_loss.plot(steps, values, label=term, linewidth=2.0 if term == "total" else 1.0)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right")
    ax_loss.grid(True, alpha=0.3)
    ax_lr.plot([r["step"] for r in records], [r["lr"] for r in records], color="black")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    stage = records[0].get("stage", "")
    fig.suptitle(f"{stage} training losses" if stage else "training losses")
    fig.tight_layout()
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return terms


def summarize(records: List[Dict]) -> str:
    terms = [t for t in LOSS_TERMS if any(t in r for r in records)]
    lines = [f"{'term':<10}{'first':>12}{'last':>12}{'min':>12}"]
    for term in terms:
        values = [r[term] for r in records if term in r]
        lines.append(f"{term:<10}{values[0]:>12.5f}{values[-1]:>12.5f}{min(values):>12.5f}")
    lines.append(f"steps: {len(records)}")
    return "\n".join(lines)
