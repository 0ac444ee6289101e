"""Physics-step episode traces: JSON Lines, CSV and per-decision-step SVG frames."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .sim.geometry import IntersectionScenario

CSV_FIELDS = ["t", "step", "action", "reward", "cause", "collided", "arrived", "id", "ego", "route", "x", "y", "v", "psi"]


def write_trace_jsonl(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_trace_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_trace_csv(trace: list[dict], path: str | Path) -> None:
    """One row per (sub-step, vehicle)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in trace:
            flags = rec.get("flags") or {}
            base = {
                "t": rec["t"],
                "step": rec["step"],
                "action": "" if rec.get("action") is None else rec["action"],
                "reward": "" if rec.get("reward") is None else rec["reward"],
                "cause": rec.get("cause", ""),
                "collided": int(bool(flags.get("collided"))),
                "arrived": int(bool(flags.get("arrived"))),
            }
            for veh in rec["vehicles"]:
                writer.writerow({**base, **{k: veh[k] for k in ("id", "ego", "route", "x", "y", "v", "psi")}})


def decision_frames(trace: list[dict]) -> list[dict]:
    """The last sub-step record of every decision step."""
    last: dict[int, dict] = {}
    for rec in trace:
        if rec.get("action") is None:
            continue  # the reset snapshot
        last[rec["step"]] = rec
    return [last[k] for k in sorted(last)]


def _rect_points(x, y, psi, length, width, scale, cx, cy):
    c, s = math.cos(psi), math.sin(psi)
    pts = []
    for dl, dw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        px = x + dl * length / 2 * c - dw * width / 2 * s
        py = y + dl * length / 2 * s + dw * width / 2 * c
        pts.append(f"{(px - cx) * scale:.2f},{(cy - py) * scale:.2f}")
    return " ".join(pts)


def render_svg(rec: dict, scenario: IntersectionScenario, length: float = 5.0, width: float = 2.0, scale: float = 4.0) -> str:
    cfg = scenario.config
    extent = cfg.zone_half_width + cfg.arm_length
    size = 2 * extent * scale
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">',
        '<rect width="100%" height="100%" fill="#f4f4f0"/>',
    ]
    road = 2 * cfg.lane_width * scale
    mid = extent * scale
    out.append(f'<rect x="0" y="{mid - road / 2:.2f}" width="{size:.2f}" height="{road:.2f}" fill="#bbb"/>')
    out.append(f'<rect x="{mid - road / 2:.2f}" y="0" width="{road:.2f}" height="{size:.2f}" fill="#bbb"/>')
    h = cfg.zone_half_width * scale
    out.append(f'<rect x="{mid - h:.2f}" y="{mid - h:.2f}" width="{2 * h:.2f}" height="{2 * h:.2f}" fill="none" stroke="#888" stroke-dasharray="4 3"/>')
    for veh in rec["vehicles"]:
        colour = "#d33" if veh["ego"] else "#36c"
        pts = _rect_points(veh["x"], veh["y"], veh["psi"], length, width, scale, -extent, extent)
        out.append(f'<polygon points="{pts}" fill="{colour}"/>')
    label = f't={rec["t"]:.2f}s step={rec["step"]}'
    if rec.get("cause"):
        label += f' {rec["cause"]}'
    out.append(f'<text x="8" y="18" font-family="monospace" font-size="14">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_svg_frames(trace: list[dict], scenario: IntersectionScenario, out_dir: str | Path) -> list[Path]:
    """Write one SVG per decision step; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in decision_frames(trace):
        p = out_dir / f"step_{rec['step']:03d}.svg"
        p.write_text(render_svg(rec, scenario), encoding="utf-8")
        paths.append(p)
    return paths
