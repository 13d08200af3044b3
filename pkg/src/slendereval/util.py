"""Shared plumbing: order-preserving parallel map, atomic file writes, and a
tiny dependency-free SVG bar chart."""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

__all__ = ["parallel_map", "resolve_threads", "write_bytes_atomic", "write_text_atomic",
           "svg_bar_chart"]


def resolve_threads(threads: int) -> int:
    """0 means auto (one worker per CPU); negatives are rejected."""
    if threads < 0:
        raise ValueError(f"thread count must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map `fn` over `items`, preserving input order in the result.

    Results are identical for any thread count; threading only changes how
    the work is scheduled, never how it is combined.
    """
    items = list(items)
    threads = resolve_threads(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def write_bytes_atomic(path, data: bytes) -> None:
    """Write via a temp file in the target directory plus rename, so a
    partial file never appears at `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def svg_bar_chart(labels: Sequence[str], values: Sequence[float], *, title: str = "",
                  width: int = 480, height: int = 300, value_fmt: str = "{:.3f}") -> str:
    """Render a deterministic standalone SVG bar chart (no timestamps, no
    generated ids), suitable for byte-comparison in reproducibility checks."""
    if len(labels) != len(values):
        raise ValueError("labels and values must have equal length")
    n = len(values)
    margin_l, margin_r, margin_t, margin_b = 48, 16, 36 if title else 16, 40
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    vmax = max([v for v in values if v is not None] + [0.0])
    scale = plot_h / vmax if vmax > 0 else 0.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>'
        )
    parts.append(
        f'<line x1="{margin_l}" y1="{margin_t + plot_h}" x2="{width - margin_r}" '
        f'y2="{margin_t + plot_h}" stroke="black"/>'
    )
    if n:
        slot = plot_w / n
        bar_w = slot * 0.6
        for i, (label, value) in enumerate(zip(labels, values)):
            x = margin_l + slot * i + (slot - bar_w) / 2
            v = 0.0 if value is None else float(value)
            bar_h = v * scale
            y = margin_t + plot_h - bar_h
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{bar_h:.2f}" '
                f'fill="#4878a8"/>'
            )
            parts.append(
                f'<text x="{x + bar_w / 2:.2f}" y="{margin_t + plot_h + 16:.2f}" '
                f'text-anchor="middle" font-family="sans-serif" font-size="11">{label}</text>'
            )
            shown = "n/a" if value is None else value_fmt.format(v)
            parts.append(
                f'<text x="{x + bar_w / 2:.2f}" y="{y - 4:.2f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{shown}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
