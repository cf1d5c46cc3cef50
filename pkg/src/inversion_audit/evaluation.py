"""SSIM scoring, nearest-training-sample matching and report emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageCollection
from .errors import ConfigError

ARCH_ORDER = ("MLP", "ViT", "CNN")  # column order of the summary table
REPORT_COLUMNS = ("dataset", "architecture", "class", "mean_ssim", "n", "config_digest")


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 7
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"ssim window must be a positive odd integer, got {self.window}")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ConfigError("ssim K1 and K2 must be > 0")
        if not self.gaussian_sigma > 0:
            raise ConfigError("ssim gaussian_sigma must be > 0")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(cfg: SSIMConfig) -> torch.Tensor:
    r = torch.arange(cfg.window, dtype=torch.float64) - cfg.window // 2
    g = torch.exp(-(r**2) / (2 * cfg.gaussian_sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    # x: (B, C, H, W) -> valid weighted means per channel
    c = x.shape[1]
    w = window.to(x.dtype)[None, None].expand(c, 1, -1, -1)
    return F.conv2d(x, w, groups=c)


def _prepare(x: torch.Tensor, cfg: SSIMConfig):
    x = x.detach().to(torch.float64).clamp(0, cfg.dynamic_range)
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4:
        raise ConfigError(f"expected (C, H, W) or (B, C, H, W) images, got shape {tuple(x.shape)}")
    if cfg.window > min(x.shape[-2:]):
        raise ConfigError(f"ssim window {cfg.window} exceeds image size {tuple(x.shape[-2:])}")
    return x


def _ssim_map(mu_a, mu_b, e_aa, e_bb, e_ab, cfg):
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_a**2 + mu_b**2 + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """Gaussian-windowed SSIM, averaged over windows then channels.

    Accepts single images (C, H, W) -> scalar, or batches (B, C, H, W) -> (B,).
    """
    if a.shape != b.shape:
        raise ConfigError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    a, b = _prepare(a, cfg), _prepare(b, cfg)
    win = gaussian_window(cfg)
    m = _ssim_map(
        _filter(a, win), _filter(b, win), _filter(a * a, win), _filter(b * b, win), _filter(a * b, win), cfg
    )
    per_image = m.mean(dim=(2, 3)).mean(dim=1)
    return per_image[0] if single else per_image


def ssim_matrix(recons: torch.Tensor, candidates: torch.Tensor, cfg: SSIMConfig = SSIMConfig(), chunk_bytes=2**27):
    """All-pairs SSIM, shape (R, M)."""
    r, c = _prepare(recons, cfg), _prepare(candidates, cfg)
    if r.shape[1:] != c.shape[1:]:
        raise ConfigError(f"ssim shape mismatch: {tuple(r.shape[1:])} vs {tuple(c.shape[1:])}")
    win = gaussian_window(cfg)
    mu_r, e_rr = _filter(r, win), _filter(r * r, win)
    mu_c, e_cc = _filter(c, win), _filter(c * c, win)
    out = torch.empty(r.shape[0], c.shape[0], dtype=torch.float64)
    per_row = c.numel() * 8
    step = max(1, chunk_bytes // per_row)
    for i in range(0, r.shape[0], step):
        rr = r[i : i + step]
        prod = (rr[:, None] * c[None]).flatten(0, 1)
        e_rc = _filter(prod, win).unflatten(0, (rr.shape[0], c.shape[0]))
        m = _ssim_map(mu_r[i : i + step, None], mu_c[None], e_rr[i : i + step, None], e_cc[None], e_rc, cfg)
        out[i : i + step] = m.mean(dim=(3, 4)).mean(dim=2)
    return out


@dataclass(frozen=True)
class MatchResult:
    recon_id: int
    train_index: int  # position in the training collection
    source_index: int  # position in the raw archive
    cls: int
    ssim: float


def candidate_pool(train: ImageCollection, k: Optional[int], cap: Optional[int], seed: int) -> torch.Tensor:
    """Ascending training indices of class ``k`` (all classes if None), optionally seeded-subsampled."""
    if k is None:
        return torch.cat([candidate_pool(train, j, cap, seed) for j in range(train.spec.num_classes)]).sort().values
    idx = train.class_indices(k)
    if cap is not None and len(idx) > cap:
        g = torch.Generator().manual_seed(seed * 1009 + k)
        idx = idx[torch.randperm(len(idx), generator=g)[:cap]].sort().values
    return idx


def match_reconstructions(
    recons: torch.Tensor,
    classes: torch.Tensor,
    train: ImageCollection,
    cfg: SSIMConfig = SSIMConfig(),
    scope: str = "class",
    cap: Optional[int] = None,
    seed: int = 0,
) -> list:
    """Best-SSIM training sample per reconstruction; ties go to the lowest training index."""
    if scope not in ("class", "global"):
        raise ConfigError(f"match scope must be 'class' or 'global', got {scope!r}")
    classes = torch.as_tensor(classes)
    results = [None] * len(recons)
    groups = [None] if scope == "global" else sorted(set(classes.tolist()))
    for k in groups:
        rows = torch.arange(len(recons)) if k is None else torch.nonzero(classes == k, as_tuple=True)[0]
        pool = candidate_pool(train, k, cap, seed)
        if len(pool) == 0:
            raise ConfigError(f"no training samples for class {k}")
        scores = ssim_matrix(recons[rows], train.pixels[pool], cfg)
        best = scores.argmax(dim=1)  # first maximal value -> lowest index, pool is ascending
        for i, (r, j) in enumerate(zip(rows.tolist(), best.tolist())):
            ti = int(pool[j])
            results[r] = MatchResult(r, ti, int(train.source_index[ti]), int(classes[r]), float(scores[i, j]))
    return results


@dataclass
class EvaluationReport:
    dataset: str
    architecture: str
    num_classes: int
    per_class: dict  # class -> {"mean_ssim": float, "n": int}
    overall: Optional[float]
    valid: bool
    missing_classes: list
    config_digest: str
    extras: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @property
    def cell(self):
        return self.overall if self.valid else None

    def to_json(self):
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["cell"] = self.cell
        return d


def aggregate(matches: Sequence[MatchResult], num_classes: int):
    per_class = {}
    for k in range(num_classes):
        vals = [m.ssim for m in matches if m.cls == k]
        if vals:
            per_class[k] = {"mean_ssim": math.fsum(vals) / len(vals), "n": len(vals)}
    n_total = sum(v["n"] for v in per_class.values())
    overall = math.fsum(v["mean_ssim"] * v["n"] for v in per_class.values()) / n_total if n_total else None
    missing = [k for k in range(num_classes) if k not in per_class]
    return per_class, overall, missing


def build_report(
    matches: Sequence[MatchResult],
    dataset: str,
    architecture: str,
    num_classes: int,
    config_digest: str,
    out_dir=None,
    extras: Optional[dict] = None,
) -> EvaluationReport:
    per_class, overall, missing = aggregate(matches, num_classes)
    report = EvaluationReport(
        dataset=dataset,
        architecture=architecture,
        num_classes=num_classes,
        per_class=per_class,
        overall=overall,
        valid=not missing,
        missing_classes=missing,
        config_digest=config_digest,
        extras=dict(extras or {}),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.artifacts["report_csv"] = str(write_report_csv(report, out_dir / "report.csv"))
        report.artifacts["table_csv"] = str(write_table([report], out_dir / "table.csv"))
        path = out_dir / "report.json"
        report.artifacts["report_json"] = str(path)
        _atomic_text(path, json.dumps(report.to_json(), indent=2, sort_keys=True))
    return report


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def _fmt(x):
    return "invalid" if x is None else f"{x:.6f}"


def write_report_csv(report: EvaluationReport, path: Path) -> Path:
    lines = [list(REPORT_COLUMNS)]
    for k in range(report.num_classes):
        stats = report.per_class.get(k)
        lines.append(
            [
                report.dataset,
                report.architecture,
                k,
                _fmt(stats["mean_ssim"]) if stats else "invalid",
                stats["n"] if stats else 0,
                report.config_digest,
            ]
        )
    lines.append([report.dataset, report.architecture, "all", _fmt(report.cell), sum(v["n"] for v in report.per_class.values()), report.config_digest])
    return _write_csv(path, lines)


def _write_csv(path: Path, rows):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    tmp.replace(path)
    return path


def write_table(cells, path) -> Path:
    """Dataset rows x architecture columns of mean SSIM.

    ``cells`` holds EvaluationReports or (dataset, arch, value-or-None) tuples.
    """
    values = {}
    for c in cells:
        if isinstance(c, EvaluationReport):
            c = (c.dataset, c.architecture, c.cell)
        values[(c[0], c[1])] = c[2]
    datasets = list(dict.fromkeys(d for d, _ in values))
    archs = [a for a in ARCH_ORDER if any(a == x for _, x in values)]
    archs += sorted({x for _, x in values} - set(archs))
    rows = [["dataset", *archs]]
    for d in datasets:
        rows.append([d, *(_fmt(values[(d, a)]) if (d, a) in values else "" for a in archs)])
    return _write_csv(path, rows)


def read_table(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0][1:]
    return {
        (r[0], a): (None if v in ("invalid", "") else float(v)) for r in rows[1:] for a, v in zip(header, r[1:])
    }


# --- image grids -------------------------------------------------------------


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [0, 1] (clamped) -> (H, W) or (H, W, 3) uint8."""
    arr = (img.detach().clamp(0, 1).to(torch.float64) * 255).round().to(torch.uint8).numpy()
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_grid(rows: Sequence[Sequence[torch.Tensor]], path, pad: int = 2) -> Path:
    """Write a lossless PNG; ``rows[i][j]`` is a (C, H, W) image."""
    from PIL import Image

    if not rows or not rows[0]:
        raise ConfigError("empty image grid")
    c, h, w = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    canvas = np.full(((h + pad) * len(rows) + pad, (w + pad) * ncols + pad) + ((3,) if c == 3 else ()), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = to_uint8(img)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(canvas).save(tmp, format="PNG")
    tmp.replace(path)
    return path


def grid_rows(recons: torch.Tensor, matches: Sequence[MatchResult], train: ImageCollection, per_class: int, num_classes: int):
    """Rows of [matched training sample, reconstruction], ``per_class`` rows per class."""
    rows = []
    for k in range(num_classes):
        picked = [m for m in matches if m.cls == k][:per_class]
        rows += [[train.pixels[m.train_index], recons[m.recon_id]] for m in picked]
    return rows
