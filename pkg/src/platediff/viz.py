"""Attention heatmaps and prediction-vs-truth figures."""
from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from .data import load_image  # noqa: E402
from .domain import Stage, Structure  # noqa: E402
from .encoders import build_prompt  # noqa: E402
from .errors import EmptyReport  # noqa: E402

HEATMAP_CMAP = "inferno"
_PNG_META = {"Software": None}

plt.rcParams.update({"font.family": "DejaVu Sans", "svg.hashsalt": "platediff", "path.simplify": False})


def split_attention(attention):
    """Split a length-2N attention vector into two sqrt(N) x sqrt(N) grids."""
    a = np.asarray(attention, dtype=np.float64).ravel()
    n = a.size // 2
    side = math.isqrt(n)
    if 2 * side * side != a.size:
        raise ValueError(f"attention length {a.size} is not 2 * a square")
    return a[:n].reshape(side, side), a[n:].reshape(side, side)


def patch_mask(bbox, image_size=336, patch=14):
    """Flat boolean mask of the patches whose pixel footprint intersects ``bbox``.

    ``bbox`` is (x0, y0, x1, y1), inclusive-exclusive, in pixels.
    """
    x0, y0, x1, y1 = bbox
    side = image_size // patch
    lo = np.arange(side) * patch
    rows = (lo < y1) & (lo + patch > y0)
    cols = (lo < x1) & (lo + patch > x0)
    return np.outer(rows, cols).ravel()


def bbox_mass(attention, bbox, image_size=336, patch=14):
    """Attention mass on patches inside ``bbox``, summed over both image halves."""
    a = np.asarray(attention, dtype=np.float64).ravel()
    mask = patch_mask(bbox, image_size, patch)
    if a.size != 2 * mask.size:
        raise ValueError(f"attention length {a.size} does not match a {image_size}px/{patch}px pair")
    return float(a[np.concatenate([mask, mask])].sum())


def overlay(image, grid, alpha=0.5, cmap=HEATMAP_CMAP):
    """Bilinearly upsample ``grid`` to the image size and alpha-blend it in colour.

    The grid is normalised by its own maximum before colour mapping.
    """
    img = load_image(image)
    h, w = img.shape[:2]
    up = np.asarray(Image.fromarray(np.asarray(grid, dtype=np.float32), mode="F").resize((w, h), Image.BILINEAR))
    peak = up.max()
    norm = up / peak if peak > 0 else np.zeros_like(up)
    rgb = matplotlib.colormaps[cmap](norm)[..., :3] * 255.0
    out = (1 - alpha) * img.astype(np.float64) + alpha * rgb
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def heatmap(model, encoder, sample, item_name, stage=None):
    """Run one query and return (attention vector, before grid, after grid, prompt)."""
    stage = Stage(stage or (Stage.DIFFERENCE if sample.has_after else Stage.ABSOLUTE))
    prompt = build_prompt(item_name, stage)
    dtype = next(model.parameters()).dtype
    Fb = torch.from_numpy(encoder.encode_image(sample.before_image, "before").matrix)[None].to(dtype)
    Fa = None
    if stage is Stage.DIFFERENCE:
        Fa = torch.from_numpy(encoder.encode_image(sample.after_image, "after").matrix)[None].to(dtype)
    t = torch.from_numpy(encoder.encode_text(prompt).vector).to(dtype)
    model.eval()
    with torch.no_grad():
        out = model(Fb, t, Fa)
    attn = out.attention[0].double().numpy()
    before, after = split_attention(attn)
    return attn, before, after, prompt, float(out.prediction[0])


def cmd_heatmap(checkpoint, sample, item_name, encoder, out_dir, stage=None):
    """Write before/after overlays plus the raw attention as JSON; return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = checkpoint.build_model()
    stage = stage or checkpoint.stage
    if Stage(stage) is Stage.DIFFERENCE and not sample.has_after:
        stage = Stage.ABSOLUTE
    attn, before, after, prompt, pred = heatmap(model, encoder, sample, item_name, stage)
    stem = f"{sample.sample_id}_{item_name.replace(' ', '_')}"
    paths = {}
    paths["before"] = out_dir / f"{stem}_before.png"
    Image.fromarray(overlay(sample.before_image, before)).save(paths["before"])
    after_image = sample.after_image if Stage(stage) is Stage.DIFFERENCE else sample.before_image
    paths["after"] = out_dir / f"{stem}_after.png"
    Image.fromarray(overlay(after_image, after)).save(paths["after"])
    paths["attention"] = out_dir / f"{stem}_attention.json"
    doc = {
        "sample_id": sample.sample_id,
        "item": item_name,
        "prompt": prompt,
        "stage": Stage(stage).value,
        "prediction": pred,
        "N": before.size,
        "attention": attn.tolist(),
    }
    paths["attention"].write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return paths


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def cmd_plots(predictions, targets, tags, out_dir, stage=Stage.DIFFERENCE, bins=30):
    """Histogram of predicted vs true values and a joint density by structure.

    Returns a summary with histogram counts and the legend entries so callers
    (and tests) can check conservation without reading pixels.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0:
        raise EmptyReport("nothing to plot")
    tags = [Structure(x).value for x in tags]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = "weight difference (g)" if Stage(stage) is Stage.DIFFERENCE else "weight (g)"

    edges = np.histogram_bin_edges(np.concatenate([p, t]), bins=bins)
    gt_counts, _ = np.histogram(t, bins=edges)
    pred_counts, _ = np.histogram(p, bins=edges)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(t, bins=edges, alpha=0.55, color="tab:blue", label=f"ground truth (n={t.size})")
    ax.hist(p, bins=edges, alpha=0.55, color="tab:green", label=f"predicted (n={p.size})")
    ax.set_xlabel(label)
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    hist_path = out_dir / "histogram.png"
    _save(fig, hist_path)

    fig, ax = plt.subplots(figsize=(5.5, 5))
    lo, hi = float(min(p.min(), t.min())), float(max(p.max(), t.max()))
    pad = 0.05 * (hi - lo or 1.0)
    legend = []
    colors = {"solid": "tab:orange", "amorphous_mixed": "tab:purple", "unknown": "tab:gray"}
    tag_arr = np.array(tags)
    for name in [s.value for s in Structure]:
        mask = tag_arr == name
        if not mask.any():
            continue
        entry = f"{name} (n={int(mask.sum())})"
        legend.append(entry)
        ax.scatter(t[mask], p[mask], s=8, alpha=0.5, color=colors[name], label=entry)
        _density_contour(ax, t[mask], p[mask], colors[name], (lo - pad, hi + pad))
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=1, label="y = x")
    legend.append(f"pooled (n={p.size})")
    ax.plot([], [], " ", label=legend[-1])
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel(f"ground truth {label}")
    ax.set_ylabel(f"predicted {label}")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    joint_path = out_dir / "joint_density.png"
    _save(fig, joint_path)

    return {
        "histogram": str(hist_path),
        "joint_density": str(joint_path),
        "bin_edges": edges.tolist(),
        "counts": {"ground_truth": gt_counts.tolist(), "predicted": pred_counts.tolist()},
        "legend": legend,
    }


def _density_contour(ax, x, y, color, extent):
    from scipy.stats import gaussian_kde

    if x.size < 3:
        return
    try:
        kde = gaussian_kde(np.vstack([x, y]))
    except (np.linalg.LinAlgError, ValueError):
        return  # degenerate (e.g. all points on one line): the scatter says it all
    g = np.linspace(extent[0], extent[1], 80)
    X, Y = np.meshgrid(g, g)
    Z = kde(np.vstack([X.ravel(), Y.ravel()])).reshape(X.shape)
    if np.isfinite(Z).all() and Z.max() > 0:
        ax.contour(X, Y, Z, levels=5, colors=[color], linewidths=0.8, alpha=0.8)
