"""Fusion-block ablation: train matched models with and without fusion
across stage counts and noise levels, then compare mean PSNR."""

from __future__ import annotations

from dataclasses import replace

from .data import NoiseSpec
from .inference import evaluate_dataset
from .training import fit


def run_ablation(data_dir, eval_dir, model_config, train_config,
                 stages_list=(2, 3, 4), sigmas=(15.0, 25.0, 50.0, 75.0),
                 clip=True, progress=None):
    """Train the 2x grid (fusion on/off) over stages x sigmas.

    Returns rows of {stages, sigma, no_fusion, fusion} with mean PSNR per
    variant. Meant for toy scale; the training budget comes straight from
    ``train_config``.
    """
    rows = []
    for stages in stages_list:
        for sigma in sigmas:
            row = {"stages": stages, "sigma": sigma}
            for fusion_enabled in (False, True):
                cfg = replace(model_config, stages=stages,
                              fusion_enabled=fusion_enabled)
                noise = NoiseSpec(sigma, clip=clip, seed=train_config.seed)
                params, _ = fit(cfg, train_config, noise, data_dir)
                report = evaluate_dataset(params, cfg, eval_dir, sigma,
                                          seed=train_config.seed, clip=clip)
                key = "fusion" if fusion_enabled else "no_fusion"
                row[key] = report.mean_psnr
                if progress:
                    progress(stages, sigma, key, row[key])
            rows.append(row)
    return rows


def format_table(rows):
    """Human-readable grid, stages down, sigma across, both variants."""
    sigmas = sorted({r["sigma"] for r in rows})
    lines = []
    header = ["stages"]
    for s in sigmas:
        header += [f"no_fusion@{s:g}", f"fusion@{s:g}"]
    lines.append("  ".join(f"{h:>14s}" for h in header))
    for stages in sorted({r["stages"] for r in rows}):
        cells = [f"{stages:>14d}"]
        for s in sigmas:
            row = next(r for r in rows if r["stages"] == stages and r["sigma"] == s)
            cells += [f"{row['no_fusion']:>14.2f}", f"{row['fusion']:>14.2f}"]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def tsv_rows(rows):
    """Machine-readable rows: stages, sigma, mean PSNR without and with
    the fusion block."""
    out = ["stages\tsigma\tpsnr_no_fusion\tpsnr_fusion"]
    for r in rows:
        out.append(f"{r['stages']}\t{r['sigma']:g}\t"
                   f"{r['no_fusion']:.4f}\t{r['fusion']:.4f}")
    return out
