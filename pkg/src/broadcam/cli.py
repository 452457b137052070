"""Command-line entry points.

Commands write their tables as CSV plus a JSON summary whose header
echoes the command, its parameters, the package version and sha256
hashes of the inputs; report-style commands also render figures next
to the delimited output. Sweep commands isolate cell failures: the
run finishes, failed cells become error rows, and the process exits
with status 2 instead of 0.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline, reports
from .bls import save_broad_matrix, save_model, build_broad_matrix, BLSModel
from .cam import CamSeed, generate_cam, save_cam
from .errors import BroadCAMError
from .metrics import DEFAULT_THRESHOLDS
from .pipeline import DEFAULT_PROPORTIONS, METHODS, ExperimentSpec
from .synth import LayerSpec, SynthConfig, save_gd_classifier, synth_dataset, write_dataset
from .tensor_io import load_labels, load_manifest


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}")


def _parse_thresholds(text: str) -> tuple[float, ...]:
    """Either 'start:stop:step' (stop inclusive) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise click.BadParameter(f"threshold range must be start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise click.BadParameter(f"threshold range must be numeric, got {text!r}")
        if step <= 0 or stop < start:
            raise click.BadParameter(f"bad threshold range {text!r}")
        count = int(round((stop - start) / step)) + 1
        values = tuple(round(start + i * step, 10) for i in range(count) if start + i * step <= stop + 1e-9)
    else:
        values = tuple(_parse_floats(text))
    if not values:
        raise click.BadParameter(f"no thresholds in {text!r}")
    return values


def _parse_layer_sets(text: str) -> list[list[int]]:
    sets = [_parse_ints(part) for part in text.split(";") if part != ""]
    if not sets:
        raise click.BadParameter(f"no layer sets in {text!r}")
    return sets


def _enhance_nodes(text: str) -> int | None:
    if text == "auto":
        return None
    try:
        value = int(text)
    except ValueError:
        raise click.BadParameter(f"--enhance-nodes must be 'auto' or an integer, got {text!r}")
    if value < 1:
        raise click.BadParameter("--enhance-nodes must be >= 1")
    return value


def _wrap_errors(fn):
    """Translate package errors into clean one-line failures (exit 1)."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (BroadCAMError, OSError, KeyError, ValueError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}")

    return wrapper


@click.group()
@click.version_option(pipeline.package_version(), prog_name="broadcam")
def main():
    """Outcome-agnostic seed maps from pooled multi-layer features."""


@main.command()
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Dataset directory to create.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--num-samples", type=int, default=200, show_default=True)
@click.option("--num-classes", type=int, default=4, show_default=True)
@click.option("--num-val", type=int, default=0, show_default=True)
@click.option("--num-test", type=int, default=0, show_default=True)
@click.option(
    "--layer",
    "layer_specs",
    multiple=True,
    help="Layer as index,C,H,W[,strength]; repeat per layer. "
    "Default: 3,32,16,16,1.0 and 4,32,8,8,1.0",
)
@click.option("--relevant-per-class", type=int, default=2, show_default=True)
@click.option("--relevance-strength", type=float, default=2.0, show_default=True)
@click.option("--noise-std", type=float, default=0.5, show_default=True)
@click.option("--max-classes-per-sample", type=int, default=2, show_default=True)
@click.option("--rect-min-frac", type=float, default=0.3, show_default=True)
@click.option("--rect-max-frac", type=float, default=0.6, show_default=True)
@click.option("--distractor-fraction", type=float, default=0.0, show_default=True)
@_wrap_errors
def synth(
    out,
    seed,
    num_samples,
    num_classes,
    num_val,
    num_test,
    layer_specs,
    relevant_per_class,
    relevance_strength,
    noise_std,
    max_classes_per_sample,
    rect_min_frac,
    rect_max_frac,
    distractor_fraction,
):
    """Generate a planted-relevance benchmark dataset."""
    layers = []
    for text in layer_specs:
        parts = _parse_floats(text)
        if len(parts) not in (4, 5):
            raise click.BadParameter(f"--layer must be index,C,H,W[,strength], got {text!r}")
        layers.append(
            LayerSpec(
                int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]),
                parts[4] if len(parts) == 5 else 1.0,
            )
        )
    cfg_kwargs = dict(
        num_samples=num_samples,
        num_classes=num_classes,
        num_val=num_val,
        num_test=num_test,
        relevant_per_class=relevant_per_class,
        relevance_strength=relevance_strength,
        noise_std=noise_std,
        max_classes_per_sample=max_classes_per_sample,
        rect_min_frac=rect_min_frac,
        rect_max_frac=rect_max_frac,
        distractor_fraction=distractor_fraction,
    )
    if layers:
        cfg_kwargs["layers"] = layers
    dataset = synth_dataset(SynthConfig(**cfg_kwargs), seed)
    manifest_path = write_dataset(dataset, out)
    click.echo(f"wrote {dataset.config.num_samples} samples to {out} (manifest: {manifest_path})")


@main.command("build-z")
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--layers", default="3,4", show_default=True, help="Comma-separated layer indices.")
@click.option("--split", default="train", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Directory for Z + sidecar.")
@_wrap_errors
def build_z(manifest, layers, split, out):
    """Pool features for one split into a broad matrix on disk."""
    mf = load_manifest(manifest)
    bm = build_broad_matrix(mf.features_dir(), mf.split_ids(split), _parse_ints(layers))
    save_broad_matrix(out, bm)
    click.echo(f"wrote Z {bm.Z.shape[0]}x{bm.Z.shape[1]} to {out}")


def _fit_options(fn):
    fn = click.option("--gd-seed", type=int, default=0, show_default=True)(fn)
    fn = click.option("--gd-epochs", type=int, default=5, show_default=True)(fn)
    fn = click.option("--gd-lr", type=float, default=0.5, show_default=True)(fn)
    fn = click.option("--activation", type=click.Choice(["identity", "scaled_tanh"]), default="identity",
                      show_default=True)(fn)
    fn = click.option("--enhance-nodes", default="auto", show_default=True)(fn)
    fn = click.option("--lambda", "lam", type=float, default=1.0, show_default=True)(fn)
    return fn


@main.command()
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--layers", default="3,4", show_default=True)
@click.option("--method", type=click.Choice(list(METHODS)), default="broadcam", show_default=True)
@click.option("--split", default="train", show_default=True)
@_fit_options
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Model directory to write.")
@_wrap_errors
def fit(manifest, layers, method, split, gd_seed, gd_epochs, gd_lr, activation, enhance_nodes, lam, out):
    """Fit a model on one split and persist it."""
    model, header = pipeline.run_fit(
        manifest,
        _parse_ints(layers),
        method=method,
        lam=lam,
        enhance_nodes=_enhance_nodes(enhance_nodes),
        activation=activation,
        gd_lr=gd_lr,
        gd_epochs=gd_epochs,
        gd_seed=gd_seed,
        split=split,
    )
    if isinstance(model, BLSModel):
        save_model(out, model)
    else:
        save_gd_classifier(out, model)
    reports.write_json(Path(out) / "fit.json", header)
    click.echo(f"wrote {method} model ({model.cam_weights.shape[0]} channels, "
               f"{model.cam_weights.shape[1]} classes) to {out}")


@main.command()
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", default="val", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--grid-samples", type=int, default=4, show_default=True,
              help="Samples in the rendered seed grid (0 disables).")
@_wrap_errors
def cam(manifest, model_dir, split, out, grid_samples):
    """Write seed maps for a split as <id>.cam.npy files."""
    model = pipeline.load_any_model(model_dir)
    if model.layer_offsets is None:
        raise click.ClickException("model carries no layer layout")
    mf = load_manifest(manifest)
    labels = load_labels(mf.labels_path())
    layers = sorted(model.layer_offsets)
    data = pipeline.load_eval_data(mf, labels, split, layers)
    out = Path(out)
    seeds = []
    for stack in data.stacks:
        seed = generate_cam(stack, model.cam_weights, model.layer_offsets, class_names=labels.class_names)
        save_cam(out / f"{stack.sample_id}.cam.npy", seed)
        seeds.append(seed)
    header = pipeline.run_header(
        "cam",
        {"split": split, "layers": layers, "n_samples": len(seeds), "model": str(model_dir)},
        {"manifest": manifest, "labels": mf.labels_path(), "model": Path(model_dir) / "model.json"},
    )
    reports.write_json(out / "cams.json", header)
    if grid_samples > 0 and seeds:
        reports.seed_grid_figure(seeds, out / "seed_grid.png", max_samples=grid_samples)
    click.echo(f"wrote {len(seeds)} seed files to {out}")


@main.command("eval")
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", default="val", show_default=True)
@click.option("--thresholds", default="0.05:0.95:0.05", show_default=True)
@click.option("--mpxap/--no-mpxap", "with_mpxap", default=True, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_wrap_errors
def eval_cmd(manifest, model_dir, split, thresholds, with_mpxap, out):
    """Score a model's seeds on one split across the threshold sweep."""
    model = pipeline.load_any_model(model_dir)
    report = pipeline.run_eval(
        manifest, model, split=split, thresholds=_parse_thresholds(thresholds), with_mpxap=with_mpxap
    )
    out = Path(out)
    header = pipeline.run_header(
        "eval",
        {"split": split, "thresholds": list(report.thresholds), "model": str(model_dir)},
        {"manifest": manifest, "model": Path(model_dir) / "model.json"},
    )
    body = {
        "header": header,
        "num_samples": report.num_samples,
        "best_threshold": report.best_threshold,
        "best_miou": report.best_miou,
        "best_fwiou_threshold": report.best_fwiou_threshold,
        "best_fwiou": report.best_fwiou,
        "per_class_iou": report.per_class_iou,
        "confusion": report.confusion,
    }
    if report.mpxap is not None:
        body["mean_pixel_ap"] = report.mpxap.mean_ap
        body["per_class_ap"] = report.mpxap.per_class_ap
        body["ap_excluded_classes"] = report.mpxap.excluded_classes
    reports.write_json(out / "report.json", body)
    reports.write_csv(
        out / "threshold_curve.csv",
        ["threshold", "miou", "fwiou"],
        [[t, m, f] for t, m, f in zip(report.thresholds, report.miou_curve, report.fwiou_curve)],
    )
    reports.threshold_figure(report, out / "threshold_curve.png")
    click.echo(
        f"peak mIoU {report.best_miou:.4f} at {report.best_threshold:g}, "
        f"peak FwIoU {report.best_fwiou:.4f} at {report.best_fwiou_threshold:g}"
    )


GAMUT_COLUMNS = [
    "method", "proportion", "seed", "split", "metric", "value", "threshold",
    "n_train", "subset_sha256", "error",
]


@main.command()
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--layers", default="3,4", show_default=True)
@click.option("--method", type=click.Choice(list(METHODS)), default="broadcam", show_default=True)
@click.option("--proportions", default=",".join(str(p) for p in DEFAULT_PROPORTIONS), show_default=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--thresholds", default="0.05:0.95:0.05", show_default=True)
@click.option("--train-split", default="train", show_default=True)
@click.option("--eval-splits", default="val", show_default=True,
              help="Comma-separated splits, each evaluated in full.")
@_fit_options
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_context
@_wrap_errors
def gamut(ctx, manifest, layers, method, proportions, seeds, thresholds, train_split, eval_splits,
          gd_seed, gd_epochs, gd_lr, activation, enhance_nodes, lam, out):
    """Sweep training-label proportions; one row per split and metric."""
    del gd_seed  # each cell seeds the baseline with its own sweep seed
    spec = ExperimentSpec(
        manifest_path=manifest,
        layers=_parse_ints(layers),
        lam=lam,
        enhance_nodes=_enhance_nodes(enhance_nodes),
        activation=activation,
        method=method,
        thresholds=_parse_thresholds(thresholds),
        proportions=tuple(_parse_floats(proportions)),
        seeds=tuple(_parse_ints(seeds)),
        gd_lr=gd_lr,
        gd_epochs=gd_epochs,
        train_split=train_split,
        eval_splits=tuple(s for s in eval_splits.split(",") if s),
    )
    rows, ok = pipeline.run_gamut(spec)
    out = Path(out)
    header = pipeline.run_header(
        "gamut",
        {
            "layers": spec.layers,
            "lambda": spec.lam,
            "enhance_nodes": spec.enhance_nodes,
            "activation": spec.activation,
            "method": spec.method,
            "proportions": list(spec.proportions),
            "seeds": list(spec.seeds),
            "thresholds": list(spec.thresholds),
            "train_split": train_split,
            "eval_splits": list(spec.eval_splits),
            "gd_lr": spec.gd_lr,
            "gd_epochs": spec.gd_epochs,
        },
        {"manifest": manifest, "labels": load_manifest(manifest).labels_path()},
    )
    reports.write_json(out / "gamut.json", {"header": header, "rows": rows})
    reports.write_csv(out / "gamut.csv", GAMUT_COLUMNS, rows)
    for metric in ("miou", "fwiou", "mpxap"):
        if any(r.get("metric") == metric for r in rows):
            reports.gamut_figure(rows, metric, out / f"gamut_{metric}.png")
    failed = sum(1 for r in rows if "error" in r)
    click.echo(f"wrote {len(rows)} rows to {out} ({failed} failed cells)")
    if not ok:
        ctx.exit(2)


ABLATION_COLUMNS = [
    "layers", "seed", "method", "proportion", "split", "metric", "value", "threshold", "error",
]


@main.command()
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--layer-sets", default="3;4;3,4", show_default=True,
              help="Semicolon-separated layer subsets, e.g. '3;4;3,4'.")
@click.option("--method", type=click.Choice(list(METHODS)), default="broadcam", show_default=True)
@click.option("--proportion", type=float, default=1.0, show_default=True)
@click.option("--seeds", default="0", show_default=True)
@click.option("--thresholds", default="0.05:0.95:0.05", show_default=True)
@click.option("--train-split", default="train", show_default=True)
@click.option("--eval-splits", default="val", show_default=True)
@_fit_options
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_context
@_wrap_errors
def ablate(ctx, manifest, layer_sets, method, proportion, seeds, thresholds, train_split, eval_splits,
           gd_seed, gd_epochs, gd_lr, activation, enhance_nodes, lam, out):
    """Compare seed quality across layer subsets."""
    del gd_seed
    sets = _parse_layer_sets(layer_sets)
    spec = ExperimentSpec(
        manifest_path=manifest,
        layers=sorted({j for ls in sets for j in ls}),
        lam=lam,
        enhance_nodes=_enhance_nodes(enhance_nodes),
        activation=activation,
        method=method,
        thresholds=_parse_thresholds(thresholds),
        seeds=tuple(_parse_ints(seeds)),
        gd_lr=gd_lr,
        gd_epochs=gd_epochs,
        train_split=train_split,
        eval_splits=tuple(s for s in eval_splits.split(",") if s),
    )
    rows, ok = pipeline.run_ablation(spec, sets, proportion=proportion)
    out = Path(out)
    header = pipeline.run_header(
        "ablate",
        {
            "layer_sets": [list(ls) for ls in sets],
            "method": method,
            "proportion": proportion,
            "lambda": spec.lam,
            "enhance_nodes": spec.enhance_nodes,
            "activation": spec.activation,
            "seeds": list(spec.seeds),
            "thresholds": list(spec.thresholds),
            "train_split": train_split,
            "eval_splits": list(spec.eval_splits),
        },
        {"manifest": manifest, "labels": load_manifest(manifest).labels_path()},
    )
    reports.write_json(out / "ablation.json", {"header": header, "rows": rows})
    reports.write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    reports.ablation_figure(rows, out / "ablation_miou.png")
    failed = sum(1 for r in rows if "error" in r)
    click.echo(f"wrote {len(rows)} rows to {out} ({failed} failed cells)")
    if not ok:
        ctx.exit(2)


@main.command()
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", default="val", show_default=True)
@click.option("--samples", default=None,
              help="Comma-separated sample ids for the top-k seed maps (default: first 4).")
@click.option("--class-k", type=int, default=0, show_default=True,
              help="Class index whose weight column drives the top-k slicing.")
@click.option("--n-groups", type=int, default=16, show_default=True)
@click.option("--topk", default="20,200,2000", show_default=True)
@click.option("--relevance", type=click.Choice(["empirical", "planted"]), default="empirical",
              show_default=True)
@click.option("--iou-threshold", type=float, default=0.1, show_default=True)
@click.option("--thresholds", default="0.05:0.95:0.05", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_wrap_errors
def analyze(manifest, model_dir, split, samples, class_k, n_groups, topk, relevance, iou_threshold,
            thresholds, out):
    """Weight-reliability analysis: relevance groups and top-k seeds."""
    model = pipeline.load_any_model(model_dir)
    sample_ids = None if samples is None else [s for s in samples.split(",") if s]
    analysis = pipeline.run_analysis(
        manifest,
        model,
        split=split,
        sample_ids=sample_ids,
        class_k=class_k,
        n_groups=n_groups,
        topk=tuple(_parse_ints(topk)),
        relevance_source=relevance,
        iou_threshold=iou_threshold,
        thresholds=_parse_thresholds(thresholds),
    )
    out = Path(out)
    header = pipeline.run_header(
        "analyze",
        {
            "split": split,
            "class_k": class_k,
            "n_groups": n_groups,
            "topk": _parse_ints(topk),
            "relevance": relevance,
            "iou_threshold": iou_threshold,
            "model": str(model_dir),
        },
        {"manifest": manifest, "model": Path(model_dir) / "model.json"},
    )
    rel = analysis.pop("relevance")
    seeds_vis = analysis.pop("sample_seeds")
    topk_seeds = analysis.pop("topk_seeds")
    retained = analysis.pop("retained_channels")
    reports.write_json(out / "analysis.json", {"header": header, **analysis})
    topk_dir = out / "topk"
    for entry in topk_seeds:
        seed = CamSeed(
            sample_id=entry["sample_id"],
            maps=entry["map"][np.newaxis],
            class_names=[f"class{class_k}"],
        )
        save_cam(topk_dir / f"{entry['sample_id']}.top{entry['k']}.npy", seed)
    for k, channels in retained.items():
        reports.write_json(
            topk_dir / f"top{k}.json",
            {"class": class_k, "k": k, "retained_channel_indices": channels},
        )
    group_rows = []
    for cls in analysis["classes"]:
        for g in range(n_groups):
            group_rows.append(
                [
                    cls["class_index"], cls["class_name"], g, cls["group_sizes"][g],
                    cls["group_mean_relevance"][g], cls["group_positive_weights"][g],
                    cls["group_nonpositive_weights"][g],
                ]
            )
    reports.write_csv(
        out / "relevance_groups.csv",
        ["class_index", "class_name", "group", "size", "mean_relevance", "positive_weights",
         "nonpositive_weights"],
        group_rows,
    )
    weights = model.cam_weights
    channel_rows = []
    for k in range(rel.shape[0]):
        for d in range(rel.shape[1]):
            channel_rows.append([k, d, weights[d, k], rel[k, d]])
    reports.write_csv(
        out / "channel_relevance.csv",
        ["class_index", "channel", "weight", "relevance"],
        channel_rows,
    )
    reports.write_csv(out / "topk.csv", ["k", "best_threshold", "best_miou"], analysis["topk"])
    reports.relevance_figure(analysis["classes"], out / "relevance_groups.png")
    reports.topk_figure(analysis["topk"], out / "topk_miou.png")
    if seeds_vis:
        reports.seed_grid_figure(seeds_vis, out / "seed_grid.png")
    click.echo(f"wrote analysis for {len(analysis['classes'])} classes to {out}")


if __name__ == "__main__":
    sys.exit(main())
