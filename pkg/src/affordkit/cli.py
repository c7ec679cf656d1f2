"""Command-line entry point.

One subcommand per pipeline stage; every stage reads and writes only the
documented file formats, so runs can be replayed and stages swapped. Exit
codes: 0 success, 1 partial (some items skipped), 2 configuration or input
error.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    try:
        import tomli as tomllib  # type: ignore[no-redef]
    except ImportError:
        tomllib = None

import click
import numpy as np

from . import __version__
from .correspondence import TransferConfig, get_extractor, transfer_affordance
from .errors import AffordKitError
from .evaluation import (
    evaluate_dataset,
    load_manifest,
    load_predictions,
    render_overlay,
    sr_threshold_curve,
)
from .extraction import (
    ContactPointSet,
    ExtractionConfig,
    derive_seed,
    extract_record_from_video,
    load_video_dir,
)
from .grasp import deproject_pixel, load_grasp_candidates, sample_depth, select_grasp
from .memory import AffordanceMemory, AffordanceRecord, Provenance
from .retrieval import get_embedder, get_perceptual, retrieve, rerank_perceptual
from .tensorio import load_depth, load_image, load_intrinsics, save_image
from . import fixtures as fixtures_mod

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _load_config_defaults(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        if p.suffix == ".toml":
            if tomllib is None:
                raise click.UsageError(
                    "TOML configs need Python >= 3.11 or the 'tomli' package; use JSON instead"
                )
            return tomllib.loads(p.read_text())
        return json.loads(p.read_text())
    except (OSError, ValueError) as e:
        raise click.UsageError(f"cannot load config {path}: {e}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
@click.option("--seed", default=7, show_default=True, help="Global RNG seed.")
@click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="TOML/JSON file with per-subcommand option defaults.",
)
@click.option("--jobs", default=1, show_default=True, help="Worker threads for batch stages.")
@click.pass_context
def main(ctx: click.Context, seed: int, config_path: str | None, jobs: int):
    """Affordance transfer toolkit: extract, retrieve, transfer, evaluate."""
    ctx.obj = {"seed": seed, "jobs": max(1, jobs)}
    defaults = _load_config_defaults(config_path)
    if defaults:
        ctx.default_map = defaults


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_CONFIG)


@main.command()
@click.option("--videos", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--memory", "memory_dir", required=True, type=click.Path(file_okay=False))
@click.option("--window", default=15, show_default=True, help="Clear-frame window half-width.")
@click.option("--samples", default=5, show_default=True, help="Contact points sampled per video.")
@click.option("--bbox-local", is_flag=True, help="Restrict homography matches near the object bbox.")
@click.pass_context
def extract(ctx, videos: str, memory_dir: str, window: int, samples: int, bbox_local: bool):
    """Extract affordance records from annotated videos into a memory."""
    seed = ctx.obj["seed"]
    mem = AffordanceMemory.create(memory_dir)
    video_dirs = sorted(p for p in Path(videos).iterdir() if p.is_dir())
    if not video_dirs:
        _fail(f"no video directories under {videos}")

    def work(vdir: Path):
        seq, skins, meta = load_video_dir(vdir)
        cfg = ExtractionConfig(
            window_half_width=window,
            sample_count=samples,
            rng_seed=derive_seed(seed, "extract", str(meta["id"])),
            bbox_local_homography=bbox_local,
        )
        crop, pts, clear_idx = extract_record_from_video(seq, skins, cfg)
        return AffordanceRecord(
            id=str(meta["id"]),
            category=str(meta["category"]),
            crop=crop,
            contact_points=pts,
            provenance=Provenance(video_id=str(meta["id"]), frame_index=clear_idx),
        )

    skipped: list[tuple[str, str]] = []
    added = 0
    with ThreadPoolExecutor(max_workers=ctx.obj["jobs"]) as pool:
        results = list(pool.map(lambda d: _try(work, d), video_dirs))
    for vdir, outcome in zip(video_dirs, results):
        record, err = outcome
        if record is None:
            skipped.append((vdir.name, err))
            continue
        try:
            mem.add(record)
            added += 1
        except AffordKitError as e:
            skipped.append((vdir.name, f"{type(e).__name__}: {e}"))

    click.echo(f"extracted {added} record(s) from {len(video_dirs)} video(s)")
    for name, reason in skipped:
        click.echo(f"  skipped {name}: {reason}")
    if added == 0:
        sys.exit(EXIT_CONFIG)
    sys.exit(EXIT_PARTIAL if skipped else EXIT_OK)


def _try(fn, *args):
    try:
        return fn(*args), ""
    except AffordKitError as e:
        return None, f"{type(e).__name__}: {e}"


@main.command("build-memory")
@click.option("--memory", "memory_dir", required=True, type=click.Path(file_okay=False))
@click.option(
    "--items",
    default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="JSON list of {id, category, crop, points} to ingest.",
)
@click.option("--precompute", default=None, help="Encoder whose embeddings to cache for all records.")
@click.option("--features", default=None, type=click.Path(file_okay=False), help="Exported feature dir.")
def build_memory(memory_dir: str, items: str | None, precompute: str | None, features: str | None):
    """Ingest pre-cropped records and/or cache embeddings."""
    mem = AffordanceMemory.create(memory_dir)
    if items:
        base = Path(items).parent
        try:
            entries = json.loads(Path(items).read_text())
        except (OSError, json.JSONDecodeError) as e:
            _fail(f"cannot parse {items}: {e}")
        for entry in entries:
            rec = AffordanceRecord(
                id=str(entry["id"]),
                category=str(entry["category"]),
                crop=load_image(base / entry["crop"]),
                contact_points=ContactPointSet(np.array(entry["points"], dtype=np.float64)),
                provenance=Provenance(
                    video_id=str(entry.get("video_id", "")),
                    frame_index=int(entry.get("frame_index", 0)),
                ),
            )
            mem.add(rec)
        click.echo(f"ingested {len(entries)} record(s)")
    if precompute:
        try:
            enc = get_embedder(precompute, features)
        except AffordKitError as e:
            _fail(str(e))
        n = 0
        for rid in mem.ids:
            rec = mem.get(rid)
            if precompute not in rec.embeddings:
                mem.cache_embedding(rid, enc.embed(rec.crop))
                n += 1
        click.echo(f"cached {n} embedding(s) under {precompute!r}")
    click.echo(f"memory at {memory_dir}: {len(mem)} record(s), categories {sorted(mem.categories)}")


@main.command("retrieve")
@click.option("--memory", "memory_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--category", required=True)
@click.option("--encoder", default="patchgram-v1", show_default=True)
@click.option("--features", default=None, type=click.Path(file_okay=False))
@click.option("--topk", default=5, show_default=True)
@click.option("--rerank", default=None, help="Perceptual distance for single-result re-ranking.")
def retrieve_cmd(memory_dir, target, category, encoder, features, topk, rerank):
    """Rank memory records against a target crop."""
    try:
        mem = AffordanceMemory.open(memory_dir)
        enc = get_embedder(encoder, features)
        results = retrieve(mem, load_image(target), category, topk, enc)
        if rerank:
            best = rerank_perceptual(mem, results, load_image(target), get_perceptual(rerank))
            results = [best]
        for r in results:
            rec = mem.get(r.record_id)
            click.echo(
                json.dumps(
                    {
                        "rank": r.rank,
                        "record_id": r.record_id,
                        "similarity": round(r.similarity, 6),
                        "category": rec.category,
                    }
                )
            )
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")


@main.command()
@click.option("--memory", "memory_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--category", required=True)
@click.option("--encoder", default="patchgram-v1", show_default=True)
@click.option("--extractor", default="toygrid", show_default=True)
@click.option("--features", default=None, type=click.Path(file_okay=False))
@click.option("--topk", default=5, show_default=True)
@click.option("--no-transforms", is_flag=True, help="Match only the untransformed source.")
@click.option(
    "--avg-mode",
    type=click.Choice(["map-then-average", "average-then-map"]),
    default="map-then-average",
    show_default=True,
)
@click.option("--rerank", default=None, help="Perceptual re-rank to a single source first.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--append", is_flag=True, help="Append to --out instead of overwriting.")
@click.option("--overlay", default=None, type=click.Path(dir_okay=False))
@click.option("--image-id", default=None, help="Defaults to the target file stem.")
@click.option("--method", default="affordkit", show_default=True)
@click.pass_context
def transfer(
    ctx, memory_dir, target, category, encoder, extractor, features, topk,
    no_transforms, avg_mode, rerank, out_path, append, overlay, image_id, method,
):
    """Predict contact points on a target image from the memory."""
    seed = ctx.obj["seed"]
    image_id = image_id or Path(target).stem
    try:
        mem = AffordanceMemory.open(memory_dir)
        tgt = load_image(target)
        enc = get_embedder(encoder, features)
        results = retrieve(mem, tgt, category, topk, enc)
        if rerank:
            results = [rerank_perceptual(mem, results, tgt, get_perceptual(rerank))]
        fx = get_extractor(extractor, features)
        sources = []
        for r in results:
            rec = mem.get(r.record_id)
            sources.append((rec, fx.extract(rec.crop)))
        cfg = TransferConfig(
            averaging_mode=avg_mode,
            use_transforms=not no_transforms,
            rng_seed=derive_seed(seed, "transfer", image_id),
        )
        final, best = transfer_affordance(sources, tgt, fx.extract(tgt), fx, cfg)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")

    points = [[int(x), int(y)] for x, y in final.rounded()]
    line = json.dumps({"image_id": image_id, "method": method, "points": points})
    mode = "a" if append else "w"
    with open(out_path, mode, encoding="utf-8") as f:
        f.write(line + "\n")
    click.echo(
        f"{image_id}: source={best.source_record_id} transform={best.transform.code} "
        f"similarity={best.similarity:.4f} (considered {len(sources)} source(s))"
    )
    if overlay:
        save_image(render_overlay(tgt, np.array(points, dtype=np.float64)), overlay)


@main.command()
@click.option("--preds", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", default=122, show_default=True)
@click.option("--out", "report_path", default=None, type=click.Path(dir_okay=False))
@click.option("--csv", "csv_path", default=None, type=click.Path(dir_okay=False))
@click.option("--curve", "curve_spec", default=None, help="start:stop:step SR curve, e.g. 0:255:8.")
@click.option("--curve-out", default=None, type=click.Path(dir_okay=False))
@click.option("--allow-partial", is_flag=True)
def evaluate(preds, manifest, threshold, report_path, csv_path, curve_spec, curve_out, allow_partial):
    """Score predictions against ground-truth masks."""
    try:
        report = evaluate_dataset(preds, manifest, threshold, allow_partial)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")
    click.echo(report.table())
    if report_path:
        Path(report_path).write_text(report.to_json() + "\n")
    if csv_path:
        Path(csv_path).write_text(report.to_csv())
    if curve_spec:
        pts = _run_curve(preds, manifest, curve_spec, allow_partial)
        if curve_out:
            Path(curve_out).write_text(
                "threshold,sr\n" + "\n".join(f"{t},{sr:.6f}" for t, sr in pts) + "\n"
            )
        else:
            for t, sr in pts:
                click.echo(f"threshold {t:3d}: SR {sr * 100:.1f}%")
    skipped = report.skipped["missing_mask"] or report.skipped["missing_prediction"]
    sys.exit(EXIT_PARTIAL if skipped else EXIT_OK)


def _parse_curve_spec(spec: str) -> list[int]:
    try:
        start, stop, step = (int(s) for s in spec.split(":"))
    except ValueError:
        raise click.UsageError(f"curve spec must be start:stop:step, got {spec!r}")
    if step <= 0:
        raise click.UsageError("curve step must be positive")
    return list(range(start, stop + 1, step))


def _run_curve(preds, manifest, spec, allow_partial):
    try:
        return sr_threshold_curve(preds, manifest, _parse_curve_spec(spec), allow_partial)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")


@main.command()
@click.option("--preds", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--curve", "curve_spec", default="0:255:8", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.option("--allow-partial", is_flag=True)
def curve(preds, manifest, curve_spec, out_path, allow_partial):
    """SR as a function of the mask threshold."""
    pts = _run_curve(preds, manifest, curve_spec, allow_partial)
    text = "threshold,sr\n" + "\n".join(f"{t},{sr:.6f}" for t, sr in pts) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("grasp-select")
@click.option("--candidates", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--contact", required=True, help="Pixel as u,v.")
@click.option("--depth", "depth_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--intrinsics", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--max-distance", default=0.1, show_default=True, help="Reject selections farther than this (m); <0 disables.")
@click.option("--window", default=5, show_default=True, help="Depth median window size.")
def grasp_select(candidates, contact, depth_path, intrinsics, max_distance, window):
    """Pick the grasp candidate nearest to the deprojected contact pixel."""
    try:
        u, v = (int(s) for s in contact.split(","))
    except ValueError:
        raise click.UsageError(f"--contact must be u,v, got {contact!r}")
    try:
        intr = load_intrinsics(intrinsics)
        depth_img = load_depth(depth_path)
        raw = sample_depth(depth_img, u, v, window)
        p3 = deproject_pixel(u, v, raw, intr)
        cands = load_grasp_candidates(candidates)
        chosen = select_grasp(cands, p3, None if max_distance < 0 else max_distance)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")
    click.echo(
        json.dumps(
            {
                "contact_3d": [round(float(x), 6) for x in p3.xyz],
                "index": next(i for i, c in enumerate(cands) if c is chosen),
                "rotation": chosen.rotation.tolist(),
                "translation": chosen.translation.tolist(),
                "width": chosen.width,
                "score": chosen.score,
                "distance": float(np.linalg.norm(chosen.translation - p3.xyz)),
            }
        )
    )


@main.command()
@click.option("--memory", "memory_dir", required=True, type=click.Path(exists=True, file_okay=False))
def verify(memory_dir):
    """fsck the memory: index entries, files, readability, orphans."""
    try:
        mem = AffordanceMemory.open(memory_dir)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")
    problems = mem.verify()
    if problems:
        for p in problems:
            click.echo(f"INCONSISTENT: {p}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"memory at {memory_dir} is consistent ({len(mem)} record(s))")


@main.command()
@click.option("--preds", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--with-mask/--no-mask", default=True, show_default=True)
def visualize(preds, manifest, out_dir, with_mask):
    """Render prediction overlays (and optionally the GT mask) per image."""
    from .tensorio import load_mask

    try:
        entries = load_manifest(manifest)
        predictions = load_predictions(preds)
    except AffordKitError as e:
        _fail(f"{type(e).__name__}: {e}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for pred in predictions:
        entry = entries.get(pred.image_id)
        if entry is None:
            click.echo(f"  skipped {pred.image_id}: not in manifest", err=True)
            continue
        img = load_image(entry.image)
        mask = load_mask(entry.mask) if with_mask and entry.mask.is_file() else None
        save_image(render_overlay(img, pred.points, mask), out / f"{pred.image_id}.png")
        written += 1
    click.echo(f"wrote {written} overlay(s) to {out}")
    sys.exit(EXIT_OK if written == len(predictions) else EXIT_PARTIAL)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--videos-per-category", default=2, show_default=True)
@click.pass_context
def fixtures(ctx, out_dir, videos_per_category):
    """Generate the synthetic fixture corpus (videos, dataset, grasp files)."""
    summary = fixtures_mod.generate_corpus(
        out_dir, seed=ctx.obj["seed"], videos_per_category=videos_per_category
    )
    click.echo(
        f"fixture corpus at {out_dir}: {len(summary['videos'])} videos, "
        f"{len(summary['dataset_images'])} dataset images"
    )


if __name__ == "__main__":
    main()
