"""Command line entry point.

Every subcommand writes under ``<output_root>/<name>/`` with the layout::

    manifests/   region manifests (and optional crops)
    records/     instruction-tuning / CoT-M JSONL
    reports/     metrics, prompts, voting output, evaluation reports
    log/         timestamped run logs (the only non-deterministic files)
    manifest.json  artifact index with SHA-256 digests

Exit codes: 0 success, 1 unexpected error, 2 configuration or usage error,
3 malformed or inconsistent input file, 4 invalid argument, 5 token budget
exceeded, 6 generation failure, 7 scoring error, 8 output I/O error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import cotm, cvm, evalharness, instructiad
from .config import RunConfig, parse_config
from .egroi import run_egroi, run_egroi_training
from .errors import ArgumentError, FormatError, IntegrityError, TriadError
from .map_io import (
    ImageMeta,
    load_anomaly_map,
    load_mask,
    read_jsonl,
    read_manifest,
    write_jsonl,
    write_manifest,
)
from .metrics import DEFAULT_SWEEP, ExpertImageClassifier, normalize_map, pixel_auroc, threshold_sweep

log = logging.getLogger("triadkit")

_FLAG_KEYS = {
    "name": "name", "dataset_root": "dataset_root", "output_root": "output_root", "workers": "workers",
    "mfg_store": "mfg_store", "threshold": "egroi.threshold", "box_side": "egroi.box_side",
    "iou_merge": "egroi.iou_merge", "cap": "egroi.cap", "pool": "egroi.pool", "budget": "egroi.budget",
    "connectivity": "egroi.connectivity", "seed": "egroi.seed", "template": "eval.template",
    "shot": "eval.shot", "with_mfg": "eval.with_mfg", "scheme": "eval.scheme", "endpoint": "client.endpoint",
    "model": "client.model", "max_in_flight": "client.max_in_flight",
}


def _bundled(name) -> Path:
    return Path(str(resources.files("triadkit") / "data" / name))


def config_options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML or JSON config file."),
        click.option("--name", help="Run name (directory under the output root)."),
        click.option("--dataset-root", help="Base directory for relative input paths."),
        click.option("--output-root", help="Directory holding run directories."),
        click.option("--workers", type=int, help="Parallel workers for per-sample stages."),
        click.option("--mfg-store", help="Manufacturing process store (JSON keyed by product class)."),
        click.option("--threshold", type=float), click.option("--box-side", type=int),
        click.option("--iou-merge", type=float), click.option("--cap", type=int),
        click.option("--pool", type=int), click.option("--budget", type=int),
        click.option("--connectivity", type=click.Choice(["4", "8"])), click.option("--seed", type=int),
        click.option("--template", type=click.Choice(evalharness.TEMPLATES)),
        click.option("--shot", type=click.Choice(evalharness.SHOTS)),
        click.option("--with-mfg/--no-mfg", default=None),
        click.option("--scheme", type=click.Choice(evalharness.SCHEMES)),
        click.option("--endpoint", help="Chat-completion URL; the stub generator is used when unset."),
        click.option("--model"), click.option("--max-in-flight", type=int),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _config_from(kwargs) -> RunConfig:
    path = kwargs.pop("config_path", None)
    overrides = {}
    for flag, key in _FLAG_KEYS.items():
        value = kwargs.pop(flag, None)
        if flag == "connectivity" and value is not None:
            value = int(value)
        overrides[key] = value
    return parse_config(path, overrides)


class Run:
    """A run directory plus its artifact index."""

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.root = config.run_dir
        for sub in ("manifests", "records", "reports", "log"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        handler = logging.FileHandler(self.root / "log" / f"{command.replace(' ', '_')}.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        self._handler = handler
        logging.getLogger("triadkit").addHandler(handler)
        logging.getLogger("triadkit").setLevel(logging.INFO)
        log.info("start %s", command)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        self.artifacts.append(p)
        return p

    def finish(self):
        index_path = self.root / "manifest.json"
        index = read_manifest(index_path) if index_path.exists() else {"commands": {}}
        entries = {}
        for p in sorted(set(self.artifacts)):
            entries[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        index["commands"][self.command] = {"config": self.config.to_dict(), "artifacts": entries}
        write_manifest(index, index_path)
        log.info("finished %s (%d artifacts)", self.command, len(entries))
        logging.getLogger("triadkit").removeHandler(self._handler)
        self._handler.close()


def _load_rows(path, config: RunConfig):
    rows = read_jsonl(config.resolve(path) if not Path(path).is_absolute() else path)
    ids = [str(r.get("sample_id")) for r in rows]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise IntegrityError(f"duplicate sample_id in {path}: {', '.join(dup[:10])}")
    return rows


def _mfg_store(config: RunConfig):
    if config.mfg_store:
        return cotm.load_mfg_store(config.resolve(config.mfg_store))
    return cotm.default_mfg_store()


def _load_raster(path):
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def cli():
    """Expert-map metrics, EG-RoI regions, CoT-M data and LMM evaluation tooling."""


@cli.command()
@config_options
@click.option("--samples", required=True, help="JSONL: sample_id, map, map_format, [image, width, height, gt_mask].")
@click.option("--training", is_flag=True, help="Build boxes from gt_mask plus random normal regions.")
@click.option("--save-crops", is_flag=True, help="Write each crop as PNG next to its manifest.")
def regions(samples, training, save_crops, **kwargs):
    """Run the EG-RoI pipeline over a sample list."""
    config = _config_from(kwargs)
    rows = _load_rows(samples, config)
    run = Run(config, "regions")

    def one(row):
        sid = str(row["sample_id"])
        raster = _load_raster(config.resolve(row["image"])) if row.get("image") else None
        if training:
            mask = load_mask(config.resolve(row["gt_mask"]))
            h, w = mask.shape
        else:
            amap = load_anomaly_map(config.resolve(row["map"]), row.get("map_format", "png16"),
                                    source_expert=row.get("expert", "unknown"))
            h, w = amap.shape
        if raster is not None:
            h, w = raster.shape[:2]
        w, h = int(row.get("width", w)), int(row.get("height", h))
        meta = ImageMeta(w, h, row.get("product_class", "unknown"), sid,
                         row.get("label", "normal"))
        if training:
            return run_egroi_training(meta, mask, config.egroi, raster=raster)
        return run_egroi(meta, amap, config.egroi, raster=raster)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        manifests = list(pool.map(one, rows))
    for m in sorted(manifests, key=lambda m: m.sample_id):
        write_manifest(m, run.path("manifests", f"{m.sample_id}.json"))
        if save_crops:
            for k, patch in enumerate(m.patches):
                out = run.path("manifests", f"{m.sample_id}_patch{k}.png")
                Image.fromarray(patch).save(out, format="PNG")
        click.echo(f"{m.sample_id}: {len(m.boxes)} box(es), {m.total_visual_tokens} visual tokens")
    run.finish()


def _parse_thresholds(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ArgumentError(f"cannot parse thresholds {text!r}") from exc


@cli.command()
@config_options
@click.option("--samples", required=True, help="JSONL: sample_id, map, map_format, [gt_mask, label].")
@click.option("--thresholds", default=",".join(str(t) for t in DEFAULT_SWEEP), show_default=True)
@click.option("--negative-rule", type=click.Choice(["rank", "value"]), default="rank", show_default=True)
def metrics(samples, thresholds, negative_rule, **kwargs):
    """Pixel TPR/FPR threshold sweep, pixel AUROC and image-level accuracy of expert maps."""
    config = _config_from(kwargs)
    ts = _parse_thresholds(thresholds)
    rows = sorted(_load_rows(samples, config), key=lambda r: str(r["sample_id"]))
    run = Run(config, "metrics")
    raw = {str(r["sample_id"]): load_anomaly_map(config.resolve(r["map"]), r.get("map_format", "png16"))
           for r in rows}
    report = {"samples": len(rows), "thresholds": list(ts)}
    with_masks = [r for r in rows if r.get("gt_mask")]
    lines = []
    if with_masks:
        pairs = [(normalize_map(raw[str(r["sample_id"])]), load_mask(config.resolve(r["gt_mask"])))
                 for r in with_masks]
        sweep = threshold_sweep(pairs, ts, negative_rule=negative_rule)
        report["pixel_sweep"] = sweep
        try:
            report["pixel_auroc"] = pixel_auroc(pairs)
        except ArgumentError as exc:
            report["pixel_auroc"] = None
            log.warning("pixel AUROC skipped: %s", exc)
        lines.append(f"{'threshold':>10}{'Pix-TPR':>10}{'Pix-FPR':>10}")
        lines += [f"{r['threshold']:>10.2f}{r['tpr'] * 100:>9.1f}%{r['fpr'] * 100:>9.1f}%" for r in sweep]
        if report["pixel_auroc"] is not None:
            lines.append(f"P-AUROC: {report['pixel_auroc'] * 100:.1f}")
    labeled = [r for r in rows if r.get("label")]
    if labeled:
        maps = [raw[str(r["sample_id"])] for r in labeled]
        truth = ["defect" if r["label"] in ("abnormal", "defect") else "normal" for r in labeled]
        clf = ExpertImageClassifier().fit(maps)
        positive = tuple(t for t in ts if 0 < t < 1)
        acc = clf.accuracy_sweep(maps, truth, positive)
        report["image_accuracy"] = {f"{t:g}": a for t, a in acc.items()}
        report["global_range"] = [clf.global_min_, clf.global_max_]
        lines.append("image accuracy: " + "  ".join(f"{t:g}:{a * 100:.1f}%" for t, a in acc.items()))
    write_manifest(report, run.path("reports", "metrics.json"))
    text = "\n".join(lines) + "\n"
    run.path("reports", "metrics.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)
    run.finish()


@cli.command("cvm")
@config_options
@click.option("--zero", "zero_path", required=True, help="Zero-shot model responses JSONL.")
@click.option("--one", "one_path", required=True, help="One-shot model responses JSONL.")
def cvm_cmd(zero_path, one_path, **kwargs):
    """Combine zero-shot and one-shot responses with confidence voting."""
    config = _config_from(kwargs)
    zero = _load_rows(zero_path, config)
    one = _load_rows(one_path, config)
    run = Run(config, "cvm")
    combined = cvm.combine_responses(zero, one, scheme=config.eval.scheme)
    write_jsonl(combined, run.path("reports", "cvm_responses.jsonl"))
    counts = {}
    for row in combined:
        counts[row["rationale"]] = counts.get(row["rationale"], 0) + 1
    click.echo(" ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    run.finish()


@cli.group()
def dataset():
    """InstructIAD record building."""


@dataset.command("build")
@config_options
@click.option("--samples", required=True, help="Annotated samples JSONL.")
@click.option("--explanations", help="JSON mapping sample_id to generated explanation.")
@click.option("--catalog", help="JSON catalog of product classes ({\"classes\": [...]}).")
def dataset_build(samples, explanations, catalog, **kwargs):
    """Build detection / caption / analysis records and dataset statistics."""
    config = _config_from(kwargs)
    anns = [instructiad.AnnotatedSample.from_dict(r) for r in _load_rows(samples, config)]
    expl = json.loads(config.resolve(explanations).read_text(encoding="utf-8")) if explanations else {}
    classes = None
    if catalog:
        raw = json.loads(config.resolve(catalog).read_text(encoding="utf-8"))
        classes = raw["classes"] if isinstance(raw, dict) else raw
    run = Run(config, "dataset build")
    records = instructiad.build_records(anns, expl)
    write_jsonl(records, run.path("records", "instructiad.jsonl"))
    stats = instructiad.dataset_stats(records, classes)
    write_manifest(stats, run.path("reports", "dataset_stats.json"))
    click.echo(f"{len(records)} records; by task {stats['by_task']}")
    if classes is not None and stats["catalog"]["missing"]:
        click.echo(f"classes without records: {', '.join(stats['catalog']['missing'])}")
    run.finish()


@cli.group("cotm")
def cotm_group():
    """CoT-M data organization."""


@cotm_group.command("generate")
@config_options
@click.option("--samples", required=True, help="CoT-M samples JSONL (mode: captioned/checklist/text_only).")
@click.option("--reject", "reject_path", help="Plain-text file of record ids rejected by review.")
def cotm_generate(samples, reject_path, **kwargs):
    """Generate CoT-M records with the stub or an HTTP generation client."""
    config = _config_from(kwargs)
    items = [cotm.CotmSample.from_dict(r) for r in _load_rows(samples, config)]
    store = _mfg_store(config)
    if config.client.endpoint:
        client = cotm.HttpChatClient(config.client.endpoint, config.client.model, config.client.token_env,
                                     attempts=config.client.attempts)
    else:
        client = cotm.StubClient(config.client.stub_seed)
    run = Run(config, "cotm generate")
    records, routed = cotm.organize(items, store, client, max_in_flight=config.client.max_in_flight)
    if reject_path:
        records = cotm.filter_records(records, cotm.read_rejections(config.resolve(reject_path)))
    write_jsonl(records, run.path("records", "cotm.jsonl"))
    export = cotm.training_export(records)
    write_jsonl(export, run.path("records", "cotm_train.jsonl"))
    routed_path = run.path("reports", "cotm_routed.txt")
    routed_path.write_text("".join(f"{sid}\n" for sid in routed), encoding="utf-8")
    click.echo(f"{len(records)} records stored, {len(export)} exported, {len(routed)} routed to manual filter")
    run.finish()


@cli.group("eval")
def eval_group():
    """Benchmark prompt rendering and scoring."""


def _hints(config):
    if not config.eval.hints:
        return None
    return json.loads(config.resolve(config.eval.hints).read_text(encoding="utf-8"))


@eval_group.command("render")
@config_options
@click.option("--items", "items_path", help="Evaluation items JSONL.")
@click.option("--fixture", is_flag=True, help="Use the bundled 4-item fixture.")
def eval_render(items_path, fixture, **kwargs):
    """Render prompts for every evaluation item."""
    config = _config_from(kwargs)
    if fixture:
        items_path = _bundled("eval_items.jsonl")
    if not items_path:
        raise click.UsageError("give --items or --fixture")
    items = [evalharness.EvalItem.from_dict(r) for r in _load_rows(items_path, config)]
    store = _mfg_store(config) if config.eval.with_mfg else None
    run = Run(config, "eval render")
    ev = config.eval
    rows = [{"sample_id": it.sample_id,
             "prompt": evalharness.render_prompt(it, ev.template, ev.with_mfg, ev.shot, store, _hints(config)),
             "template": ev.template, "shot": ev.shot, "with_mfg": ev.with_mfg}
            for it in sorted(items, key=lambda i: i.sample_id)]
    write_jsonl(rows, run.path("reports", "prompts.jsonl"))
    click.echo(f"rendered {len(rows)} prompt(s)")
    run.finish()


@eval_group.command("score")
@config_options
@click.option("--items", "items_path", help="Evaluation items JSONL.")
@click.option("--responses", "responses_path", help="Responses JSONL (response_text or decision per sample).")
@click.option("--paired", "paired_path", help="Responses of the same model with manufacturing context.")
@click.option("--fixture", is_flag=True, help="Score the bundled 4-item fixture.")
@click.option("--masks", is_flag=True, help="Break accuracy down by defect size using gt_mask_ref.")
def eval_score(items_path, responses_path, paired_path, fixture, masks, **kwargs):
    """Score a responses file against evaluation items."""
    config = _config_from(kwargs)
    if fixture:
        items_path = items_path or _bundled("eval_items.jsonl")
        responses_path = responses_path or _bundled("eval_responses.jsonl")
    if not items_path or not responses_path:
        raise click.UsageError("give --items and --responses, or --fixture")
    items = [evalharness.EvalItem.from_dict(r) for r in _load_rows(items_path, config)]
    scheme = config.eval.scheme
    answers = evalharness.answers_from_responses(_load_rows(responses_path, config), scheme)
    gt_masks = None
    if masks:
        gt_masks = {it.sample_id: load_mask(config.resolve(it.gt_mask_ref)) for it in items if it.gt_mask_ref}
    run = Run(config, "eval score")
    if paired_path:
        paired = evalharness.answers_from_responses(_load_rows(paired_path, config), scheme)
        report = evalharness.score_paired(items, answers, paired, gt_masks)
    else:
        report = evalharness.score_run(items, answers, gt_masks)
    write_manifest(report, run.path("reports", "eval_report.json"))
    table = report.table()
    run.path("reports", "eval_report.txt").write_text(table, encoding="utf-8")
    click.echo(table, nl=False)
    run.finish()


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="triadkit", standalone_mode=False)
    except TriadError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 8
    return 0


if __name__ == "__main__":
    sys.exit(main())
