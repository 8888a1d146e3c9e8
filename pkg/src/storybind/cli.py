"""Command-line surface: benchmark generation, validation, guided runs, scoring, reports.

Exit codes are a stable contract: 0 success, 1 validation or scoring failure,
2 usage or I/O failure (argparse usage errors also exit 2).
"""

from __future__ import annotations

import argparse
import csv
import html
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from .attention import AttributePairSet, aggregate_attention, align_tokens, export_attention_map
from .benchmark import (
    STYLES,
    StubTextGenClient,
    build_scene_prompt,
    compute_stats,
    generate_story,
    read_benchmark,
    validate_story,
    write_benchmark,
)
from .evaluation import (
    MetricReport,
    StubScorer,
    render_text_table,
    score_run,
)
from .guidance import DenoiserAdapter, GuidanceConfig, GuidanceTrace, run_guided_denoise
from .guidance import resolve_pair_spans
from .toy import ToyConfig, build_toy

__all__ = ["main", "register_backend", "register_scorer", "scorer_cache_dir"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CACHE_ENV_VAR = "STORYBIND_CACHE_DIR"

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".webp", ".gif"}


def scorer_cache_dir() -> Path | None:
    """Directory external scorer/model adapters should cache weights in."""
    value = os.environ.get(CACHE_ENV_VAR)
    return Path(value) if value else None


# ---------------------------------------------------------------------------
# Backend and scorer registries
# ---------------------------------------------------------------------------

_BACKENDS: dict[str, Callable[[], DenoiserAdapter]] = {}
_SCORERS: dict[str, Callable[[], object]] = {}


def register_backend(name: str, factory: Callable[[], DenoiserAdapter]) -> None:
    """Registration hook so host pipelines can expose their adapter by name."""
    _BACKENDS[name] = factory


def register_scorer(name: str, factory: Callable[[], object]) -> None:
    _SCORERS[name] = factory


register_backend("toy", lambda: build_toy(ToyConfig(open_vocab=True)))
register_scorer("stub", StubScorer)


# ---------------------------------------------------------------------------
# gen-benchmark
# ---------------------------------------------------------------------------


def cmd_gen_benchmark(args: argparse.Namespace) -> int:
    styles = [s.strip().lower() for s in args.styles.split(",")] if args.styles else list(STYLES)
    unknown = [s for s in styles if s not in STYLES]
    if unknown:
        print(f"error: unknown style(s): {', '.join(unknown)}", file=sys.stderr)
        return EXIT_USAGE
    if args.client != "stub":
        print(f"error: unknown client {args.client!r} (available: stub)", file=sys.stderr)
        return EXIT_USAGE

    client = StubTextGenClient(seed=args.seed)
    stories = []
    failures: list[str] = []
    for style in styles:
        for k in range(args.quota):
            seed = args.seed + k
            try:
                stories.append(generate_story(client, style, seed=seed))
            except Exception as err:
                failures.append(f"{style} #{k}: {err}")

    try:
        out = Path(args.out)
        manifest = write_benchmark(stories, out)
    except OSError as err:
        print(f"error: cannot write benchmark: {err}", file=sys.stderr)
        return EXIT_USAGE

    stats = compute_stats(stories)
    print(f"wrote {len(stories)} stories to {out} (manifest: {manifest.name})")
    print(json.dumps(stats.to_dict(), indent=2))
    if failures:
        for line in failures:
            print(f"generation failure: {line}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        stories = read_benchmark(Path(args.benchmark))
    except (OSError, ValueError, KeyError) as err:
        print(f"error: cannot read benchmark: {err}", file=sys.stderr)
        return EXIT_USAGE

    total = 0
    for story in stories:
        for violation in validate_story(story):
            total += 1
            where = (
                f"{violation.story_id} scene {violation.scene_index}"
                if violation.scene_index is not None
                else violation.story_id
            )
            print(f"{where}: [{violation.code}] {violation.message}")
    print(f"{len(stories)} stories checked, {total} violation(s)")
    return EXIT_OK if total == 0 else EXIT_FAILURE


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _scene_seed(base: int, story_id: str, scene_index: int) -> int:
    return (base + zlib.crc32(f"{story_id}/{scene_index}".encode())) & 0x7FFFFFFF


def _run_one_scene(
    adapter_factory: Callable[[], DenoiserAdapter],
    story,
    scene_index: int,
    config: GuidanceConfig,
    base_seed: int,
    out_dir: Path,
    apply_guidance: bool,
    dump_attention: bool,
) -> dict:
    scene = story.scenes[scene_index]
    prompt = build_scene_prompt(story.style, story.character_description, scene.narrative)
    rel_latent = f"{story.id}/scene_{scene_index}.npy"
    rel_trace = f"{story.id}/scene_{scene_index}.trace.jsonl"
    entry = {
        "index": scene_index,
        "prompt": prompt,
        "image": rel_latent,
        "trace": rel_trace,
        "positive_pairs": [list(p) for p in scene.positive_pairs],
        "negative_pairs": [list(p) for p in scene.negative_pairs],
        "status": "ok",
    }
    try:
        adapter = adapter_factory()
        pairs = AttributePairSet(
            positive=scene.positive_pairs, negative=scene.negative_pairs
        )
        seed = _scene_seed(base_seed, story.id, scene_index)
        final, trace = run_guided_denoise(
            adapter, prompt, pairs, config, seed, apply_guidance=apply_guidance
        )
        latent_path = out_dir / rel_latent
        latent_path.parent.mkdir(parents=True, exist_ok=True)
        np.save(latent_path, final.tensor.detach().cpu().numpy())
        trace.write(out_dir / rel_trace)
        if dump_attention:
            _dump_scene_attention(adapter, prompt, pairs, config, final, out_dir, story.id, scene_index)
    except Exception as err:
        entry["status"] = f"failed: {err}"
    return entry


def _dump_scene_attention(
    adapter, prompt, pairs, config, final, out_dir: Path, story_id: str, scene_index: int
) -> None:
    spans = align_tokens(prompt, adapter.tokenize(prompt))
    pair_spans = resolve_pair_spans(spans, pairs)
    _, raw = adapter.predict(final.tensor, prompt, final.timestep_index)
    maps = aggregate_attention(raw, pair_spans, config.aggregation)
    attn_dir = out_dir / story_id / "attn"
    for word, attention in maps.items():
        slug = "".join(ch if ch.isalnum() else "-" for ch in word)
        export_attention_map(attention, attn_dir / f"scene_{scene_index}__{slug}", config.aggregation)


def cmd_run(args: argparse.Namespace) -> int:
    factory = _BACKENDS.get(args.backend)
    if factory is None:
        print(
            f"error: unknown backend {args.backend!r} "
            f"(available: {', '.join(sorted(_BACKENDS))})",
            file=sys.stderr,
        )
        return EXIT_USAGE
    try:
        stories = read_benchmark(Path(args.benchmark))
    except (OSError, ValueError, KeyError) as err:
        print(f"error: cannot read benchmark: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = (
            GuidanceConfig.from_json_file(Path(args.config))
            if args.config
            else GuidanceConfig()
        )
    except (OSError, ValueError, KeyError) as err:
        print(f"error: cannot load guidance config: {err}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        print(f"error: cannot create output directory: {err}", file=sys.stderr)
        return EXIT_USAGE

    apply_guidance = not args.no_guidance
    jobs = max(1, args.jobs)
    tasks = [
        (story, scene_index)
        for story in stories
        for scene_index in range(len(story.scenes))
    ]

    def work(task):
        story, scene_index = task
        return (
            story.id,
            _run_one_scene(
                factory,
                story,
                scene_index,
                config,
                args.seed,
                out_dir,
                apply_guidance,
                args.dump_attention,
            ),
        )

    if jobs == 1:
        results = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, tasks))

    entries: dict[str, list[dict]] = {}
    for story_id, entry in results:
        entries.setdefault(story_id, []).append(entry)

    failures = 0
    manifest_stories = []
    for story in stories:
        scene_entries = sorted(entries.get(story.id, []), key=lambda e: e["index"])
        failures += sum(1 for e in scene_entries if e["status"] != "ok")
        manifest_stories.append({"story_id": story.id, "scenes": scene_entries})

    label = args.label or (
        f"{args.backend} (no guidance)" if args.no_guidance else f"{args.backend} + guidance"
    )
    manifest = {
        "run_id": f"{args.backend}-seed{args.seed}",
        "backend": args.backend,
        "benchmark": str(Path(args.benchmark)),
        "method_label": label,
        "seed": args.seed,
        "no_guidance": args.no_guidance,
        "guidance": config.to_dict(),
        "stories": manifest_stories,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    print(f"ran {len(tasks)} scenes ({failures} failed) into {out_dir}")
    return EXIT_FAILURE if failures else EXIT_OK


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _write_iou_csv(run_dir: Path, out_path: Path) -> None:
    manifest = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
    with out_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["story_id", "scene_index", "timestep", "pair", "iou"])
        for story in manifest["stories"]:
            for scene in story["scenes"]:
                trace_rel = scene.get("trace")
                if not trace_rel or scene.get("status") != "ok":
                    continue
                trace_path = run_dir / trace_rel
                if not trace_path.is_file():
                    continue
                trace = GuidanceTrace.read(trace_path)
                for record in trace.records:
                    if not record.pair_ious:
                        continue
                    for pair, value in record.pair_ious.items():
                        writer.writerow(
                            [
                                story["story_id"],
                                scene["index"],
                                record.timestep_index,
                                pair,
                                f"{value:.10f}",
                            ]
                        )


def cmd_score(args: argparse.Namespace) -> int:
    scorer_factory = _SCORERS.get(args.scorer)
    if scorer_factory is None:
        print(
            f"error: unknown scorer {args.scorer!r} (available: {', '.join(sorted(_SCORERS))})",
            file=sys.stderr,
        )
        return EXIT_USAGE
    run_dir = Path(args.run)
    manifest_path = run_dir / "run_manifest.json"
    if not manifest_path.is_file():
        print(f"error: no run manifest at {manifest_path}", file=sys.stderr)
        return EXIT_USAGE

    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    label = args.label or manifest.get("method_label") or manifest.get("backend", "run")
    scorer = scorer_factory()
    report, problems = score_run(run_dir, scorer, method_label=label)

    out_dir = Path(args.out) if args.out else run_dir
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_obj = report.to_json_obj()
        json_obj["run_dir"] = str(run_dir)
        (out_dir / "report.json").write_text(
            json.dumps(json_obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        (out_dir / "report.txt").write_text(render_text_table([report]), encoding="utf-8")
        if args.iou_csv:
            _write_iou_csv(run_dir, out_dir / "diagnostics.csv")
    except OSError as err:
        print(f"error: cannot write report: {err}", file=sys.stderr)
        return EXIT_USAGE

    print(render_text_table([report]), end="")
    if problems:
        for line in problems:
            print(f"scoring problem: {line}", file=sys.stderr)
        return EXIT_FAILURE
    if not report.rows:
        print("error: no scoreable stories in run directory", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_PAGE_STYLE = """
body { font-family: sans-serif; margin: 2rem; color: #222; }
table { border-collapse: collapse; margin-bottom: 2rem; }
th, td { border: 1px solid #999; padding: 0.4rem 0.8rem; text-align: right; }
th:first-child, td:first-child { text-align: left; }
.grid { display: flex; flex-wrap: wrap; gap: 4px; margin-bottom: 1rem; }
.grid .cell { width: 128px; height: 128px; display: flex; align-items: center;
  justify-content: center; background: #eee; border: 1px solid #ccc;
  font-size: 0.7rem; overflow: hidden; text-align: center; }
.grid img { max-width: 128px; max-height: 128px; }
h2 { margin-top: 2rem; }
.warn { color: #a33; }
"""


def _metric_table_html(reports: list[MetricReport]) -> str:
    from .evaluation import METRIC_COLUMNS

    head = "".join(f"<th>{html.escape(c)}</th>" for c in ("Method", *METRIC_COLUMNS))
    body = []
    for report in reports:
        agg = report.aggregate
        cells = [f"<td>{html.escape(report.method_label)}</td>"]
        cells += [f"<td>{agg[c]:.4f}</td>" for c in METRIC_COLUMNS]
        body.append("<tr>" + "".join(cells) + "</tr>")
    return f"<table><tr>{head}</tr>{''.join(body)}</table>"


def _image_cell(path: Path) -> tuple[str, bool]:
    if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
        return f'<div class="cell"><img src="{html.escape(path.as_posix())}"></div>', False
    return f'<div class="cell">{html.escape(path.name)}</div>', True


def _story_grids_html(report_obj: dict, max_stories: int) -> tuple[str, int]:
    run_dir = report_obj.get("run_dir")
    if not run_dir:
        return "", 0
    manifest_path = Path(run_dir) / "run_manifest.json"
    if not manifest_path.is_file():
        return f'<p class="warn">run manifest missing: {html.escape(str(manifest_path))}</p>', 1
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    chunks = []
    placeholders = 0
    for story in manifest["stories"][:max_stories]:
        cells = []
        for scene in story["scenes"]:
            cell, is_placeholder = _image_cell(Path(run_dir) / scene["image"])
            placeholders += int(is_placeholder)
            cells.append(cell)
        chunks.append(
            f"<h3>{html.escape(story['story_id'])}</h3><div class=\"grid\">{''.join(cells)}</div>"
        )
    return "".join(chunks), placeholders


def cmd_report(args: argparse.Namespace) -> int:
    if not args.scores:
        print("error: no score files given", file=sys.stderr)
        return EXIT_USAGE
    reports = []
    report_objs = []
    for score_path in args.scores:
        try:
            obj = json.loads(Path(score_path).read_text(encoding="utf-8"))
            reports.append(MetricReport.from_json_obj(obj))
            report_objs.append(obj)
        except (OSError, ValueError, KeyError) as err:
            print(f"error: cannot parse score file {score_path}: {err}", file=sys.stderr)
            return EXIT_USAGE

    sections = [f"<h1>Attribute binding report</h1>{_metric_table_html(reports)}"]
    total_placeholders = 0
    for obj, report in zip(report_objs, reports):
        grids, placeholders = _story_grids_html(obj, args.max_stories)
        total_placeholders += placeholders
        sections.append(f"<h2>{html.escape(report.method_label)}</h2>{grids}")
    if total_placeholders:
        sections.append(
            f'<p class="warn">{total_placeholders} scene artifact(s) shown as placeholders '
            "(missing or not an image format)</p>"
        )
    page = (
        "<!doctype html><html><head><meta charset=\"utf-8\">"
        f"<title>storybind report</title><style>{_PAGE_STYLE}</style></head>"
        f"<body>{''.join(sections)}</body></html>"
    )
    try:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(page, encoding="utf-8")
    except OSError as err:
        print(f"error: cannot write report page: {err}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {out} ({total_placeholders} placeholder(s))")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storybind",
        description="Attribute-object binding guidance, benchmark toolchain, and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-benchmark", help="generate a validated story benchmark")
    p.add_argument("--quota", type=int, default=20, help="stories per style")
    p.add_argument("--styles", default="", help="comma-separated style subset (default: all)")
    p.add_argument("--client", default="stub", help="text generation client")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output benchmark directory")
    p.set_defaults(func=cmd_gen_benchmark)

    p = sub.add_parser("validate", help="validate a benchmark directory")
    p.add_argument("--benchmark", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run guided generation over a benchmark")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--backend", default="toy")
    p.add_argument("--config", default="", help="guidance config JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel scene workers")
    p.add_argument("--no-guidance", action="store_true", help="baseline run without updates")
    p.add_argument("--label", default="", help="method label stored in the run manifest")
    p.add_argument(
        "--dump-attention",
        action="store_true",
        help="export final aggregated per-word attention maps",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="score a run directory")
    p.add_argument("--run", required=True, help="run directory with run_manifest.json")
    p.add_argument("--scorer", default="stub")
    p.add_argument("--label", default="", help="method label override for the report")
    p.add_argument("--out", default="", help="report output directory (default: run dir)")
    p.add_argument("--iou-csv", action="store_true", help="emit per-pair IoU trajectory CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="merge score files into a static summary page")
    p.add_argument("scores", nargs="*", help="report.json files to merge")
    p.add_argument("--out", required=True, help="output HTML file")
    p.add_argument("--max-stories", type=int, default=8, help="image grids per method")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
