"""CLI tests: verbs, exit codes, reproducibility, and file outputs."""

import json
from pathlib import Path

import pytest

from storybind.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from storybind.guidance import GuidanceConfig


@pytest.fixture()
def small_benchmark(tmp_path):
    bench = tmp_path / "bench"
    code = main(
        [
            "gen-benchmark",
            "--quota",
            "1",
            "--styles",
            "photo",
            "--seed",
            "11",
            "--out",
            str(bench),
        ]
    )
    assert code == EXIT_OK
    return bench


def read_bytes_tree(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestGenBenchmark:
    def test_quota_times_styles_files(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code = main(
            ["gen-benchmark", "--quota", "2", "--seed", "0", "--out", str(out)]
        )
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["stories"]) == 20
        assert len(list(out.glob("*.json"))) == 21  # 20 stories + manifest

    def test_zero_quota_empty_manifest(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["gen-benchmark", "--quota", "0", "--out", str(out)])
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["stories"] == []

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = main(
            ["gen-benchmark", "--quota", "1", "--out", str(blocker / "nested")]
        )
        assert code == EXIT_USAGE

    def test_unknown_style(self, tmp_path):
        code = main(
            ["gen-benchmark", "--quota", "1", "--styles", "fresco", "--out", str(tmp_path / "b")]
        )
        assert code == EXIT_USAGE


class TestValidate:
    def test_clean_benchmark(self, small_benchmark, capsys):
        assert main(["validate", "--benchmark", str(small_benchmark)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "0 violation(s)" in out

    def test_planted_violation_names_story_and_scene(self, small_benchmark, capsys):
        manifest = json.loads((small_benchmark / "manifest.json").read_text())
        story_file = small_benchmark / manifest["stories"][0]
        payload = json.loads(story_file.read_text())
        payload["scenes"][2]["positive_pairs"].append(["crimson", "zeppelin"])
        story_file.write_text(json.dumps(payload))
        code = main(["validate", "--benchmark", str(small_benchmark)])
        out = capsys.readouterr().out
        assert code == EXIT_FAILURE
        assert payload["id"] in out and "scene 2" in out and "zeppelin" in out

    def test_missing_manifest_is_io_error(self, tmp_path):
        assert main(["validate", "--benchmark", str(tmp_path / "nope")]) == EXIT_USAGE


class TestRun:
    def test_outputs_and_reproducibility(self, small_benchmark, tmp_path):
        run_a = tmp_path / "run_a"
        run_b = tmp_path / "run_b"
        for out in (run_a, run_b):
            code = main(
                [
                    "run",
                    "--benchmark",
                    str(small_benchmark),
                    "--backend",
                    "toy",
                    "--seed",
                    "7",
                    "--out",
                    str(out),
                ]
            )
            assert code == EXIT_OK
        latents = sorted(run_a.rglob("scene_*.npy"))
        traces = sorted(run_a.rglob("scene_*.trace.jsonl"))
        assert len(latents) == 5 and len(traces) == 5
        tree_a = read_bytes_tree(run_a)
        tree_b = read_bytes_tree(run_b)
        assert tree_a == tree_b

    def test_no_guidance_differs_only_in_update_fields(self, small_benchmark, tmp_path):
        guided_dir = tmp_path / "guided"
        baseline_dir = tmp_path / "baseline"
        for out, extra in ((guided_dir, []), (baseline_dir, ["--no-guidance"])):
            assert (
                main(
                    [
                        "run",
                        "--benchmark",
                        str(small_benchmark),
                        "--seed",
                        "7",
                        "--out",
                        str(out),
                        *extra,
                    ]
                )
                == EXIT_OK
            )
        for trace_rel in sorted(
            p.relative_to(guided_dir) for p in guided_dir.rglob("*.trace.jsonl")
        ):
            guided_lines = (guided_dir / trace_rel).read_text().splitlines()
            baseline_lines = (baseline_dir / trace_rel).read_text().splitlines()
            assert len(guided_lines) == len(baseline_lines)
            for g_line, b_line in zip(guided_lines, baseline_lines):
                g = json.loads(g_line)
                b = json.loads(b_line)
                assert g["timestep_index"] == b["timestep_index"]
                assert not b["applied"] and b["loss"] is None
                if not g["applied"]:
                    assert g == b

    def test_unknown_backend(self, small_benchmark, tmp_path):
        code = main(
            [
                "run",
                "--benchmark",
                str(small_benchmark),
                "--backend",
                "sdxl",
                "--out",
                str(tmp_path / "r"),
            ]
        )
        assert code == EXIT_USAGE

    def test_config_file_round_trip(self, small_benchmark, tmp_path):
        config = GuidanceConfig(total_steps=10, guided_fraction=0.3)
        config_path = tmp_path / "config.json"
        config.write_json_file(config_path)
        run_dir = tmp_path / "run"
        code = main(
            [
                "run",
                "--benchmark",
                str(small_benchmark),
                "--config",
                str(config_path),
                "--out",
                str(run_dir),
            ]
        )
        assert code == EXIT_OK
        manifest = json.loads((run_dir / "run_manifest.json").read_text())
        assert manifest["guidance"]["total_steps"] == 10
        trace = (run_dir / manifest["stories"][0]["scenes"][0]["trace"]).read_text()
        assert len(trace.splitlines()) == 10

    def test_dump_attention_writes_sidecars(self, small_benchmark, tmp_path):
        run_dir = tmp_path / "run"
        code = main(
            [
                "run",
                "--benchmark",
                str(small_benchmark),
                "--out",
                str(run_dir),
                "--dump-attention",
            ]
        )
        assert code == EXIT_OK
        grids = list(run_dir.rglob("attn/*.npy"))
        sidecars = list(run_dir.rglob("attn/*.json"))
        assert grids and len(grids) == len(sidecars)

    def test_jobs_parallel_matches_serial(self, small_benchmark, tmp_path):
        serial = tmp_path / "serial"
        parallel = tmp_path / "parallel"
        for out, jobs in ((serial, "1"), (parallel, "3")):
            assert (
                main(
                    [
                        "run",
                        "--benchmark",
                        str(small_benchmark),
                        "--seed",
                        "2",
                        "--jobs",
                        jobs,
                        "--out",
                        str(out),
                    ]
                )
                == EXIT_OK
            )
        assert read_bytes_tree(serial) == read_bytes_tree(parallel)


class TestScore:
    def make_run(self, small_benchmark, tmp_path, name="run", extra=()):
        run_dir = tmp_path / name
        assert (
            main(
                [
                    "run",
                    "--benchmark",
                    str(small_benchmark),
                    "--seed",
                    "3",
                    "--out",
                    str(run_dir),
                    *extra,
                ]
            )
            == EXIT_OK
        )
        return run_dir

    def test_score_writes_reports(self, small_benchmark, tmp_path, capsys):
        run_dir = self.make_run(small_benchmark, tmp_path)
        code = main(["score", "--run", str(run_dir), "--label", "toy + guidance"])
        assert code == EXIT_OK
        assert (run_dir / "report.json").is_file()
        assert (run_dir / "report.txt").is_file()
        text = (run_dir / "report.txt").read_text()
        for label in ("VQA-Score", "CLIP-T", "CLIP-I", "DreamSim"):
            assert label in text

    def test_iou_csv_diagnostics(self, small_benchmark, tmp_path):
        run_dir = self.make_run(small_benchmark, tmp_path)
        code = main(["score", "--run", str(run_dir), "--iou-csv"])
        assert code == EXIT_OK
        csv_text = (run_dir / "diagnostics.csv").read_text().splitlines()
        assert csv_text[0] == "story_id,scene_index,timestep,pair,iou"
        assert len(csv_text) > 1

    def test_empty_run_dir(self, tmp_path):
        assert main(["score", "--run", str(tmp_path / "empty")]) == EXIT_USAGE

    def test_missing_artifacts_partial_report(self, small_benchmark, tmp_path):
        run_dir = self.make_run(small_benchmark, tmp_path)
        victim = next(run_dir.rglob("scene_0.npy"))
        victim.unlink()
        code = main(["score", "--run", str(run_dir)])
        assert code == EXIT_FAILURE

    def test_unknown_scorer(self, small_benchmark, tmp_path):
        run_dir = self.make_run(small_benchmark, tmp_path)
        assert main(["score", "--run", str(run_dir), "--scorer", "clip"]) == EXIT_USAGE


class TestReport:
    def test_two_method_side_by_side(self, small_benchmark, tmp_path, capsys):
        guided = tmp_path / "guided"
        baseline = tmp_path / "baseline"
        for out, extra in ((guided, []), (baseline, ["--no-guidance"])):
            assert (
                main(
                    [
                        "run",
                        "--benchmark",
                        str(small_benchmark),
                        "--seed",
                        "3",
                        "--out",
                        str(out),
                        *extra,
                    ]
                )
                == EXIT_OK
            )
        assert main(["score", "--run", str(guided), "--label", "toy + guidance"]) == EXIT_OK
        assert main(["score", "--run", str(baseline), "--label", "toy baseline"]) == EXIT_OK
        page = tmp_path / "page.html"
        code = main(
            [
                "report",
                str(guided / "report.json"),
                str(baseline / "report.json"),
                "--out",
                str(page),
            ]
        )
        assert code == EXIT_OK
        html_text = page.read_text()
        assert "toy + guidance" in html_text and "toy baseline" in html_text
        for label in ("VQA-Score", "CLIP-T", "CLIP-I", "DreamSim"):
            assert label in html_text

    def test_placeholders_counted_for_non_images(self, small_benchmark, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert (
            main(["run", "--benchmark", str(small_benchmark), "--out", str(run_dir)])
            == EXIT_OK
        )
        assert main(["score", "--run", str(run_dir)]) == EXIT_OK
        page = tmp_path / "page.html"
        assert main(["report", str(run_dir / "report.json"), "--out", str(page)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "placeholder" in out
        assert "placeholder" in page.read_text() or "cell" in page.read_text()

    def test_empty_input_usage_error(self, tmp_path):
        assert main(["report", "--out", str(tmp_path / "page.html")]) == EXIT_USAGE

    def test_unparseable_score_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["report", str(bad), "--out", str(tmp_path / "p.html")]) == EXIT_USAGE


class TestParser:
    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == EXIT_USAGE

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as err:
            main(["validate"])
        assert err.value.code == EXIT_USAGE
