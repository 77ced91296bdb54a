"""CLI: subcommands, exit codes, output artifacts, precedence rules."""

import hashlib
import json
from pathlib import Path

import pytest

from hrnas.cli import main
from hrnas.descriptor import import_descriptor


def write_json(path: Path, doc: dict) -> str:
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


@pytest.fixture()
def config_files(tmp_path):
    supernet = {
        "parallel_modules": [
            [{"blocks": 1, "width": 4}],
            [{"blocks": 1, "width": 4}, {"blocks": 1, "width": 8}],
        ],
        "stem_channels": 4,
        "input_channels": 3,
        "expansion": 1,
        "transformer": {"tokens": 2, "proj_size": 2, "attn_dim": 4},
        "head": "dense",
    }
    search = {
        "lambda": 5e-5, "epsilon": 1e-3, "prune_every": 2, "epochs": 3,
        "lr": 0.05, "batch_size": 8, "recalibration_batches": 2, "seed": 11,
    }
    task = {
        "kind": "segmentation", "hw": 16, "classes": 3,
        "train_count": 16, "val_count": 8, "seed": 0,
    }
    cfg = write_json(tmp_path / "config.json", {"supernet": supernet, "search": search})
    task_file = write_json(tmp_path / "task.json", {"task": task})
    return cfg, task_file


def run_search(config_files, out_dir, extra=()):
    cfg, task = config_files
    return main(["search", "--config", cfg, "--task", task, "--out", str(out_dir), *extra])


def aggressive_config(config_files, tmp_path):
    """Variant that reliably prunes: strong L1 pull plus a raised threshold,
    so scales decayed from 1.0 cross epsilon within a few epochs."""
    cfg_path, task_path = config_files
    doc = json.loads(Path(cfg_path).read_text())
    doc["search"].update(
        {"lambda": 0.05, "lr": 0.01, "epochs": 6, "prune_every": 3, "epsilon": 0.5}
    )
    return write_json(tmp_path / "aggressive.json", doc), task_path


class TestSearchCommand:
    def test_outputs_and_manifest(self, config_files, tmp_path):
        out = tmp_path / "run"
        assert run_search(config_files, out) == 0
        for name in ("descriptor.hrnd", "search_log.csv", "flops.json", "flops.txt",
                     "curves.png", "manifest.json"):
            assert (out / name).exists(), name
            assert (out / name).stat().st_size > 0, name
        manifest = json.loads((out / "manifest.json").read_text())
        for name, digest in manifest["outputs"].items():
            actual = hashlib.sha256((out / name).read_bytes()).hexdigest()
            assert actual == digest, name

    def test_log_columns(self, config_files, tmp_path):
        out = tmp_path / "run"
        run_search(config_files, out)
        header = (out / "search_log.csv").read_text().splitlines()[0]
        assert header == "epoch,task_loss,penalty,total_flops,alive_units"

    def test_same_seed_identical_descriptors(self, config_files, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_search(config_files, out_a) == 0
        assert run_search(config_files, out_b) == 0
        da = (out_a / "descriptor.hrnd").read_bytes()
        db = (out_b / "descriptor.hrnd").read_bytes()
        assert hashlib.sha256(da).hexdigest() == hashlib.sha256(db).hexdigest()

    def test_lambda_flag_overrides_config(self, config_files, tmp_path):
        out = tmp_path / "run"
        assert run_search(config_files, out, extra=["--lambda", "9e-4"]) == 0
        desc = import_descriptor(out / "descriptor.hrnd")
        assert desc.header["config"]["search"]["lambda"] == 9e-4

    def test_seed_flag_overrides_config(self, config_files, tmp_path):
        out = tmp_path / "run"
        assert run_search(config_files, out, extra=["--seed", "42"]) == 0
        desc = import_descriptor(out / "descriptor.hrnd")
        assert desc.header["seed"] == 42

    def test_env_seed_is_lowest_precedence(self, config_files, tmp_path, monkeypatch):
        cfg_path, task_path = config_files
        doc = json.loads(Path(cfg_path).read_text())
        del doc["search"]["seed"]
        cfg_no_seed = write_json(tmp_path / "config2.json", doc)
        monkeypatch.setenv("HRNAS_SEED", "77")
        out = tmp_path / "run"
        assert main(["search", "--config", cfg_no_seed, "--task", task_path,
                     "--out", str(out)]) == 0
        assert import_descriptor(out / "descriptor.hrnd").header["seed"] == 77

    def test_missing_config_exits_2(self, config_files, tmp_path):
        _, task = config_files
        code = main(["search", "--config", str(tmp_path / "nope.json"),
                     "--task", task, "--out", str(tmp_path / "x")])
        assert code == 2

    def test_malformed_json_exits_2_with_location(self, config_files, tmp_path, capsys):
        _, task = config_files
        bad = tmp_path / "bad.json"
        bad.write_text("{\n  broken\n}")
        code = main(["search", "--config", str(bad), "--task", task,
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "bad.json:2" in capsys.readouterr().err

    def test_training_abort_exits_3(self, config_files, tmp_path, capsys):
        cfg_path, task_path = config_files
        doc = json.loads(Path(cfg_path).read_text())
        doc["search"]["lr"] = 1e30
        cfg_hot = write_json(tmp_path / "hot.json", doc)
        out = tmp_path / "run"
        import numpy as np

        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["search", "--config", cfg_hot, "--task", task_path, "--out", str(out)])
        assert code == 3
        assert (out / "abort_snapshot.json").exists()


class TestEvalCommand:
    def test_matches_recorded_final_metric_exactly(self, config_files, tmp_path, capsys):
        _, task = config_files
        out = tmp_path / "run"
        run_search(config_files, out)
        capsys.readouterr()
        code = main(["eval", "--descriptor", str(out / "descriptor.hrnd"), "--task", task])
        assert code == 0
        printed = dict(
            line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines()
        )
        recorded = import_descriptor(out / "descriptor.hrnd").header["final_metrics"]
        assert printed["kind"] == recorded["kind"]
        for key in ("miou", "pixel_accuracy"):
            assert float(printed[key]) == recorded[key]
            assert 0.0 <= float(printed[key]) <= 1.0

    def test_corrupted_descriptor_exits_4(self, config_files, tmp_path):
        _, task = config_files
        out = tmp_path / "run"
        run_search(config_files, out)
        raw = bytearray((out / "descriptor.hrnd").read_bytes())
        raw[-50] ^= 0x01
        broken = tmp_path / "broken.hrnd"
        broken.write_bytes(bytes(raw))
        assert main(["eval", "--descriptor", str(broken), "--task", task]) == 4


class TestFlopsCommand:
    def test_json_matches_table_total(self, config_files, tmp_path, capsys):
        cfg, task = config_files
        out = tmp_path / "flops"
        assert main(["flops", "--config", cfg, "--task", task, "--out", str(out)]) == 0
        doc = json.loads((out / "flops.json").read_text())
        table = (out / "flops.txt").read_text()
        last = [l for l in table.splitlines() if l.startswith("network total")][-1]
        assert int(last.split()[-1]) == doc["total"] == doc["oracle_total"]
        assert (out / "flops.png").stat().st_size > 0

    def test_supernet_exceeds_searched_descendant(self, config_files, tmp_path):
        cfg, task = config_files
        out = tmp_path / "run"
        assert run_search(aggressive_config(config_files, tmp_path), out) == 0
        fresh_dir, searched_dir = tmp_path / "fresh", tmp_path / "searched"
        assert main(["flops", "--config", cfg, "--task", task, "--out", str(fresh_dir)]) == 0
        assert main(["flops", "--descriptor", str(out / "descriptor.hrnd"),
                     "--out", str(searched_dir)]) == 0
        fresh = json.loads((fresh_dir / "flops.json").read_text())["total"]
        searched = json.loads((searched_dir / "flops.json").read_text())["total"]
        assert searched < fresh

    def test_tokenless_blocks_report_zero_transformer(self, config_files, tmp_path):
        cfg_path, task = config_files
        doc = json.loads(Path(cfg_path).read_text())
        doc["supernet"]["transformer"]["tokens"] = 0
        cfg0 = write_json(tmp_path / "cfg0.json", doc)
        out = tmp_path / "flops0"
        assert main(["flops", "--config", cfg0, "--task", task, "--out", str(out)]) == 0
        report = json.loads((out / "flops.json").read_text())
        assert all(b["transformer"] == 0 for b in report["blocks"])


class TestPlotdataCommand:
    def test_untouched_supernet_has_no_removed_units(self, config_files, tmp_path):
        cfg_path, task_path = config_files
        doc = json.loads(Path(cfg_path).read_text())
        doc["search"]["lambda"] = 1e-12  # keep everything alive
        doc["search"]["epochs"] = 2
        cfg = write_json(tmp_path / "cfg_keep.json", doc)
        out = tmp_path / "run"
        main(["search", "--config", cfg, "--task", task_path, "--out", str(out)])
        plot_dir = tmp_path / "plot"
        assert main(["plotdata", "--descriptor", str(out / "descriptor.hrnd"),
                     "--out", str(plot_dir)]) == 0
        data = json.loads((plot_dir / "plotdata.json").read_text())
        assert all(b["removed"] == 0 for b in data["blocks"])
        assert (plot_dir / "blocks.png").stat().st_size > 0

    def test_sector_sum_invariant(self, config_files, tmp_path):
        out = tmp_path / "run"
        assert run_search(aggressive_config(config_files, tmp_path), out) == 0
        plot_dir = tmp_path / "plot"
        main(["plotdata", "--descriptor", str(out / "descriptor.hrnd"), "--out", str(plot_dir)])
        data = json.loads((plot_dir / "plotdata.json").read_text())
        for blk in data["blocks"]:
            total = blk["conv3"] + blk["conv5"] + blk["conv7"] + blk["tokens"] + blk["removed"]
            assert total == blk["initial"]

    def test_fully_degenerate_block_reports_everything_removed(self, config_files, tmp_path):
        out = tmp_path / "run"
        assert run_search(aggressive_config(config_files, tmp_path), out) == 0
        plot_dir = tmp_path / "plot"
        main(["plotdata", "--descriptor", str(out / "descriptor.hrnd"), "--out", str(plot_dir)])
        data = json.loads((plot_dir / "plotdata.json").read_text())
        degenerate = [b for b in data["blocks"] if b["kind"] != "normal"]
        assert degenerate, "expected at least one fully pruned block at this penalty"
        for blk in degenerate:
            assert blk["removed"] == blk["initial"]
