"""CLI: subcommands, config file merging, exit codes, artifact determinism."""
import numpy as np
import pytest

from ctxdiff import cli, taskgen
from ctxdiff.checkpoint import load_checkpoint
from ctxdiff.errors import NumericError
from ctxdiff.png import read_png, write_png


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data"
    rc = cli.main(["gen-data", "--out", str(path), "--count", "4",
                   "--seed", "3", "--tasks", "img2hed,hed2img", "--k", "2"])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = cli.main(["train", "--dataset", str(dataset_dir), "--out", str(out),
                   "--seed", "5", "--preset", "small", "--iterations", "2",
                   "--batch-size", "2", "--checkpoint-every", "10",
                   "--log-every", "10"])
    assert rc == 0
    return out / "model.ckpt"


@pytest.fixture(scope="module")
def query_png(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "query.png"
    rng_scene = taskgen.Scene(background="black",
                              shapes=(taskgen.Shape("circle", "red", 16, 16, 7),))
    write_png(path, taskgen.derive_edge_map(taskgen.render(rng_scene, 32)))
    return path


@pytest.fixture(scope="module")
def context_png(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "ctx.png"
    scene = taskgen.Scene(background="black",
                          shapes=(taskgen.Shape("square", "red", 20, 12, 6),))
    write_png(path, taskgen.render(scene, 32))
    return path


class TestGenData:
    def test_writes_dataset(self, dataset_dir):
        examples, manifest = taskgen.load_dataset(dataset_dir)
        assert len(examples) == 4
        assert manifest["k"] == 2

    def test_refuses_nonempty_dir(self, dataset_dir):
        rc = cli.main(["gen-data", "--out", str(dataset_dir), "--count", "1"])
        assert rc == 1

    def test_missing_required_flag(self):
        assert cli.main(["gen-data", "--count", "1"]) == 1

    def test_constraints_flow_through(self, tmp_path):
        out = tmp_path / "mono"
        rc = cli.main(["gen-data", "--out", str(out), "--count", "2",
                       "--tasks", "hed2img", "--colors", "blue",
                       "--styles", "plain", "--n-shapes", "1"])
        assert rc == 0
        examples, _ = taskgen.load_dataset(out)
        assert all("blue" in ex.caption for ex in examples)


class TestTrain:
    def test_seed_required(self, dataset_dir, tmp_path):
        rc = cli.main(["train", "--dataset", str(dataset_dir),
                       "--out", str(tmp_path / "x"), "--iterations", "1"])
        assert rc == 1

    def test_checkpoint_written(self, trained):
        assert trained.exists()
        assert load_checkpoint(trained).iteration == 2

    def test_config_file_supplies_options(self, dataset_dir, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(
            "# smoke config\n"
            f"dataset: {dataset_dir}\n"
            f"out = {tmp_path / 'run'}\n"
            "preset: small\n"
            "iterations: 1\n"
            "batch-size: 2\n"
            "seed: 9\n")
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert load_checkpoint(tmp_path / "run" / "model.ckpt").iteration == 1

    def test_flags_override_config(self, dataset_dir, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(f"dataset: {dataset_dir}\nout: {tmp_path / 'a'}\n"
                       "preset: small\niterations: 5\nbatch-size: 2\nseed: 9\n")
        rc = cli.main(["train", "--config", str(cfg), "--iterations", "1",
                       "--out", str(tmp_path / "b")])
        assert rc == 0
        assert load_checkpoint(tmp_path / "b" / "model.ckpt").iteration == 1

    def test_unknown_config_key_rejected(self, dataset_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning-rate-multiplier: 2\n")
        rc = cli.main(["train", "--config", str(cfg), "--dataset",
                       str(dataset_dir), "--out", str(tmp_path / "x"),
                       "--seed", "1"])
        assert rc == 1

    def test_malformed_config_line_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        assert cli.main(["train", "--config", str(cfg)]) == 2


class TestSample:
    def _argv(self, trained, query_png, out, **over):
        args = {"checkpoint": str(trained), "query": str(query_png),
                "steps": "2", "guidance-weight": "1.0", "seed": "4",
                "out": str(out)}
        args.update({k.replace("_", "-"): v for k, v in over.items()})
        argv = ["sample"]
        for key, value in args.items():
            argv += [f"--{key}", value]
        return argv

    def test_writes_png_and_sidecar(self, trained, query_png, context_png,
                                    tmp_path):
        out = tmp_path / "gen.png"
        rc = cli.main(self._argv(trained, query_png, out,
                                 contexts=str(context_png),
                                 prompt="a red square"))
        assert rc == 0
        img = read_png(out)
        assert img.shape == (3, 32, 32)
        meta = (tmp_path / "gen.png.meta.txt").read_text()
        assert "seed: 4" in meta and "regime: C+P" in meta
        assert f"context_0: {context_png}" in meta
        assert "prompt: a red square" in meta

    def test_identical_invocations_byte_identical(self, trained, query_png,
                                                  context_png, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        argv_a = self._argv(trained, query_png, a, contexts=str(context_png))
        argv_b = self._argv(trained, query_png, b, contexts=str(context_png))
        assert cli.main(argv_a) == 0 and cli.main(argv_b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_context_only_regime_rejects_prompt(self, trained, query_png,
                                                tmp_path):
        rc = cli.main(self._argv(trained, query_png, tmp_path / "x.png",
                                 regime="C", prompt="a red square"))
        assert rc == 1

    def test_prompt_only_regime_rejects_contexts(self, trained, query_png,
                                                 context_png, tmp_path):
        rc = cli.main(self._argv(trained, query_png, tmp_path / "x.png",
                                 regime="P", contexts=str(context_png)))
        assert rc == 1

    def test_missing_query_file(self, trained, tmp_path):
        rc = cli.main(self._argv(trained, tmp_path / "nope.png",
                                 tmp_path / "x.png"))
        assert rc == 2

    def test_corrupt_checkpoint_rejected(self, trained, query_png, tmp_path):
        bad = tmp_path / "bad.ckpt"
        data = bytearray(trained.read_bytes())
        data[len(data) // 2] ^= 0xFF
        bad.write_bytes(bytes(data))
        rc = cli.main(self._argv(bad, query_png, tmp_path / "x.png"))
        assert rc == 2


class TestEval:
    def test_prints_table_and_writes_records(self, trained, dataset_dir,
                                             tmp_path, capsys):
        records = tmp_path / "metrics.txt"
        rc = cli.main(["eval", "--checkpoint", str(trained),
                       "--dataset", str(dataset_dir), "--steps", "2",
                       "--guidance-weight", "1.0",
                       "--records", str(records)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "img2hed" in out and "hed2img" in out
        lines = records.read_text().strip().splitlines()
        assert any(l.startswith("task=img2hed") and "rmse=" in l for l in lines)
        assert any("palette_score=" in l for l in lines)

    def test_task_filter(self, trained, dataset_dir, capsys):
        rc = cli.main(["eval", "--checkpoint", str(trained),
                       "--dataset", str(dataset_dir), "--steps", "2",
                       "--tasks", "img2hed"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "img2hed" in out and "hed2img" not in out

    def test_missing_dataset(self, trained, tmp_path):
        rc = cli.main(["eval", "--checkpoint", str(trained),
                       "--dataset", str(tmp_path / "nope")])
        assert rc == 2


class TestInspect:
    def test_prints_summary(self, trained, capsys):
        rc = cli.main(["inspect-ckpt", "--checkpoint", str(trained)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "iteration: 2" in out
        assert "parameters:" in out
        assert "optimizer: adam" in out


class TestExitCodes:
    def test_no_command(self):
        assert cli.main([]) == 1

    def test_unknown_flag(self):
        assert cli.main(["gen-data", "--bogus", "1"]) == 1

    def test_numeric_failure_maps_to_three(self, monkeypatch):
        def boom(a):
            raise NumericError("exploded")

        parser = cli.build_parser()
        monkeypatch.setattr(cli, "build_parser", lambda: parser)
        for action in parser._subparsers._group_actions[0].choices.values():
            action.set_defaults(_run=boom)
        assert cli.main(["inspect-ckpt", "--checkpoint", "x"]) == 3
