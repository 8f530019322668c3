import json

import numpy as np
import pytest

from fang import cli, pipeline
from fang.calib import load_corpus
from fang.errors import SingularityError, StageError
from fang.model import Checkpoint, ModelConfig, init_model, perplexity

from test_pipeline import SMALL


@pytest.fixture(scope="module")
def pruned_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    (out / "cfg.json").write_text(json.dumps(SMALL))
    code = cli.main(["prune", "--config", str(out / "cfg.json"), "--out", str(out), "--sparsity", "0.25"])
    assert code == 0
    return out


def parse_table(text):
    lines = text.splitlines()
    header = [c.strip() for c in lines[0].split("|")]
    rows = []
    for line in lines[1:]:
        if not line.strip():
            break
        rows.append(dict(zip(header, (c.strip() for c in line.split("|")))))
    return header, rows


class TestPrune:
    def test_outputs(self, pruned_dir):
        report = pipeline.load_report(pruned_dir / "report.json")
        assert report["config"]["prune"]["sparsity"] == 0.25
        assert (pruned_dir / "pruned.fang").exists() and (pruned_dir / "groupings.json").exists()

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["prune", "--out", str(tmp_path), "--sparsity", "0.9"]) == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["prune", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_numerical_exit_code(self, tmp_path, monkeypatch, capsys):
        def fail(cfg, return_groupings=False):
            raise StageError("prune_ffn", 2, SingularityError("layer 2 W_down: matrix is singular"))

        monkeypatch.setattr(pipeline, "run_prune", fail)
        (tmp_path / "c.json").write_text(json.dumps(SMALL))
        assert cli.main(["prune", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERICAL
        err = capsys.readouterr().err
        assert "prune_ffn" in err and "layer 2" in err
        assert not (tmp_path / "o").exists()

    def test_no_shared_flag(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps(SMALL))
        argv = ["prune", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path), "--no-shared-group", "--k-groups", "4"]
        assert cli.main(argv) == 0
        report = pipeline.load_report(tmp_path / "report.json")
        assert report["config"]["prune"]["shared_group"] is False
        assert report["layers"][0]["grouping"]["shared_size"] == 0


class TestEval:
    def test_matches_in_process(self, pruned_dir, capsys):
        assert cli.main(["eval", "--ckpt", str(pruned_dir / "pruned.fang"), "--max-tokens", "600"]) == 0
        out = capsys.readouterr().out
        value = float(out.split("\n")[0].split()[1])
        ckpt = Checkpoint.load(pruned_dir / "pruned.fang")
        assert value == perplexity(ckpt, load_corpus(pipeline.calib.EVAL_CORPUS)[:600], 128)
        assert "tokens 600" in out

    def test_deterministic(self, pruned_dir, capsys):
        argv = ["eval", "--ckpt", str(pruned_dir / "pruned.fang"), "--max-tokens", "300"]
        cli.main(argv)
        first = capsys.readouterr().out
        cli.main(argv)
        assert capsys.readouterr().out == first

    def test_uniform_logits(self, tmp_path, capsys):
        ckpt = init_model(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_head=8, n_ffn=16))
        ckpt = ckpt.replace({"lm_head": np.zeros_like(ckpt["lm_head"])})
        ckpt.save(tmp_path / "u.fang")
        cli.main(["eval", "--ckpt", str(tmp_path / "u.fang"), "--max-tokens", "200"])
        value = float(capsys.readouterr().out.split()[1])
        assert value == pytest.approx(259.0, rel=1e-12)

    def test_corrupt_archive(self, tmp_path, capsys):
        (tmp_path / "bad.fang").write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{bad}")
        assert cli.main(["eval", "--ckpt", str(tmp_path / "bad.fang")]) == cli.EXIT_ERROR
        assert "format error" in capsys.readouterr().err


class TestReport:
    def test_round_trip(self, pruned_dir, capsys):
        assert cli.main(["report", "--in", str(pruned_dir / "report.json"), "--no-figures"]) == 0
        header, rows = parse_table(capsys.readouterr().out)
        report = pipeline.load_report(pruned_dir / "report.json")
        assert header == [c[0] for c in cli.TABLE_COLUMNS]
        assert len(rows) == len(report["layers"])
        for row, entry in zip(rows, report["layers"]):
            for name, key, fmt in cli.TABLE_COLUMNS:
                assert row[name] == format(entry[key], fmt)
                if fmt != "d":
                    assert float(row[name]) == pytest.approx(entry[key], rel=1e-5, abs=1e-300)

    def test_config_delta_listed(self, pruned_dir, capsys):
        cli.main(["report", "--in", str(pruned_dir / "report.json"), "--no-figures"])
        out = capsys.readouterr().out
        assert "prune.sparsity = 0.25" in out and "prune.k_groups = 3" in out

    def test_empty_layers_header_only(self, tmp_path):
        report = {"schema": "fang-report", "version": 1, "config": pipeline.resolve_config(), "summary": {}, "layers": []}
        assert cli.render_table(report) == " | ".join(c[0] for c in cli.TABLE_COLUMNS)

    def test_four_layers_four_rows(self):
        entry = {"layer": 0, "sp_target": 0.3, "realized_sparsity": 0.3, "fc": 0.1, "heads_pruned": 1,
                 "neurons_pruned": 57, "ffn_error_before": 2.0, "ffn_error_after": 1.0}
        layers = [dict(entry, layer=i) for i in range(4)]
        report = {"config": pipeline.resolve_config(), "summary": {}, "layers": layers}
        assert len(cli.render_table(report).splitlines()) == 5

    def test_figures(self, pruned_dir, capsys):
        assert cli.main(["report", "--in", str(pruned_dir / "report.json")]) == 0
        out = capsys.readouterr().out
        for name in ("sparsity.png", "errors.png", "groups.png"):
            path = pruned_dir / name
            assert path.exists() and path.read_bytes()[:4] == b"\x89PNG"
            assert f"figure: {path}" in out

    def test_bad_schema(self, tmp_path, capsys):
        (tmp_path / "r.json").write_text(json.dumps({"schema": "fang-report", "version": 0}))
        assert cli.main(["report", "--in", str(tmp_path / "r.json")]) == cli.EXIT_ERROR
        assert "version" in capsys.readouterr().err
