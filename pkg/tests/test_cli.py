import csv
import hashlib
import json

import numpy as np
import pytest

from craftfaces.cli import _atomic_write, main, parse
from craftfaces.lora import load_adapters
from craftfaces.pipeline import PipelineConfig


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestParse:
    def test_basic_command(self):
        cmd = parse(["ablate-order", "--faces", "100", "--seed", "7"])
        assert cmd.name == "ablate-order"
        assert cmd.args.faces == 100
        assert cmd.config.seed == 7

    def test_documented_defaults_accepted(self):
        cmd = parse(["diffuse", "--steps", "100", "--window", "25"])
        assert cmd.config.steps == 100
        assert cmd.config.composition_window == 25

    def test_window_exceeding_steps_rejected(self, capsys):
        code, _, err = run(["diffuse", "--window", "200", "--steps", "100"], capsys)
        assert code == 2
        assert "window" in err

    def test_unknown_command_or_flag(self, capsys):
        assert run(["frobnicate"], capsys)[0] == 2
        assert run(["render", "--no-such-flag"], capsys)[0] == 2

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"steps": 40, "style_intensity": 0.3, "seed": 5}))
        cmd = parse(["render", "--config", str(cfg_file), "--steps", "60"])
        assert cmd.config.steps == 60  # flag wins
        assert cmd.config.style_intensity == 0.3  # file value kept
        assert cmd.config.seed == 5

    def test_unreadable_config(self, tmp_path, capsys):
        bad = tmp_path / "broken.json"
        bad.write_text("{not json")
        code, _, err = run(["render", "--config", str(bad)], capsys)
        assert code == 2
        assert "config" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "extra.json"
        bad.write_text(json.dumps({"stepz": 10}))
        assert run(["render", "--config", str(bad)], capsys)[0] == 2

    def test_seed_env_fallback(self, monkeypatch):
        monkeypatch.setenv("CRAFT_SEED", "41")
        assert parse(["render"]).config.seed == 41
        monkeypatch.delenv("CRAFT_SEED")
        assert parse(["render"]).config.seed == 0

    def test_explicit_seed_beats_env(self, monkeypatch):
        monkeypatch.setenv("CRAFT_SEED", "41")
        assert parse(["render", "--seed", "3"]).config.seed == 3


class TestExecute:
    def test_render_writes_artifacts(self, tmp_path, capsys):
        code, out, _ = run(["render", "--face-id", "2", "--out-dir", str(tmp_path)], capsys)
        assert code == 0
        assert (tmp_path / "face_2.ppm").exists()
        attrs = list(csv.DictReader(open(tmp_path / "face_2_attrs.csv")))
        assert len(attrs) == 6

    def test_header_round_trips(self, tmp_path, capsys):
        code, out, _ = run(["stylize", "--out-dir", str(tmp_path), "--seed", "4"], capsys)
        assert code == 0
        header = next(line for line in out.splitlines() if line.startswith("# config "))
        parsed = PipelineConfig.from_dict(json.loads(header[len("# config "):]))
        assert parsed == parse(["stylize", "--seed", "4"]).config

    def test_ffc_identical_files(self, tmp_path, capsys):
        emb = tmp_path / "emb.csv"
        emb.write_text("0.25,0.5,0.8\n")
        code, out, _ = run(["ffc", str(emb), str(emb)], capsys)
        assert code == 0
        assert out.strip().splitlines()[-1] == "1.0"

    def test_diffuse_deterministic(self, tmp_path, capsys):
        args = [
            "diffuse", "--seed", "5", "--steps", "10", "--window", "3",
            "--image-size", "32", "--out-dir",
        ]
        digests = []
        for sub in ("a", "b"):
            out_dir = tmp_path / sub
            assert run(args + [str(out_dir)], capsys)[0] == 0
            digests.append(hashlib.sha256((out_dir / "face_0_diffused.ppm").read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_ablate_order_small(self, tmp_path, capsys):
        code, out, _ = run(
            [
                "ablate-order", "--faces", "3", "--intensities", "0.4,0.9",
                "--seed", "6", "--out-dir", str(tmp_path),
            ],
            capsys,
        )
        assert code == 0
        assert "win_rate=1.0" in out
        rows = list(csv.DictReader(open(tmp_path / "order_report.csv")))
        assert len(rows) == 3 * 2 * 2
        assert set(r["order"] for r in rows) == {"PS", "SP"}

    def test_attn_map_row_stochastic(self, tmp_path, capsys):
        code, _, _ = run(
            ["attn-map", "--with-identity", "--out-dir", str(tmp_path), "--seed", "2"],
            capsys,
        )
        assert code == 0
        rows = [[float(v) for v in line] for line in csv.reader(open(tmp_path / "attn_map_0.csv"))]
        m = np.array(rows)
        assert m.shape == (16, 16)
        assert np.max(np.abs(m.sum(axis=1) - 1.0)) <= 1e-12

    def test_train_lora_writes_loadable_adapters(self, tmp_path, capsys):
        code, _, _ = run(
            [
                "train", "--lora", "--faces", "2", "--train-steps", "2",
                "--seed", "7", "--out-dir", str(tmp_path),
            ],
            capsys,
        )
        assert code == 0
        adapters = load_adapters(tmp_path / "adapters.csv")
        assert set(adapters) == {"q", "k", "v"}
        assert adapters["q"].rank == 4


class TestAtomicWrite:
    def test_failed_write_leaves_nothing(self, tmp_path):
        target = tmp_path / "out.bin"

        def boom(path):
            with open(path, "w") as fh:
                fh.write("partial")
            raise OSError("disk on fire")

        with pytest.raises(OSError):
            _atomic_write(target, boom)
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []

    def test_success_replaces(self, tmp_path):
        target = tmp_path / "out.txt"
        _atomic_write(target, lambda p: open(p, "w").write("done"))
        assert target.read_text() == "done"
