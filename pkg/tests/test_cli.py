import json
import os
from pathlib import Path

import numpy as np
import pytest

from flowcot.cli import main
from flowcot.dataio import load_dataset, read_ppm, write_ppm


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small end-to-end workspace shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"),
                 "--episodes", "24", "--seed", "0"]) == 0
    assert main(["build-codebook", "--data", str(root / "data"),
                 "--out", str(root / "codebook.bin")]) == 0
    return root


class TestGenData:
    def test_dataset_layout(self, workdir):
        data = workdir / "data"
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["counts"]["episodes"] == 24
        assert (data / "ep_0" / "frame_0.ppm").exists()
        assert (data / "ep_0" / "flow_0.f32").exists()
        assert (data / "ep_0" / "meta.json").exists()

    def test_regeneration_bit_identical(self, workdir, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "again"),
                     "--episodes", "24", "--seed", "0"]) == 0
        a = workdir / "data"
        b = tmp_path / "again"
        for rel in ["manifest.json", "ep_0/frame_0.ppm", "ep_0/meta.json",
                    "ep_3/flow_0.f32"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_load_roundtrip(self, workdir):
        cfg, episodes = load_dataset(workdir / "data")
        assert len(episodes) == 24
        assert episodes[0].frames[0].shape == (32, 32, 3)
        assert len(episodes[0].frames) == len(episodes[0].actions) + 1

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FLOWCOT_SEED", "77")
        assert main(["gen-data", "--out", str(tmp_path / "env"),
                     "--episodes", "2"]) == 0
        manifest = json.loads((tmp_path / "env" / "manifest.json")
                              .read_text())
        assert manifest["seeds"] == [77, 78]


class TestCodecCommands:
    def test_flow2img_img2flow_roundtrip(self, workdir, tmp_path):
        src = workdir / "data" / "ep_0" / "flow_0.f32"
        img = tmp_path / "flow.ppm"
        back = tmp_path / "back.f32"
        assert main(["flow2img", str(src), str(img)]) == 0
        assert main(["img2flow", str(img), str(back)]) == 0
        orig = np.fromfile(src, dtype="<f4")
        rec = np.fromfile(back, dtype="<f4")
        assert np.abs(orig - rec).max() <= 0.1


class TestTrainCommands:
    def test_train_rollout_policy_eval(self, workdir, tmp_path):
        wm = tmp_path / "wm"
        assert main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(wm), "--steps", "4", "--eval-every", "2",
                     "--window", "1", "--held-out", "4", "--batch", "2"]) == 0
        assert (wm / "model.fvc").exists()
        assert (wm / "metrics.csv").exists()
        resolved = json.loads((wm / "resolved.json").read_text())
        assert resolved["command"] == "train-wm"
        assert "manifest" in resolved["hashes"]

        roll = tmp_path / "roll"
        assert main(["rollout", "--ckpt", str(wm / "model.fvc"),
                     "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--episode", "0", "--horizon", "2",
                     "--out", str(roll)]) == 0
        assert (roll / "pred_frame_0.ppm").exists()
        assert (roll / "metrics.csv").exists()

        pol = tmp_path / "pol"
        assert main(["train-policy", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--init", str(wm / "model.fvc"), "--out", str(pol),
                     "--steps", "4", "--eval-every", "4", "--batch", "2",
                     "--policy-window", "2", "--held-out", "4",
                     "--eval-episodes", "2"]) == 0
        seeds = tmp_path / "seeds.txt"
        seeds.write_text("900000\n900001\n")
        report = tmp_path / "report.json"
        assert main(["eval-policy", "--ckpt", str(pol / "model.fvc"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--seeds", str(seeds), "--out", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert rep["n_episodes"] == 2

    def test_resolved_config_rerun_is_bit_identical(self, workdir, tmp_path):
        out1 = tmp_path / "r1"
        assert main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(out1), "--steps", "3", "--eval-every", "3",
                     "--window", "1", "--held-out", "4", "--batch", "2"]) == 0
        out2 = tmp_path / "r2"
        assert main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(out2),
                     "--config", str(out1 / "resolved.json")]) == 0
        assert (out1 / "metrics.csv").read_bytes() \
            == (out2 / "metrics.csv").read_bytes()
        assert (out1 / "model.fvc").read_bytes() \
            == (out2 / "model.fvc").read_bytes()

    def test_contamination_exit_code(self, workdir, tmp_path):
        pol = tmp_path / "pol5"
        assert main(["train-policy", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(pol), "--steps", "2", "--eval-every", "2",
                     "--batch", "2", "--policy-window", "1",
                     "--held-out", "4", "--eval-episodes", "1"]) == 0
        seeds = tmp_path / "bad_seeds.txt"
        seeds.write_text("0\n")  # training seed
        code = main(["eval-policy", "--ckpt", str(pol / "model.fvc"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--seeds", str(seeds),
                     "--out", str(tmp_path / "rep.json")])
        assert code == 5

    def test_config_error_exit_code(self, workdir, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"nonsense_section": {}}')
        code = main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(tmp_path / "x"), "--config", str(cfg)])
        assert code == 2

    def test_unknown_key_rejected(self, workdir, tmp_path):
        cfg = tmp_path / "bad2.json"
        cfg.write_text('{"train": {"not_a_key": 1}}')
        code = main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(tmp_path / "y"), "--config", str(cfg)])
        assert code == 2


class TestStudies:
    def test_ablate_structure(self, workdir, tmp_path):
        out = tmp_path / "ablate"
        assert main(["ablate", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(out), "--seeds", "0,1",
                     "--steps", "2", "--eval-every", "2", "--batch", "2",
                     "--window", "1", "--held-out", "4"]) == 0
        lines = (out / "comparison.csv").read_text().strip().split("\n")
        assert len(lines) == 5  # header + 4 layouts
        values = [float(ln.split(",")[1]) for ln in lines[1:]]
        assert values == sorted(values, reverse=True)
        for arm in ("interleaved", "no-flow-loss", "grouped", "frames-only"):
            for seed in (0, 1):
                run = out / f"{arm}_s{seed}"
                assert (run / "resolved.json").exists()
                resolved = json.loads((run / "resolved.json").read_text())
                assert resolved["train"]["seed"] == seed

    def test_efficiency_structure(self, workdir, tmp_path):
        out = tmp_path / "eff"
        assert main(["efficiency-study", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(out), "--seeds", "0",
                     "--steps", "2", "--finetune-steps", "2",
                     "--eval-every", "2", "--batch", "2", "--window", "1",
                     "--policy-window", "1", "--held-out", "4",
                     "--eval-episodes", "1"]) == 0
        runs = [p.name for p in out.iterdir() if p.is_dir()]
        assert sorted(runs) == sorted(
            ["pre_cot_s0", "pre_baseline_s0",
             "ft_cot_f1.0_s0", "ft_cot_f0.5_s0",
             "ft_baseline_f1.0_s0", "ft_baseline_f0.5_s0"])
        assert (out / "fig5.svg").exists()
        for arm in ("cot", "baseline"):
            for frac in ("1.0", "0.5"):
                assert (out / f"curve_{arm}_f{frac}.csv").exists()


class TestPlotCommand:
    def test_plot(self, workdir, tmp_path):
        wm = tmp_path / "wmp"
        assert main(["train-wm", "--data", str(workdir / "data"),
                     "--codebook", str(workdir / "codebook.bin"),
                     "--out", str(wm), "--steps", "2", "--eval-every", "1",
                     "--window", "1", "--held-out", "4", "--batch", "2"]) == 0
        fig = tmp_path / "fig.svg"
        assert main(["plot", str(wm / "metrics.csv"), "--out", str(fig)]) == 0
        assert fig.read_text().startswith("<svg")
