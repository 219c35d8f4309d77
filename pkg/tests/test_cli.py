import csv
import json

import numpy as np
import pytest

from asrgan.checkpoint import load_checkpoint
from asrgan.cli import bench_fsa, main
from asrgan.imaging import load_image, make_synthetic_dataset, save_image, synthetic_image, upscale

TINY = """\
steps = 10
batch_size = 2
crop_size = 6
residual_blocks = 1
base_features = 8
d_base_features = 4
d_dense_features = 8
learning_rate = 0.001
threaded_workers = false
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = make_synthetic_dataset(root / "data", 2, 32, seed=0)
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["-q", "train", "--config", str(cfg), "--data", str(manifest), "--out", str(root / "run")]) == 0
    return root, manifest, cfg


def test_train_writes_artifacts(trained):
    root, _, _ = trained
    run = root / "run"
    ckpt = load_checkpoint(run / "final.asrg")
    assert ckpt.global_step == 10 and ckpt.phase == "resnet"
    assert len((run / "train.log").read_text().splitlines()) == 10
    assert "steps = 10" in (run / "config.txt").read_text()
    info = json.loads((run / "run.json").read_text())
    assert info["global_step"] == 10 and info["checkpoint"] == "final.asrg"


def test_train_is_deterministic(trained):
    root, manifest, cfg = trained
    assert main(["-q", "train", "--config", str(cfg), "--data", str(manifest), "--out", str(root / "run2")]) == 0
    assert (root / "run" / "final.asrg").read_bytes() == (root / "run2" / "final.asrg").read_bytes()


def test_gan_phase_from_pretrained(trained):
    root, manifest, cfg = trained
    rc = main(["-q", "train", "--phase", "gan", "--steps", "2", "--config", str(cfg), "--data", str(manifest),
               "--init", str(root / "run" / "final.asrg"), "--out", str(root / "gan")])
    assert rc == 0
    ckpt = load_checkpoint(root / "gan" / "final.asrg")
    assert ckpt.phase == "gan" and ckpt.global_step == 12
    assert list(ckpt.state["counters"]) == [2.0, 2.0]


def test_exit_codes(trained, tmp_path, capsys):
    root, manifest, cfg = trained
    assert main(["train", "--phase", "gan", "--config", str(cfg), "--data", str(manifest),
                 "--out", str(tmp_path / "x")]) == 2
    assert "--init" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size = 3\nworkers = 2\n")
    assert main(["train", "--config", str(bad), "--data", str(manifest), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "none.tsv"),
                 "--out", str(tmp_path / "x")]) == 3
    big = tmp_path / "big.cfg"
    big.write_text(TINY.replace("crop_size = 6", "crop_size = 64"))
    assert main(["train", "--config", str(big), "--data", str(manifest), "--out", str(tmp_path / "x")]) == 3
    boom = tmp_path / "boom.cfg"
    boom.write_text(TINY.replace("learning_rate = 0.001", "learning_rate = 1e300"))
    assert main(["-q", "train", "--config", str(boom), "--data", str(manifest), "--out", str(tmp_path / "nan")]) == 4
    assert (tmp_path / "nan" / "last_good.asrg").exists()


def test_sr_shape_and_repeatability(trained, tmp_path):
    root, _, _ = trained
    lr = synthetic_image("rooms", 32, 32, seed=9)
    save_image(lr, tmp_path / "in.png")
    model = str(root / "run" / "final.asrg")
    assert main(["-q", "sr", "--model", model, "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "a.png")]) == 0
    assert main(["-q", "sr", "--model", model, "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "b.png")]) == 0
    out = load_image(tmp_path / "a.png")
    assert (out.height, out.width) == (128, 128)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_sr_pool_size_only_matters_with_nonzero_gamma(trained, tmp_path):
    root, _, _ = trained
    from asrgan.checkpoint import dumps, loads
    ckpt = load_checkpoint(root / "run" / "final.asrg")
    lr = synthetic_image("checker", 16, 16, seed=2)
    save_image(lr, tmp_path / "in.png")

    def run(ckpt_obj, p, name):
        path = tmp_path / f"{name}.asrg"
        path.write_bytes(dumps(ckpt_obj))
        assert main(["-q", "sr", "--model", str(path), "--in", str(tmp_path / "in.png"),
                     "--out", str(tmp_path / f"{name}{p}.png"), "--pool-size", str(p)]) == 0
        return load_image(tmp_path / f"{name}{p}.png")

    zero = loads(dumps(ckpt))
    zero.model["G/attention.gamma"] = np.array(0.0)
    assert run(zero, 1, "zero") == run(zero, 8, "zero")
    strong = loads(dumps(ckpt))
    strong.model["G/attention.gamma"] = np.array(5.0)
    assert run(strong, 1, "strong") != run(strong, 8, "strong")


def test_sr_oom_guard_and_attention_dump(trained, tmp_path, capsys):
    root, _, _ = trained
    save_image(synthetic_image("rooms", 24, 24), tmp_path / "in.png")
    model = str(root / "run" / "final.asrg")
    rc = main(["-q", "sr", "--model", model, "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png"),
               "--max-map-elements", "10000"])
    assert rc == 2 and "--pool-size 3" in capsys.readouterr().err
    rc = main(["-q", "sr", "--model", model, "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png"),
               "--pool-size", "2", "--dump-attention", str(tmp_path / "map.png")])
    assert rc == 0
    from PIL import Image as PILImage
    with PILImage.open(tmp_path / "map.png") as im:
        assert im.size == (144, 144) and im.mode == "L"


def test_eval_report(trained, tmp_path):
    root, manifest, _ = trained
    model = str(root / "run" / "final.asrg")
    assert main(["-q", "eval", "--model", model, "--manifest", str(manifest), "--out", str(tmp_path / "r.tsv")]) == 0
    first = (tmp_path / "r.tsv").read_bytes()
    assert main(["-q", "eval", "--model", model, "--manifest", str(manifest), "--out", str(tmp_path / "r.tsv"),
                 "--workers", "2"]) == 0
    assert (tmp_path / "r.tsv").read_bytes() == first
    rows = list(csv.reader(open(tmp_path / "r.tsv"), delimiter="\t"))
    assert rows[0][:3] == ["image", "psnr", "ssim"]
    assert len(rows) == 1 + 2 + 2 and rows[-2][0] == "baseline" and rows[-1][0] == "mean"
    summary = dict(line.split("=", 1) for line in (tmp_path / "r.summary.txt").read_text().splitlines())
    assert summary["images"] == "2" and summary["psnr_target"] == "25.000000"
    assert summary["meets_ssim_target"] in ("true", "false")


def test_eval_identical_pairs(tmp_path):
    lines = []
    for i in range(2):
        lr = synthetic_image("gradient", 12, 12, seed=i)
        save_image(lr, tmp_path / f"l{i}.png")
        save_image(upscale(lr), tmp_path / f"h{i}.png")
        lines.append(f"h{i}.png\tl{i}.png")
    lines.append("missing.png")
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    assert main(["-q", "eval", "--model", "bicubic", "--manifest", str(tmp_path / "m.tsv"),
                 "--out", str(tmp_path / "r.tsv")]) == 0
    rows = list(csv.reader(open(tmp_path / "r.tsv"), delimiter="\t"))
    assert rows[1][2] == rows[2][2] == "1.000000" and rows[1][1] == "inf"
    assert rows[3][5].startswith("FileNotFoundError")
    summary = (tmp_path / "r.summary.txt").read_text()
    assert "failed=1" in summary and "infinite_psnr=2" in summary


def test_bench_fsa_rows():
    rows = bench_fsa([16, 32], [1, 2, 4, 8], cap=100_000)
    by = {(r["size"], r["pool"]): r for r in rows}
    assert by[(16, 4)]["map_elements"] == 256 and by[(16, 4)]["map_side"] == 16
    assert by[(32, 1)]["status"] == "skipped(oom-guard)"
    for size in (16, 32):
        sides = [by[(size, p)]["map_side"] for p in (1, 2, 4, 8)]
        assert all(a == 4 * b for a, b in zip(sides, sides[1:]))
        peaks = [by[(size, p)]["measured_peak"] for p in (1, 2, 4, 8) if by[(size, p)]["status"] == "ok"]
        assert all(b <= a for a, b in zip(peaks, peaks[1:]))
        assert all(by[(size, p)]["measured_peak"] == by[(size, p)]["map_elements"]
                   for p in (1, 2, 4, 8) if by[(size, p)]["status"] == "ok")


def test_bench_fsa_cli(tmp_path):
    assert main(["-q", "bench-fsa", "--sizes", "8,16", "--pools", "1,2", "--out", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 4 and rows[0]["map_elements"] == "4096"


def test_fixtures_and_summary(tmp_path, capsys):
    assert main(["-q", "fixtures", "--out", str(tmp_path / "fx"), "--count", "2", "--size", "16"]) == 0
    assert (tmp_path / "fx" / "manifest.tsv").exists()
    assert main(["-q", "summary"]) == 0
    assert "total" in capsys.readouterr().out
