import csv
import json

import numpy as np
import pytest
import torch

from defocuslab.cli import EXIT_CONFIG, EXIT_DATA, main
from defocuslab.deblur_generator import load_generator
from defocuslab.evaluation import make_report
from defocuslab.io import read_png

SPLIT = [2, 1, 1]
MAP_TOY = {"train-map": {"split_counts": SPLIT, "width": 8,
                         "estimator": {"total_epochs": 3, "warmup_epochs": 1, "alternation_period": 1, "lr": 1e-3}}}
GAN_TOY = {"train-gan": {"split_counts": SPLIT, "extractor": "random", "discriminator_width": 8, "anneal_iters": 4,
                         "generator": {"base_channels": 8},
                         "train": {"batch_size": 2, "epochs": 2, "steps_per_epoch": 2, "lr": 1e-3}}}


@pytest.fixture(autouse=True)
def _restore_torch():
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


def _json(tmp_path, name, payload):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return str(p)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    cfg = tmp_path_factory.getbasetemp() / "synth6.json"
    cfg.write_text(json.dumps({"n_scenes": 6, "size": [64, 64], "coc_range": [2, 6]}))
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def gan_ckpt(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("gan")
    cfg = out / "toy.json"
    cfg.write_text(json.dumps(GAN_TOY))
    assert main(["train-gan", "--config", str(cfg), "--data", str(dataset), "--deterministic", "--out", str(out / "run")]) == 0
    torch.use_deterministic_algorithms(False)
    return out / "run" / "generator.npz"


def test_synth_repeatable(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    ma = (tmp_path / "a/manifest.json").read_text()
    assert ma == (tmp_path / "b/manifest.json").read_text()
    scenes = json.loads(ma)["scenes"]
    assert len(scenes) == 4
    for s in scenes:
        assert set(s["files"]) == {"aif.png", "oof.png", "dp_l.png", "dp_r.png", "gt_map.pfm"}
        for f in s["files"]:
            assert (tmp_path / "a" / s["scene_id"] / f).read_bytes() == (tmp_path / "b" / s["scene_id"] / f).read_bytes()


def test_synth_range_error(tmp_path, capsys):
    cfg = _json(tmp_path, "c.json", {"scenes": [{"size": [32, 32], "depth_layout": "uniform", "coc": [3]},
                                                {"size": [32, 32], "depth_layout": "two_plane", "coc": [2, 30]}]})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "scene_0001" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = _json(tmp_path, "c.json", {"no_such_key": 1})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_default_headers(capsys):
    assert main(["train-map", "--print-config"]) == 0
    est = json.loads(capsys.readouterr().out)["estimator"]
    assert (est["lambda_reg"], est["lr"], est["total_epochs"]) == (1e-5, 2e-5, 30)
    assert main(["train-gan", "--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    t = cfg["train"]
    assert (t["lr"], t["batch_size"], t["loss"]["alpha"], t["loss"]["beta"], cfg["anneal_iters"]) == (2e-4, 4, 0.012, 0.002, 20000)


def test_train_map_toy(dataset, tmp_path, capsys):
    cfg = _json(tmp_path, "m.json", MAP_TOY)
    out = tmp_path / "map"
    assert main(["train-map", "--config", cfg, "--data", str(dataset), "--out", str(out)]) == 0
    assert "lambda=1e-05" in capsys.readouterr().out
    with open(out / "history.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    for name in ("estimator.npz", "bank.npz", "loss.png", "kernels.png", "config.json"):
        assert (out / name).is_file()
    assert list((out / "previews").glob("*_map.png"))
    assert json.loads((out / "config.json").read_text())["estimator"]["warmup_epochs"] == 1


def test_missing_dataset(tmp_path):
    assert main(["train-map", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["eval", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_train_gan_pure_l1(dataset, tmp_path):
    cfg = _json(tmp_path, "g.json", GAN_TOY)
    out = tmp_path / "g"
    assert main(["train-gan", "--config", cfg, "--data", str(dataset), "--no-gan", "--no-lp", "--out", str(out)]) == 0
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["L_p"]) == 0 and float(r["L_adv"]) == 0 for r in rows)
    assert not (out / "discriminator.npz").exists()


def test_checkpoint_reload_bitwise(gan_ckpt, tmp_path):
    from defocuslab.deblur_generator import save_generator

    g = load_generator(gan_ckpt)
    save_generator(g, tmp_path / "again.npz")
    assert (tmp_path / "again.npz").read_bytes() == gan_ckpt.read_bytes()
    h = load_generator(tmp_path / "again.npz")
    for (ka, a), (kb, b) in zip(g.state_dict().items(), h.state_dict().items()):
        assert ka == kb and torch.equal(a, b)


def test_infer_same_size_deterministic(gan_ckpt, dataset, tmp_path):
    src = dataset / "scene_0000" / "oof.png"
    cfg = _json(tmp_path, "i.json", {"tile": 32, "overlap": 16, "halo": 32})
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["infer", str(src), "--checkpoint", str(gan_ckpt), "--config", cfg, "--deterministic",
                     "--out", str(out)]) == 0
        runs.append((out / "oof.png").read_bytes())
    assert runs[0] == runs[1]
    assert read_png(tmp_path / "a" / "oof.png").shape == read_png(src).shape


def test_infer_missing_checkpoint(tmp_path, dataset):
    assert main(["infer", str(dataset / "scene_0000" / "oof.png"), "--checkpoint", str(tmp_path / "x.npz"),
                 "--out", str(tmp_path)]) == EXIT_DATA


def test_eval_identity_and_two_stage(dataset, tmp_path, capsys):
    cfg = _json(tmp_path, "e.json", {"eval": {"split_counts": SPLIT, "split": "all"}})
    assert main(["eval", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "id")]) == 0
    table = capsys.readouterr().out
    assert "25.560" in table and "0.786" in table and "0.039" in table and "0.111" in table

    scenes = sorted(p for p in dataset.iterdir() if p.is_dir())
    pairs = [(read_png(s / "oof.png"), read_png(s / "aif.png")) for s in scenes]
    expected = make_report(pairs, [s.name for s in scenes]).to_csv()
    assert (tmp_path / "id" / "metrics.csv").read_text() == expected

    assert main(["eval", "--config", cfg, "--data", str(dataset), "--two-stage", "--out", str(tmp_path / "ts")]) == 0

    def mean_psnr(d):
        with open(d / "metrics.csv") as fh:
            return float([r for r in csv.DictReader(fh) if r["scene_id"] == "mean"][0]["psnr_db"])

    assert mean_psnr(tmp_path / "ts") > mean_psnr(tmp_path / "id")


def test_eval_generator(gan_ckpt, dataset, tmp_path):
    cfg = _json(tmp_path, "e.json", {"eval": {"split_counts": SPLIT}})
    assert main(["eval", "--config", cfg, "--data", str(dataset), "--model", str(gan_ckpt), "--out", str(tmp_path)]) == 0
    assert "generator generator.npz" in (tmp_path / "metrics.txt").read_text()
