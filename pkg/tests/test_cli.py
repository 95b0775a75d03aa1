import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import tifffile

from s2m.cli import main
from s2m.denoiser import DenoiserConfig, init_denoiser, load_checkpoint
from s2m.io import write_mask

TINY = ["--patch", "16", "16", "--depth", "1", "--base-channels", "4", "--time-embed-dim", "8",
        "--corpus-size", "8"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("S2M_CACHE", str(out / "cache"))
        assert main(["train", "--toy-corpus", "--steps", "2", "--out", str(out), *TINY]) == 0
    return out / "denoiser.ckpt"


# -- simulate -------------------------------------------------------------------------


def test_simulate_writes_pairs_and_is_reproducible(tmp_path):
    args = ["simulate", "--style", "nuclei", "--count", "5", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert sorted(k for k in a if k.startswith("masks/")) == [f"masks/{i:04d}.tif" for i in range(5)]
    assert len([k for k in a if k.startswith("sketches/")]) == 5
    side = json.loads(a["sidecars/0000.json"])
    assert side["style"] == "nuclei" and "instances" in side["mask_meta"]
    mask = tifffile.imread(tmp_path / "a/masks/0000.tif")
    assert mask.dtype == np.uint16 and mask.shape == (64, 64)


def test_simulate_membrane_partitions_field(tmp_path):
    assert main(["simulate", "--style", "membrane", "--shape", "128", "128", "--count", "2",
                 "--out", str(tmp_path)]) == 0
    for i in range(2):
        labels = tifffile.imread(tmp_path / f"masks/{i:04d}.tif")
        side = json.loads((tmp_path / f"sidecars/{i:04d}.json").read_text())
        centers = np.asarray(side["mask_meta"]["centers"])
        yy, xx = np.mgrid[0:128, 0:128]
        d2 = np.stack([(yy - c[0]) ** 2 + (xx - c[1]) ** 2 for c in centers])
        np.testing.assert_array_equal(labels, np.argmin(d2, axis=0) + 1)


def test_simulate_creates_missing_output(tmp_path):
    out = tmp_path / "deep" / "er"
    assert main(["simulate", "--count", "1", "--out", str(out)]) == 0
    assert (out / "masks" / "0000.tif").exists()


def test_simulate_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--count", "1", "--out", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err


def test_simulate_invalid_values(tmp_path, capsys):
    assert main(["simulate", "--count", "0", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--radius", "5", "1", "--out", str(tmp_path)]) == 2
    assert not any(tmp_path.iterdir())


def test_global_flags_after_subcommand(tmp_path):
    assert main(["--seed", "7", "simulate", "--count", "2", "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--count", "2", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_toml_config_with_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'seed = 7\nout = "{tmp_path / "from_toml"}"\n[simulate]\ncount = 3\nstyle = "membrane"\n')
    assert main(["--config", str(cfg), "simulate"]) == 0
    assert len(list((tmp_path / "from_toml/masks").iterdir())) == 3
    assert main(["--config", str(cfg), "simulate", "--count", "1", "--out", str(tmp_path / "flag")]) == 0
    assert len(list((tmp_path / "flag/masks").iterdir())) == 1
    side = json.loads((tmp_path / "flag/sidecars/0000.json").read_text())
    assert side["style"] == "membrane"


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("count = [")
    assert main(["--config", str(cfg), "simulate"]) == 2


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "s2m.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "train", "generate", "sweep", "evaluate"):
        assert cmd in res.stdout


# -- train -----------------------------------------------------------------------------------


def test_train_zero_steps_equals_initialization(tmp_path):
    assert main(["train", "--toy-corpus", "--steps", "0", "--seed", "3", "--out", str(tmp_path), *TINY]) == 0
    den = load_checkpoint(tmp_path / "denoiser.ckpt")
    cfg = DenoiserConfig(base_channels=4, depth=1, time_embed_dim=8, patch_shape=(16, 16))
    assert den.config == cfg
    assert den.checkpoint_id == init_denoiser(cfg, seed=3).checkpoint_id
    assert den.state.loss_history == []


def test_train_toy_defaults_are_pinned(tmp_path):
    # no architecture flags: the pinned toy configuration applies
    assert main(["train", "--toy-corpus", "--steps", "0", "--corpus-size", "2", "--out", str(tmp_path)]) == 0
    from s2m.corpus import TOY_TRAINING

    assert load_checkpoint(tmp_path / "denoiser.ckpt").config == DenoiserConfig(**TOY_TRAINING["config"])


def test_train_resume_appends_history(tmp_path, tiny_ckpt):
    out = tmp_path / "more"
    assert main(["train", "--toy-corpus", "--steps", "3", "--resume", str(tiny_ckpt), "--out", str(out),
                 "--corpus-size", "8"]) == 0
    den = load_checkpoint(out / "denoiser.ckpt")
    assert [s for s, _ in den.state.loss_history] == [1, 2, 3, 4, 5]
    assert den.state.loss_history[:2] == load_checkpoint(tiny_ckpt).state.loss_history
    rows = list(csv.reader((out / "loss.csv").read_text().splitlines()))
    assert rows[0] == ["step", "loss"] and len(rows) == 6
    assert (out / "loss.png").read_bytes()[:4] == b"\x89PNG"


def test_train_from_image_directory_skips_corrupt(tmp_path, caplog):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    r = np.random.default_rng(0)
    tifffile.imwrite(imgs / "a.tif", r.uniform(0, 1, (20, 20)).astype(np.float32))
    (imgs / "b.tif").write_bytes(b"garbage")
    assert main(["train", "--images", str(imgs), "--steps", "1", "--out", str(tmp_path / "o"), "--batch-size", "2",
                 *TINY[:-2]]) == 0
    assert "b.tif" in caplog.text


def test_train_all_corrupt_input_aborts(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    (imgs / "b.tif").write_bytes(b"garbage")
    assert main(["train", "--images", str(imgs), "--steps", "1", "--out", str(tmp_path / "o"), *TINY[:-2]]) == 2
    assert not (tmp_path / "o").exists()


def test_train_requires_data_source(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--toy-corpus", "--patch", "60", "60", "--out", str(tmp_path)]) == 2


# -- generate ---------------------------------------------------------------------------------


def test_generate_default_count(tmp_path, tiny_ckpt):
    out = tmp_path / "ds"
    assert main(["generate", "--checkpoint", str(tiny_ckpt), "--shape", "16", "16", "--t-start", "2",
                 "--batch-size", "100", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_samples"] == 200 and len(manifest["entries"]) == 200
    assert manifest["entries"][0]["generation_config"]["sigma"] == 1.0


def test_generate_twice_is_byte_identical(tmp_path, tiny_ckpt):
    for name in ("a", "b"):
        assert main(["generate", "--checkpoint", str(tiny_ckpt), "--n", "1", "--seed", "3", "--shape", "16", "16",
                     "--t-start", "20", "--out", str(tmp_path / name)]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    ma, mb = json.loads(a.pop("manifest.json")), json.loads(b.pop("manifest.json"))
    ma.pop("created"), mb.pop("created")
    assert a == b and ma == mb


def test_generate_t_start_beyond_schedule(tmp_path, tiny_ckpt, capsys):
    out = tmp_path / "ds"
    assert main(["generate", "--checkpoint", str(tiny_ckpt), "--t-start", "1001", "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "1001" in err and "T=1000" in err
    assert not out.exists()


def test_generate_missing_checkpoint(tmp_path):
    assert main(["generate", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2


def test_generate_from_mask_directory(tmp_path, tiny_ckpt):
    mdir = tmp_path / "m"
    labels = np.zeros((16, 16), dtype=np.uint16)
    labels[4:9, 4:9] = 1
    write_mask(mdir / "x.tif", labels)
    assert main(["generate", "--checkpoint", str(tiny_ckpt), "--n", "1", "--masks", str(mdir), "--t-start", "5",
                 "--out", str(tmp_path / "ds")]) == 0
    np.testing.assert_array_equal(tifffile.imread(tmp_path / "ds/masks/0000.tif"), labels)


# -- sweep -----------------------------------------------------------------------------------------


def test_sweep_grid_outputs(tmp_path, tiny_ckpt):
    args = ["sweep", "--checkpoint", str(tiny_ckpt), "--t-start", "100", "400", "1000", "--sigma", "0", "1", "2",
            "--seeds", "0", "--n-refs", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader((tmp_path / "a/sweep.csv").read_text().splitlines()))
    assert len(rows) == 9
    assert [(r["t_start"], r["sigma"]) for r in rows if r["recommended"] == "True"] == [("400", "1.0")]
    for png in ("sweep_heatmaps.png", "sweep_lines.png"):
        assert (tmp_path / "a" / png).read_bytes()[:4] == b"\x89PNG"
    meta = json.loads((tmp_path / "a/sweep.json").read_text())
    assert meta["metadata"]["recommended"] == {"t_start": 400, "sigma": 1.0}
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/sweep.csv").read_bytes() == (tmp_path / "b/sweep.csv").read_bytes()


def test_sweep_rejects_out_of_range_grid(tmp_path, tiny_ckpt):
    assert main(["sweep", "--checkpoint", str(tiny_ckpt), "--t-start", "0", "--out", str(tmp_path)]) == 2


# -- evaluate -----------------------------------------------------------------------------------------


def test_evaluate_identical_masks(tmp_path):
    r = np.random.default_rng(0)
    for d in ("pred", "truth"):
        for i in range(2):
            write_mask(tmp_path / d / f"{i}.tif", (r.integers(0, 4, (12, 12)) if d == "pred" else
                                                   tifffile.imread(tmp_path / "pred" / f"{i}.tif")))
    assert main(["evaluate", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader((tmp_path / "ev/iou.csv").read_text().splitlines()))
    assert len(rows) == 2 and all(float(row["mean_iou"]) == 1.0 for row in rows)
    inst = list(csv.DictReader((tmp_path / "ev/iou_instances.csv").read_text().splitlines()))
    assert inst and all(float(row["iou"]) == 1.0 for row in inst)


def _scores(path, values):
    path.write_text("score\n" + "\n".join(str(v) for v in values) + "\n")
    return str(path)


def test_evaluate_identical_score_lists(tmp_path, capsys):
    a = _scores(tmp_path / "a.csv", [0.5, 0.7, 0.9])
    b = _scores(tmp_path / "b.csv", [0.5, 0.7, 0.9])
    assert main(["evaluate", "--scores-a", a, "--scores-b", b, "--out", str(tmp_path / "ev")]) == 0
    assert json.loads(capsys.readouterr().out)["p_two_sided"] == 1.0


def test_evaluate_separated_scores(tmp_path, capsys):
    a = _scores(tmp_path / "a.csv", [1, 2, 3])
    b = _scores(tmp_path / "b.csv", [4, 5, 6])
    assert main(["evaluate", "--scores-a", a, "--scores-b", b, "--out", str(tmp_path / "ev")]) == 0
    res = json.loads((tmp_path / "ev/ranksum.json").read_text())
    assert res["p_two_sided"] == pytest.approx(0.1, abs=1e-15) and res["method"] == "exact"
    capsys.readouterr()


def test_evaluate_needs_inputs(tmp_path):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--pred", str(tmp_path), "--out", str(tmp_path)]) == 2


def test_round_trip_simulate_generate_evaluate(tmp_path, tiny_ckpt):
    assert main(["simulate", "--count", "2", "--shape", "16", "16", "--out", str(tmp_path / "sim")]) == 0
    assert main(["generate", "--checkpoint", str(tiny_ckpt), "--n", "2", "--masks", str(tmp_path / "sim/masks"),
                 "--t-start", "10", "--out", str(tmp_path / "ds")]) == 0
    assert main(["evaluate", "--pred", str(tmp_path / "ds/masks"), "--truth", str(tmp_path / "sim/masks"),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader((tmp_path / "ev/iou.csv").read_text().splitlines()))
    assert [float(r["mean_iou"]) for r in rows] == [1.0, 1.0]
