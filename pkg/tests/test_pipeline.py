import json
import math

import numpy as np
import pytest
import tifffile

from s2m.denoiser import DenoiserConfig, init_denoiser
from s2m.diffusion import build_schedule
from s2m.pipeline import (
    DEFAULT_N_SAMPLES,
    GenerationConfig,
    ScheduleMismatchError,
    check_dataset,
    denormalize,
    derive_seed,
    generate_dataset,
    generate_pair,
    generate_pairs,
    load_pairs,
    normalize,
)
from s2m.sketch import LabelMask, SimParams, Sketch, SketchStyle, simulate_nuclei_mask


def zeros(x, t):
    return np.zeros_like(x)


def shrink(x, t):
    return 0.3 * x


SMALL_SIM = SimParams(image_shape=(16, 16), instance_count=(1, 3), radius=(2.0, 4.0))


@pytest.fixture
def mask():
    return simulate_nuclei_mask(SimParams(image_shape=(32, 32), seed=4))


# -- normalization ------------------------------------------------------------------


def test_normalize_examples():
    np.testing.assert_array_equal(normalize(np.array([0.0, 1.0, 0.5])), [-1.0, 1.0, 0.0])
    np.testing.assert_array_equal(denormalize(np.array([-1.0, 1.0, 0.0])), [0.0, 1.0, 0.5])


def test_normalize_accepts_sketch():
    s = Sketch(np.array([[0.25]]), SketchStyle.NUCLEI)
    assert normalize(s)[0, 0] == -0.5


def test_normalize_round_trip_and_order(rng):
    v = rng.uniform(0, 1, (50, 50))
    np.testing.assert_allclose(denormalize(normalize(v)), v, atol=1e-7)
    flat = np.sort(v.ravel())
    assert np.all(np.diff(normalize(flat)) >= 0)


def test_derive_seed_is_stable_and_spread():
    assert derive_seed(0, 0) == derive_seed(0, 0)
    seeds = {derive_seed(s, i) for s in range(5) for i in range(200)}
    assert len(seeds) == 1000
    assert all(0 <= s < 2**32 for s in seeds)


def test_generation_config_validation(schedule):
    with pytest.raises(ValueError):
        GenerationConfig(t_start=0)
    with pytest.raises(ValueError):
        GenerationConfig(sigma=-1)
    with pytest.raises(ValueError, match="T=1000"):
        GenerationConfig(t_start=1001).validate(schedule)
    assert GenerationConfig() == GenerationConfig(t_start=400, sigma=1.0)


# -- single pairs ----------------------------------------------------------------------


def test_mask_passthrough_is_bit_exact(schedule, mask):
    before = mask.labels.copy()
    image, out_mask, sketch = generate_pair(shrink, schedule, mask, "nuclei", GenerationConfig(t_start=50))
    assert out_mask is mask
    assert out_mask.labels.tobytes() == before.tobytes()
    assert image.shape == mask.shape and sketch.shape == mask.shape
    assert 0 <= image.min() and image.max() <= 1
    assert sketch.sigma_applied == 1.0


def test_plain_array_mask_passthrough(schedule, mask):
    arr = mask.labels.copy()
    _, out, _ = generate_pair(zeros, schedule, arr, "nuclei", GenerationConfig(t_start=5))
    assert out.tobytes() == mask.labels.tobytes()


def test_generation_is_deterministic(schedule, mask):
    cfg = GenerationConfig(t_start=30, seed=9)
    a = generate_pair(shrink, schedule, mask, "nuclei", cfg)[0]
    b = generate_pair(shrink, schedule, mask, "nuclei", cfg)[0]
    assert a.tobytes() == b.tobytes()
    c = generate_pair(shrink, schedule, mask, "nuclei", GenerationConfig(t_start=30, seed=10))[0]
    assert a.tobytes() != c.tobytes()


def test_perfect_oracle_at_t_start_one_returns_sketch(schedule, mask):
    cfg = GenerationConfig(t_start=1, sigma=1.0, seed=2)
    _, _, sketch = generate_pair(zeros, schedule, mask, "nuclei", cfg)
    x0 = normalize(sketch)
    ab = schedule.alpha_bar(1)

    def oracle(x, t):
        return (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)

    image, _, sketch2 = generate_pair(oracle, schedule, mask, "nuclei", cfg)
    assert sketch2.intensity.tobytes() == sketch.intensity.tobytes()
    assert np.max(np.abs(image - sketch.intensity)) < 1e-4


def test_batched_matches_single(schedule):
    masks = [simulate_nuclei_mask(SimParams(image_shape=(16, 16), seed=s)) for s in range(3)]
    cfgs = [GenerationConfig(t_start=20, seed=s) for s in (5, 6, 7)]
    batch = generate_pairs(shrink, schedule, masks, "nuclei", cfgs)
    for m, c, (img, _, _) in zip(masks, cfgs, batch):
        single = generate_pair(shrink, schedule, m, "nuclei", c)[0]
        np.testing.assert_array_equal(img, single)


def test_batch_requires_shared_t_start(schedule, mask):
    with pytest.raises(ValueError):
        generate_pairs(zeros, schedule, [mask, mask], "nuclei",
                       [GenerationConfig(t_start=3), GenerationConfig(t_start=4)])


def test_unclamped_output(schedule, mask):
    cfg = GenerationConfig(t_start=1000, seed=1, clamp_output=False)
    image = generate_pair(lambda x, t: -x, schedule, mask, "nuclei", cfg)[0]
    assert image.min() < 0 or image.max() > 1


def test_shape_incompatible_with_network(schedule):
    den = init_denoiser(DenoiserConfig(base_channels=4, depth=3, time_embed_dim=8, patch_shape=(16, 16)), 0)
    with pytest.raises(ValueError, match="divisible by 8"):
        generate_pair(den, schedule, np.zeros((20, 20), dtype=np.uint16), "nuclei")


def test_schedule_mismatch_refused(schedule, mask):
    den = init_denoiser(DenoiserConfig(base_channels=4, depth=2, time_embed_dim=8, patch_shape=(16, 16)), 0)
    den.schedule = build_schedule(T=500).to_dict()
    with pytest.raises(ScheduleMismatchError):
        generate_pair(den, schedule, mask, "nuclei", GenerationConfig(t_start=10))


def test_real_network_generation(schedule, mask):
    den = init_denoiser(DenoiserConfig(base_channels=4, depth=2, time_embed_dim=8, patch_shape=(16, 16)), 0)
    den.schedule = schedule.to_dict()
    image, out, _ = generate_pair(den, schedule, mask, "nuclei", GenerationConfig(t_start=5))
    assert image.shape == (32, 32) and np.all(np.isfinite(image))
    assert out is mask


# -- datasets ------------------------------------------------------------------------------


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.tif"))}


def test_single_sample_dataset(tmp_path, schedule):
    man = generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", n_samples=1,
                           config=GenerationConfig(t_start=10), out_dir=tmp_path)
    assert len(man.entries) == 1
    e = man.entries[0]
    shapes = {tifffile.imread(tmp_path / e[k]).shape for k in ("image", "mask", "sketch")}
    assert shapes == {(16, 16)}
    assert check_dataset(tmp_path) == []
    assert not list(tmp_path.glob(".staging-*"))


def test_default_sample_count(tmp_path, schedule):
    assert DEFAULT_N_SAMPLES == 200
    man = generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", config=GenerationConfig(t_start=1),
                           out_dir=tmp_path, batch_size=64)
    assert len(man.entries) == 200
    assert len(list((tmp_path / "images").iterdir())) == 200
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["n_samples"] == 200


def test_dataset_masks_equal_simulation(tmp_path, schedule):
    import dataclasses

    from s2m.sketch import simulate_mask

    man = generate_dataset(shrink, schedule, SMALL_SIM, "membrane", n_samples=3,
                           config=GenerationConfig(t_start=5, seed=4), out_dir=tmp_path)
    for e in man.entries:
        expected = simulate_mask(dataclasses.replace(SMALL_SIM, seed=derive_seed(4, e["index"])), "membrane")
        np.testing.assert_array_equal(tifffile.imread(tmp_path / e["mask"]), expected.labels)
        assert e["seed"] == derive_seed(4, e["index"])


def test_dataset_rerun_is_byte_identical(tmp_path, schedule):
    cfg = GenerationConfig(t_start=15, seed=3)
    a = generate_dataset(shrink, schedule, SMALL_SIM, "nuclei", 4, cfg, tmp_path / "a", batch_size=3)
    b = generate_dataset(shrink, schedule, SMALL_SIM, "nuclei", 4, cfg, tmp_path / "b", batch_size=2, jobs=2)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert a.entries == b.entries
    da = json.loads((tmp_path / "a/manifest.json").read_text())
    db = json.loads((tmp_path / "b/manifest.json").read_text())
    da.pop("created"), db.pop("created")
    assert da == db


def test_dataset_with_imported_masks(tmp_path, schedule):
    masks = [np.zeros((16, 16), dtype=np.uint16), np.ones((32, 32), dtype=np.uint16)]
    man = generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", 2, GenerationConfig(t_start=3),
                           tmp_path, masks=masks)
    pairs = list(load_pairs(tmp_path))
    for (img, msk), m in zip(pairs, masks):
        np.testing.assert_array_equal(msk, m)
        assert img.shape == m.shape
    assert tifffile.imread(tmp_path / man.entries[0]["image"]).dtype == np.float32
    assert man.entries[1]["mask_meta"] == {"imported": True}


def test_failure_leaves_no_partial_output(tmp_path, schedule):
    calls = []

    def flaky(x, t):
        calls.append(t)
        if len(calls) > 30:
            raise RuntimeError("boom")
        return np.zeros_like(x)

    with pytest.raises(Exception, match="boom"):
        generate_dataset(flaky, schedule, SMALL_SIM, "nuclei", 4, GenerationConfig(t_start=20),
                         tmp_path, batch_size=2)
    assert sorted(p.name for p in tmp_path.iterdir()) == []


def test_dataset_rejects_bad_requests(tmp_path, schedule):
    with pytest.raises(ValueError):
        generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", 0, out_dir=tmp_path)
    with pytest.raises(ValueError):
        generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", 3, out_dir=tmp_path,
                         masks=[np.zeros((16, 16), dtype=np.uint16)])
    with pytest.raises(ValueError):
        generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", 1, GenerationConfig(t_start=2000), tmp_path)


def test_check_dataset_reports_problems(tmp_path, schedule):
    generate_dataset(zeros, schedule, SMALL_SIM, "nuclei", 2, GenerationConfig(t_start=2), tmp_path)
    tifffile.imwrite(tmp_path / "masks/0001.tif", np.zeros((8, 8), dtype=np.int32))
    problems = check_dataset(tmp_path)
    assert any("dtype" in p for p in problems) and any("shapes" in p for p in problems)
    assert check_dataset(tmp_path / "missing") != []


def test_label_mask_input_keeps_meta(schedule):
    m = LabelMask(np.zeros((16, 16), dtype=np.uint16), {"note": 1})
    assert generate_pair(zeros, schedule, m, "membrane", GenerationConfig(t_start=2))[1].meta == {"note": 1}
