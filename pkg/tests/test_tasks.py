import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from mapo_lab._io import IntegrityError, crc64
from mapo_lab.diffusion import make_schedule
from mapo_lab.metrics import oracle_reward, two_sample_distance
from mapo_lab.tasks import (
    PRESETS,
    Component,
    Dataset,
    TaskSpec,
    export_json,
    import_json,
    load_dataset,
    preset,
    sample_data,
    save_dataset,
    synthesize_preferences,
)

from conftest import tiny_denoiser


def test_crc64_check_value():
    # CRC-64/XZ check value for the ASCII digits 1..9
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA


# task spec


def test_presets_are_ordered_by_mismatch():
    levels = [preset(name).mismatch_level for name in ("preference", "culture", "safety", "style",
                                                         "personalization")]
    assert levels == [0.0, 0.5, 1.0, 2.0, 4.0]
    assert set(PRESETS) == {"preference", "culture", "safety", "style", "personalization"}


def test_zero_mismatch_means_identical_mixtures():
    task = preset("custom", 0.0)
    assert task.target_mixture == task.base_mixture


@given(st.floats(0, 8))
def test_target_means_shift_by_level_times_std(level):
    task = preset("custom", level)
    for b, t in zip(task.base_mixture, task.target_mixture):
        shift = np.linalg.norm(np.subtract(t.mean, b.mean))
        assert math.isclose(shift, level * b.std, rel_tol=1e-12, abs_tol=1e-12)
        assert t.std == b.std and t.weight == b.weight


@pytest.mark.parametrize("bad", [
    dict(base_mixture=(Component(0.5, (0.0, 0.0), 1.0),), cond_dim=1),
    dict(base_mixture=(Component(1.0, (0.0, 0.0), 0.0),), cond_dim=1),
    dict(base_mixture=(Component(1.0, (0.0,), 1.0),), cond_dim=1),
    dict(base_mixture=(Component(1.0, (0.0, 0.0), 1.0),), cond_dim=2),
    dict(base_mixture=(Component(1.0, (0.0, 0.0), 1.0),), cond_dim=1, mismatch_level=-1.0),
])
def test_task_validation(bad):
    with pytest.raises(ValueError):
        TaskSpec("bad", **bad)


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown task preset"):
        preset("landscape")


def test_fingerprint_tracks_level():
    assert preset("custom", 1.0).fingerprint() != preset("custom", 2.0).fingerprint()
    assert preset("custom", 1.0).fingerprint() == preset("custom", 1.0).fingerprint()
    assert len(preset("style").fingerprint()) == 32


def test_task_dict_round_trip():
    task = preset("style")
    assert TaskSpec.from_dict(task.canonical()) == task


# sampling


def test_single_component_law_of_large_numbers():
    task = preset("gaussian")
    n = 4096
    x = sample_data(task, "base", 0, n, seed=3)
    mu, s = np.array(task.base_mixture[0].mean), task.base_mixture[0].std
    assert np.all(np.abs(x.mean(axis=0) - mu) < 4 * s / math.sqrt(n))


def test_two_component_counts_are_binomial():
    task = TaskSpec("pair", (Component(0.5, (-3.0, 0.0), 0.5), Component(0.5, (3.0, 0.0), 0.5)), cond_dim=2)
    _, cls = sample_data(task, "base", None, 10_000, seed=0, return_labels=True)
    counts = np.bincount(cls, minlength=2) / 10_000
    assert np.all(np.abs(counts - 0.5) < 0.02)


def test_condition_selects_component():
    task = preset("custom")
    for k in range(4):
        x = sample_data(task, "base", task.one_hot(k), 2000, seed=k)
        assert np.linalg.norm(x.mean(axis=0) - task.base_mixture[k].mean) < 0.1


@pytest.mark.parametrize("c", [4, -1, [0.0, 0.5, 0.5, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 1.0]])
def test_unknown_condition_rejected(c):
    with pytest.raises(ValueError):
        sample_data(preset("custom"), "base", np.asarray(c), 4, seed=0)


def test_sample_data_rejects_bad_arguments():
    with pytest.raises(ValueError, match="n must be"):
        sample_data(preset("custom"), "base", 0, 0, seed=0)
    with pytest.raises(ValueError, match="unknown mixture"):
        sample_data(preset("custom"), "reference", 0, 4, seed=0)


def test_sample_data_is_deterministic():
    a = sample_data(preset("style"), "target", 2, 50, seed=9)
    b = sample_data(preset("style"), "target", 2, 50, seed=9)
    assert a.tobytes() == b.tobytes()


def test_zero_mismatch_draws_are_indistinguishable():
    task = preset("preference")
    base = sample_data(task, "base", 1, 2048, seed=4)
    target = sample_data(task, "target", 1, 2048, seed=4)
    assert base.tobytes() == target.tobytes()
    null = two_sample_distance(base, sample_data(task, "base", 1, 2048, seed=5))
    assert null < 0.02


def test_mismatch_monotonicity():
    task = preset("custom")
    medians = []
    for level in (0.0, 1.0, 2.0, 4.0):
        t = task.at_level(level)
        d = [two_sample_distance(sample_data(t, "base", None, 4096, seed=s),
                                 sample_data(t, "target", None, 4096, seed=s + 100)) for s in range(3)]
        medians.append(np.median(d))
    assert np.all(np.diff(medians) > 0)


# preference synthesis


def _valid_share(task, d):
    cls = task.class_of(d.c)
    return float(np.mean(oracle_reward(task, d.x_w, cls) > oracle_reward(task, d.x_l, cls)))


@pytest.mark.parametrize("level", [1.0, 2.0, 4.0])
def test_preference_validity(level):
    task = preset("custom", level)
    assert _valid_share(task, synthesize_preferences(task, None, 4096, seed=0)) >= 0.95


def test_preference_validity_from_model_generations():
    task = preset("custom", 1.0)
    s = make_schedule("cosine", 8)
    d = synthesize_preferences(task, tiny_denoiser(3, cond_dim=4), 512, seed=0, schedule=s)
    assert _valid_share(task, d) >= 0.95


def test_unfiltered_validity_grows_with_mismatch():
    # without the margin filter, overlap between the mixtures leaves invalid pairs at small shifts
    shares = [_valid_share(preset("custom", lvl), synthesize_preferences(preset("custom", lvl), None, 4096,
                                                                          seed=0, filter_margin=None))
              for lvl in (1.0, 2.0, 4.0)]
    assert shares[0] < shares[1] < shares[2]
    assert shares[2] >= 0.95


def test_filter_makes_every_pair_valid():
    task = preset("custom", 0.5)
    d = synthesize_preferences(task, None, 1024, seed=1)
    cls = task.class_of(d.c)
    assert np.all(oracle_reward(task, d.x_w, cls) > oracle_reward(task, d.x_l, cls))


def test_synthesis_is_deterministic():
    task = preset("style")
    a = synthesize_preferences(task, None, 300, seed=5)
    b = synthesize_preferences(task, None, 300, seed=5)
    assert a.to_bytes() == b.to_bytes()
    assert a != synthesize_preferences(task, None, 300, seed=6)


def test_synthesis_from_model_generations():
    task = preset("custom", 2.0)
    params = tiny_denoiser(0, dim=2, cond_dim=4)
    s = make_schedule("cosine", 8)
    d = synthesize_preferences(task, params, 64, seed=2, schedule=s, filter_margin=None)
    assert len(d) == 64 and np.all(np.isfinite(d.x_l))
    assert d.to_bytes() == synthesize_preferences(task, params, 64, seed=2, schedule=s,
                                                  filter_margin=None).to_bytes()
    with pytest.raises(ValueError, match="schedule"):
        synthesize_preferences(task, params, 4, seed=0)


def test_synthesis_rejects_empty():
    with pytest.raises(ValueError):
        synthesize_preferences(preset("style"), None, 0, seed=0)


def test_conditions_cover_all_classes():
    d = synthesize_preferences(preset("style"), None, 4000, seed=0)
    share = d.c.mean(axis=0)
    assert np.all(np.abs(share - 0.25) < 0.03)


# persistence


def test_round_trip_large(tmp_path):
    d = synthesize_preferences(preset("style"), None, 4096, seed=7)
    path = tmp_path / "d.bin"
    save_dataset(d, path)
    back = load_dataset(path)
    assert back == d
    assert_array_equal(back.x_w, d.x_w)
    assert back.to_bytes() == path.read_bytes()


def test_round_trip_empty(tmp_path):
    d = Dataset.empty(preset("custom"), seed=3)
    save_dataset(d, tmp_path / "e.bin")
    back = load_dataset(tmp_path / "e.bin")
    assert len(back) == 0 and back == d and back.seed == 3


def _blob():
    return synthesize_preferences(preset("culture"), None, 32, seed=0).to_bytes()


@pytest.mark.parametrize("offset", [0, 12, 60, 200, -3])
def test_single_byte_corruption_detected(offset):
    blob = bytearray(_blob())
    blob[offset] ^= 0x01
    with pytest.raises(IntegrityError):
        Dataset.from_bytes(bytes(blob))


def test_truncation_detected():
    blob = _blob()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(IntegrityError, match="truncated"):
            Dataset.from_bytes(blob[:cut])


def test_trailing_bytes_detected():
    with pytest.raises(IntegrityError, match="trailing"):
        Dataset.from_bytes(_blob() + b"\x00")


def test_version_mismatch_detected():
    d = synthesize_preferences(preset("culture"), None, 4, seed=0)
    d.schema_version = 2
    with pytest.raises(IntegrityError, match="version"):
        Dataset.from_bytes(d.to_bytes())


def test_json_export_is_lossless():
    d = synthesize_preferences(preset("safety"), None, 50, seed=1)
    text = export_json(d)
    doc = json.loads(text)
    assert len(doc["records"]) == 50
    assert import_json(text) == d


def test_non_finite_values_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        Dataset(b"\x00" * 32, 0, np.ones((1, 1)), np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
