"""Round-trip exactness and structured failure modes of the binary formats."""

import numpy as np
import pytest

from icad.conformal import CalibrationSet, FingerprintMismatchError
from icad.models import SvddModel, VaeModel, svdd_init_center
from icad.nonconformity import SvddScorer
from icad.persistence import (
    BadMagicError,
    FormatError,
    TruncatedPayloadError,
    UnsortedScoresError,
    VersionMismatchError,
    load_calibration,
    load_config,
    load_dataset,
    load_model,
    save_calibration,
    save_config,
    save_dataset,
    save_model,
)


def _random_svdd(seed):
    rng = np.random.default_rng(seed)
    model = SvddModel.build(5, output_dim=3, hidden=(6, 4), weight_decay=1e-3, seed=seed)
    svdd_init_center(model, rng.normal(size=(8, 5)))
    return model


def _random_vae(seed):
    return VaeModel.build(6, latent_dim=2, hidden=(5, 4), seed=seed)


def test_svdd_round_trip_is_bit_exact(tmp_path):
    for seed in range(10):
        model = _random_svdd(seed)
        path = tmp_path / f"svdd_{seed}.icad"
        save_model(path, model)
        loaded = load_model(path)
        assert isinstance(loaded, SvddModel)
        assert loaded.weight_decay == model.weight_decay
        assert np.array_equal(loaded.center, model.center)
        for a, b in zip(model.mapper.layers, loaded.mapper.layers):
            assert np.array_equal(a.weights.astype("<f4"), b.weights.astype("<f4"))
            assert b.bias is None
        # a second save of the loaded model reproduces the bytes exactly
        path2 = tmp_path / f"svdd_{seed}_again.icad"
        save_model(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()


def test_vae_round_trip_preserves_structure(tmp_path):
    for seed in range(5):
        model = _random_vae(seed)
        path = tmp_path / f"vae_{seed}.icad"
        save_model(path, model)
        loaded = load_model(path)
        assert isinstance(loaded, VaeModel)
        assert loaded.latent_dim == model.latent_dim
        assert len(loaded.encoder.layers) == len(model.encoder.layers)
        assert len(loaded.decoder.layers) == len(model.decoder.layers)
        for a, b in zip(
            model.encoder.layers + model.decoder.layers,
            loaded.encoder.layers + loaded.decoder.layers,
        ):
            assert np.array_equal(a.weights.astype("<f4"), b.weights.astype("<f4"))
            assert np.array_equal(a.bias.astype("<f4"), b.bias.astype("<f4"))
            assert a.activation == b.activation


def test_model_loaded_fingerprint_matches_saved(tmp_path):
    model = _random_svdd(3)
    path = tmp_path / "m.icad"
    save_model(path, model)
    assert SvddScorer(load_model(path)).fingerprint() == SvddScorer(model).fingerprint()


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 7))
    r = rng.uniform(0, 20, size=20)
    path = tmp_path / "data.icad"
    save_dataset(path, x, r)
    x2, r2 = load_dataset(path)
    assert np.array_equal(x.astype("<f4").astype(np.float64), x2)
    assert np.array_equal(r, r2)
    # without corruption levels
    save_dataset(path, x)
    _, r3 = load_dataset(path)
    assert r3 is None


def test_calibration_round_trip(tmp_path):
    scores = np.sort(np.random.default_rng(2).normal(size=30))
    cal = CalibrationSet(scores, "svdd", b"12345678")
    path = tmp_path / "cal.icad"
    save_calibration(path, cal)
    loaded = load_calibration(path)
    assert np.array_equal(loaded.scores, cal.scores)
    assert loaded.scorer_kind == "svdd"
    assert loaded.fingerprint == b"12345678"


def test_bad_magic_is_distinct_error(tmp_path):
    path = tmp_path / "junk.icad"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 40)
    with pytest.raises(BadMagicError):
        load_model(path)
    with pytest.raises(BadMagicError):
        load_calibration(path)
    with pytest.raises(BadMagicError):
        load_dataset(path)


def test_version_mismatch_detected(tmp_path):
    model = _random_svdd(4)
    path = tmp_path / "m.icad"
    save_model(path, model)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_model(path)


def test_truncated_payload_detected(tmp_path):
    model = _random_svdd(5)
    path = tmp_path / "m.icad"
    save_model(path, model)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(TruncatedPayloadError):
        load_model(path)


def test_trailing_bytes_rejected(tmp_path):
    model = _random_svdd(6)
    path = tmp_path / "m.icad"
    save_model(path, model)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError):
        load_model(path)


def test_unsorted_calibration_rejected_at_load(tmp_path):
    cal = CalibrationSet(np.array([1.0, 2.0]), "knn", b"abcdefgh")
    path = tmp_path / "cal.icad"
    save_calibration(path, cal)
    raw = bytearray(path.read_bytes())
    # swap the two little-endian doubles at the tail
    raw[-16:] = raw[-8:] + raw[-16:-8]
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsortedScoresError):
        load_calibration(path)


def test_fingerprint_enforced_against_scorer(tmp_path):
    model = _random_svdd(7)
    scorer = SvddScorer(model)
    cal = CalibrationSet(np.array([0.5, 1.5]), "svdd", scorer.fingerprint())
    path = tmp_path / "cal.icad"
    save_calibration(path, cal)
    assert load_calibration(path, scorer=scorer) is not None
    other = SvddScorer(_random_svdd(8))
    with pytest.raises(FingerprintMismatchError):
        load_calibration(path, scorer=other)


def test_save_rejects_uninitialized_svdd(tmp_path):
    model = SvddModel.build(4, output_dim=2, hidden=(3,), seed=0)
    with pytest.raises(FormatError):
        save_model(tmp_path / "m.icad", model)


def test_save_dataset_validates_shapes(tmp_path):
    with pytest.raises(FormatError):
        save_dataset(tmp_path / "d.icad", np.zeros((0, 3)))
    with pytest.raises(FormatError):
        save_dataset(tmp_path / "d.icad", np.zeros((3, 2)), np.zeros(2))


def test_config_round_trip(tmp_path):
    path = tmp_path / "run.txt"
    save_config(path, {"tau": 14.0, "n": 10, "model": "m.icad"})
    loaded = load_config(path)
    assert loaded == {"tau": "14.0", "n": "10", "model": "m.icad"}
    path.write_text("# comment\n\nkey = value with = sign\n")
    assert load_config(path) == {"key": "value with = sign"}
    path.write_text("no separator here\n")
    with pytest.raises(FormatError):
        load_config(path)


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "d.icad"
    save_dataset(path, np.ones((2, 2)))
    save_dataset(path, np.zeros((3, 2)))
    x, _ = load_dataset(path)
    assert x.shape == (3, 2)
    assert not list(tmp_path.glob("d.icad.*"))  # no temp files left behind
