import json

import numpy as np
import pytest

from sdcl import synthdata
from sdcl.synthdata import DatasetSpec


def small_spec(**kw):
    base = dict(n_labeled=2, n_unlabeled=3, n_test=1, shape=(12, 12, 12), radius_range=(2.0, 4.0), seed=3)
    base.update(kw)
    return DatasetSpec(**base)


def test_generation_is_deterministic():
    a = synthdata.generate(small_spec())
    b = synthdata.generate(small_spec())
    assert a == b
    c = synthdata.generate(small_spec(seed=4))
    assert not np.array_equal(a[0].image, c[0].image)


def test_noiseless_full_contrast_phantom_thresholds_to_label():
    spec = small_spec(noise_sigma=0.0, contrast=1.0, contrast_jitter=0.0, offset_jitter=0.0, bias_amplitude=0.0)
    for rec in synthdata.generate(spec):
        label = synthdata.hidden_label(rec)
        np.testing.assert_array_equal((rec.image > 0.5).astype(np.uint8), label)


def test_desk_dataset_bookkeeping():
    spec = DatasetSpec(n_labeled=4, n_unlabeled=20, n_test=4, shape=(32, 32, 32), num_classes=2)
    # geometry check only: generate one volume per split
    assert [synthdata.generate_volume(spec, i, s).split for i, s in [(0, "labeled"), (4, "unlabeled"), (24, "test")]] == [
        "labeled", "unlabeled", "test"
    ]
    records = synthdata.generate(small_spec(n_labeled=4, n_unlabeled=20, n_test=4, shape=(10, 10, 10)))
    assert len(records) == 28
    assert [len(synthdata.by_split(records, s)) for s in synthdata.SPLITS] == [4, 20, 4]
    assert len({r.id for r in records}) == 28


def test_volume_invariants():
    spec = small_spec(num_classes=3, n_unlabeled=4)
    for rec in synthdata.generate(spec):
        assert np.isfinite(rec.image).all() and rec.image.min() >= 0 and rec.image.max() <= 1
        label = synthdata.hidden_label(rec)
        assert label.max() < 3
        lo, hi = spec.foreground_fraction
        assert lo <= np.count_nonzero(label) / label.size <= hi


def test_unlabeled_volumes_hide_their_label():
    rec = synthdata.by_split(synthdata.generate(small_spec()), "unlabeled")[0]
    with pytest.raises(AttributeError):
        rec.label
    assert not rec.has_label and synthdata.hidden_label(rec) is not None


def test_spec_validation():
    with pytest.raises(synthdata.DataSpecError):
        small_spec(n_labeled=1).validate()
    with pytest.raises(synthdata.DataSpecError):
        small_spec(n_unlabeled=1).validate()
    with pytest.raises(synthdata.DataSpecError):
        small_spec(num_classes=1).validate()
    with pytest.raises(synthdata.DataSpecError):
        small_spec(radius_range=(2.0, 7.0)).validate()  # radius > half extent
    with pytest.raises(synthdata.DataSpecError):
        DatasetSpec.from_dict({"bogus": 1})
    spec = small_spec()
    assert DatasetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_two_dimensional_volumes():
    spec = small_spec(shape=(16, 16, 1), radius_range=(2.0, 5.0))
    for rec in synthdata.generate(spec):
        assert rec.image.shape == (16, 16, 1)


def test_volume_round_trip(tmp_path):
    for rec in synthdata.generate(small_spec()):
        synthdata.write_volume(rec, tmp_path / "v.vol")
        back = synthdata.read_volume(tmp_path / "v.vol")
        assert back == rec
        assert synthdata.volume_bytes(back) == (tmp_path / "v.vol").read_bytes()


def test_volume_format_errors():
    rec = synthdata.generate(small_spec())[0]
    blob = synthdata.volume_bytes(rec)
    with pytest.raises(synthdata.VolumeFormatError, match="expected .* bytes, got") as exc:
        synthdata.volume_from_bytes(blob[:-10])
    assert exc.value.offset > 0
    with pytest.raises(synthdata.VolumeFormatError, match="version"):
        synthdata.volume_from_bytes(blob.replace(b"SDCLVOL 1", b"SDCLVOL 2", 1))
    with pytest.raises(synthdata.VolumeFormatError, match="magic") as exc:
        synthdata.volume_from_bytes(b"NOTAVOL 1\n" + blob[10:])
    assert exc.value.offset == 0


def test_dataset_round_trip(tmp_path):
    records = synthdata.generate(small_spec())
    path = synthdata.write_dataset(records, tmp_path / "d", small_spec())
    assert synthdata.read_dataset(path) == records
    assert synthdata.read_dataset(tmp_path / "d") == records
    manifest = json.loads(path.read_text())
    assert [e["split"] for e in manifest["volumes"]] == [r.split for r in records]
