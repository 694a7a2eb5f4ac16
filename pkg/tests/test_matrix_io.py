import json
import struct

import numpy as np
import pytest

from plforge.matrix_io import (
    FeatureBundle,
    FormatError,
    Manifest,
    decode_bundle,
    encode_bundle,
    export_csv,
    fnv1a64,
    import_csv,
    load_bundle,
    manifest_path,
    save_bundle,
)
from plforge.synth_bench import BENCHMARK, SynthSpec, generate

# checksums of the seed-7 synthetic bundles, frozen from the first run
GOLDEN_SOURCE_SEED7 = 0x0A875389FEA27CC3
GOLDEN_TARGET_SEED7 = 0x170E57A8AF1DF3CD
GOLDEN_BENCHMARK_TARGET = 0xF05188213391720B


def small_bundle(labels=True):
    return FeatureBundle(
        features=[[0.5, -1.25, 3.0], [2.0, 0.0, 1e-3]],
        logits=[[1.0, 0.0], [-0.5, 0.25]],
        labels=[1, 0] if labels else None,
        ids=[10, 3],
    )


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_byte_layout_matches_hand_packed_file():
    b = FeatureBundle([[0.0]], [[0.0, 0.0]])
    data = encode_bundle(b)
    body = (
        b"FBUN"
        + struct.pack("<IIIIB", 1, 1, 1, 2, 0)
        + struct.pack("<f", 0.0)
        + struct.pack("<ff", 0.0, 0.0)
        + struct.pack("<I", 0)
    )
    assert data == body + struct.pack("<Q", fnv1a64(body))
    # 21-byte header + 4 feature + 8 logit + 4 id + 8 checksum bytes
    assert len(data) == 45


def test_round_trip_with_and_without_labels(tmp_path):
    for labels in (True, False):
        b = small_bundle(labels)
        path = tmp_path / f"b{labels}.fbun"
        manifest = save_bundle(b, path, domain_name="toy")
        got = load_bundle(path)
        assert got == b
        assert got.features.tobytes() == b.features.tobytes()
        assert manifest.n_samples == 2 and manifest.feature_dim == 3 and manifest.n_classes == 2
        assert manifest.has_labels is labels
        on_disk = json.loads(manifest_path(path).read_text())
        assert on_disk["domain_name"] == "toy"
        assert int(on_disk["checksum"], 16) == manifest.checksum


def test_manifest_path_is_sibling(tmp_path):
    assert manifest_path(tmp_path / "target.fbun") == tmp_path / "target.manifest.json"


def test_nan_feature_is_rejected_with_position():
    with pytest.raises(FormatError, match=r"non-finite value at row 1, col 0"):
        FeatureBundle([[0.0], [np.nan]], [[0.0, 0.0], [0.0, 0.0]])


def test_nan_bundle_never_reaches_disk(tmp_path):
    path = tmp_path / "x.fbun"
    with pytest.raises(FormatError):
        save_bundle(FeatureBundle([[np.inf]], [[0.0, 0.0]]), path)
    assert not path.exists()


@pytest.mark.parametrize(
    "kwargs, message",
    [
        (dict(features=[[1.0]], logits=[[1.0]]), "C >= 2"),
        (dict(features=[[1.0], [2.0]], logits=[[1.0, 0.0]]), "length mismatch"),
        (dict(features=[[1.0]], logits=[[1.0, 0.0]], labels=[2]), "labels must lie"),
        (dict(features=[[1.0], [2.0]], logits=[[1, 0], [0, 1]], ids=[4, 4]), "unique"),
        (dict(features=[[1.0]], logits=[[1.0, 0.0]], ids=[-1]), "non-negative"),
    ],
)
def test_invariant_violations(kwargs, message):
    with pytest.raises(FormatError, match=message):
        FeatureBundle(**kwargs)


def test_bundle_arrays_are_read_only():
    b = small_bundle()
    for arr in (b.features, b.logits, b.labels, b.ids):
        with pytest.raises(ValueError):
            arr[0] = 0


def test_bad_magic():
    data = bytearray(encode_bundle(small_bundle()))
    data[0:4] = b"XXXX"
    with pytest.raises(FormatError, match="bad magic"):
        decode_bundle(bytes(data))


def test_version_mismatch():
    data = bytearray(encode_bundle(small_bundle()))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version mismatch"):
        decode_bundle(bytes(data))


def test_truncated_payload():
    data = encode_bundle(small_bundle())
    with pytest.raises(FormatError, match="truncated payload"):
        decode_bundle(data[:10])
    with pytest.raises(FormatError, match="length mismatch"):
        decode_bundle(data[:-1])


def test_manifest_row_count_disagreement(tmp_path):
    rng = np.random.default_rng(0)
    nine = FeatureBundle(rng.standard_normal((9, 2)), rng.standard_normal((9, 3)))
    path = tmp_path / "nine.fbun"
    m = save_bundle(nine, path)
    lying = Manifest(10, m.feature_dim, m.n_classes, m.domain_name, m.has_labels, m.checksum)
    manifest_path(path).write_text(lying.to_json())
    with pytest.raises(FormatError, match="length mismatch"):
        load_bundle(path)


def test_every_single_byte_flip_is_detected():
    data = encode_bundle(small_bundle())
    for pos in range(len(data)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(data)
            bad[pos] ^= flip
            with pytest.raises(FormatError):
                decode_bundle(bytes(bad))


def test_seed7_golden_checksums():
    source, target = generate(SynthSpec(seed=7))
    assert struct.unpack("<Q", encode_bundle(source)[-8:])[0] == GOLDEN_SOURCE_SEED7
    assert struct.unpack("<Q", encode_bundle(target)[-8:])[0] == GOLDEN_TARGET_SEED7
    _, shifted = generate(BENCHMARK)
    assert struct.unpack("<Q", encode_bundle(shifted)[-8:])[0] == GOLDEN_BENCHMARK_TARGET


def test_import_csv_single_row(tmp_path):
    (tmp_path / "f.csv").write_text("0.5,0.5\n")
    (tmp_path / "l.csv").write_text("1.0,0.0\n")
    b = import_csv(tmp_path / "f.csv", tmp_path / "l.csv")
    assert (b.n_samples, b.feature_dim, b.n_classes) == (1, 2, 2)
    assert b.ids.tolist() == [0]
    assert not b.has_labels


def test_import_csv_row_count_mismatch(tmp_path):
    (tmp_path / "f.csv").write_text("1,2\n3,4\n")
    (tmp_path / "l.csv").write_text("1,0\n0,1\n1,1\n")
    with pytest.raises(FormatError, match="row-count mismatch"):
        import_csv(tmp_path / "f.csv", tmp_path / "l.csv")


def test_import_csv_non_numeric_names_position(tmp_path):
    (tmp_path / "f.csv").write_text("1,2\n3,abc\n")
    (tmp_path / "l.csv").write_text("1,0\n0,1\n")
    with pytest.raises(FormatError, match=r"'abc' at row 1, column 1"):
        import_csv(tmp_path / "f.csv", tmp_path / "l.csv")


def test_import_csv_ragged(tmp_path):
    (tmp_path / "f.csv").write_text("1,2\n3\n")
    (tmp_path / "l.csv").write_text("1,0\n0,1\n")
    with pytest.raises(FormatError, match="ragged"):
        import_csv(tmp_path / "f.csv", tmp_path / "l.csv")


def test_csv_export_import_round_trip(tmp_path):
    b = small_bundle().replace(ids=None)
    paths = [tmp_path / n for n in ("f.csv", "l.csv", "y.csv")]
    export_csv(b, *paths)
    assert import_csv(*paths) == b
