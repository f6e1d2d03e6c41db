import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsal import data, metrics
from fbsal.data import ConfigError, FixationFormatError, FixationSet, MapFormatError

seeds = st.integers(0, 2**31 - 1)


# ---------------------------------------------------------------- map formats


def test_smap_round_trip_is_bit_exact(tmp_path, rng):
    m = rng.random((8, 8)).astype(np.float32)
    data.write_map(m, tmp_path / "m.smap")
    back = data.read_map(tmp_path / "m.smap")
    assert back.format == "SMAP"
    assert back.values.tobytes() == m.tobytes()
    data.write_map(back, tmp_path / "n.smap")
    assert (tmp_path / "m.smap").read_bytes() == (tmp_path / "n.smap").read_bytes()


def test_smap_layout():
    buf = data.encode_map(np.array([[1.0, 2.0, 3.0]]), "SMAP")
    assert buf[:4] == b"SMAP"
    assert buf[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[12:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_pgm16_maxval_is_one(tmp_path):
    raw = b"P5\n2 1\n65535\n" + np.array([65535, 0], dtype=">u2").tobytes()
    (tmp_path / "m.pgm").write_bytes(raw)
    m = data.read_map(tmp_path / "m.pgm")
    assert m.format == "PGM16"
    assert m.to_unit().tolist() == [[1.0, 0.0]]


def test_ascii_pgm_with_comments():
    m = data.parse_map(b"P2\n# a comment\n3 1 # trailing\n255\n0 128\n255\n")
    assert m.format == "PGM8" and m.values.tolist() == [[0, 128, 255]]


@settings(max_examples=50, deadline=None)
@given(seeds, st.sampled_from(["PGM8", "PGM16"]), st.integers(1, 9), st.integers(1, 9))
def test_pgm_round_trip_within_quantization_bound(seed, fmt, h, w):
    m = np.random.default_rng(seed).random((h, w))
    back = data.parse_map(data.encode_map(m, fmt))
    assert back.format == fmt
    assert np.abs(back.to_unit() - m).max() <= 1 / (2 * back.maxval) + 1e-15
    again = data.parse_map(data.encode_map(back, fmt))
    np.testing.assert_array_equal(again.values, back.values)


def located(exc: MapFormatError, length: int) -> bool:
    return 0 <= exc.offset <= length and re.search(r"byte \d+", str(exc)) is not None


def test_fuzz_50_truncations_rejected_with_location(rng):
    corpus = [
        data.encode_map(rng.random((6, 5)), "SMAP"),
        data.encode_map(rng.random((6, 5)), "PGM8"),
        data.encode_map(rng.random((6, 5)), "PGM16"),
    ]
    cases = 0
    for i in range(50):
        buf = corpus[i % 3]
        cut = int(rng.integers(0, len(buf)))
        with pytest.raises(MapFormatError) as err:
            data.parse_map(buf[:cut], f"case{i}")
        assert located(err.value, cut), str(err.value)
        cases += 1
    assert cases == 50


def test_truncated_smap_names_expected_and_actual(rng):
    buf = data.encode_map(rng.random((4, 4)), "SMAP")
    with pytest.raises(MapFormatError, match=r"expected 76 bytes .* got 70"):
        data.parse_map(buf[:70])


def test_malformed_maps_rejected():
    with pytest.raises(MapFormatError, match="byte 0"):
        data.parse_map(b"JUNKJUNK")
    with pytest.raises(MapFormatError, match="maxval"):
        data.parse_map(b"P5\n1 1\n70000\n\x00\x00")
    with pytest.raises(MapFormatError, match="exceeds maxval"):
        data.parse_map(b"P2\n2 1\n10\n3 11\n")
    with pytest.raises(MapFormatError, match="trailing"):
        data.parse_map(b"P5\n1 1\n255\n\x01\x02")
    nan = data.SMAP_MAGIC + (1).to_bytes(4, "little") * 2 + np.array([np.nan], "<f4").tobytes()
    with pytest.raises(MapFormatError, match="non-finite"):
        data.parse_map(nan)


def test_map_ids(tmp_path):
    for name in ["a.smap", "a.r.smap", "b.pgm", "c.txt"]:
        (tmp_path / name).write_bytes(b"")
    assert sorted(data.find_maps(tmp_path)) == ["a", "b"]


# ---------------------------------------------------------------- fixations


def test_parse_fixations_examples():
    assert len(data.parse_fixations("row,col\n0,0\n1,2", (3, 3))) == 2
    assert len(data.parse_fixations("row,col\n1,1\n1,1\n", (3, 3))) == 1
    with pytest.raises(FixationFormatError, match="line 2"):
        data.parse_fixations("row,col\n5,5\n", (3, 3))
    with pytest.raises(FixationFormatError, match="line 3: non-integer"):
        data.parse_fixations("row,col\n0,0\n1.5,2\n", (3, 3))
    with pytest.raises(FixationFormatError, match="line 1"):
        data.parse_fixations("x,y\n0,0\n", (3, 3))


def test_fixation_csv_round_trip(tmp_path):
    fix = FixationSet(((4, 1), (0, 2)), (5, 5))
    data.write_fixations(fix, tmp_path / "f.csv")
    assert data.read_fixations(tmp_path / "f.csv", (5, 5)) == fix


def test_gaussian_centre_to_edge_ratio():
    G = data.fixations_to_saliency(FixationSet(((2, 2),), (5, 5)), 1.0, normalize=False)
    assert abs(G[2, 2] / G[0, 2] - math.e**2) < 1e-9


def test_single_centred_fixation_is_radially_symmetric():
    G = data.fixations_to_saliency(FixationSet(((7, 7),), (15, 15)), 2.0)
    assert np.unravel_index(np.argmax(G), G.shape) == (7, 7)
    np.testing.assert_array_equal(G, G.T)
    np.testing.assert_array_equal(G, G[::-1, :])
    np.testing.assert_array_equal(G, G[:, ::-1])


def test_two_distant_fixations_have_equal_maxima():
    G = data.fixations_to_saliency(FixationSet(((5, 5), (5, 25)), (11, 31)), 1.5)
    assert G[5, 5] == G[5, 25] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), min_size=1, max_size=6), st.randoms())
def test_blur_is_permutation_invariant(points, rnd):
    shuffled = list(points)
    rnd.shuffle(shuffled)
    a = data.fixations_to_saliency(FixationSet(tuple(points), (12, 12)), 1.7)
    b = data.fixations_to_saliency(FixationSet(tuple(shuffled), (12, 12)), 1.7)
    np.testing.assert_array_equal(a, b)


def test_blur_rejects_bad_input():
    with pytest.raises(ValueError):
        data.fixations_to_saliency(FixationSet((), (4, 4)), 1.0)
    with pytest.raises(ValueError):
        data.fixations_to_saliency(FixationSet(((0, 0),), (4, 4)), 0.0)


# ---------------------------------------------------------------- fixtures


def test_fixtures_are_deterministic(tmp_path):
    a = data.make_fixtures(tmp_path / "a", 8, (32, 32), seed=1)
    data.make_fixtures(tmp_path / "b", 8, (32, 32), seed=1)
    assert len(a) == 8
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 8 * 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fixture_centres_are_the_fixations(fixture_dir):
    rng = np.random.default_rng(1)
    for i, sample in enumerate(data.load_dataset(fixture_dir)):
        expected = data.synth_sample(rng, (32, 32), id=f"img{i:04d}")
        assert sample.fixations == expected.fixations
        assert 1 <= len(sample.fixations) <= 5
        np.testing.assert_array_equal(sample.image, expected.image.astype(np.float32))


def test_fixture_ground_truth_has_nss_above_two(fixture_dir):
    for sample in data.load_dataset(fixture_dir):
        assert metrics.nss(sample.gt, sample.fixations) > 2
    rng = np.random.default_rng(2)
    for _ in range(200):
        s = data.synth_sample(rng, (32, 32))
        assert metrics.nss(s.gt, s.fixations) > 2


def test_fixture_size_must_divide_by_16(tmp_path):
    with pytest.raises(ValueError):
        data.make_fixtures(tmp_path, 1, (20, 20), 0)


# ---------------------------------------------------------------- run config


def test_config_defaults():
    cfg = data.parse_config({})
    assert cfg.optimizer.batch_size == 10 and cfg.optimizer.momentum == 0.9
    assert cfg.optimizer.weight_decay == 1e-4 and cfg.optimizer.lr_decay == 0.9


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"net": {"widths": [1]}}, "net.widths"),
        ({"bogus": 1}, "bogus"),
        ({"optimizer": {"lr": -1}}, "optimizer.lr"),
        ({"optimizer": {"batch_size": 2.5}}, "optimizer.batch_size"),
        ({"loss": {"gamma": "x"}}, "loss.gamma"),
        ({"net": {"block_channels": [4, 4, 0, 8, 8]}}, "net.block_channels"),
        ({"net": {"smoothing_kernel": 40}}, "net.smoothing_kernel"),
        ({"net": {"feedback_enabled": 1}}, "net.feedback_enabled"),
        ({"seed": -3}, "seed"),
    ],
)
def test_config_errors_name_field(doc, path):
    with pytest.raises(ConfigError) as err:
        data.parse_config(doc)
    assert err.value.field_path == path
    assert str(err.value).startswith(path + ":")


def test_config_file_resolves_data_relative(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"data": "fx", "net": {"fixed_width": 2}}))
    cfg = data.load_config(tmp_path / "c.json")
    assert cfg.data == str((tmp_path / "fx").resolve())
    assert cfg.net_config().widths == (2,) * 5
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="<root>"):
        data.load_config(tmp_path / "bad.json")
