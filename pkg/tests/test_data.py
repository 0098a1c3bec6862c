import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from spectralmamba.data import (HsiCube, LabelMap, Split, SplitSpec, extract_patch, extract_patches,
                                homogeneous_segments, make_split, normalize, slic_segment, synth_scene)
from spectralmamba.errors import ConfigError, FormatError, SplitError
from spectralmamba.formats import (CUBE_MAGIC, load_cube, load_labels, load_weights, save_class_map_ppm,
                                   save_cube, save_labels, save_weights)
from spectralmamba.model import ModelConfig, init_weights


def write_cube_file(path, h, w, l, values):
    header = json.dumps({"h": h, "w": w, "l": l, "dtype": "f32", "order": "band-last"}).encode()
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC + header + b"\n")
        fh.write(np.asarray(values, dtype="<f4").tobytes())


class TestContainers:
    def test_small_cube(self, tmp_path):
        write_cube_file(tmp_path / "c.spmc", 2, 2, 3, np.arange(12))
        cube = load_cube(tmp_path / "c.spmc")
        assert cube.shape == (2, 2, 3)
        assert cube.reflectance[1, 0].tolist() == [6, 7, 8]
        assert cube.as_float64().dtype == np.float64

    def test_short_payload(self, tmp_path):
        write_cube_file(tmp_path / "c.spmc", 2, 2, 3, np.arange(11))
        with pytest.raises(FormatError, match="should hold 12 values, found 11"):
            load_cube(tmp_path / "c.spmc")

    def test_error_names_byte_offset(self, tmp_path):
        (tmp_path / "bad.spmc").write_bytes(b"NOPE1\n{}\n")
        with pytest.raises(FormatError, match="byte offset 0"):
            load_cube(tmp_path / "bad.spmc")
        write_cube_file(tmp_path / "c.spmc", 1, 1, 2, [1.0])
        header_end = len(CUBE_MAGIC) + len(json.dumps({"h": 1, "w": 1, "l": 2, "dtype": "f32",
                                                       "order": "band-last"})) + 1
        with pytest.raises(FormatError, match=f"byte offset {header_end}"):
            load_cube(tmp_path / "c.spmc")

    def test_malformed_header(self, tmp_path):
        (tmp_path / "c.spmc").write_bytes(CUBE_MAGIC + b"{not json\n")
        with pytest.raises(FormatError):
            load_cube(tmp_path / "c.spmc")

    def test_houston_sized_cube(self, tmp_path):
        h, w, l = 349, 1905, 144
        path = tmp_path / "houston.spmc"
        write_cube_file(path, h, w, l, [])
        with open(path, "r+b") as fh:
            fh.truncate(path.stat().st_size + 4 * h * w * l)   # sparse zero payload
        cube = load_cube(path)
        assert cube.shape == (349, 1905, 144)

    def test_roundtrips(self, tmp_path):
        cube, labels = synth_scene(6, 5, 7, 3, seed=1)
        save_cube(tmp_path / "c.spmc", cube)
        save_labels(tmp_path / "l.spml", labels)
        back = load_cube(tmp_path / "c.spmc")
        assert np.array_equal(back.reflectance, cube.reflectance)
        assert back.band_wavelengths == pytest.approx(cube.band_wavelengths)
        assert np.array_equal(load_labels(tmp_path / "l.spml").labels, labels.labels)
        assert (tmp_path / "c.spmc").stat().st_size > 4 * 6 * 5 * 7

    def test_label_payload_mismatch(self, tmp_path):
        _, labels = synth_scene(4, 4, 5, 2, seed=0)
        save_labels(tmp_path / "l.spml", labels)
        raw = (tmp_path / "l.spml").read_bytes()
        (tmp_path / "l.spml").write_bytes(raw + b"\x00\x00")
        with pytest.raises(FormatError, match="should hold 16 values, found 17"):
            load_labels(tmp_path / "l.spml")

    def test_weights_roundtrip(self, tmp_path):
        cfg = ModelConfig(bands=12, pieces=3, classes=3, state_size=4, expand=2)
        w = init_weights(cfg, 3)
        save_weights(tmp_path / "w.spmw", w, cfg)
        back, back_cfg = load_weights(tmp_path / "w.spmw")
        assert back_cfg == cfg
        for name, t in w.named_parameters().items():
            assert np.array_equal(back.named_parameters()[name].data, t.data), name

    def test_weights_manifest_offsets(self, tmp_path):
        cfg = ModelConfig(bands=6, pieces=2, classes=2, state_size=2, expand=2, variant="pixelwise")
        w = init_weights(cfg, 0)
        save_weights(tmp_path / "w.spmw", w, cfg)
        raw = (tmp_path / "w.spmw").read_bytes()
        assert raw.startswith(b"SPMW1\n")
        header_line = raw[6:raw.index(b"\n", 6)]
        header = json.loads(header_line)
        payload = raw[6 + len(header_line) + 1:]
        assert header["dtype"] == "f64" and header["endian"] == "little"
        entry = next(e for e in header["tensors"] if e["name"] == "head.weight")
        count = int(np.prod(entry["shape"]))
        stored = np.frombuffer(payload[entry["offset"]:entry["offset"] + 8 * count], "<f8")
        assert np.array_equal(stored.reshape(entry["shape"]), w.head_weight.data)
        assert not any(e["name"].startswith("gssm") for e in header["tensors"])

    def test_truncated_weights(self, tmp_path):
        cfg = ModelConfig(bands=6, pieces=2, classes=2, state_size=2, expand=2)
        save_weights(tmp_path / "w.spmw", init_weights(cfg, 0), cfg)
        raw = (tmp_path / "w.spmw").read_bytes()
        (tmp_path / "w.spmw").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="byte offset"):
            load_weights(tmp_path / "w.spmw")

    def test_ppm(self, tmp_path):
        cmap = np.array([[0, 1, 2], [16, 17, 3]])
        save_class_map_ppm(tmp_path / "m.ppm", cmap)
        raw = (tmp_path / "m.ppm").read_bytes()
        head = b"P6\n3 2\n255\n"
        assert raw.startswith(head) and len(raw) == len(head) + 3 * 6
        rgb = np.frombuffer(raw[len(head):], np.uint8).reshape(2, 3, 3)
        assert rgb[0, 0].tolist() == [0, 0, 0] and rgb[1, 1].tolist() == [0, 0, 0]
        assert len({tuple(rgb[0, 1]), tuple(rgb[0, 2]), tuple(rgb[1, 0]), tuple(rgb[1, 2])}) == 4


class TestCubeTypes:
    def test_nonfinite_rejected(self):
        with pytest.raises(Exception):
            HsiCube(np.array([[[np.nan]]], dtype=np.float32))

    def test_labels(self):
        lm = LabelMap(np.array([[0, 2], [2, 5]], dtype=np.uint16))
        assert lm.present_classes() == [2, 5] and lm.num_classes == 5 and lm.count() == 3
        rows, cols, classes = lm.coordinates()
        assert rows.tolist() == [0, 1, 1] and cols.tolist() == [1, 0, 1] and classes.tolist() == [2, 2, 5]


class TestNormalize:
    def test_examples(self):
        cube = HsiCube(np.array([[[2, 7]], [[4, 7]]], dtype=np.float32))
        out = normalize(cube).reflectance
        assert out[:, 0, 0].tolist() == [0, 1]
        assert out[:, 0, 1].tolist() == [0, 0]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_idempotent(self, seed):
        raw = np.random.default_rng(seed).normal(scale=100, size=(4, 3, 5)).astype(np.float32)
        once = normalize(HsiCube(raw))
        assert once.reflectance.min() >= 0 and once.reflectance.max() <= 1
        assert np.array_equal(normalize(once).reflectance, once.reflectance)


class TestPatches:
    def cube(self):
        return HsiCube(np.arange(3 * 3 * 2, dtype=np.float32).reshape(3, 3, 2))

    def test_single_pixel(self):
        cube = self.cube()
        assert extract_patch(cube, 1, 2, 1)[:, 0, 0].tolist() == cube.reflectance[1, 2].tolist()

    def test_interior_is_plain_crop(self):
        cube = self.cube()
        patch = extract_patch(cube, 1, 1, 3)
        assert np.array_equal(patch, np.moveaxis(cube.reflectance, -1, 0))

    def test_corner_mirror(self):
        x = self.cube().reflectance[..., 0]
        patch = extract_patch(self.cube(), 0, 0, 3)[0]
        # mirror about the border pixel: index -1 reflects to 1
        want = np.array([[x[1, 1], x[1, 0], x[1, 1]],
                         [x[0, 1], x[0, 0], x[0, 1]],
                         [x[1, 1], x[1, 0], x[1, 1]]])
        assert np.array_equal(patch, want)

    def test_even_patch(self):
        with pytest.raises(ConfigError):
            extract_patch(self.cube(), 0, 0, 2)

    def test_batch_matches_single(self):
        cube, _ = synth_scene(7, 9, 4, 2, seed=2)
        rows, cols = np.array([0, 6, 3]), np.array([8, 0, 4])
        batch = extract_patches(cube, rows, cols, 5)
        for i in range(3):
            assert np.array_equal(batch[i], extract_patch(cube, rows[i], cols[i], 5))
        assert np.all(np.isfinite(batch))

    def test_one_pixel_wide_scene(self):
        cube = HsiCube(np.arange(3, dtype=np.float32).reshape(1, 3, 1))
        patch = extract_patch(cube, 0, 0, 3)
        assert np.all(np.isfinite(patch)) and patch.shape == (1, 3, 3)


class TestSynth:
    def test_noise_free_classes_identical(self):
        cube, labels = synth_scene(10, 10, 12, 3, noise_sigma=0.0, seed=4, illumination=None)
        for c in labels.present_classes():
            spectra = cube.reflectance[labels.labels == c]
            assert np.all(spectra == spectra[0])
            assert np.all(spectra.astype(np.float64).var(axis=0) == 0)

    def test_prototype_gap(self):
        for seed in range(10):
            cube, labels = synth_scene(8, 8, 8, 2, noise_sigma=0.0, seed=seed, illumination=None)
            a = cube.reflectance[labels.labels == 1][0]
            b = cube.reflectance[labels.labels == 2][0]
            assert np.max(np.abs(a - b)) >= 0.2 - 1e-6

    def test_reproducible(self):
        def digest(seed):
            cube, labels = synth_scene(seed=seed)
            return hashlib.sha256(cube.reflectance.tobytes() + labels.labels.tobytes()).hexdigest()
        assert digest(5) == digest(5) != digest(6)

    def test_all_labeled_all_classes(self):
        cube, labels = synth_scene(32, 32, 48, 16, seed=0)
        assert labels.count() == 32 * 32
        assert labels.present_classes() == list(range(1, 17))

    def test_class_limit(self):
        with pytest.raises(ConfigError):
            synth_scene(classes=17)

    def test_illumination_range(self):
        cube, labels = synth_scene(12, 12, 10, 2, noise_sigma=0.0, seed=3)
        base, _ = synth_scene(12, 12, 10, 2, noise_sigma=0.0, seed=3, illumination=None)
        # same rng stream up to the gain draw, so prototypes match
        ratio = cube.reflectance[..., 0] / base.reflectance[..., 0]
        assert ratio.min() >= 0.8 - 1e-6 and ratio.max() <= 1.2 + 1e-6


class TestSlic:
    def test_two_flat_halves(self):
        raw = np.zeros((8, 12, 4), dtype=np.float32)
        raw[:, 6:] = 1.0
        seg = slic_segment(HsiCube(raw), SplitSpec(budget=1, superpixels=2))
        assert len(np.unique(seg)) == 2
        assert len(np.unique(seg[:, :6])) == 1 and len(np.unique(seg[:, 6:])) == 1

    def test_one_segment_per_pixel(self):
        ramp = np.linspace(0, 1, 16 * 16, dtype=np.float32).reshape(16, 16, 1)
        seg = slic_segment(HsiCube(np.repeat(ramp, 3, axis=-1)), SplitSpec(budget=1, superpixels=256))
        assert len(np.unique(seg)) >= 0.9 * 256

    def test_partition_and_connectivity(self):
        cube, _ = synth_scene(24, 20, 10, 4, seed=7)
        seg = slic_segment(cube, SplitSpec(budget=1, superpixels=12))
        assert seg.shape == (24, 20) and seg.min() == 0
        ids = np.unique(seg)
        assert np.array_equal(ids, np.arange(len(ids)))
        for s in ids:
            _, parts = ndimage.label(seg == s)
            assert parts == 1, s

    def test_too_many_segments(self):
        with pytest.raises(ConfigError):
            slic_segment(HsiCube(np.zeros((2, 2, 1), np.float32)), SplitSpec(budget=1, superpixels=5))

    def test_deterministic(self):
        cube, _ = synth_scene(16, 16, 6, 3, seed=8)
        spec = SplitSpec(budget=1, superpixels=8)
        assert np.array_equal(slic_segment(cube, spec), slic_segment(cube, spec))


@pytest.fixture(scope="module")
def seven_class_scene():
    cube, labels = synth_scene(40, 40, 16, 7, seed=9)
    return cube, labels, slic_segment(cube, SplitSpec(budget=80, seed=0))


class TestSplit:
    @pytest.fixture
    def scene(self, seven_class_scene):
        return seven_class_scene

    def test_exact_budget_seven_classes(self, scene):
        _, labels, seg = scene
        split = make_split(labels, seg, SplitSpec(budget=80, seed=0))
        assert all(n_train == 80 for n_train, _ in split.counts().values())
        assert split.train.count() == 560

    def test_disjoint_and_covering(self, scene):
        _, labels, seg = scene
        train, test = make_split(labels, seg, SplitSpec(budget=80, seed=1))
        assert not np.any((train.labels > 0) & (test.labels > 0))
        merged = np.where(train.labels > 0, train.labels, test.labels)
        assert np.array_equal(merged, labels.labels)

    def test_seed_replay(self, scene):
        _, labels, seg = scene
        a = make_split(labels, seg, SplitSpec(budget=80, seed=3))
        b = make_split(labels, seg, SplitSpec(budget=80, seed=3))
        c = make_split(labels, seg, SplitSpec(budget=80, seed=4))
        assert a.to_json() == b.to_json()
        assert not np.array_equal(a.train.labels, c.train.labels)
        assert a.counts() == {k: (80, v[1]) for k, v in c.counts().items()}

    def test_json_roundtrip(self, scene):
        _, labels, seg = scene
        split = make_split(labels, seg, SplitSpec(budget=20, seed=0))
        back = Split.from_json(json.loads(json.dumps(split.to_json())))
        assert np.array_equal(back.train.labels, split.train.labels)
        assert np.array_equal(back.test.labels, split.test.labels)
        assert back.seed == 0 and back.budget == 20

    def test_budget_one_one_segment_each(self):
        labels = LabelMap(np.array([[1, 1, 2, 2]], dtype=np.uint16))
        train, test = make_split(labels, np.array([[0, 0, 1, 1]]), SplitSpec(budget=1))
        assert sorted(train.labels[train.labels > 0].tolist()) == [1, 2]
        assert test.count() == 2

    def test_prefers_homogeneous_segments(self):
        labels = LabelMap(np.array([[1, 1, 1, 2, 1, 2, 2, 2]], dtype=np.uint16))
        seg = np.array([[0, 0, 0, 1, 1, 2, 2, 2]])
        assert homogeneous_segments(labels, seg) == {1: [0], 2: [2]}
        for seed in range(5):
            train, _ = make_split(labels, seg, SplitSpec(budget=3, seed=seed))
            assert train.labels[0, :3].tolist() == [1, 1, 1]
            assert train.labels[0, 5:].tolist() == [2, 2, 2]

    def test_falls_back_to_mixed_segments(self):
        labels = LabelMap(np.array([[1, 2, 1, 2, 1, 2]], dtype=np.uint16))
        seg = np.array([[0, 0, 1, 1, 2, 2]])
        train, _ = make_split(labels, seg, SplitSpec(budget=2, seed=0))
        assert np.count_nonzero(train.labels == 1) == 2 and np.count_nonzero(train.labels == 2) == 2

    def test_infeasible_names_class(self):
        labels = LabelMap(np.array([[1, 1, 1, 2]], dtype=np.uint16))
        with pytest.raises(SplitError, match="class 2"):
            make_split(labels, np.zeros((1, 4), int), SplitSpec(budget=2))

    def test_unlabeled_pixels_stay_out(self):
        labels = LabelMap(np.array([[0, 1, 1, 0, 2, 2]], dtype=np.uint16))
        train, test = make_split(labels, np.array([[0, 0, 0, 1, 1, 1]]), SplitSpec(budget=1))
        assert train.labels[0, [0, 3]].tolist() == [0, 0] and test.labels[0, [0, 3]].tolist() == [0, 0]
