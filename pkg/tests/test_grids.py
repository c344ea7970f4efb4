import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairseg.errors import GridFormatError, LabelRangeError, ShapeError
from pairseg.grids import (
    MetricAccumulator,
    dice_jaccard,
    from_one_hot,
    one_hot,
    read_grid,
    write_grid,
)


class TestOneHot:
    def test_round_trip(self):
        labels = np.array([[0, 1], [2, 1]])
        oh = one_hot(labels, 3)
        assert oh.shape == (2, 2, 3)
        assert oh.sum() == 4
        assert (oh.sum(axis=-1) == 1).all()
        assert (from_one_hot(oh) == labels).all()

    def test_label_out_of_range(self):
        with pytest.raises(LabelRangeError):
            one_hot(np.array([[0, 3]]), 3)
        with pytest.raises(LabelRangeError):
            one_hot(np.array([[-1, 0]]), 3)

    def test_non_integer_rejected(self):
        with pytest.raises(ShapeError):
            one_hot(np.array([[0.0, 1.0]]), 2)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            one_hot(np.array([0, 1]), 2)


class TestDiceJaccard:
    def test_perfect_prediction(self):
        labels = np.array([[0, 1], [1, 2]])
        m = dice_jaccard(labels, labels, 3)
        assert m.mean_dice == 1.0
        assert m.mean_jac == 1.0
        assert (m.per_class_dice == 1.0).all()

    def test_hand_computed_overlap(self):
        # class 1: pred 2 pixels, ref 3 pixels, 2 shared
        ref = np.array([[1, 1, 1, 0]])
        pred = np.array([[1, 1, 0, 0]])
        m = dice_jaccard(pred, ref, 2)
        assert m.per_class_dice[1] == pytest.approx(2 * 2 / (2 + 3))
        assert m.per_class_jac[1] == pytest.approx(2 / 3)
        # class 0: pred 2, ref 1, shared 1
        assert m.per_class_dice[0] == pytest.approx(2 * 1 / 3)
        assert m.per_class_jac[0] == pytest.approx(1 / 2)

    def test_class_absent_everywhere_scores_one(self):
        ref = np.array([[0, 1]])
        pred = np.array([[0, 1]])
        m = dice_jaccard(pred, ref, 3)
        assert m.per_class_dice[2] == 1.0
        assert m.per_class_jac[2] == 1.0

    def test_class_absent_from_reference_excluded_from_mean(self):
        ref = np.array([[0, 0]])
        pred = np.array([[0, 1]])
        m = dice_jaccard(pred, ref, 2)
        # class 1 predicted but not in reference: per-class score is 0 but the
        # mean only covers class 0
        assert m.per_class_dice[1] == 0.0
        assert m.mean_dice == pytest.approx(m.per_class_dice[0])
        assert m.mean_jac == pytest.approx(m.per_class_jac[0])

    def test_dice_jaccard_relation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ref = rng.integers(0, 3, size=(7, 5))
            pred = rng.integers(0, 3, size=(7, 5))
            m = dice_jaccard(pred, ref, 3)
            expected = 2 * m.per_class_jac / (1 + m.per_class_jac)
            assert np.allclose(m.per_class_dice, expected)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_jaccard(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


class TestMetricAccumulator:
    def test_aggregates_counts_not_image_means(self):
        # image A: class 1 has 1/1 pixels right; image B: 0/9 right.
        a_ref = np.array([[1]])
        a_pred = np.array([[1]])
        b_ref = np.ones((3, 3), dtype=int)
        b_pred = np.zeros((3, 3), dtype=int)
        acc = MetricAccumulator(2)
        acc.update(a_pred, a_ref)
        acc.update(b_pred, b_ref)
        m = acc.finalize()
        # pooled class-1 counts: inter 1, pred 1, ref 10
        assert m.per_class_dice[1] == pytest.approx(2 * 1 / (1 + 10))
        assert m.per_class_jac[1] == pytest.approx(1 / 10)

    def test_matches_single_image_metric(self):
        rng = np.random.default_rng(1)
        ref = rng.integers(0, 4, size=(6, 6))
        pred = rng.integers(0, 4, size=(6, 6))
        acc = MetricAccumulator(4)
        acc.update(pred, ref)
        single = dice_jaccard(pred, ref, 4)
        pooled = acc.finalize()
        assert np.allclose(pooled.per_class_dice, single.per_class_dice)
        assert pooled.mean_jac == pytest.approx(single.mean_jac)


class TestGridIO:
    @pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 4), (2, 2, 2, 2)])
    def test_round_trip_bit_exact(self, tmp_path, dtype, shape):
        rng = np.random.default_rng(7)
        if dtype == np.uint8:
            arr = rng.integers(0, 256, size=shape).astype(dtype)
        else:
            arr = rng.normal(size=shape).astype(dtype)
        path = tmp_path / "a.grid"
        write_grid(path, arr)
        back = read_grid(path)
        assert back.dtype == arr.dtype
        assert back.shape == arr.shape
        assert arr.tobytes() == back.tobytes()

    def test_write_rejects_bad_inputs(self, tmp_path):
        with pytest.raises(GridFormatError):
            write_grid(tmp_path / "x.grid", np.array(3.0))
        with pytest.raises(GridFormatError):
            write_grid(tmp_path / "x.grid", np.zeros((0, 3)))
        with pytest.raises(GridFormatError):
            write_grid(tmp_path / "x.grid", np.zeros((2, 2), dtype=np.int32))

    def test_read_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.grid"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(GridFormatError, match="magic"):
            read_grid(path)

    def test_read_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.grid"
        write_grid(path, np.zeros((4, 4), dtype=np.float64))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(GridFormatError, match="payload"):
            read_grid(path)

    def test_read_rejects_bad_version_and_dtype(self, tmp_path):
        path = tmp_path / "v.grid"
        write_grid(path, np.zeros(3, dtype=np.uint8))
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="version"):
            read_grid(path)
        blob[4] = 1
        blob[5] = 7
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="dtype"):
            read_grid(path)

    def test_read_rejects_zero_dims(self, tmp_path):
        import struct

        path = tmp_path / "zero.grid"
        path.write_bytes(b"JGRD" + struct.pack("<BBB", 1, 2, 0))
        with pytest.raises(GridFormatError, match="zero-dimensional"):
            read_grid(path)
        path.write_bytes(b"JGRD" + struct.pack("<BBB", 1, 2, 2) + struct.pack("<2I", 3, 0))
        with pytest.raises(GridFormatError, match="zero-size"):
            read_grid(path)

    @settings(max_examples=25, deadline=None)
    @given(
        shape=st.lists(st.integers(1, 6), min_size=1, max_size=3),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        rng = np.random.default_rng(seed)
        arr = rng.normal(size=tuple(shape))
        path = tmp_path_factory.mktemp("grids") / "p.grid"
        write_grid(path, arr)
        assert np.array_equal(read_grid(path), arr)
