import itertools
import math

import numpy as np
import pytest

from spatialnav.errors import ContractViolation, PersistenceError
from spatialnav.landmark_memory import Landmark, LandmarkStore, fuse

pytestmark = pytest.mark.unit


def lm(category, x, conf, description="", y=0.0, z=0.0):
    return Landmark(category, (x, y, z), conf, description)


class TestFuse:
    def test_weighted_position_and_mean_confidence(self):
        out = fuse(lm("sofa", 1.0, 0.8, "new sofa"), [lm("sofa", 0.0, 0.6, "old sofa")])
        assert out.position == pytest.approx((0.5714, 0.0, 0.0), abs=1e-4)
        assert out.confidence == pytest.approx(0.7)
        assert out.description == "new sofa"

    def test_self_fusion_is_identity(self):
        a = lm("chair", 1.5, 0.9, "a chair", y=-2.0, z=0.4)
        out = fuse(a, [a])
        assert out.position == pytest.approx(a.position)
        assert out.confidence == pytest.approx(a.confidence)

    def test_equal_confidences_give_midpoint(self):
        out = fuse(lm("sofa", 2.0, 0.5), [lm("sofa", 0.0, 0.5)])
        assert out.position == pytest.approx((1.0, 0.0, 0.0))
        assert out.confidence == pytest.approx(0.5)

    def test_newest_description_wins_tie(self):
        out = fuse(lm("bed", 0.1, 0.7, "newer"), [lm("bed", 0.0, 0.7, "older")])
        assert out.description == "newer"

    def test_empty_overlap_rejected(self):
        with pytest.raises(ContractViolation):
            fuse(lm("sofa", 0.0, 0.9), [])

    def test_category_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            fuse(lm("sofa", 0.0, 0.9), [lm("table", 0.0, 0.9)])

    def test_random_fusions_stay_in_hull(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            n = int(rng.integers(1, 5))
            members = [lm("tv", rng.uniform(-3, 3), rng.uniform(0.55, 1.0), y=rng.uniform(-3, 3)) for _ in range(n + 1)]
            out = fuse(members[-1], members[:-1])
            xs = [m.position[0] for m in members]
            ys = [m.position[1] for m in members]
            assert min(xs) - 1e-9 <= out.position[0] <= max(xs) + 1e-9
            assert min(ys) - 1e-9 <= out.position[1] <= max(ys) + 1e-9
            assert out.confidence == pytest.approx(sum(m.confidence for m in members) / len(members))
            again = fuse(out, [out])
            assert again.position == pytest.approx(out.position)
            assert again.confidence == pytest.approx(out.confidence)


class TestLandmarkValidation:
    def test_empty_category(self):
        with pytest.raises(ContractViolation):
            lm("  ", 0.0, 0.9)

    def test_confidence_range(self):
        with pytest.raises(ContractViolation):
            lm("sofa", 0.0, 1.2)


class TestLandmarkStore:
    def test_distant_same_category_kept(self):
        store = LandmarkStore()
        assert store.insert(lm("sofa", 0.0, 0.9)) == "inserted"
        assert store.insert(lm("sofa", 1.5, 0.9)) == "inserted"
        assert len(store) == 2

    def test_different_categories_never_fuse(self):
        store = LandmarkStore()
        store.insert(lm("sofa", 0.0, 0.9))
        store.insert(lm("table", 0.0, 0.9))
        assert len(store) == 2

    def test_nearby_same_category_fused(self):
        store = LandmarkStore()
        store.insert(lm("sofa", 0.0, 0.6))
        assert store.insert(lm("sofa", 0.5, 0.8)) == "fused"
        [only] = store.landmarks
        assert only.position[0] == pytest.approx(0.5 * 0.8 / 1.4)
        assert only.confidence == pytest.approx(0.7)
        assert store.stats.as_dict() == {"inserted": 1, "fused": 1, "rejected": 0}

    def test_below_floor_rejected(self):
        store = LandmarkStore(confidence_floor=0.55)
        assert store.insert(lm("sofa", 0.0, 0.5)) == "rejected"
        assert len(store) == 0
        assert store.stats.rejected == 1

    def test_cascaded_fusion_restores_invariant(self):
        store = LandmarkStore(overlap_distance=1.0)
        store.insert(lm("sofa", 0.5, 0.9))
        store.insert(lm("sofa", 0.0, 0.9, y=0.95))
        # overlaps only the first; the fused centroid at the origin then reaches the second
        assert store.insert(lm("sofa", -0.5, 0.9)) == "fused"
        assert len(store) == 1
        assert store.stats.fused == 1

    def test_query_order_and_case(self):
        store = LandmarkStore()
        for x, conf in [(0.0, 0.6), (5.0, 0.9), (10.0, 0.7)]:
            store.insert(lm("Sofa", x, conf))
        confs = [m.confidence for m in store.query_category("sofa")]
        assert confs == [0.9, 0.7, 0.6]
        assert store.query_category("piano") == []

    def test_query_ties_keep_insertion_order(self):
        store = LandmarkStore()
        store.insert(lm("chair", 0.0, 0.8, "first"))
        store.insert(lm("chair", 5.0, 0.8, "second"))
        assert [m.description for m in store.query_category("chair")] == ["first", "second"]

    def test_invariant_after_random_inserts(self):
        rng = np.random.default_rng(17)
        store = LandmarkStore(overlap_distance=1.0)
        for _ in range(300):
            store.insert(lm(str(rng.choice(["sofa", "bed", "tv"])), rng.uniform(0, 8),
                            rng.uniform(0.4, 1.0), y=rng.uniform(0, 8)))
        for a, b in itertools.combinations(store.landmarks, 2):
            if a.key == b.key:
                assert a.distance_to(b) > 1.0

    def test_order_insensitive_without_overlaps(self):
        items = [lm("sofa", 0.0, 0.9), lm("sofa", 3.0, 0.8), lm("bed", 0.0, 0.7), lm("tv", 6.0, 0.6)]
        a, b = LandmarkStore(), LandmarkStore()
        for item in items:
            a.insert(item)
        for item in reversed(items):
            b.insert(item)
        assert set(a.landmarks) == set(b.landmarks)

    def test_categories_and_nearest(self):
        store = LandmarkStore()
        store.insert(lm("sofa", 0.0, 0.9))
        store.insert(lm("bed", 4.0, 0.9))
        assert store.categories() == ["sofa", "bed"]
        assert store.nearest((3.5, 0.0, 0.0)).category == "bed"
        assert store.nearest((2.0, 0.0, 0.0), max_distance=1.0) is None

    def test_json_round_trip(self, tmp_path):
        store = LandmarkStore()
        store.insert(lm("sofa", 1.0 / 3.0, 0.9, "grey fabric sofa in the living room", y=math.pi))
        store.insert(lm("bed", 4.0, 0.8))
        path = str(tmp_path / "landmarks.json")
        store.save_json(path)
        loaded = LandmarkStore.load_json(path)
        assert loaded.landmarks == store.landmarks
        assert loaded.overlap_distance == store.overlap_distance

    def test_load_rejects_bad_version(self, tmp_path):
        path = tmp_path / "landmarks.json"
        path.write_text('{"version": 99, "landmarks": []}')
        with pytest.raises(PersistenceError):
            LandmarkStore.load_json(str(path))

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(PersistenceError):
            LandmarkStore.load_json(str(tmp_path / "missing.json"))
