import csv

import numpy as np
import pytest

from spatialnav.cognitive_map import (
    CognitiveMap,
    VoxelMatch,
    cluster_matches,
    cosine_distance,
    cosine_similarity,
    validate_feature,
)
from spatialnav.errors import ContractViolation, PersistenceError
from spatialnav.geometry import (
    AgentPose,
    CameraIntrinsics,
    GridParams,
    VoxelIndex,
    base_to_camera_transform,
    voxel_to_world,
)

pytestmark = pytest.mark.unit

V = VoxelIndex(500, 500, 10)


def basis(i, dim=16):
    e = np.zeros(dim, dtype=np.float32)
    e[i] = 1.0
    return e


class TestCosine:
    def test_similarity_and_distance(self):
        assert cosine_similarity(basis(0), basis(0) * 3) == pytest.approx(1.0)
        assert cosine_distance(basis(0), basis(1)) == pytest.approx(1.0)
        # opposite vectors clamp to 1
        assert cosine_distance(basis(0), -basis(0)) == 1.0

    def test_validate_feature(self):
        with pytest.raises(ContractViolation):
            validate_feature(np.zeros(4))
        with pytest.raises(ContractViolation):
            validate_feature(np.array([1.0, np.nan]))
        with pytest.raises(ContractViolation):
            validate_feature(np.ones(4), dim=8)


class TestSurprise:
    def test_empty_neighbourhood(self):
        cmap = CognitiveMap()
        assert cmap.surprise(basis(0), V) == 1.0

    def test_identical_feature_is_unsurprising(self):
        cmap = CognitiveMap()
        cmap.insert_feature(basis(0), V)
        assert cmap.surprise(basis(0), V) == pytest.approx(0.0)

    def test_mean_over_neighbourhood(self):
        cmap = CognitiveMap()
        cmap.insert_feature(basis(0), V)
        cmap.insert_feature(basis(1), VoxelIndex(501, 500, 10))
        assert cmap.surprise(basis(0), V) == pytest.approx(0.5)

    def test_hop_limits_neighbourhood(self):
        cmap = CognitiveMap(hop=1)
        cmap.insert_feature(basis(0), VoxelIndex(503, 500, 10))
        assert cmap.surprise(basis(0), V) == 1.0


class TestInsert:
    def test_admission_is_strictly_above_tau(self):
        cmap = CognitiveMap(tau=0.5)
        cmap.insert_feature(basis(0), V)
        cmap.insert_feature(basis(1), V)
        # mean distance of basis(0) + basis(1) to the two is exactly 1 - cos(45deg)
        f = basis(0) + basis(1)
        expected = 1.0 - np.sqrt(0.5)
        assert cmap.surprise(f, V) == pytest.approx(expected)
        assert cmap.insert_feature(f, V) == (False, False)
        assert len(cmap) == 2

    def test_capacity_evicts_oldest_of_equal_surprise(self):
        cmap = CognitiveMap(buffer_capacity=10)
        results = [cmap.insert_feature(basis(i), V) for i in range(11)]
        assert all(inserted for inserted, _ in results)
        assert [evicted for _, evicted in results] == [False] * 10 + [True]
        buf = cmap.cells[V]
        assert len(buf) == 10
        assert not any(np.array_equal(entry.feature, basis(0)) for entry in buf)

    def test_eviction_prefers_lowest_surprise(self):
        cmap = CognitiveMap(buffer_capacity=2, tau=0.1)
        cmap.insert_feature(basis(0), V)                    # surprise 1.0
        cmap.insert_feature(basis(0) + 0.9 * basis(1), V)   # lower surprise
        cmap.insert_feature(basis(2), V)
        kept = [entry.feature for entry in cmap.cells[V]]
        assert any(np.array_equal(f, basis(0)) for f in kept)
        assert any(np.array_equal(f, basis(2)) for f in kept)

    @pytest.mark.slow
    def test_capacity_never_exceeded(self):
        rng = np.random.default_rng(2)
        cmap = CognitiveMap(buffer_capacity=10, tau=0.0)
        for _ in range(100_000):
            v = VoxelIndex(500 + int(rng.integers(0, 4)), 500, 10 + int(rng.integers(0, 4)))
            cmap.insert_feature(rng.normal(size=8), v)
            assert len(cmap.cells[v]) <= 10
        assert all(len(buf) <= 10 for buf in cmap.cells.values())

    def test_feature_dimension_is_fixed_by_first_insert(self):
        cmap = CognitiveMap()
        cmap.insert_feature(basis(0, dim=8), V)
        with pytest.raises(ContractViolation):
            cmap.insert_feature(basis(0, dim=16), V)


class TestIntegrate:
    k = CameraIntrinsics.from_fov(64, 48, 87)
    t_base_cam = base_to_camera_transform(1.5)
    stride = 8

    def view(self, feature):
        rows, cols = self.k.height // self.stride, self.k.width // self.stride
        patches = np.tile(feature, (rows, cols, 1))
        depth = np.full((self.k.height, self.k.width), 2.0)
        return patches, depth

    def test_second_pass_inserts_nothing(self):
        cmap = CognitiveMap()
        patches, depth = self.view(basis(3))
        pose = AgentPose(0.0, 0.0, 0.0)
        first = cmap.integrate(patches, depth, pose, self.k, self.t_base_cam, self.stride)
        second = cmap.integrate(patches, depth, pose, self.k, self.t_base_cam, self.stride)
        assert first.inserted >= 1
        assert first.inserted + first.rejected == 48
        assert second.inserted == 0
        assert second.rejected == 48

    def test_points_land_in_front_of_agent(self):
        cmap = CognitiveMap()
        patches, depth = self.view(basis(3))
        cmap.integrate(patches, depth, AgentPose(0.0, 0.0, 0.0), self.k, self.t_base_cam, self.stride)
        for vox in cmap.cells:
            x, _, z = voxel_to_world(vox, cmap.grid)
            assert x == pytest.approx(2.0, abs=0.1)
            assert 0.0 <= z <= 3.0

    def test_invalid_depth_counted(self):
        cmap = CognitiveMap()
        patches, depth = self.view(basis(3))
        depth[:] = np.nan
        stats = cmap.integrate(patches, depth, AgentPose(0.0, 0.0, 0.0), self.k, self.t_base_cam, self.stride)
        assert stats.invalid_depth == 48
        assert stats.inserted == 0
        assert cmap.is_empty()

    def test_out_of_bounds_counted(self):
        cmap = CognitiveMap(grid=GridParams(delta=0.1, g=20))
        patches, depth = self.view(basis(3))
        stats = cmap.integrate(patches, depth, AgentPose(0.0, 0.0, 0.0), self.k, self.t_base_cam, self.stride)
        assert stats.out_of_bounds == 48

    def test_shape_mismatch(self):
        cmap = CognitiveMap()
        patches, depth = self.view(basis(3))
        with pytest.raises(ContractViolation):
            cmap.integrate(patches, depth[:10], AgentPose(0.0, 0.0, 0.0), self.k, self.t_base_cam, self.stride)
        with pytest.raises(ContractViolation):
            cmap.integrate(patches[:2], depth, AgentPose(0.0, 0.0, 0.0), self.k, self.t_base_cam, self.stride)


class TestQuery:
    def test_equal_similarity_ordered_by_voxel(self):
        cmap = CognitiveMap()
        a, b = VoxelIndex(510, 500, 3), VoxelIndex(500, 500, 3)
        cmap.insert_feature(basis(0), a)
        cmap.insert_feature(basis(1), b)
        q = (basis(0) + basis(1)) / np.sqrt(2.0)
        matches = cmap.query_topk(q, k=2)
        assert [m.voxel for m in matches] == [b, a]
        assert [m.similarity for m in matches] == pytest.approx([0.7071, 0.7071], abs=1e-4)

    def test_empty_map(self):
        assert CognitiveMap().query_topk(basis(0), k=5) == []

    def test_bad_k(self):
        with pytest.raises(ContractViolation):
            CognitiveMap().query_topk(basis(0), k=0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        cmap = CognitiveMap(tau=0.0, buffer_capacity=4)
        for _ in range(300):
            v = VoxelIndex(*(int(c) for c in rng.integers(495, 505, size=3)))
            cmap.insert_feature(rng.normal(size=12), v)
        for _ in range(10):
            q = rng.normal(size=12)
            best = {
                vox: max(cosine_similarity(entry.feature, q) for entry in buf)
                for vox, buf in cmap.cells.items()
            }
            expected = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
            got = cmap.query_topk(q, k=10)
            assert [m.voxel for m in got] == [vox for vox, _ in expected]
            assert [m.similarity for m in got] == pytest.approx([s for _, s in expected])

    @pytest.mark.slow
    def test_matches_brute_force_on_many_maps(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            cmap = CognitiveMap(tau=0.0, buffer_capacity=4, hop=0)
            for _ in range(int(rng.integers(1, 10_001))):
                v = VoxelIndex(*(int(c) for c in rng.integers(480, 520, size=3)))
                cmap.insert_feature(rng.normal(size=16), v)
            voxels = list(cmap.cells)
            owner = np.repeat(np.arange(len(voxels)), [len(cmap.cells[v]) for v in voxels])
            feats = np.stack([entry.feature for v in voxels for entry in cmap.cells[v]]).astype(np.float64)
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            q = rng.normal(size=16)
            sims = feats @ (q / np.linalg.norm(q))
            best = np.full(len(voxels), -np.inf)
            np.maximum.at(best, owner, sims)
            k = int(rng.integers(1, 21))
            expected = sorted(zip(voxels, best), key=lambda kv: (-kv[1], kv[0]))[:k]
            got = cmap.query_topk(q, k=k)
            assert len(got) == len(expected)
            assert len({m.voxel for m in got}) == len(got)
            scores = dict(zip(voxels, best))
            # float32 storage: ranks may only swap between voxels that tie to 1e-6
            assert [scores[m.voxel] for m in got] == pytest.approx([s for _, s in expected], abs=1e-6)
            assert [m.similarity for m in got] == pytest.approx([s for _, s in expected], abs=1e-6)


class TestPersistence:
    def make_map(self):
        rng = np.random.default_rng(9)
        cmap = CognitiveMap(tau=0.2, buffer_capacity=3)
        for _ in range(100):
            v = VoxelIndex(*(int(c) for c in rng.integers(498, 503, size=3)))
            cmap.insert_feature(rng.normal(size=8), v)
        return cmap

    def test_bscm_round_trip(self):
        cmap = self.make_map()
        loaded = CognitiveMap.from_bytes(cmap.to_bytes())
        assert loaded.equals(cmap)
        assert len(loaded) == len(cmap)

    def test_round_trip_continues_ticks(self):
        cmap = self.make_map()
        loaded = CognitiveMap.from_bytes(cmap.to_bytes())
        v = VoxelIndex(700, 700, 0)
        cmap.insert_feature(basis(0, dim=8), v)
        loaded.insert_feature(basis(0, dim=8), v)
        assert loaded.equals(cmap)

    def test_empty_map_round_trip(self):
        loaded = CognitiveMap.from_bytes(CognitiveMap().to_bytes())
        assert loaded.is_empty()

    def test_truncated(self):
        data = self.make_map().to_bytes()
        with pytest.raises(PersistenceError):
            CognitiveMap.from_bytes(data[:-3])

    def test_bad_magic(self):
        data = self.make_map().to_bytes()
        with pytest.raises(PersistenceError):
            CognitiveMap.from_bytes(b"XXXX" + data[4:])

    def test_export_csv(self, tmp_path):
        cmap = self.make_map()
        path = tmp_path / "voxels.csv"
        cmap.export_csv(str(path))
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == cmap.voxel_count
        assert sum(int(r["count"]) for r in rows) == len(cmap)


class TestClusterMatches:
    def test_adjacent_voxels_form_one_cluster(self):
        matches = [VoxelMatch(VoxelIndex(510, 500, 5), 0.9), VoxelMatch(VoxelIndex(511, 500, 5), 0.8)]
        [centre] = cluster_matches(matches)
        assert centre.size == 2
        assert centre.score == pytest.approx(0.9)
        xa = voxel_to_world((510, 500, 5), GridParams())[0]
        xb = voxel_to_world((511, 500, 5), GridParams())[0]
        assert centre.position[0] == pytest.approx((0.9 * xa + 0.8 * xb) / 1.7)

    def test_distant_voxels_form_two_clusters(self):
        matches = [VoxelMatch(VoxelIndex(510, 500, 5), 0.8), VoxelMatch(VoxelIndex(560, 500, 5), 0.9)]
        centres = cluster_matches(matches)
        assert len(centres) == 2
        assert [c.score for c in centres] == pytest.approx([0.9, 0.8])

    def test_chebyshev_reach(self):
        # diagonal offset of 3 in every axis is within eps=3 under the Chebyshev metric
        matches = [VoxelMatch(VoxelIndex(500, 500, 5), 0.5), VoxelMatch(VoxelIndex(503, 503, 8), 0.5)]
        assert len(cluster_matches(matches, eps=3)) == 1

    def test_noise_dropped_with_min_pts(self):
        matches = [VoxelMatch(VoxelIndex(500, 500, 5), 0.5), VoxelMatch(VoxelIndex(560, 500, 5), 0.5)]
        assert cluster_matches(matches, min_pts=2) == []

    def test_empty(self):
        assert cluster_matches([]) == []
