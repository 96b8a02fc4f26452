import math
import unittest

import numpy as np

from src.data_classes import ArchConfig, OrientedBox, VoxelSpec
from src.detector import (REG_CHANNELS, Detector, MaskedBackbone, VoxelEncoder, VoxelFeatures, bev_project, bev_unproject,
                          box_cell, decode, encode_voxels, gaussian_radius, make_detection_targets,
                          make_heatmap_targets, pool_mask, stack_grids, voxelize)
from src.errors import ShapeMismatchError
from src.tensor import Tensor, no_grad

SMALL_VOXEL = VoxelSpec(origin=(-4.0, -4.0, -2.0), cell=(0.5, 0.5, 0.75), shape=(16, 16, 8))
SMALL_ARCH = ArchConfig(encoder_channels=4, backbone_channels=(4, 8), bev_channels=8, s2d_width=8,
                        pcr_channels=4, head_channels=8)


def _cloud(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return np.c_[rng.uniform(-3.9, 3.9, size=(n, 2)), rng.uniform(-1.9, 3.9, n), rng.uniform(0, 1, n)]


### Unit Test Class for the Detector ###

class TestDetector(unittest.TestCase):
    """
    Unit tests for voxelization, the masked backbone, BEV projection, the center heads,
    heatmap targets and decoding.
    """

    ### Voxelization ###

    def test_voxelize_empty_cloud(self):
        """An empty cloud gives an all-zero grid."""
        grid = voxelize(np.zeros((0, 4)), SMALL_VOXEL)
        self.assertEqual(grid.inputs.shape, (5, 8, 16, 16))
        self.assertEqual(grid.mask.sum(), 0)
        self.assertEqual(np.abs(grid.inputs).sum(), 0)

    def test_voxelize_center_point_has_zero_offset(self):
        """A point at a voxel center has zero mean offset and count 1/10."""
        spec = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(4, 4, 4))
        grid = voxelize([[1.5, 2.5, 0.5, 0.7]], spec)
        np.testing.assert_allclose(grid.inputs[:3, 0, 2, 1], 0.0)
        self.assertAlmostEqual(grid.inputs[3, 0, 2, 1], 0.7)
        self.assertAlmostEqual(grid.inputs[4, 0, 2, 1], 0.1)
        self.assertEqual(grid.mask.sum(), 1)

    def test_voxelize_mask_matches_brute_force(self):
        """The occupancy mask equals per-point floor indexing."""
        cloud = _cloud()
        grid = voxelize(cloud, SMALL_VOXEL)
        expected = np.zeros((8, 16, 16))
        for x, y, z, _ in cloud:
            ix, iy, iz = (int(math.floor((v - o) / c)) for v, o, c in zip((x, y, z), SMALL_VOXEL.origin, SMALL_VOXEL.cell))
            if 0 <= ix < 16 and 0 <= iy < 16 and 0 <= iz < 8:
                expected[iz, iy, ix] = 1.0
        np.testing.assert_array_equal(grid.mask, expected)

    def test_voxel_encoder_matches_per_voxel_oracle(self):
        """Occupied voxels hold gelu(W x + b) of their statistics; empty voxels are exactly zero."""
        encoder = VoxelEncoder(4, rng=np.random.default_rng(0))
        encoder.proj.bias.data = np.array([0.3, -0.2, 0.5, 1.0])
        with no_grad():
            feats = encode_voxels(_cloud(), SMALL_VOXEL, encoder)
        grid = voxelize(_cloud(), SMALL_VOXEL)
        nz, ny, nx = SMALL_VOXEL.grid_shape
        self.assertEqual(feats.features.shape, (1, 4, nz, ny, nx))
        np.testing.assert_array_equal(feats.mask[0, 0], grid.mask)
        w, b = encoder.proj.weight.data[:, :, 0, 0, 0], encoder.proj.bias.data
        out = feats.features.data[0]
        self.assertEqual(np.abs(out[:, grid.mask == 0]).sum(), 0.0)
        for z, y, x in zip(*np.nonzero(grid.mask)):
            pre = w @ grid.inputs[:, z, y, x] + b
            expected = [v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in pre]
            np.testing.assert_allclose(out[:, z, y, x], expected, atol=1e-12)

    def test_stack_grids_rejects_mixed_shapes(self):
        """Grids over different specs cannot be batched."""
        other = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(4, 4, 4))
        with self.assertRaises(ShapeMismatchError):
            stack_grids([voxelize(_cloud(), SMALL_VOXEL), voxelize(_cloud(), other)])

    ### Backbone ###

    def test_backbone_empty_input_is_zero(self):
        """With no occupied voxels every backbone output is zero."""
        backbone = MaskedBackbone(4, (4, 8))
        feat = Tensor(np.zeros((1, 4, 8, 16, 16)))
        out, mask = backbone(VoxelFeatures(features=feat, mask=np.zeros((1, 1, 8, 16, 16))))
        self.assertEqual(out.shape, (1, 8, 2, 4, 4))
        self.assertEqual(np.abs(out.data).sum(), 0.0)
        self.assertEqual(mask.sum(), 0.0)

    def test_backbone_support_stays_within_pooled_mask(self):
        """A single occupied voxel activates only the cells its dilated mask covers."""
        backbone = MaskedBackbone(4, (4, 8))
        mask = np.zeros((1, 1, 8, 16, 16))
        mask[0, 0, 3, 5, 9] = 1.0
        feat = Tensor(np.random.default_rng(0).normal(size=(1, 4, 8, 16, 16)) * mask)
        out, pooled = backbone(VoxelFeatures(features=feat, mask=mask))
        expected = pool_mask(pool_mask(mask))
        np.testing.assert_array_equal(pooled, expected)
        self.assertEqual(np.abs(out.data * (1 - expected)).sum(), 0.0)

    def test_pool_mask_is_max_pool(self):
        """A lone occupied cell reaches the 3x3 s2 p1 output cells that see it."""
        mask = np.zeros((1, 1, 4, 4))
        mask[0, 0, 2, 2] = 1.0
        np.testing.assert_array_equal(pool_mask(mask)[0, 0], [[0, 0], [0, 1]])

    ### BEV projection ###

    def test_bev_project_folds_depth(self):
        """[C=4, D=2, H=8, W=8] folds to [8, 8, 8] with channel-major order."""
        x = np.random.default_rng(1).normal(size=(4, 2, 8, 8))
        out = bev_project(Tensor(x)).data
        self.assertEqual(out.shape, (8, 8, 8))
        np.testing.assert_array_equal(out[3], x[1, 1])

    def test_bev_unproject_inverts_project(self):
        """Unprojecting a batched BEV map restores the 3D layout."""
        x = np.random.default_rng(2).normal(size=(2, 4, 2, 4, 4))
        np.testing.assert_array_equal(bev_unproject(bev_project(Tensor(x)), 2).data, x)
        with self.assertRaises(ShapeMismatchError):
            bev_unproject(Tensor(np.zeros((1, 5, 4, 4))), 2)

    ### Heads and forward ###

    def test_heads_start_at_prior(self):
        """Zero features give the focal prior sigmoid(-2.19) everywhere."""
        model = Detector(SMALL_ARCH, SMALL_VOXEL)
        heatmap, regression = model.heads(Tensor(np.zeros((1, 8, 4, 4))))
        np.testing.assert_allclose(heatmap.data, 1.0 / (1.0 + math.exp(2.19)))
        self.assertEqual(regression.shape, (1, REG_CHANNELS, 4, 4))

    def test_forward_shapes(self):
        """A dense-teacher style model with S2D and PCR returns every map at the expected shape."""
        model = Detector(SMALL_ARCH, SMALL_VOXEL, with_s2d=True, with_pcr=True)
        inputs, mask = stack_grids([voxelize(_cloud(), SMALL_VOXEL)])
        with no_grad():
            out = model(inputs, mask)
        self.assertEqual(out.heatmap.shape, (1, 3, 4, 4))
        self.assertEqual(out.f_c.shape, (1, 8, 4, 4))
        self.assertEqual(out.f_b.shape, (1, 8, 4, 4))
        self.assertEqual(out.f_a.shape, (1, 8, 4, 4))
        self.assertEqual(out.pcr.by_factor(4).mask.shape, (1, 1, 2, 4, 4))
        self.assertEqual(out.pcr.by_factor(2).offset.shape, (1, 3, 4, 8, 8))

    def test_forward_empty_cloud_gives_zero_bev(self):
        """No points means an all-zero F_c."""
        model = Detector(SMALL_ARCH, SMALL_VOXEL)
        inputs, mask = stack_grids([voxelize(np.zeros((0, 4)), SMALL_VOXEL)])
        with no_grad():
            out = model(inputs, mask)
        self.assertEqual(np.abs(out.f_c.data).sum(), 0.0)

    def test_trunk_init_independent_of_branches(self):
        """Attaching S2D and PCR does not change the trunk's initial weights."""
        plain = Detector(SMALL_ARCH, SMALL_VOXEL).state_dict()
        full = Detector(SMALL_ARCH, SMALL_VOXEL, with_s2d=True, with_pcr=True).state_dict()
        for name, value in plain.items():
            np.testing.assert_array_equal(full[name], value)

    def test_grid_not_divisible_by_stride(self):
        """A voxel grid the backbone cannot halve twice is rejected."""
        with self.assertRaises(ShapeMismatchError):
            Detector(SMALL_ARCH, VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(10, 16, 8)))

    ### Targets ###

    def test_gaussian_radius_grows_with_size(self):
        """Larger boxes tolerate larger center errors."""
        self.assertGreater(gaussian_radius(10, 10), gaussian_radius(4, 4))
        self.assertGreater(gaussian_radius(4, 4), 0.0)

    def test_heatmap_peak_is_one(self):
        """The object's center cell holds exactly 1 in its class channel."""
        bev = SMALL_VOXEL.bev_scaled(4)
        box = OrientedBox(center=(0.5, -0.5, 0.0), dims=(4, 2, 1.5), class_id="vehicle")
        heatmap = make_heatmap_targets([box], bev)
        ix, iy, _, _ = box_cell(box, bev)
        self.assertEqual(heatmap[0, iy, ix], 1.0)
        self.assertEqual(heatmap[1:].sum(), 0.0)
        self.assertLessEqual(heatmap.max(), 1.0)

    def test_heatmap_empty(self):
        """No boxes, or boxes outside the grid, give an all-zero heatmap."""
        bev = SMALL_VOXEL.bev_scaled(4)
        self.assertEqual(make_heatmap_targets([], bev).sum(), 0.0)
        far = OrientedBox(center=(50.0, 0.0, 0.0), dims=(4, 2, 1.5))
        self.assertEqual(make_heatmap_targets([far], bev).sum(), 0.0)

    def test_overlapping_objects_take_elementwise_max(self):
        """Two objects of one class combine by maximum, not sum."""
        bev = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(16, 16, 1))
        a = OrientedBox(center=(5.5, 5.5, 0), dims=(4, 2, 1), class_id="pedestrian")
        b = OrientedBox(center=(7.5, 5.5, 0), dims=(4, 2, 1), class_id="pedestrian")
        both = make_heatmap_targets([a, b], bev)
        np.testing.assert_array_equal(both, np.maximum(make_heatmap_targets([a], bev), make_heatmap_targets([b], bev)))
        self.assertEqual(both.max(), 1.0)

    ### Decoding ###

    def test_decode_recovers_target_boxes(self):
        """Decoding the targets of a box gives that box back."""
        bev = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(16, 16, 1))
        box = OrientedBox(center=(6.3, 9.8, 0.4), dims=(4.2, 1.9, 1.6), yaw=0.6, class_id="cyclist")
        targets = make_detection_targets([box], bev)
        dets = decode(targets.heatmap, targets.regression, bev)
        self.assertEqual(len(dets), 1)
        got, score = dets[0]
        self.assertEqual(score, 1.0)
        self.assertEqual(got.class_id, "cyclist")
        np.testing.assert_allclose(got.center, box.center, atol=1e-6)
        np.testing.assert_allclose(got.dims, box.dims, atol=1e-6)
        self.assertAlmostEqual(got.yaw, box.yaw, places=6)

    def test_decode_below_threshold_is_empty(self):
        """A heatmap under the score threshold decodes to nothing."""
        bev = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(8, 8, 1))
        self.assertEqual(decode(np.full((3, 8, 8), 0.05), np.zeros((REG_CHANNELS, 8, 8)), bev, score_thresh=0.1), [])

    def test_decode_caps_detections(self):
        """max_dets keeps the best scoring peaks."""
        bev = VoxelSpec(origin=(0, 0, 0), cell=(1, 1, 1), shape=(8, 8, 1))
        hm = np.zeros((3, 8, 8))
        hm[0, 1, 1], hm[0, 5, 5], hm[1, 3, 6] = 0.5, 0.9, 0.7
        reg = np.zeros((REG_CHANNELS, 8, 8))
        reg[7] = 1.0
        dets = decode(hm, reg, bev, max_dets=2)
        self.assertEqual([round(s, 3) for _, s in dets], [0.9, 0.7])


if __name__ == '__main__':
    unittest.main()
