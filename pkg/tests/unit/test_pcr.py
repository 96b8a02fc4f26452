import unittest

import numpy as np

from src.errors import ShapeMismatchError
from src.pcr import PCRModule, PCRScale, masked_points, reconstruct_points
from src.tensor import Tensor, no_grad


### Unit Test Class for Point Cloud Reconstruction ###

class TestPCR(unittest.TestCase):
    """
    Unit tests for the reconstruction head and the point assembly rule.
    """

    def test_output_shapes(self):
        """An [1, 8, 4, 4] BEV feature with depth 2 gives 2x4x4 and 4x8x8 grids."""
        pcr = PCRModule(8, 2, 4, 1, np.random.default_rng(0))
        with no_grad():
            out = pcr(Tensor(np.random.default_rng(1).normal(size=(1, 8, 4, 4))))
        self.assertEqual(out.by_factor(4).mask.shape, (1, 1, 2, 4, 4))
        self.assertEqual(out.by_factor(4).offset.shape, (1, 3, 2, 4, 4))
        self.assertEqual(out.by_factor(2).mask.shape, (1, 1, 4, 8, 8))
        with self.assertRaises(KeyError):
            out.by_factor(8)

    def test_masks_are_probabilities(self):
        """Masks lie strictly in (0, 1); zero input gives exactly 0.5."""
        pcr = PCRModule(8, 2, 4, 1)
        with no_grad():
            out = pcr(Tensor(np.zeros((1, 8, 4, 4))))
        for scale in out.scales:
            np.testing.assert_allclose(scale.mask.data, 0.5)

    def test_depth_must_divide_channels(self):
        """BEV channels must split evenly into depth slices."""
        with self.assertRaises(ShapeMismatchError):
            PCRModule(6, 4, 4)

    def test_reconstruct_full_mask_zero_offset_gives_centers(self):
        """Mask 1 and zero offsets put points on the voxel centers."""
        centers = np.random.default_rng(2).normal(size=(3, 2, 2, 2))
        out = reconstruct_points(np.ones((1, 2, 2, 2)), np.zeros((3, 2, 2, 2)), centers)
        np.testing.assert_allclose(out.data, centers)

    def test_reconstruct_empty_mask_gives_zero(self):
        """Mask 0 zeroes the point whatever the offset."""
        rng = np.random.default_rng(3)
        out = reconstruct_points(np.zeros((1, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2)))
        self.assertEqual(np.abs(out.data).sum(), 0.0)

    def test_reconstruct_matches_elementwise_oracle(self):
        """Each coordinate is (offset + center) * mask at its voxel."""
        rng = np.random.default_rng(4)
        mask, offset, centers = rng.random((1, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
        out = reconstruct_points(mask, offset, centers).data
        for c, d, h, w in np.ndindex(3, 2, 3, 3):
            self.assertAlmostEqual(out[c, d, h, w], (offset[c, d, h, w] + centers[c, d, h, w]) * mask[0, d, h, w])

    def test_reconstruct_is_linear_in_mask(self):
        """For fixed offsets and centers, mixing two masks mixes the reconstructions the same way."""
        for seed in range(5):
            rng = np.random.default_rng(seed)
            m1, m2 = rng.random((1, 2, 3, 3)), rng.random((1, 2, 3, 3))
            offset, centers = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
            a, b = rng.normal(size=2)
            mixed = reconstruct_points(a * m1 + b * m2, offset, centers).data
            parts = a * reconstruct_points(m1, offset, centers).data + b * reconstruct_points(m2, offset, centers).data
            np.testing.assert_allclose(mixed, parts, atol=1e-12)

    def test_reconstruct_is_affine_in_offset(self):
        """For a fixed mask, a convex mix of offsets gives the same mix of reconstructions."""
        for seed in range(5):
            rng = np.random.default_rng(10 + seed)
            mask, centers = rng.random((1, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
            o1, o2 = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
            t = rng.random()
            mixed = reconstruct_points(mask, t * o1 + (1 - t) * o2, centers).data
            parts = t * reconstruct_points(mask, o1, centers).data + (1 - t) * reconstruct_points(mask, o2, centers).data
            np.testing.assert_allclose(mixed, parts, atol=1e-12)

    def test_masked_points_keeps_confident_voxels(self):
        """Only voxels above the threshold yield points."""
        mask = np.zeros((1, 1, 1, 2, 2))
        mask[0, 0, 0, 1, 0] = 0.9
        mask[0, 0, 0, 0, 1] = 0.4
        offset = np.zeros((1, 3, 1, 2, 2))
        offset[0, 2] = 0.25
        centers = np.arange(12.0).reshape(3, 1, 2, 2)
        points = masked_points(PCRScale(4, Tensor(mask), Tensor(offset)), centers)
        self.assertEqual(points.shape, (1, 3))
        expected = (centers[:, 0, 1, 0] + [0.0, 0.0, 0.25]) * 0.9
        np.testing.assert_allclose(points[0], expected)


if __name__ == '__main__':
    unittest.main()
