import math
import os
import tempfile
import unittest

from src.data_classes import AblationFlags, OrientedBox, VoxelSpec, build_config, load_config, normalize_yaw
from src.errors import InvalidConfigError, UsageError

TOY_CONFIG = os.path.join(os.path.dirname(__file__), "..", "..", "configs", "toy.toml")


### Unit Test Class for Configuration and Validated Types ###

class TestConfig(unittest.TestCase):
    """
    Unit tests for TOML loading, dotted overrides, ablation flag parsing and the
    validators on the geometry types.
    """

    ### Loading ###

    def test_toy_config_loads(self):
        """The shipped toy config is valid."""
        cfg = load_config(TOY_CONFIG)
        self.assertEqual(cfg.voxel.shape, (256, 256, 8))
        self.assertEqual(cfg.train.max_steps, 200)

    def test_defaults_without_file(self):
        """No file gives the built-in defaults."""
        cfg = load_config()
        self.assertEqual(cfg.loss.beta, 10.0)
        self.assertEqual(cfg.loss.gamma, 20.0)
        self.assertEqual(cfg.densify.capacity, 5)

    def test_overrides_apply(self):
        """Dotted overrides reach nested tables; None values are ignored."""
        cfg = load_config(TOY_CONFIG, {"train.seed": 3, "scene.n_frames": 5, "train.lr": None})
        self.assertEqual(cfg.train.seed, 3)
        self.assertEqual(cfg.scene.n_frames, 5)
        self.assertEqual(cfg.train.lr, 0.003)

    def test_unknown_key_is_usage_error(self):
        """An unknown key names the dotted path."""
        with self.assertRaises(UsageError) as ctx:
            load_config(None, {"train.foo": 1})
        self.assertIn("train.foo", str(ctx.exception))

    def test_invalid_value_is_config_error(self):
        """A value that fails validation is an invalid_config error naming the field."""
        with self.assertRaises(InvalidConfigError) as ctx:
            load_config(None, {"train.lr": -1.0})
        self.assertIn("train.lr", str(ctx.exception))

    def test_missing_file(self):
        """A missing config file is a usage error."""
        with self.assertRaises(UsageError):
            load_config("/nonexistent/config.toml")

    def test_bad_toml(self):
        """A file that is not TOML is a usage error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.toml")
            with open(path, "w") as f:
                f.write("[train\nseed = ")
            with self.assertRaises(UsageError):
                load_config(path)

    def test_heldout_must_leave_training_sequences(self):
        """Holding out every sequence is rejected."""
        with self.assertRaises(InvalidConfigError):
            build_config({"scene": {"n_sequences": 2, "heldout_sequences": 2}})

    def test_voxel_cell_must_be_positive(self):
        """Zero cell sizes are rejected."""
        with self.assertRaises(InvalidConfigError):
            build_config({"voxel": {"origin": [0, 0, 0], "cell": [0, 1, 1], "shape": [4, 4, 4]}})

    ### Ablation flags ###

    def test_ablation_parse_and_label(self):
        """Named flags switch on, everything else is off."""
        flags = AblationFlags.parse("+distill,+pcr")
        self.assertEqual((flags.distill, flags.s2d, flags.pcr), (True, False, True))
        self.assertEqual(flags.label(), "+distill,+pcr")
        self.assertEqual(AblationFlags.parse("none").label(), "none")
        self.assertEqual(AblationFlags().label(), "+distill,+s2d,+pcr")

    def test_ablation_rejects_unknown_or_negative(self):
        """Negated and unknown flags are usage errors."""
        for text in ("-distill", "+foo"):
            with self.subTest(text=text):
                with self.assertRaises(UsageError):
                    AblationFlags.parse(text)

    ### Geometry types ###

    def test_voxel_spec_scaled(self):
        """Scaling multiplies cells and divides the shape; an uneven shape is rejected."""
        spec = VoxelSpec(origin=(0, 0, 0), cell=(0.1, 0.1, 0.15), shape=(8, 8, 8))
        coarse = spec.scaled(4)
        self.assertEqual(coarse.shape, (2, 2, 2))
        self.assertAlmostEqual(coarse.cell[2], 0.6)
        with self.assertRaises(InvalidConfigError):
            VoxelSpec(origin=(0, 0, 0), shape=(10, 10, 10)).scaled(4)

    def test_voxel_spec_bev_scaled(self):
        """The BEV grid has one z slab spanning the full height."""
        spec = VoxelSpec(origin=(-4, -4, -2), cell=(0.5, 0.5, 0.75), shape=(16, 16, 8))
        bev = spec.bev_scaled(4)
        self.assertEqual(bev.shape, (4, 4, 1))
        self.assertEqual(bev.cell, (2.0, 2.0, 6.0))

    def test_yaw_is_normalized(self):
        """Yaw is stored in [-pi, pi)."""
        self.assertEqual(normalize_yaw(math.pi), -math.pi)
        box = OrientedBox(center=(0, 0, 0), dims=(1, 1, 1), yaw=1.5 * math.pi)
        self.assertAlmostEqual(box.yaw, -0.5 * math.pi)

    def test_box_dims_must_be_positive(self):
        """Degenerate boxes are rejected."""
        with self.assertRaises(ValueError):
            OrientedBox(center=(0, 0, 0), dims=(1, 0, 1))


if __name__ == '__main__':
    unittest.main()
