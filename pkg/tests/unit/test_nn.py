import json
import os
import tempfile
import unittest

import numpy as np

from src.errors import FormatError, ShapeMismatchError
from src.nn import BatchNorm, Conv2d, ConvBnGelu, Module, load_checkpoint, save_checkpoint
from src.tensor import Tensor, no_grad


class _Pair(Module):
    def __init__(self, out_ch=3):
        super().__init__()
        rng = np.random.default_rng(0)
        self.first = ConvBnGelu(Conv2d(2, 4, 3, padding=1, rng=rng), 4)
        self.heads = [Conv2d(4, out_ch, 1, rng=rng), Conv2d(4, 1, 1, rng=rng)]


### Unit Test Class for Layers and Checkpoints ###

class TestModules(unittest.TestCase):
    """
    Unit tests for parameter discovery, freezing, batch norm statistics and
    the named-tensor checkpoint format.
    """

    ### Parameters ###

    def test_named_parameters_walk_lists_and_children(self):
        """Parameters are found in nested modules and module lists with dotted names."""
        names = [n for n, _ in _Pair().named_parameters()]
        self.assertIn("first.conv.weight", names)
        self.assertIn("first.norm.gamma", names)
        self.assertIn("heads.1.bias", names)
        self.assertEqual(len(names), 2 + 2 + 2 + 2)

    def test_state_dict_includes_buffers(self):
        """Running statistics travel with the parameters."""
        state = _Pair().state_dict()
        self.assertIn("first.norm.running_mean", state)
        self.assertIn("first.norm.running_var", state)

    def test_freeze(self):
        """Freezing disables gradients and switches to eval mode."""
        model = _Pair().freeze()
        self.assertTrue(all(not p.requires_grad for p in model.parameters()))
        self.assertFalse(model.first.norm.training)

    ### Batch norm ###

    def test_batch_norm_running_stats_update_only_when_training(self):
        """Running stats move in training mode and stay put in eval or under no_grad."""
        bn = BatchNorm(2)
        x = Tensor(np.random.default_rng(1).normal(5.0, 1.0, size=(4, 2, 3, 3)))
        bn(x)
        moved = bn._buffers["running_mean"].copy()
        self.assertTrue(np.all(moved > 0.0))
        with no_grad():
            bn(x)
        np.testing.assert_array_equal(bn._buffers["running_mean"], moved)
        bn.eval()
        bn(x)
        np.testing.assert_array_equal(bn._buffers["running_mean"], moved)

    def test_batch_norm_eval_uses_running_stats(self):
        """Eval mode with default running stats is the identity when gamma=1, beta=0."""
        bn = BatchNorm(2).eval()
        x = np.random.default_rng(2).normal(size=(1, 2, 2, 2))
        np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1.0 + 1e-5))

    ### State loading ###

    def test_load_state_dict_strict_rejects_mismatch(self):
        """A shape-mismatched entry is a shape_mismatch error in strict mode."""
        source = _Pair(out_ch=5).state_dict()
        with self.assertRaises(ShapeMismatchError):
            _Pair(out_ch=3).load_state_dict(source, strict=True)

    def test_load_state_dict_non_strict_skips(self):
        """Non-strict loading copies what matches and reports the rest."""
        source = _Pair(out_ch=5)
        for p in source.parameters():
            p.data = p.data + 1.0
        target = _Pair(out_ch=3)
        loaded, skipped = target.load_state_dict(source.state_dict(), strict=False)
        self.assertIn("heads.0.weight", skipped)
        self.assertIn("heads.0.bias", skipped)
        self.assertIn("first.conv.weight", loaded)
        np.testing.assert_array_equal(target.first.conv.weight.data, source.first.conv.weight.data)

    ### Checkpoints ###

    def test_checkpoint_preserves_tensors_and_meta(self):
        """Saved tensors and meta come back unchanged."""
        model = _Pair()
        with tempfile.TemporaryDirectory() as tmp:
            stem = save_checkpoint(model.state_dict(), os.path.join(tmp, "ckpt"), {"stage": "ddet"})
            state, meta = load_checkpoint(stem)
            with open(stem + ".json") as f:
                manifest = json.load(f)
        self.assertEqual(meta, {"stage": "ddet"})
        self.assertEqual(manifest["format"], "s2d-ckpt")
        self.assertEqual([t["name"] for t in manifest["tensors"]], sorted(state))
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(state[name], value)

    def test_checkpoint_accepts_suffixed_path(self):
        """Either file of the pair names the checkpoint."""
        with tempfile.TemporaryDirectory() as tmp:
            stem = save_checkpoint({"w": np.arange(3.0)}, os.path.join(tmp, "c.json"))
            self.assertEqual(stem, os.path.join(tmp, "c"))
            state, _ = load_checkpoint(stem + ".bin")
        np.testing.assert_array_equal(state["w"], [0.0, 1.0, 2.0])

    def test_missing_checkpoint(self):
        """A missing checkpoint is a bad_format error."""
        with self.assertRaises(FormatError):
            load_checkpoint("/nonexistent/ckpt")

    def test_truncated_checkpoint(self):
        """A short tensor blob is a bad_format error."""
        with tempfile.TemporaryDirectory() as tmp:
            stem = save_checkpoint({"w": np.arange(10.0)}, os.path.join(tmp, "c"))
            with open(stem + ".bin", "r+b") as f:
                f.truncate(16)
            with self.assertRaises(FormatError):
                load_checkpoint(stem)


if __name__ == '__main__':
    unittest.main()
