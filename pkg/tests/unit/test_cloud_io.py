import os
import tempfile
import unittest

import numpy as np

from src.cloud_io import (decode_cloud, encode_cloud, list_sequences, read_boxes, read_cloud, read_json,
                          read_sequence, write_cloud, write_ply, write_sequence)
from src.data_classes import OrientedBox
from src.dense_object_gen import Frame, TrackedSequence
from src.errors import FormatError


def _sequence():
    box = OrientedBox(center=(3.0, 1.0, 0.8), dims=(4.0, 2.0, 1.6), yaw=0.25, track_id="vehicle-00-00")
    frames = [Frame(points=np.array([[1.5, -2.0, 0.25, 0.5], [3.0, 1.0, 0.75, 1.0]]), boxes=[box]),
              Frame(points=np.zeros((0, 4)), boxes=[])]
    return TrackedSequence(frames=frames)


### Unit Test Class for On-Disk Formats ###

class TestCloudIO(unittest.TestCase):
    """
    Unit tests for the binary cloud codec, box sidecars and sequence directories.
    """

    ### Cloud codec ###

    def test_header_layout(self):
        """16 header bytes (magic, version, count) then 16 bytes per point."""
        blob = encode_cloud([[1.0, 2.0, 3.0, 0.5]])
        self.assertEqual(blob[:4], b"S2DC")
        self.assertEqual(len(blob), 16 + 16)
        np.testing.assert_array_equal(decode_cloud(blob), [[1.0, 2.0, 3.0, 0.5]])

    def test_empty_cloud(self):
        """An empty cloud is a bare header."""
        blob = encode_cloud(np.zeros((0, 4)))
        self.assertEqual(len(blob), 16)
        self.assertEqual(decode_cloud(blob).shape, (0, 4))

    def test_bad_magic(self):
        """A foreign blob is a bad_format error."""
        blob = bytearray(encode_cloud([[0.0, 0.0, 0.0, 0.0]]))
        blob[:4] = b"XXXX"
        with self.assertRaises(FormatError):
            decode_cloud(bytes(blob))

    def test_truncated_blob(self):
        """A blob shorter than its header promises is a bad_format error."""
        blob = encode_cloud(np.ones((3, 4)))
        with self.assertRaises(FormatError):
            decode_cloud(blob[:-4])
        with self.assertRaises(FormatError):
            decode_cloud(blob[:8])

    ### Files ###

    def test_cloud_file_and_ply(self):
        """Binary files read back; the PLY export lists one vertex per point."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.s2dc")
            write_cloud(path, [[0.5, 0.25, -1.0, 0.75]])
            np.testing.assert_array_equal(read_cloud(path), [[0.5, 0.25, -1.0, 0.75]])
            ply = os.path.join(tmp, "c.ply")
            write_ply(ply, np.ones((3, 4)))
            with open(ply) as f:
                text = f.read()
        self.assertIn("element vertex 3", text)
        self.assertEqual(text.strip().splitlines()[-1], "1.000000 1.000000 1.000000 1.000000")

    def test_invalid_json(self):
        """A corrupt sidecar is a bad_format error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "b.json")
            with open(path, "w") as f:
                f.write("{not json")
            with self.assertRaises(FormatError):
                read_json(path)

    def test_box_sidecar_without_boxes(self):
        """JSON without a box list is a bad_format error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "b.json")
            with open(path, "w") as f:
                f.write('{"meta": {}}')
            with self.assertRaises(FormatError):
                read_boxes(path)

    ### Sequences ###

    def test_sequence_directory(self):
        """Frames, points and boxes come back from a written sequence."""
        seq = _sequence()
        with tempfile.TemporaryDirectory() as tmp:
            write_sequence(os.path.join(tmp, "seq_00"), seq, {"seed": 0})
            back = read_sequence(os.path.join(tmp, "seq_00"))
            self.assertEqual(list_sequences(tmp), [os.path.join(tmp, "seq_00")])
            self.assertEqual(list_sequences(os.path.join(tmp, "seq_00")), [os.path.join(tmp, "seq_00")])
        self.assertEqual(len(back.frames), 2)
        np.testing.assert_array_equal(back.frames[0].points, seq.frames[0].points)
        self.assertEqual(back.frames[0].boxes, seq.frames[0].boxes)
        self.assertEqual(back.frames[1].boxes, [])

    def test_sequence_writes_are_deterministic(self):
        """Writing the same sequence twice gives identical bytes."""
        with tempfile.TemporaryDirectory() as tmp:
            for name in ("a", "b"):
                write_sequence(os.path.join(tmp, name), _sequence())
            for fname in sorted(os.listdir(os.path.join(tmp, "a"))):
                with open(os.path.join(tmp, "a", fname), "rb") as fa, open(os.path.join(tmp, "b", fname), "rb") as fb:
                    self.assertEqual(fa.read(), fb.read())

    def test_missing_sequences(self):
        """A directory without sequences is a bad_format error."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                list_sequences(tmp)
            with self.assertRaises(FormatError):
                read_sequence(tmp)


if __name__ == '__main__':
    unittest.main()
