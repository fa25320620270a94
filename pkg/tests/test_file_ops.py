from pathlib import Path

import numpy as np
import pytest

from errors import DataFormatError, MissingArtifactError, UsageError
from file_ops import CsvFile, FileOperations, ImageFile, KeyValueFile, TensorFile
from grid import Image


class TestFileOperations:
    """Tests for FileOperations focusing on file I/O behavior"""

    def test_read_file_returns_content(self, temp_dir: Path):
        test_file = temp_dir / "test.txt"
        expected_content = "Hello, World!\nThis is a test file."
        test_file.write_text(expected_content)

        content = FileOperations.read_file(test_file)

        assert content == expected_content

    def test_read_file_raises_missing_artifact(self, temp_dir: Path):
        with pytest.raises(MissingArtifactError, match="missing.txt"):
            FileOperations.read_file(temp_dir / "missing.txt")

    def test_write_file_creates_parent_directories(self, temp_dir: Path):
        test_file = temp_dir / "sub" / "dir" / "file.txt"

        FileOperations.write_file(test_file, "Nested file content")

        assert test_file.read_text() == "Nested file content"

    def test_bytes_round_trip(self, temp_dir: Path):
        path = temp_dir / "blob.bin"

        FileOperations.write_bytes(path, b"\x00\x01\xff")

        assert FileOperations.read_bytes(path) == b"\x00\x01\xff"


class TestKeyValueFile:
    """Tests for KeyValueFile focusing on parsing and typing behavior"""

    def test_parse_types_scalar_values(self):
        text = "k = 4\nlam = 0.1\nflag = true\nname = otsu\n"

        values = KeyValueFile.parse(text)

        assert values == {"k": 4, "lam": 0.1, "flag": True, "name": "otsu"}

    def test_parse_skips_comments_and_blank_lines(self):
        text = "# header\n\nk = 4  # parts\n"

        assert KeyValueFile.parse(text) == {"k": 4}

    def test_parse_keeps_comma_lists_as_strings(self):
        values = KeyValueFile.parse("weights = 1.0,2.0,3.0")

        assert values["weights"] == "1.0,2.0,3.0"

    @pytest.mark.parametrize(
        "text, message",
        [
            ("k 4", "expected 'key = value'"),
            ("= 4", "empty key"),
            ("k = 1\nk = 2", "duplicate key 'k'"),
        ],
    )
    def test_parse_rejects_malformed_lines(self, text: str, message: str):
        with pytest.raises(DataFormatError, match=message):
            KeyValueFile.parse(text)

    def test_dump_sorts_keys_and_formats_values(self):
        text = KeyValueFile.dump({"b": True, "a": 0.1, "c": "mean"})

        assert text == "a = 0.1\nb = true\nc = mean\n"

    @pytest.mark.parametrize("value", [1e-6, 1e20, 2.5e-12, 0.001])
    def test_exponent_floats_stay_floats(self, value: float):
        text = KeyValueFile.dump({"tol": value})

        assert KeyValueFile.parse(text) == {"tol": value}

    def test_save_then_load_preserves_values(self, temp_dir: Path):
        values = {"lam": 1e-3, "k": 4, "debug": False, "arch": "conv1x1"}

        KeyValueFile.save(temp_dir / "config.txt", values)

        assert KeyValueFile.load(temp_dir / "config.txt") == values


class TestImageFile:
    """Tests for ImageFile focusing on netpbm encoding behavior"""

    def test_encode_writes_p6_header(self):
        img = Image(np.zeros((2, 3, 3)))

        payload = ImageFile.encode(img)

        assert payload.startswith(b"P6\n3 2\n255\n")
        assert len(payload) == len(b"P6\n3 2\n255\n") + 18

    def test_quantized_image_survives_save_and_load(self, temp_dir: Path):
        levels = np.arange(24, dtype=np.float32).reshape(2, 4, 3) * 10 / np.float32(255)
        img = Image(levels)

        ImageFile.save(temp_dir / "img.ppm", img)
        loaded = ImageFile.load(temp_dir / "img.ppm")

        np.testing.assert_array_equal(loaded.data, img.data)

    def test_gray_image_uses_p5(self, temp_dir: Path):
        ImageFile.save_grid(temp_dir / "map.pgm", np.array([[0.0, 1.0]]))

        payload = (temp_dir / "map.pgm").read_bytes()

        assert payload == b"P5\n2 1\n255\n\x00\xff"

    def test_decode_skips_header_comments(self):
        payload = b"P5\n# made by hand\n2 1\n255\n\x00\xff"

        img = ImageFile.decode(payload, Path("inline.pgm"))

        np.testing.assert_array_equal(img.data[:, :, 0], [[0.0, 1.0]])

    @pytest.mark.parametrize(
        "payload, field",
        [
            (b"P3\n1 1\n255\n\x00", "magic"),
            (b"P5\nx 1\n255\n\x00", "width"),
            (b"P5\n1 1\n65535\n\x00", "maxval"),
            (b"P6\n2 2\n255\n\x00\x00", "truncated"),
        ],
    )
    def test_decode_names_the_bad_field(self, payload: bytes, field: str):
        with pytest.raises(DataFormatError, match=field):
            ImageFile.decode(payload, Path("bad.ppm"))


class TestTensorFile:
    """Tests for TensorFile focusing on the binary record layout"""

    def test_encode_layout_is_little_endian(self):
        payload = TensorFile.encode([2], np.array([1.0, -2.0]))

        assert payload[:4] == b"PSF1"
        assert payload[4:12] == (1).to_bytes(8, "little")
        assert payload[12:20] == (2).to_bytes(8, "little")
        assert payload[20:] == np.array([1.0, -2.0], dtype="<f4").tobytes()

    def test_read_array_restores_shape(self, temp_dir: Path, rng):
        data = rng.normal(size=(2, 3, 4)).astype(np.float32)

        TensorFile.write(temp_dir / "t.psf", data.shape, data)

        np.testing.assert_array_equal(
            TensorFile.read_array(temp_dir / "t.psf"), data
        )

    def test_many_records_in_one_container(self, temp_dir: Path):
        arrays = [np.ones((2, 2), np.float32), np.arange(3, dtype=np.float32)]

        TensorFile.write_many(temp_dir / "c.psf", arrays)
        loaded = TensorFile.read_many(temp_dir / "c.psf")

        assert [a.shape for a in loaded] == [(2, 2), (3,)]
        np.testing.assert_array_equal(loaded[1], arrays[1])

    def test_encode_rejects_mismatched_length(self):
        with pytest.raises(UsageError, match="does not match"):
            TensorFile.encode([3], np.zeros(2))

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda p: b"XXXX" + p[4:], "bad magic"),
            (lambda p: p[:-2], "truncated payload"),
            (lambda p: p[:10], "truncated rank"),
            (lambda p: p + b"\x00", "trailing bytes"),
            (lambda p: p[:4] + (0).to_bytes(8, "little") + p[12:], "invalid rank"),
        ],
    )
    def test_read_rejects_corrupt_files(self, temp_dir: Path, mutate, message):
        path = temp_dir / "t.psf"
        path.write_bytes(mutate(TensorFile.encode([2], np.zeros(2))))

        with pytest.raises(DataFormatError, match=message):
            TensorFile.read(path)


class TestCsvFile:
    """Tests for CsvFile focusing on header and row handling"""

    def test_write_then_read_rows(self, temp_dir: Path):
        path = temp_dir / "out" / "rows.csv"

        CsvFile.write(path, ("a", "b"), [(1, "x"), (2, "y")])

        assert path.read_text() == "a,b\n1,x\n2,y\n"
        assert CsvFile.read(path) == [
            {"a": "1", "b": "x"},
            {"a": "2", "b": "y"},
        ]

    def test_read_missing_file_raises_missing_artifact(self, temp_dir: Path):
        with pytest.raises(MissingArtifactError):
            CsvFile.read(temp_dir / "none.csv")
