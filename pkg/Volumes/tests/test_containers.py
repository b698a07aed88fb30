import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from BrainMAE.exceptions import VolumeFormatError
from Volumes.containers import Volume, normalize_modality, read_header, read_volume, write_volume


def nifti_bytes(data_xyz, spacing_xyz=(1.0, 1.0, 1.0), datatype=16, bitpix=32, descrip=b'T1'):
    """
    Несжатый NIfTI-1 с заголовком, собранным вручную: 348 байт заголовка,
    4 байта расширения и воксели с vox_offset 352.
    """
    header = bytearray(352)
    struct.pack_into('<i', header, 0, 348)
    dims = [len(data_xyz.shape)] + list(data_xyz.shape) + [1] * (7 - len(data_xyz.shape))
    struct.pack_into('<8h', header, 40, *dims)
    struct.pack_into('<h', header, 70, datatype)
    struct.pack_into('<h', header, 72, bitpix)
    struct.pack_into('<8f', header, 76, 1.0, *spacing_xyz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into('<f', header, 108, 352.0)
    header[148:148 + len(descrip)] = descrip
    header[344:348] = b'n+1\0'
    dtype = {16: '<f4', 4: '<i2', 2: 'u1', 64: '<f8'}[datatype]
    return bytes(header) + np.asarray(data_xyz, dtype=dtype).tobytes(order='F')


class VolumeTest(unittest.TestCase):
    """
    Тесты для контейнера объёма.
    """

    def test_three_dimensional_array_gets_channel_axis(self):
        """
        Проверяет добавление оси каналов и вычисление поля зрения.
        """
        volume = Volume(np.zeros((4, 5, 6)), (2.0, 1.0, 0.5))
        self.assertEqual(volume.data.shape, (1, 4, 5, 6))
        self.assertEqual(volume.fov, (8.0, 5.0, 3.0))
        self.assertEqual(volume.data.dtype, np.float32)

    def test_invalid_volumes(self):
        """
        Проверяет ошибки для NaN, неположительного шага и неверной размерности.
        """
        with self.assertRaises(VolumeFormatError):
            Volume(np.full((2, 2, 2), np.nan), (1, 1, 1))
        with self.assertRaises(VolumeFormatError):
            Volume(np.zeros((2, 2, 2)), (1, 0, 1))
        with self.assertRaises(VolumeFormatError):
            Volume(np.zeros((2, 2)), (1, 1, 1))

    def test_normalize_modality(self):
        """
        Проверяет приведение тегов модальности.
        """
        self.assertEqual(normalize_modality('t1-flair'), 'T1FLAIR')
        self.assertEqual(normalize_modality('T2 FLAIR'), 'T2FLAIR')
        self.assertEqual(normalize_modality('PD'), 'PD')
        self.assertEqual(normalize_modality(None), 'other')


class NvolTest(unittest.TestCase):
    """
    Тесты для формата NVOL.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_read_lossless(self):
        """
        Проверяет, что двухканальный объём читается без потерь вместе с шагом и модальностью.
        """
        data = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
        path = write_volume(Volume(data, (1.5, 1.0, 0.8), 'T2'), self.dir / 'a.nvol')
        volume = read_volume(path)
        np.testing.assert_array_equal(volume.data, data)
        self.assertEqual(volume.spacing, (1.5, 1.0, np.float32(0.8).item()))
        self.assertEqual(volume.modality, 'T2')
        header = read_header(path)
        self.assertEqual((header.dims, header.channels, header.file_size), ((3, 4, 5), 2, path.stat().st_size))

    def test_truncated_payload(self):
        """
        Проверяет ошибку для обрезанных данных.
        """
        path = write_volume(Volume(np.ones((2, 2, 2)), (1, 1, 1), 'T1'), self.dir / 'b.nvol')
        path.write_bytes(path.read_bytes()[:-1])
        with self.assertRaises(VolumeFormatError):
            read_volume(path)

    def test_unknown_container(self):
        """
        Проверяет ошибку для файла с неизвестной магией и FileNotFoundError для отсутствующего.
        """
        path = self.dir / 'c.bin'
        path.write_bytes(b'ABCD' + bytes(16))
        with self.assertRaises(VolumeFormatError):
            read_volume(path)
        with self.assertRaises(FileNotFoundError):
            read_volume(self.dir / 'missing.nvol')


class NiftiTest(unittest.TestCase):
    """
    Тесты для импорта NIfTI-1.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.data_xyz = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)

    def tearDown(self):
        self.tmp.cleanup()

    def test_handcrafted_header(self):
        """
        Проверяет чтение объёма 2x3x4 (x, y, z) с шагом (0.5, 1, 2): оси переставлены в (z, y, x).
        """
        path = self.dir / 'scan.nii'
        path.write_bytes(nifti_bytes(self.data_xyz, (0.5, 1.0, 2.0)))
        volume = read_volume(path)
        self.assertEqual(volume.dims, (4, 3, 2))
        self.assertEqual(volume.spacing, (2.0, 1.0, 0.5))
        self.assertEqual(volume.modality, 'T1')
        np.testing.assert_array_equal(volume.data[0], self.data_xyz.transpose(2, 1, 0))
        header = read_header(path)
        self.assertEqual((header.dims, header.spacing), ((4, 3, 2), (2.0, 1.0, 0.5)))

    def test_int16_and_modality_override(self):
        """
        Проверяет тип int16 и переопределение модальности.
        """
        path = self.dir / 'scan16.nii'
        path.write_bytes(nifti_bytes(self.data_xyz.astype(np.int16), datatype=4, bitpix=16, descrip=b''))
        volume = read_volume(path, modality='t2 flair')
        self.assertEqual(volume.modality, 'T2FLAIR')
        self.assertEqual(float(volume.data.max()), 23.0)

    def test_rejected_files(self):
        """
        Проверяет отказ для сжатых NIfTI и неподдерживаемого типа float64.
        """
        gz = self.dir / 'scan.nii.gz'
        gz.write_bytes(nifti_bytes(self.data_xyz))
        with self.assertRaises(VolumeFormatError):
            read_volume(gz)
        wide = self.dir / 'scan64.nii'
        wide.write_bytes(nifti_bytes(self.data_xyz.astype(np.float64), datatype=64, bitpix=64))
        with self.assertRaises(VolumeFormatError):
            read_volume(wide)


if __name__ == '__main__':
    unittest.main()
