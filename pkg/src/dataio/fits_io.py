"""
FITSサブセットの読み書き
SIMPLE=T, BITPIX=-32, NAXIS=2 の単一HDU (ビッグエンディアン float32) のみを扱う
"""

import logging
import os

import numpy as np
from astropy.io import fits
from astropy.io.fits.verify import VerifyError

from ..utils.errors import FormatError, UnsupportedError
from .types import Image2D

logger = logging.getLogger(__name__)


def read_fits_cutout(path: str) -> Image2D:
    """
    FITSファイルから2次元画像を読み込む (NaNはそのまま保持)

    Args:
        path (str): FITSファイルのパス

    Returns:
        Image2D: ファイル順のピクセル値
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    try:
        with fits.open(path, memmap=False) as hdul:
            hdul.verify("exception")
            if len(hdul) != 1:
                raise UnsupportedError("複数HDUのFITSには対応していません", f"{path}: {len(hdul)} HDUs")
            header = hdul[0].header
            if header.get("SIMPLE") is not True:
                raise FormatError("SIMPLE=T ではありません", path)
            if header.get("BITPIX") != -32:
                raise UnsupportedError("BITPIX=-32 (float32) 以外には対応していません", f"BITPIX={header.get('BITPIX')}")
            if header.get("NAXIS") != 2:
                raise UnsupportedError("2次元画像以外には対応していません", f"NAXIS={header.get('NAXIS')}")
            data = hdul[0].data
            provenance = str(header.get("OBJECT", os.path.basename(path)))
            # ネイティブバイト順のfloat32へ (ビット列は不変)
            pixels = np.array(data, dtype=np.float32)
    except (FormatError, UnsupportedError):
        raise
    except (OSError, ValueError, VerifyError) as e:
        raise FormatError("FITSヘッダーが不正です", f"{path}: {e}") from e

    return Image2D(pixels, provenance=provenance)


def write_fits_cutout(path: str, image: Image2D) -> str:
    """
    2次元画像をFITSサブセット形式で書き出す

    Args:
        path (str): 出力先
        image (Image2D): 書き出す画像

    Returns:
        str: 書き出したパス
    """
    hdu = fits.PrimaryHDU(data=image.pixels.astype(">f4"))
    if image.provenance:
        hdu.header["OBJECT"] = image.provenance[:68]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    hdu.writeto(path, overwrite=True, output_verify="exception")
    return path
