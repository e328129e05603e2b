"""
大規模合成マップ (切り出し・フラックス・配置) のテスト
"""

import json

import numpy as np
import pytest
from scipy import stats

from src.compositor.canvas import SkyCanvas, cut_background_patch, place_objects, write_catalog
from src.compositor.compose import compose_map
from src.compositor.flux import FluxModel, measure_background_sigma, rescale_flux, sample_k
from src.compositor.stamps import ObjectStamp, extract_objects
from src.dataio.fits_io import read_fits_cutout, write_fits_cutout
from src.dataio.types import FOUR_CONNECTIVITY, Dataset, Image2D, SegMask
from src.utils.errors import DegenerateMapError, ParameterError, PlacementError, ShapeError

from tests.conftest import make_cutout


def _stamp(size: int = 4, value: float = 1.0, class_name: str = "compact") -> ObjectStamp:
    return ObjectStamp(np.full((size, size), value), np.ones((size, size), dtype=bool), class_name, crop_id="c0")


@pytest.fixture
def background_fits(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "background.fits"
    write_fits_cutout(str(path), Image2D(rng.normal(0, 2e-4, (64, 64)).astype(np.float32), provenance="bg"))
    return str(path)


def _mask_list():
    masks = []
    for i in range(3):
        labels = np.zeros((16, 16), dtype=np.int64)
        labels[3:7, 3 + i:7 + i] = 1
        labels[10:14, 8:13] = 2
        masks.append(SegMask(labels))
    return masks


def _fake_crops(masks, backgrounds, seed):
    return Dataset([make_cutout(f"crop_{seed}_{i}", m.labels, value=0.0) for i, m in enumerate(masks)])


# ---------------------------------------------------------------------------
# フラックス
# ---------------------------------------------------------------------------

def test_sample_k_truncated_exponential():
    fm = FluxModel(lam=3.0, cap=10.0)
    ks = sample_k(fm, 0, size=20_000)
    assert ks.shape == (20_000,)
    assert ks.max() <= 10.0 and ks.min() >= 0.0
    assert ks.mean() == pytest.approx(1 / 3, rel=0.03)


def test_sample_k_fits_truncated_exponential():
    lam, cap = 3.0, 10.0
    ks = sample_k(FluxModel(lam=lam, cap=cap), 0, size=10_000)

    def truncated_cdf(x):
        return np.clip((1 - np.exp(-lam * x)) / (1 - np.exp(-lam * cap)), 0.0, 1.0)

    assert stats.kstest(ks, truncated_cdf).pvalue > 0.01


def test_sample_k_respects_tight_cap():
    ks = sample_k(FluxModel(lam=1.0, cap=0.5), 1, size=1000)
    assert ks.max() <= 0.5
    assert isinstance(sample_k(FluxModel(), 2), float)


def test_sample_k_gives_up_on_impossible_cap():
    with pytest.raises(ParameterError):
        sample_k(FluxModel(lam=1e-3, cap=1e-9, max_draws=5), 0)


def test_flux_model_accepts_lambda_alias():
    assert FluxModel(**{"lambda": 2.0}).lam == 2.0


def test_rescale_flux_multiplies_by_sigma_and_k():
    stamp = _stamp(value=0.5)
    scaled = rescale_flux(stamp, FluxModel(sigma_bg=2e-4), seed=0, k=3.0)
    assert np.allclose(scaled.pixels, 0.5 * 2e-4 * 3.0)
    assert scaled.k == 3.0
    assert stamp.k is None
    with pytest.raises(ParameterError):
        rescale_flux(stamp, FluxModel(), seed=0)


def test_background_sigma_ignores_bright_sources():
    rng = np.random.default_rng(0)
    pixels = rng.normal(0, 1.0, (100, 100))
    pixels.ravel()[rng.choice(10_000, 100, replace=False)] = 100.0
    assert measure_background_sigma(Image2D(pixels)) == pytest.approx(1.0, rel=0.05)


def test_background_sigma_of_degenerate_maps():
    with pytest.raises(DegenerateMapError):
        measure_background_sigma(Image2D(np.ones((8, 8))))
    with pytest.raises(DegenerateMapError):
        measure_background_sigma(Image2D(np.full((8, 8), np.nan)))


# ---------------------------------------------------------------------------
# 切り出し
# ---------------------------------------------------------------------------

def test_extract_objects_by_component():
    mask = _mask_list()[0]
    crop = Image2D(np.where(mask.labels > 0, 0.8, 0.2).astype(np.float32), provenance="crop")
    stamps = extract_objects(crop, mask)
    assert [s.class_name for s in stamps] == ["compact", "extended"]
    assert stamps[0].shape == (4, 4) and stamps[0].origin == (3, 3)
    assert stamps[1].area == 20
    assert np.allclose(stamps[0].pixels, 0.8)
    assert stamps[0].crop_id == "crop"


def test_extract_objects_removes_zero_flux_level():
    mask = _mask_list()[0]
    crop = Image2D(np.where(mask.labels > 0, 0.8, 0.5).astype(np.float32), preprocessed=True)
    stamps = extract_objects(crop, mask)
    assert np.allclose(stamps[0].pixels, 0.3)
    assert np.allclose(extract_objects(crop, mask, zero_level=0.0)[0].pixels, 0.8)


def test_extract_objects_majority_class():
    labels = np.zeros((6, 6), dtype=np.int64)
    labels[1:4, 1:4] = 2
    labels[1, 1] = 1
    stamps = extract_objects(Image2D(np.ones((6, 6))), SegMask(labels))
    assert len(stamps) == 1
    assert stamps[0].class_name == "extended"


def test_extract_objects_connectivity():
    labels = np.zeros((4, 4), dtype=np.int64)
    labels[0, 0] = 1
    labels[1, 1] = 1
    image = Image2D(np.ones((4, 4)))
    assert len(extract_objects(image, SegMask(labels))) == 1
    assert len(extract_objects(image, SegMask(labels), structure=FOUR_CONNECTIVITY)) == 2


def test_extract_objects_from_empty_mask():
    assert extract_objects(Image2D(np.ones((4, 4))), SegMask.empty((4, 4))) == []
    with pytest.raises(ShapeError):
        extract_objects(Image2D(np.ones((4, 4))), SegMask.empty((5, 5)))


def test_stamp_zeroes_outside_footprint():
    footprint = np.eye(3, dtype=bool)
    stamp = ObjectStamp(np.ones((3, 3)), footprint, "compact")
    assert stamp.pixels.sum() == 3.0
    with pytest.raises(ShapeError):
        ObjectStamp(np.ones((3, 3)), np.zeros((3, 3), dtype=bool), "compact")


# ---------------------------------------------------------------------------
# 配置
# ---------------------------------------------------------------------------

def test_place_objects_is_additive_and_pure():
    rng = np.random.default_rng(0)
    canvas = SkyCanvas(rng.normal(0, 1, (32, 32)))
    before = canvas.pixels.copy()
    stamps = [_stamp(value=2.0), _stamp(value=3.0)]
    result = place_objects(canvas, stamps, seed=1)
    assert np.array_equal(canvas.pixels, before)
    assert not canvas.occupancy.any() and canvas.catalog == []
    assert (result.pixels - before).sum() == pytest.approx(16 * 2.0 + 16 * 3.0)
    assert len(result.catalog) == 2
    entry = result.catalog[0]
    x0, y0, x1, y1 = entry["bbox"]
    assert (x1 - x0, y1 - y0) == (4, 4)
    assert entry["x"] == pytest.approx(x0 + 1.5) and entry["y"] == pytest.approx(y0 + 1.5)


def test_place_objects_without_overlap_skips_what_does_not_fit():
    canvas = SkyCanvas(np.zeros((4, 4)))
    result = place_objects(canvas, [_stamp(), _stamp()], overlap_fraction=0.0, seed=0, max_attempts=20)
    assert len(result.catalog) == 1
    assert result.occupancy.all()


def test_place_objects_footprints_never_intersect():
    rng = np.random.default_rng(0)
    stamps = []
    for i in range(100):
        h, w = rng.integers(2, 6, size=2)
        footprint = rng.random((h, w)) < 0.7
        footprint[h // 2, w // 2] = True
        stamps.append(ObjectStamp(np.ones((h, w)), footprint, "compact", crop_id=f"s{i}"))
    by_id = {stamp.crop_id: stamp for stamp in stamps}

    result = place_objects(SkyCanvas(np.zeros((128, 128))), stamps, overlap_fraction=0.0, seed=3)
    assert len(result.catalog) == 100
    placed = []
    for entry in result.catalog:
        x0, y0, _, _ = entry["bbox"]
        rows, cols = np.nonzero(by_id[entry["crop_id"]].footprint)
        placed.append(set(zip((rows + y0).tolist(), (cols + x0).tolist())))
    for i in range(len(placed)):
        for j in range(i + 1, len(placed)):
            assert not placed[i] & placed[j]
    assert result.occupancy.sum() == sum(len(p) for p in placed)


def test_place_objects_raises_when_nothing_fits():
    canvas = SkyCanvas(np.zeros((4, 4)), occupancy=np.ones((4, 4), dtype=bool))
    with pytest.raises(PlacementError):
        place_objects(canvas, [_stamp()], seed=0, max_attempts=5)


def test_place_objects_skips_oversized_stamp():
    canvas = SkyCanvas(np.zeros((8, 8)))
    result = place_objects(canvas, [_stamp(size=10), _stamp(size=2)], seed=0)
    assert len(result.catalog) == 1


def test_place_objects_rejects_bad_overlap():
    with pytest.raises(ParameterError):
        place_objects(SkyCanvas(np.zeros((8, 8))), [_stamp()], overlap_fraction=1.0)


def test_place_objects_is_seeded():
    canvas = SkyCanvas(np.zeros((32, 32)))
    a = place_objects(canvas, [_stamp(), _stamp(size=3)], overlap_fraction=0.5, seed=7)
    b = place_objects(canvas, [_stamp(), _stamp(size=3)], overlap_fraction=0.5, seed=7)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.catalog == b.catalog


def test_cut_background_patch():
    bg = Image2D(np.arange(64, dtype=np.float32).reshape(8, 8), provenance="bg")
    patch = cut_background_patch(bg, 4, rng=0)
    assert patch.shape == (4, 4)
    assert patch.provenance.startswith("bg[")
    with pytest.raises(ShapeError):
        cut_background_patch(bg, 9)


def test_write_catalog(tmp_path):
    canvas = place_objects(SkyCanvas(np.zeros((16, 16))), [_stamp()], seed=0)
    path = write_catalog(canvas, str(tmp_path / "catalog.json"))
    entries = json.loads(open(path, encoding="utf-8").read())
    assert entries[0]["class"] == "compact"
    assert set(entries[0]) == {"x", "y", "class", "k", "bbox", "crop_id"}


# ---------------------------------------------------------------------------
# 合成マップ
# ---------------------------------------------------------------------------

def test_compose_without_crops_reproduces_background(tmp_path, background_fits):
    canvas, catalog_path = compose_map(background_fits, None, [], 0, out_dir=str(tmp_path / "out"))
    original = read_fits_cutout(background_fits).pixels
    written = read_fits_cutout(str(tmp_path / "out" / "synthetic_map.fits")).pixels
    assert np.array_equal(original.view(np.uint32), written.view(np.uint32))
    assert canvas.catalog == []
    assert json.loads(open(catalog_path, encoding="utf-8").read()) == []


def test_compose_injects_scaled_objects(tmp_path, background_fits):
    fm = FluxModel(sigma_bg=2e-4)
    canvas, catalog_path = compose_map(background_fits, None, _mask_list(), 2, fm=fm, overlap=0.0, seed=3,
                                       out_dir=str(tmp_path), crop_generator=_fake_crops)
    catalog = json.loads(open(catalog_path, encoding="utf-8").read())
    assert 1 <= len(catalog) <= 4
    assert {entry["class"] for entry in catalog} <= {"compact", "extended"}
    assert all(0 < entry["k"] <= fm.cap for entry in catalog)

    background = read_fits_cutout(background_fits).pixels.astype(np.float64)
    injected = (canvas.pixels - background).sum()
    expected = 0.0
    for entry in catalog:
        x0, y0, x1, y1 = entry["bbox"]
        area = 16 if entry["class"] == "compact" else 20
        expected += (0.9 - 0.5) * area * fm.sigma_bg * entry["k"]
    assert injected == pytest.approx(expected, rel=1e-4)

    off = ~canvas.occupancy
    assert np.array_equal(canvas.pixels[off], background[off])
    assert canvas.pixels[off].std() == pytest.approx(background[off].std(), rel=0.01)
    assert canvas.pixels[off].mean() == pytest.approx(background[off].mean(), abs=0.01 * background.std())


def test_compose_is_reproducible(tmp_path, background_fits):
    a, _ = compose_map(background_fits, None, _mask_list(), 2, seed=4, out_dir=str(tmp_path / "a"),
                       crop_generator=_fake_crops)
    b, _ = compose_map(background_fits, None, _mask_list(), 2, seed=4, out_dir=str(tmp_path / "b"),
                       crop_generator=_fake_crops)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.catalog == b.catalog


def test_compose_rejects_negative_crops(tmp_path, background_fits):
    with pytest.raises(ParameterError):
        compose_map(background_fits, None, [], -1, out_dir=str(tmp_path))
