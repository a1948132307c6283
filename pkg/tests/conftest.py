import numpy as np
import pytest

from chisep_atlas.volume import BinaryMask, ScalarVolume, Unit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def vol(data, unit=Unit.DIMENSIONLESS, vox=(1.0, 1.0, 1.0)) -> ScalarVolume:
    return ScalarVolume(np.asarray(data, dtype=np.float64), vox, unit)


def ball_mask(n: int, radius: float, vox=(1.0, 1.0, 1.0)) -> BinaryMask:
    c = (n - 1) / 2
    x, y, z = np.meshgrid(*[np.arange(n) - c] * 3, indexing="ij")
    return BinaryMask(x**2 + y**2 + z**2 <= radius**2, vox)


def interior(mask: BinaryMask, margin_vox: int) -> np.ndarray:
    """Voxels at least ``margin_vox`` voxels (chessboard) from anything outside ``mask``."""
    from scipy import ndimage

    if margin_vox == 0:
        return mask.data.copy()
    return ndimage.binary_erosion(mask.data, np.ones((3, 3, 3), bool), iterations=margin_vox, border_value=0)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion


_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f"  ({detail})" if detail else ""))
