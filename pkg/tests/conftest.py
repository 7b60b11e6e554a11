import os

import numpy as np
import pytest
import torch

from changediff.codec import ClassPalette, PaletteEntry

os.environ.setdefault("MPLBACKEND", "Agg")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def palette():
    return ClassPalette((
        PaletteEntry(1, "building", (255, 0, 0)),
        PaletteEntry(2, "water", (0, 255, 0)),
        PaletteEntry(3, "tree", (0, 0, 255)),
        PaletteEntry(4, "low vegetation", (128, 128, 0)),
    ))


@pytest.fixture
def small_palette():
    return ClassPalette.from_pairs([("a", (255, 0, 0)), ("b", (0, 255, 0)), ("c", (0, 0, 255))])


def random_layout(rng, palette, h, w, unlabeled=True):
    ids = palette.class_ids + ([palette.unlabeled_id] if unlabeled else [])
    return rng.choice(np.asarray(ids, dtype=np.uint8), size=(h, w))


# --- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": ""})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["ran"] = True
        entry["detail"] = "; ".join(f"{k}={v}" for k, v in rep.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = f" ({e['detail']})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number} {e['title']}: {status}{detail}")
