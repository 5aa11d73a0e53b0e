"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from uhredit.images import ImageTensor, save_image
from uhredit.manifest import TripletRecord


def textured_rgb(seed: int, size: int = 96, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Band-limited random RGB texture with mid luminance. Deterministic."""
    rng = np.random.default_rng(seed)
    t = gaussian_filter(rng.uniform(size=(size, size, 3)), (1.2, 1.2, 0))
    t = (t - t.min()) / (t.max() - t.min())
    return lo + (hi - lo) * t


def textured_gray(seed: int, size: int = 256, sigma: float = 2.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = gaussian_filter(rng.uniform(size=(size + 16, size + 16)), sigma)
    t = (t - t.min()) / (t.max() - t.min())
    return t


def trackable_rgb(seed: int = 11, size: int = 480) -> np.ndarray:
    """Texture with both fine detail (decorrelates coarse embeddings) and
    strong large-scale structure (lets the flow pyramid latch big shifts)."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(size=(size, size))
    fine = gaussian_filter(noise, 1.5)
    coarse = gaussian_filter(noise, 12.0)
    tex = 0.35 * fine / fine.std() + 1.0 * coarse / coarse.std()
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return np.stack([tex, np.roll(tex, 3, axis=0), np.roll(tex, -3, axis=1)], axis=2)


def build_corpus(root, n_clean, n_blur, n_exposure, n_duplicate, n_noedit, size=96):
    """Synthetic triplet corpus with planted defects, one defect type per
    pipeline stage. Returns (records, defect_ids_by_kind)."""
    root.mkdir(parents=True, exist_ok=True)

    def write(name, arr):
        path = root / name
        save_image(ImageTensor(np.clip(arr, 0.0, 1.0)), path)
        return str(path)

    records: list[TripletRecord] = []
    defects: dict[str, list[str]] = {"blur": [], "exposure": [], "duplicate": [], "noedit": []}

    for i in range(n_clean):
        base = textured_rgb(1000 + i, size)
        edited = base.copy()
        edited[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3] = (
            1.0 - edited[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3]
        )
        records.append(
            TripletRecord(
                id=f"clean{i:03d}",
                input_path=write(f"clean{i:03d}_in.png", base),
                edited_path=write(f"clean{i:03d}_ed.png", edited),
                instruction="invert the colors of the central square",
            )
        )

    for i in range(n_blur):
        base = gaussian_filter(textured_rgb(2000 + i, size), (4.0, 4.0, 0))
        edited = base.copy()
        edited[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3] = (
            1.0 - edited[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3]
        )
        rid = f"blur{i:03d}"
        defects["blur"].append(rid)
        records.append(
            TripletRecord(
                id=rid,
                input_path=write(f"{rid}_in.png", base),
                edited_path=write(f"{rid}_ed.png", edited),
                instruction="invert the colors of the central square",
            )
        )

    for i in range(n_exposure):
        base = np.clip(textured_rgb(3000 + i, size) + 0.55, 0.0, 1.0)
        edited = base.copy()
        edited[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3] = 0.85
        rid = f"expo{i:03d}"
        defects["exposure"].append(rid)
        records.append(
            TripletRecord(
                id=rid,
                input_path=write(f"{rid}_in.png", base),
                edited_path=write(f"{rid}_ed.png", edited),
                instruction="darken the central square",
            )
        )

    for i in range(n_duplicate):
        source = records[i % max(n_clean, 1)]
        rid = f"dupl{i:03d}"
        defects["duplicate"].append(rid)
        records.append(
            TripletRecord(
                id=rid,
                input_path=source.input_path,
                edited_path=source.edited_path,
                instruction=source.instruction,
            )
        )

    for i in range(n_noedit):
        base = textured_rgb(4000 + i, size)
        rid = f"noed{i:03d}"
        defects["noedit"].append(rid)
        records.append(
            TripletRecord(
                id=rid,
                input_path=write(f"{rid}_in.png", base),
                edited_path=write(f"{rid}_ed.png", base),
                instruction="replace the cat with a dog",
            )
        )

    return records, defects


@pytest.fixture(scope="session")
def planted_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    records, defects = build_corpus(
        root, n_clean=160, n_blur=10, n_exposure=10, n_duplicate=10, n_noedit=10
    )
    return root, records, defects
