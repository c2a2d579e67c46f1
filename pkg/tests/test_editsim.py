import numpy as np
import pytest

from longiseg.core import LabelMask, ShapeMismatchError
from longiseg.editsim import (
    ErrorRegion,
    digital_line,
    error_regions,
    select_topk,
    simulate_edits,
    synthesize_scribble,
)


def flood_fill_regions(mask):
    """Brute-force 8-connected component oracle (BFS)."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    regions = []
    for start in np.argwhere(mask):
        start = tuple(start)
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        component = []
        while queue:
            r, c = queue.pop()
            component.append((r, c))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    nr, nc = r + dr, c + dc
                    if (
                        0 <= nr < mask.shape[0]
                        and 0 <= nc < mask.shape[1]
                        and mask[nr, nc]
                        and not seen[nr, nc]
                    ):
                        seen[nr, nc] = True
                        queue.append((nr, nc))
        regions.append(frozenset(component))
    return regions


def random_pair(rng, shape=(16, 16)):
    pred = rng.integers(0, 3, size=shape).astype(np.uint8)
    gt = rng.integers(0, 3, size=shape).astype(np.uint8)
    return LabelMask(pred), LabelMask(gt)


class TestErrorRegions:
    def test_no_error(self):
        rng = np.random.default_rng(0)
        labels = LabelMask(rng.integers(0, 3, size=(8, 8)).astype(np.uint8))
        assert error_regions(labels, labels) == []

    def test_single_square_under(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 2:5] = 1
        regions = error_regions(LabelMask(np.zeros_like(gt)), LabelMask(gt))
        assert len(regions) == 1
        (region,) = regions
        assert region.cls == 1 and region.polarity == "under" and region.area == 9

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            pred, gt = random_pair(rng)
            regions = error_regions(pred, gt)
            for cls in (1, 2):
                for polarity, mask in (
                    ("under", (gt.labels == cls) & (pred.labels != cls)),
                    ("over", (pred.labels == cls) & (gt.labels != cls)),
                ):
                    mine = [
                        frozenset(map(tuple, r.voxels))
                        for r in regions
                        if r.cls == cls and r.polarity == polarity
                    ]
                    oracle = flood_fill_regions(mask)
                    assert sorted(len(r) for r in mine) == sorted(len(r) for r in oracle)
                    assert set(mine) == set(oracle)

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        pred, gt = random_pair(rng)
        regions = error_regions(pred, gt)
        for cls in (1, 2):
            fn_set = {(int(r), int(c)) for r, c in np.argwhere((gt.labels == cls) & (pred.labels != cls))}
            union = set()
            for region in regions:
                if region.cls == cls and region.polarity == "under":
                    union |= set(map(tuple, region.voxels))
            assert union == fn_set

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            error_regions(
                LabelMask(np.zeros((4, 4), np.uint8)),
                LabelMask(np.zeros((5, 4), np.uint8)),
            )


def make_region(coords, cls=1, polarity="under"):
    voxels = np.asarray(sorted(coords))
    return ErrorRegion(cls=cls, polarity=polarity, voxels=voxels, area=len(voxels))


class TestSelectTopk:
    def test_fewer_than_k(self):
        regions = [make_region([(0, i)]) for i in range(3)]
        assert len(select_topk(regions, 5)) == 3

    def test_sorted_by_area_with_ties(self):
        def strip(row, n, cls, polarity):
            return make_region([(row, c) for c in range(n)], cls, polarity)

        regions = [
            strip(0, 9, 1, "under"),
            strip(1, 7, 2, "over"),
            strip(2, 7, 1, "under"),
            strip(3, 5, 2, "under"),
            strip(4, 5, 1, "over"),
            strip(5, 5, 1, "under"),
            strip(6, 1, 1, "under"),
        ]
        top = select_topk(regions, 5)
        assert [r.area for r in top] == [9, 7, 7, 5, 5]
        # ties resolve by (class, under-first, smallest coordinate)
        assert (top[1].cls, top[1].polarity) == (1, "under")
        assert (top[2].cls, top[2].polarity) == (2, "over")
        assert (top[3].cls, top[3].polarity) == (1, "under")
        assert (top[4].cls, top[4].polarity) == (1, "over")

    def test_empty(self):
        assert select_topk([], 5) == []


class TestScribble:
    def test_single_voxel(self):
        region = make_region([(3, 4)])
        assert np.array_equal(synthesize_scribble(region), [[3, 4]])

    def test_horizontal_strip(self):
        region = make_region([(2, c) for c in range(7)])
        scribble = synthesize_scribble(region)
        assert sorted(map(tuple, scribble)) == [(2, c) for c in range(7)]

    def test_membership_on_random_blobs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mask = rng.random((12, 12)) > 0.6
            if not mask.any():
                continue
            comp = flood_fill_regions(mask)[0]
            region = make_region(comp)
            scribble = synthesize_scribble(region)
            assert len(scribble) >= 1
            assert set(map(tuple, scribble)) <= set(comp)

    def test_digital_line_connected(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            p0, p1 = rng.integers(0, 20, size=(2, 2))
            line = digital_line(p0, p1)
            assert tuple(line[0]) == tuple(p0) and tuple(line[-1]) == tuple(p1)
            if len(line) > 1:
                steps = np.abs(np.diff(line, axis=0)).max(axis=1)
                assert (steps == 1).all()


class TestSimulateEdits:
    def test_perfect_prediction_no_edits(self):
        rng = np.random.default_rng(5)
        labels = LabelMask(rng.integers(0, 3, size=(10, 10)).astype(np.uint8))
        assert not simulate_edits(labels, labels).edits.any()

    def test_single_under_region_class2(self):
        gt = np.zeros((10, 10), dtype=np.uint8)
        gt[4:7, 4:7] = 2
        edits = simulate_edits(LabelMask(np.zeros_like(gt)), LabelMask(gt)).edits
        assert not edits[0].any()  # GGO channel untouched
        marked = np.argwhere(edits[1] == 1)
        assert len(marked) > 0
        assert all(gt[r, c] == 2 for r, c in marked)
        assert not (edits == -1).any()

    def test_limits_to_top5(self):
        gt = np.zeros((20, 20), dtype=np.uint8)
        # seven disjoint regions with distinct sizes
        for i, size in enumerate((7, 6, 5, 4, 3, 2, 1)):
            gt[2 * i, 2 : 2 + size] = 1
        edits = simulate_edits(LabelMask(np.zeros_like(gt)), LabelMask(gt)).edits
        touched_rows = {int(r) for r, c in np.argwhere(edits[0] == 1)}
        assert touched_rows == {0, 2, 4, 6, 8}  # the five largest strips

    def test_cap_below_topk(self):
        gt = np.zeros((20, 20), dtype=np.uint8)
        for i, size in enumerate((7, 6, 5, 4, 3)):
            gt[2 * i, 2 : 2 + size] = 1
        edits = simulate_edits(LabelMask(np.zeros_like(gt)), LabelMask(gt), cap=2).edits
        touched_rows = {int(r) for r, c in np.argwhere(edits[0] == 1)}
        assert touched_rows == {0, 2}

    def test_polarity_soundness_random(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pred, gt = random_pair(rng)
            edits = simulate_edits(pred, gt).edits
            for cls in (1, 2):
                plus = np.argwhere(edits[cls - 1] == 1)
                minus = np.argwhere(edits[cls - 1] == -1)
                for r, c in plus:
                    assert gt.labels[r, c] == cls and pred.labels[r, c] != cls
                for r, c in minus:
                    assert pred.labels[r, c] == cls and gt.labels[r, c] != cls

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        pred, gt = random_pair(rng)
        a = simulate_edits(pred, gt).edits
        b = simulate_edits(pred, gt).edits
        assert np.array_equal(a, b)

    def test_cap_validation(self):
        labels = LabelMask(np.zeros((4, 4), np.uint8))
        with pytest.raises(ValueError):
            simulate_edits(labels, labels, cap=0)
