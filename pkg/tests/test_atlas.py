import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attribroi.atlas import (
    ConsensusReport, RoiAtlas, RoiScoreTable, aggregate_roi, cohort_top_rois, consensus,
    rank_descending, roi_frequency, top_rois,
)
from attribroi.exceptions import AtlasConsistencyError, ConfigError, ShapeError

from conftest import region_atlas


def two_roi_atlas():
    labels = np.zeros((4, 4), dtype=int)
    labels[:, :2] = 1
    labels[:2, 2:] = 2
    return RoiAtlas(labels=labels, names={1: "left", 2: "top-right"})


def test_uniform_map_equal_shares():
    atlas = region_atlas()
    t = aggregate_roi(np.ones((2, 5)), atlas)
    assert np.allclose(t.means, 1.0) and np.allclose(t.shares, 0.1)
    assert sorted(t.ranks) == list(range(1, 11))
    assert list(t.order()) == list(range(1, 11))


def test_all_mass_in_one_roi():
    atlas = region_atlas()
    grid = np.zeros((2, 5))
    grid[atlas.labels == 3] = 2.5
    t = aggregate_roi(grid, atlas)
    assert t.shares[2] == 1.0 and t.ranks[2] == 1


def test_hand_computed_two_roi_grid():
    atlas = two_roi_atlas()
    grid = np.zeros((4, 4))
    grid[:, 0] = 1.0        # ROI 1: four 1s, four 0s
    grid[0, 2:] = -3.0      # ROI 2: two |-3|, two 0s
    grid[3, 3] = 100.0      # background, ignored
    t = aggregate_roi(grid, atlas)
    assert np.allclose(t.means, [0.5, 1.5])
    assert np.allclose(t.shares, [4 / 10, 6 / 10])
    assert list(t.ranks) == [2, 1]
    assert abs(t.shares.sum() - 1) < 1e-9


def test_zero_map_zero_shares_and_shape_error():
    atlas = two_roi_atlas()
    assert np.all(aggregate_roi(np.zeros((4, 4)), atlas).shares == 0)
    with pytest.raises(ShapeError):
        aggregate_roi(np.zeros((4, 5)), atlas)


def make_table(means):
    ids = np.arange(1, len(means) + 1)
    means = np.asarray(means, float)
    return RoiScoreTable(roi_ids=ids, means=means, shares=means / means.sum(),
                         ranks=rank_descending(means, ids))


def test_top_rois_tie_rule():
    means = [0.1, 0.2, 0.3, 0.5, 0.05, 0.6, 0.5, 0.01]
    assert top_rois(make_table(means), 3) == [6, 4, 7]
    assert top_rois(make_table(means), 2) == [6, 4]


def test_top_rois_sort_oracle_and_k_bounds():
    means = np.random.default_rng(0).permutation(20) + 0.5
    t = make_table(means)
    assert top_rois(t, 20) == [int(i) + 1 for i in np.argsort(-means)]
    with pytest.raises(ConfigError):
        top_rois(t, 0)
    with pytest.raises(ConfigError):
        top_rois(t, 21)


def test_roi_frequency():
    lists = [[1, 2], [2, 3], [2, 4], [1, 2]]
    f = roi_frequency(lists)
    assert f[2] == (4, 1.0)
    assert f[1] == (2, 0.5)
    assert roi_frequency([[1, 3], [3], [3, 5], [4]])[3] == (3, 0.75)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(1, 9), min_size=1, max_size=5, unique=True),
                min_size=1, max_size=12))
def test_roi_frequency_matches_scan(lists):
    f = roi_frequency(lists)
    for roi in range(1, 10):
        count = sum(roi in lst for lst in lists)
        assert f.get(roi, (0, 0.0))[0] == count


def test_cohort_top_orders_by_frequency_then_share():
    atlas = two_roi_atlas()
    a = aggregate_roi(np.where(atlas.labels == 1, 2.0, 1.0), atlas)
    b = aggregate_roi(np.where(atlas.labels == 2, 2.0, 1.0), atlas)
    c = aggregate_roi(np.where(atlas.labels == 2, 3.0, 1.0), atlas)
    s = cohort_top_rois([a, b, c], k=1)
    assert s.top == [2] and s.frequencies == {1: (1, 1 / 3), 2: (2, 2 / 3)}
    # tie on count; ROI 1 is twice the area, so its mean share (0.65) wins
    assert cohort_top_rois([a, b], k=1).top == [1]
    assert cohort_top_rois([a, b, c], k=1, min_fraction=0.9).top == []
    with pytest.raises(ConfigError):
        cohort_top_rois([])


def test_reference_consensus(reference_atlas, reference_lists):
    rep = consensus(*reference_lists, reference_atlas)
    names = {r: reference_atlas.name(r) for r in reference_atlas.roi_ids}
    assert {names[r] for r in rep.threeway} == {"Calcarine sulcus (Occipital lobe)", "Cuneus"}
    assert all(reference_atlas.brodmann_label(r) == "BA 17" for r in rep.threeway)
    assert "Insula" in {names[r] for r in rep.pairwise["saliency&gradcam"]}
    assert reference_atlas.brodmann_label(1) == "BA 13 & BA 16"
    assert "Parietal lobe" in {names[r] for r in rep.pairwise["saliency&shap"]}
    mt = {names[r] for r in rep.pairwise["gradcam&shap"]}
    assert "Mid. temporal gyrus & Inf. temporal gyrus" in mt
    assert reference_atlas.brodmann_label(9) == "BA 21 & BA 20"


def test_identical_and_disjoint_lists():
    atlas = region_atlas()
    rep = consensus([1, 2, 3], [1, 2, 3], [1, 2, 3], atlas)
    assert rep.threeway == [1, 2, 3] and all(v == [1, 2, 3] for v in rep.pairwise.values())
    rep = consensus([1, 2], [3, 4], [5, 6], atlas)
    assert rep.threeway == [] and all(v == [] for v in rep.pairwise.values())


def test_unknown_roi_is_atlas_error():
    with pytest.raises(AtlasConsistencyError):
        consensus([1, 99], [1], [1], region_atlas())


lists3 = st.lists(st.lists(st.integers(1, 10), max_size=7, unique=True), min_size=3, max_size=3)


@settings(max_examples=100, deadline=None)
@given(lists3)
def test_intersection_monotonicity(ls):
    rep = consensus(*ls, region_atlas())
    three = set(rep.threeway)
    for key, pair in rep.pairwise.items():
        a, b = key.split("&")
        assert three <= set(pair) <= set(rep.top[a]) & set(rep.top[b])


@settings(max_examples=50, deadline=None)
@given(lists3, st.permutations(range(3)))
def test_consensus_order_independent(ls, perm):
    atlas = region_atlas()
    base = consensus(*ls, atlas)
    methods = tuple(base.methods[i] for i in perm)
    other = consensus(*(ls[i] for i in perm), atlas, methods=methods)
    assert other.threeway == base.threeway
    for key, val in other.pairwise.items():
        a, b = key.split("&")
        ref = base.pairwise.get(f"{a}&{b}", base.pairwise.get(f"{b}&{a}"))
        assert val == ref


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_scale_invariance(c):
    atlas = region_atlas()
    grid = np.random.default_rng(0).normal(size=(2, 5))
    a, b = aggregate_roi(grid, atlas), aggregate_roi(grid * c, atlas)
    assert np.array_equal(a.ranks, b.ranks)
    assert top_rois(a, 5) == top_rois(b, 5)


def test_dash_for_missing_brodmann(reference_atlas):
    assert reference_atlas.brodmann_label(4) == "-"
    assert "Thalamus (-)" in consensus([4], [4], [4], reference_atlas).render_text()


def test_atlas_requires_names():
    with pytest.raises(AtlasConsistencyError):
        RoiAtlas(labels=np.array([[0, 1, 2]]), names={1: "a"})


def test_atlas_file_round_trip(tmp_path, reference_atlas):
    reference_atlas.save(tmp_path / "atlas.pgm")
    back = RoiAtlas.load(tmp_path / "atlas.pgm")
    assert np.array_equal(back.labels, reference_atlas.labels)
    assert back.names == reference_atlas.names and back.brodmann == reference_atlas.brodmann


def test_report_dict_round_trip(reference_atlas, reference_lists):
    freqs = {"saliency": {1: (3, 0.75)}}
    rep = consensus(*reference_lists, reference_atlas, frequencies=freqs)
    d = rep.to_dict()
    assert d["schema_version"] == 1
    assert set(d) == {"schema_version", "methods", "top", "pairwise", "threeway", "frequencies"}
    back = ConsensusReport.from_dict(d, reference_atlas)
    assert back.to_dict() == d


def test_table_dict_round_trip():
    t = make_table([0.3, 0.1, 0.6])
    back = RoiScoreTable.from_dict(t.to_dict())
    assert np.array_equal(back.ranks, t.ranks) and np.allclose(back.shares, t.shares)
