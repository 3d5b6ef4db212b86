import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpnet.ingest import (FULL, Graph3D, IngestError, RunConfig, XYZParseError,
                           format_xyz, load_manifest, parse_config, parse_xyz)


def test_parse_water_frame_with_target():
    text = "3\ntarget=-1.5\nO 0 0 0\nH 0.96 0 0\nH -0.24 0.93 0"
    graphs = parse_xyz(text)
    assert len(graphs) == 1
    g = graphs[0]
    assert g.n_atoms == 3
    assert list(g.atomic_numbers) == [8, 1, 1]
    assert g.graph_target == -1.5


def test_parse_minimal_frame_without_target():
    graphs = parse_xyz("1\n\nH 0 0 0")
    assert len(graphs) == 1
    assert graphs[0].n_atoms == 1
    assert graphs[0].graph_target is None


def test_parse_concatenated_frames():
    text = "2\n\nH 0 0 0\nH 1 0 0\n3\n\nO 0 0 0\nH 1 0 0\nH 0 1 0"
    graphs = parse_xyz(text)
    assert [g.n_atoms for g in graphs] == [2, 3]


def test_parse_reports_frame_and_line():
    text = "2\n\nH 0 0 0\nH 1 0 0\n2\n\nH 0 0 0\nXx 1 0 0"
    with pytest.raises(XYZParseError) as info:
        parse_xyz(text)
    assert info.value.frame == 1
    assert info.value.line == 8
    assert "Xx" in str(info.value)


@pytest.mark.parametrize("text,fragment", [
    ("x\n\nH 0 0 0", "malformed atom count"),
    ("1\n\nH 0 0 nan", "non-finite"),
    ("2\n\nH 0 0 0", "stream ended"),
    ("1\n\nH 0 zero 0", "bad coordinate"),
    ("1\ntarget=oops\nH 0 0 0", "bad target"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(XYZParseError, match=fragment):
        parse_xyz(text)


def test_heavy_elements_rejected():
    with pytest.raises(XYZParseError, match="unknown element symbol"):
        parse_xyz("1\n\nFr 0 0 0")  # Z = 87 is outside the supported table


def test_duplicate_positions_rejected():
    with pytest.raises(XYZParseError, match="duplicate-position"):
        parse_xyz("2\n\nH 0 0 0\nH 0 0 1e-9")


def test_graphs_are_immutable():
    g = parse_xyz("1\n\nH 0.5 0.25 0.125")[0]
    with pytest.raises(ValueError):
        g.positions[0, 0] = 1.0
    with pytest.raises(ValueError):
        g.atomic_numbers[0] = 2


coordinate = st.floats(min_value=-500.0, max_value=500.0,
                       allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 86), coordinate, coordinate, coordinate),
                min_size=1, max_size=6),
       st.one_of(st.none(), coordinate))
def test_xyz_round_trip_is_bit_identical(atoms, target):
    numbers = np.array([a[0] for a in atoms])
    positions = np.array([[a[1], a[2], a[3]] for a in atoms])
    if positions.shape[0] > 1:
        dist = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-6:
            return  # violates the duplicate-position guard by construction
    original = Graph3D(numbers, positions, graph_target=target, id="round")
    reparsed = parse_xyz(format_xyz([original]))[0]
    assert np.array_equal(reparsed.positions, original.positions)
    assert np.array_equal(reparsed.atomic_numbers, original.atomic_numbers)
    assert reparsed.graph_target == original.graph_target
    again = parse_xyz(format_xyz([reparsed]))[0]
    assert np.array_equal(again.positions, original.positions)


def test_parse_is_pure():
    text = "2\ntarget=0.25\nH 0 0 0\nHe 0.9 0.3 -0.4\n"
    first = parse_xyz(text)
    second = parse_xyz(text)
    assert np.array_equal(first[0].positions, second[0].positions)
    assert first[0].graph_target == second[0].graph_target


# --- manifest -----------------------------------------------------------------

def test_manifest_order_and_resolution(tmp_path):
    (tmp_path / "a.xyz").write_text("1\n\nH 0 0 0\n")
    (tmp_path / "b.xyz").write_text("1\n\nHe 0 0 0\n")
    manifest = tmp_path / "data.jsonl"
    manifest.write_text(
        json.dumps({"file": "a.xyz", "target": 1.0}) + "\n"
        + json.dumps({"file": "b.xyz", "target": -2.0}) + "\n"
    )
    entries = load_manifest(manifest)
    assert [t for _, t in entries] == [1.0, -2.0]
    assert entries[0][0].endswith("a.xyz")


def test_manifest_empty_file(tmp_path):
    manifest = tmp_path / "empty.jsonl"
    manifest.write_text("")
    assert load_manifest(manifest) == []


def test_manifest_nan_target_names_line(tmp_path):
    (tmp_path / "a.xyz").write_text("1\n\nH 0 0 0\n")
    manifest = tmp_path / "bad.jsonl"
    manifest.write_text(
        json.dumps({"file": "a.xyz", "target": 1.0}) + "\n"
        + '{"file": "a.xyz", "target": NaN}\n'
    )
    with pytest.raises(IngestError, match=":2:"):
        load_manifest(manifest)


def test_manifest_missing_file_and_duplicates(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(json.dumps({"file": "gone.xyz", "target": 0.5}) + "\n")
    with pytest.raises(IngestError, match="missing"):
        load_manifest(manifest)
    (tmp_path / "a.xyz").write_text("1\n\nH 0 0 0\n")
    manifest.write_text(
        json.dumps({"file": "a.xyz", "target": 1.0}) + "\n"
        + json.dumps({"file": "a.xyz", "target": 2.0}) + "\n"
    )
    with pytest.raises(IngestError, match="duplicate"):
        load_manifest(manifest)


# --- run configuration ----------------------------------------------------------

def test_config_defaults_match_reference_values():
    cfg = parse_config("")
    assert cfg.n_srbf == 6
    assert cfg.n_shbf == 7
    assert cfg.cutoff_c == 5.0
    assert cfg.ewt_threshold == 0.02
    assert cfg.warmup_factor == 0.2
    assert cfg.ablation_mode == FULL


def test_config_single_override():
    cfg = parse_config("cutoff_c: 6\n")
    assert cfg.cutoff_c == 6.0
    assert cfg.n_srbf == 6
    assert cfg.n_shbf == 7


def test_config_range_and_key_errors():
    with pytest.raises(IngestError, match="n_srbf"):
        parse_config("n_srbf: 0")
    with pytest.raises(IngestError, match="ablation_mode"):
        parse_config("ablation_mode: SOMETIMES")
    with pytest.raises(IngestError, match="unknown config key"):
        parse_config("learning_rate_typo: 0.1")
    with pytest.raises(IngestError, match="warmup_factor"):
        parse_config("warmup_factor: 0")
    with pytest.raises(IngestError, match="decay_ratio"):
        parse_config("decay_ratio: 1.5")


def test_config_comments_and_duplicates():
    cfg = parse_config("# header\nbatch_size: 16  # trailing\n\nseed: 3\n")
    assert cfg.batch_size == 16
    assert cfg.seed == 3
    with pytest.raises(IngestError, match="duplicate"):
        parse_config("seed: 1\nseed: 2\n")


def test_config_replace_revalidates():
    cfg = RunConfig()
    with pytest.raises(IngestError):
        cfg.replace(cutoff_c=-1.0)
