import csv
import io
import json

import pytest

from hidenseek.experiment import OUTPUT_FILES, emit_report, render, run_experiment
from hidenseek.scenario import bundled, gen_traffic, load_scenario


@pytest.fixture(scope="module")
def sc():
    return load_scenario(bundled()).with_overrides(cycles=3)


@pytest.fixture(scope="module")
def hns_report(sc):
    return run_experiment(sc, "hns")


def test_report_files_and_manifest(hns_report, tmp_path):
    paths = emit_report(hns_report, tmp_path)
    for name in OUTPUT_FILES + ("manifest.json",):
        assert (tmp_path / name).exists(), name
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 7 and man["mode"] == "hns" and man["version"]
    assert man["scenario"]["name"] == "table1"
    assert set(man["files"]) == set(OUTPUT_FILES)
    assert paths["asp.csv"] == tmp_path / "asp.csv"


def test_summary_totals_equal_asp_column_sums(hns_report):
    files = render(hns_report)
    sums = {}
    for row in csv.DictReader(io.StringIO(files["asp.csv"])):
        key = (row["cycle"], row["ecu"], row["victim_id"])
        acc = sums.setdefault(key, [0.0, 0.0, 0.0])
        acc[0] += float(row["asp"])
        acc[1] += float(row["asp_conditional"])
        acc[2] += float(row["randomization_bound"])
    rows = list(csv.DictReader(io.StringIO(files["summary.csv"])))
    assert len(rows) == len(sums)
    for row in rows:
        a, c, b = sums[(row["cycle"], row["ecu"], row["victim_id"])]
        assert float(row["total_asp"]) == pytest.approx(a, abs=1e-9)
        assert float(row["total_conditional"]) == pytest.approx(c, abs=1e-9)
        assert float(row["total_bound"]) == pytest.approx(b, abs=1e-9)


def test_rerun_is_byte_identical(sc, hns_report):
    assert render(run_experiment(sc, "hns")) == render(hns_report)


def test_defense_does_not_perturb_traffic_or_first_attack(sc, hns_report):
    off = run_experiment(sc, "off")
    assert off.attack_plans[0][1] == hns_report.attack_plans[0][1]
    assert gen_traffic(sc) == gen_traffic(sc)
    # cycle 0 runs the same base schedules in every mode
    assert off.schedules[(0, "ECU1")] == hns_report.schedules[(0, "ECU1")]


def test_plans_only_on_defended_ecus(hns_report):
    assert {e for _, e, _, _ in hns_report.plans} == {"ECU1"}
    assert [c for c, _, _, _ in hns_report.plans] == [1, 2, 3]


def test_unknown_mode(sc):
    with pytest.raises(ValueError):
        run_experiment(sc, "shuffle")


def test_emit_into_a_file_path_fails_verbatim(hns_report, tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(OSError):
        emit_report(hns_report, f)
