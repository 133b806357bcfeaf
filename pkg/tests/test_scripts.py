import pandas as pd

from scripts import generate_scenario_csv, inspect_dataset


def test_generate_scenario_csv_writes_file(tmp_path, capsys):
    out = tmp_path / "nested" / "demo.csv"
    code = generate_scenario_csv.main(["--scenario", "mis_outcome", "--n", "40", "--p", "8", "--seed", "3", "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["y", "w"] + [f"X{j}" for j in range(1, 9)]
    assert len(frame) == 40
    assert "Wrote 40 rows" in capsys.readouterr().out


def test_scenario_frame_is_seeded():
    first = generate_scenario_csv.scenario_frame("linear31", n=30, p=8, seed=1)
    again = generate_scenario_csv.scenario_frame("linear31", n=30, p=8, seed=1)
    pd.testing.assert_frame_equal(first, again)


def test_inspect_dataset_reports_counts(tmp_path, capsys):
    out = tmp_path / "demo.csv"
    generate_scenario_csv.scenario_frame("mis_outcome", n=50, p=8, seed=2).to_csv(out, index=False)
    capsys.readouterr()
    assert inspect_dataset.main([str(out), "--rows", "3"]) == 0
    text = capsys.readouterr().out
    assert "Rows: 50, covariates: 8" in text
    assert "Treated (w=1):" in text


def test_inspect_dataset_warns_on_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,w,x\n1.0,3,0.5\n2.0,0,0.1\n", encoding="utf-8")
    assert inspect_dataset.main([str(bad)]) == 2
    assert "[WARN]" in capsys.readouterr().err
