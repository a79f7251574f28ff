import json

import pytest

from slungmpc.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    main,
)

HOVER = """
name = "hover"

[model]

[sim]
duration = 0.5
initial_position = [0.0, 0.0, 1.0]

[controller]

[safety]

[energy]

[[waypoints]]
position = [0.0, 0.0, 1.0]
"""


@pytest.fixture
def hover_path(tmp_path):
    path = tmp_path / "hover.toml"
    path.write_text(HOVER)
    return str(path)


class TestRun:
    def test_hover_succeeds(self, hover_path, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["run", hover_path, "--out", str(out)])
        assert code == EXIT_OK
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert len(lines) == 1 + 51   # header + duration/dt_ctrl + 1 samples
        header = lines[0].split(",")
        assert header[0] == "t" and "V" in header and "status" in header

    def test_metrics_json_written(self, hover_path, tmp_path):
        out = tmp_path / "out"
        main(["run", hover_path, "--out", str(out)])
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["success"] is True
        assert metrics["violations"] == 0

    def test_figures_next_to_csv(self, hover_path, tmp_path):
        out = tmp_path / "out"
        main(["run", hover_path, "--out", str(out)])
        assert (out / "trajectory.csv").exists()
        assert (out / "top_view.png").exists()
        assert (out / "storage.png").exists()
        assert (out / "swing.png").exists()

    def test_full_precision_csv(self, hover_path, tmp_path):
        out = tmp_path / "out"
        main(["run", hover_path, "--out", str(out)])
        lines = (out / "trajectory.csv").read_text().splitlines()
        cells = lines[1].split(",")
        # every float cell must round-trip exactly through its text form
        for cell in cells[:-2]:
            assert repr(float(cell)) == cell

    def test_malformed_config_names_field(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text(HOVER.replace("[model]", "[model]\nm_q = -1.0"))
        code = main(["run", str(path), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "m_q" in capsys.readouterr().err

    def test_unknown_arm_is_config_error(self, hover_path, tmp_path):
        code = main(["run", hover_path, "--arm", "Nonsense",
                     "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG


class TestValidate:
    @pytest.mark.parametrize("name", ["single_obstacle", "static_gate",
                                      "dynamic_cross"])
    def test_shipped_scenarios_validate(self, name, capsys):
        assert main(["validate", name]) == EXIT_OK
        assert "OK" in capsys.readouterr().out

    def test_start_inside_obstacle(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text(HOVER + "\n[[obstacles]]\nid = \"blocker\"\n"
                        "center = [0.0, 0.0, 1.0]\nradius = 0.5\n")
        assert main(["validate", str(path)]) == EXIT_CONFIG
        assert "h_blocker" in capsys.readouterr().err

    def test_zero_rho_rejected(self, hover_path, capsys):
        code = main(["validate", hover_path, "--set", "energy.rho=0.0"])
        assert code == EXIT_CONFIG
        assert "energy" in capsys.readouterr().err


class TestAblate:
    def test_single_arm_single_trial(self, hover_path, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["ablate", hover_path, "--arm", "SepNmpc", "--trials", "1",
                     "--out", str(out)])
        assert code == EXIT_OK
        table = (out / "ablation.txt").read_text().splitlines()
        assert len(table) == 3          # header, rule, one arm row
        assert table[2].startswith("SepNmpc")
        doc = json.loads((out / "ablation.json").read_text())
        assert len(doc["arms"]) == 1
        assert doc["arms"][0]["trials"] == 1

    def test_same_seed_byte_identical(self, hover_path, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            main(["ablate", hover_path, "--arm", "SepNmpc", "--trials", "2",
                  "--seed", "11", "--out", str(out)])
            outs.append((out / "ablation.json").read_bytes())
        assert outs[0] == outs[1]

    def test_timing_kept_out_of_summary(self, hover_path, tmp_path):
        out = tmp_path / "out"
        main(["ablate", hover_path, "--arm", "SepNmpc", "--trials", "1",
              "--out", str(out)])
        assert "solve_median_ms" not in (out / "ablation.json").read_text()
        assert "solve_median_ms" in (out / "timing.json").read_text()
