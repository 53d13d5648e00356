import pytest

from pvisland import cli
from pvisland.config import KNOWN_CHANNELS, from_mapping
from pvisland.errors import SimulationDivergence
from pvisland.runner import (
    build_compensator,
    build_controllers,
    build_plant,
    run_scenario,
    run_simulation,
)

SHORT = {"solver.duration": "0.6", "vcc.enable_at": "off"}


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("short_run")
    cfg = from_mapping(SHORT)
    return run_scenario(cfg, out, with_plots=True)


class TestRunArtifacts:
    def test_csv_header_contract(self, short_run):
        header = short_run.csv_path.read_text().splitlines()[0]
        assert header == ",".join(["t"] + KNOWN_CHANNELS)

    def test_csv_floats_round_trip(self, short_run):
        lines = short_run.csv_path.read_text().splitlines()
        first = lines[1].split(",")
        assert float(first[0]) == 0.0
        # full precision repr: reparses to the identical float
        for cell in lines[2].split(","):
            assert repr(float(cell)) == cell

    def test_report_has_fixed_keys(self, short_run):
        text = short_run.report_path.read_text()
        for key in ("scenario =", "thd_a_percent =", "vuf_percent =",
                    "p_sharing_ratio =", "dg1_vdc_mean =", "curtailment_percent =",
                    "energy_audit_percent =", "flag_count ="):
            assert key in text

    def test_flags_carry_timestamps(self, short_run):
        report = short_run.report
        for t, source, name in report.flags:
            assert 0.0 <= t <= 0.6
            assert source in ("dg1", "dg2", "vcc")
            assert name

    def test_echo_reload_reproduces_csv_bytes(self, short_run, tmp_path):
        cfg = from_mapping(dict(SHORT))
        again = run_scenario(cfg, tmp_path / "again")
        assert again.csv_path.read_bytes() == short_run.csv_path.read_bytes()
        # and through the echo file
        from pvisland.config import load_config
        cfg2 = load_config(short_run.echo_path)
        third = run_scenario(cfg2, tmp_path / "third")
        assert third.csv_path.read_bytes() == short_run.csv_path.read_bytes()

    def test_energy_audit_and_kcl_within_bounds(self, short_run):
        assert short_run.report.energy_audit_percent < 0.5
        assert short_run.report.max_kcl_residual < 1e-9


class TestPlots:
    def test_voltage_window_spans_five_cycles(self, short_run):
        path = short_run.out_dir / "plots" / "voltage_window_post.dat"
        rows = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        f1 = short_run.report.fundamental_hz
        dt = float(short_run.result.times[1] - short_run.result.times[0])
        assert len(rows) == int(round(5.0 / f1 / dt))

    def test_spectrum_rows_carry_percent(self, short_run):
        path = short_run.out_dir / "plots" / "spectrum_post.dat"
        rows = [l.split() for l in path.read_text().splitlines() if not l.startswith("#")]
        assert int(rows[0][0]) == 1
        assert float(rows[0][3]) == pytest.approx(100.0, rel=1e-6)
        orders = [int(r[0]) for r in rows]
        assert orders == list(range(1, len(rows) + 1))

    def test_pre_files_only_when_toggled(self, short_run):
        assert not (short_run.out_dir / "plots" / "voltage_window_pre.dat").exists()
        assert not (short_run.out_dir / "plots" / "spectrum_pre.dat").exists()


class TestChannelSelection:
    def test_subset_recorded(self, tmp_path):
        cfg = from_mapping(dict(SHORT, **{
            "outputs.channels": "vpcc_a, vpcc_b, vpcc_c, dg1_p, dg2_p, dg1_q, "
                                "dg2_q, dg1_vdc, dg2_vdc, dg1_omega, pv1_power, pv2_power",
            "solver.duration": "0.5"}))
        art = run_scenario(cfg, tmp_path)
        header = art.csv_path.read_text().splitlines()[0].split(",")
        assert "dg1_io_a" not in header
        assert "vpcc_a" in header


class TestBuilders:
    def test_validate_path_builds_everything(self):
        cfg = from_mapping({})
        build_plant(cfg)
        build_controllers(cfg)
        build_compensator(cfg)

    def test_communication_delay_defers_corrections(self):
        base = {"solver.duration": "0.4", "vcc.enable_at": "0.1"}
        instant = run_simulation(from_mapping(base))
        delayed = run_simulation(from_mapping(dict(base, **{"vcc.comm_delay": "0.05"})))
        # corrections reach the units only after the delay has elapsed
        dt = float(instant.times[1] - instant.times[0])
        i_before = int(0.13 / dt)
        assert abs(instant.channels["vc2_alpha"][i_before]) > 0.0
        assert delayed.channels["vc2_alpha"][i_before] == 0.0
        i_after = int(0.3 / dt)
        assert abs(delayed.channels["vc2_alpha"][i_after]) > 0.0

    def test_mode_channel_reflects_boot_mode(self):
        cfg = from_mapping(dict(SHORT, **{"solver.duration": "0.2"}))
        result = run_simulation(cfg)
        assert result.channels["dg1_mode"][0] == 1.0  # regulation at boot


class TestCli:
    def test_run_and_report_round_trip(self, tmp_path, capsys):
        out = tmp_path / "run"
        rc = cli.main(["run", "baseline", "--out", str(out),
                       "--duration", "0.6", "--vcc", "off"])
        assert rc == 0
        rc = cli.main(["report", str(out)])
        assert rc == 0
        rebuilt = (out / "report_rebuilt.txt").read_text()
        original = (out / "report.txt").read_text()

        def metric_lines(text):
            return [l for l in text.splitlines()
                    if l.startswith(("thd_", "vuf_", "p_sharing", "q_sharing"))]

        assert metric_lines(rebuilt) == metric_lines(original)

    def test_validate_ok(self, capsys):
        assert cli.main(["validate", "sharing"]) == 0

    def test_validate_unknown_scenario(self, capsys):
        assert cli.main(["validate", "does_not_exist.cfg"]) == cli.EXIT_CONFIG

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("solver.method = euler\n")
        assert cli.main(["run", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_vcc_override_forms(self, tmp_path, capsys):
        out = tmp_path / "o"
        rc = cli.main(["run", "baseline", "--out", str(out),
                       "--duration", "0.5", "--vcc", "at=0.1"])
        assert rc == 0

    def test_divergence_exit_code(self, monkeypatch, tmp_path, capsys):
        def boom(cfg):
            raise SimulationDivergence("test", t_last_good=0.1)

        monkeypatch.setattr(cli.runner_mod, "run_simulation", boom)
        rc = cli.main(["run", "baseline", "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_DIVERGENCE

    def test_io_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["report", str(tmp_path / "missing")]) == cli.EXIT_IO


class TestToggledPlots:
    def test_pre_post_pair_when_compensator_toggles(self, tmp_path):
        cfg = from_mapping({"solver.duration": "1.2", "vcc.enable_at": "0.55"})
        art = run_scenario(cfg, tmp_path, with_plots=True)
        for name in ("voltage_window_pre.dat", "spectrum_pre.dat",
                     "voltage_window_post.dat", "spectrum_post.dat"):
            assert (tmp_path / "plots" / name).exists()
        assert art.report.pre_window is not None
