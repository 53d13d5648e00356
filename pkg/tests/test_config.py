import math

import pytest

from pvisland.config import (
    DEFAULTS,
    echo,
    from_mapping,
    load_config,
    parse_text,
)
from pvisland.errors import ConfigurationError


class TestParsing:
    def test_empty_text_is_the_calibrated_baseline(self):
        cfg = parse_text("")
        assert cfg.name == "baseline"
        assert cfg.dt == 50e-6
        assert cfg.omega == 370.0
        assert cfg.v_amp == pytest.approx(math.sqrt(2.0) * 120.0)
        assert cfg.dgs[0].m_p == pytest.approx(12e-4)
        assert cfg.dgs[1].m_p == pytest.approx(6e-4)
        assert cfg.dgs[0].n_p == pytest.approx(2.0 * cfg.dgs[1].n_p)

    def test_scientific_notation_values_parse(self):
        cfg = parse_text("dg1.droop.n_p = 1e-3\n")
        assert cfg.dgs[0].n_p == 1e-3

    def test_comments_and_blank_lines_ignored(self):
        cfg = parse_text("# comment\n\nsolver.duration = 2.5  # trailing\n")
        assert cfg.duration == 2.5

    def test_unknown_key_rejected_by_path(self):
        with pytest.raises(ConfigurationError) as err:
            parse_text("dg1.droop.zeta = 3\n")
        assert "dg1.droop.zeta" in str(err.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_text("solver.dt = 1e-4\nsolver.dt = 2e-4\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_text("solver.dt 1e-4\n")

    def test_step_not_dividing_control_period_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            from_mapping({"solver.dt": "3e-6"})
        assert "control.period" in str(err.value)

    def test_control_period_not_dividing_tracker_period_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            from_mapping({"solver.dt": "30e-6", "control.period": "30e-6"})
        assert "mppt.period" in str(err.value)

    def test_step_not_dividing_compensator_period_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            from_mapping({"solver.dt": "50e-6", "vcc.period": "1.25e-4"})
        assert "vcc.period" in str(err.value)

    def test_bad_method_rejected(self):
        with pytest.raises(ConfigurationError):
            from_mapping({"solver.method": "euler"})

    def test_harmonics_list_parses(self):
        cfg = from_mapping({"load.harmonics": "-5:2.0:0.1, 7:1.0"})
        assert cfg.harmonics == [(-5, 2.0, 0.1), (7, 1.0, 0.0)]

    def test_zero_order_injection_rejected(self):
        with pytest.raises(ConfigurationError):
            from_mapping({"load.harmonics": "0:2.0"})

    def test_vcc_off_parses_to_none(self):
        cfg = from_mapping({"vcc.enable_at": "off"})
        assert cfg.vcc_enable_at is None

    def test_irradiance_events_parse(self):
        cfg = from_mapping({"events.irradiance": "1.0:1:0.9, 2.0:2:0.8"})
        assert cfg.irradiance_events == [(1.0, 0, 0.9), (2.0, 1, 0.8)]

    def test_unknown_channel_rejected(self):
        with pytest.raises(ConfigurationError):
            from_mapping({"outputs.channels": "vpcc_a, bogus"})

    def test_channel_subset_accepted(self):
        cfg = from_mapping({"outputs.channels": "vpcc_a, dg1_p"})
        assert cfg.channels == ["vpcc_a", "dg1_p"]

    def test_resonator_orders_parse(self):
        cfg = from_mapping({"dg1.prv.orders": "1,3,5"})
        assert cfg.dgs[0].prv_orders == (1, 3, 5)

    def test_bad_resonator_orders_rejected(self):
        with pytest.raises(ConfigurationError):
            from_mapping({"dg1.prv.orders": "3,five"})


class TestEcho:
    def test_round_trip_reproduces_config(self):
        cfg = from_mapping({"solver.duration": "2.0", "load.balanced_r": "7.5"})
        text = echo(cfg)
        again = parse_text(text)
        assert again.raw == cfg.raw

    def test_echo_covers_every_key(self):
        cfg = parse_text("")
        text = echo(cfg)
        keys = {line.split("=")[0].strip() for line in text.splitlines()}
        assert keys == set(DEFAULTS)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.cfg")

    def test_file_loading(self, tmp_path):
        path = tmp_path / "s.cfg"
        path.write_text("solver.duration = 1.25\n")
        assert load_config(path).duration == 1.25
