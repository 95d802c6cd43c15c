import json
import math
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import irsgame.experiment as experiment
from irsgame.cli import main
from irsgame.config import build_spec, dump_config, load_config
from irsgame.experiment import (CSV_COLUMNS, SweepAborted, SweepRow, SweepSpec, emit_outputs,
                                mean_ci95, read_csv, run_sweep, table_to_csv)
from irsgame.follower import FollowerError
from irsgame.game import DIRECT_LINK, RANDOM_PRICING, STACKELBERG
from irsgame.scenario import ScenarioConfig

SMALL = ScenarioConfig(num_antennas=2, num_users=2, num_modules=2, elements_per_module=2)


def small_spec(**kw):
    kw.setdefault("variable", "p_max_dbm")
    kw.setdefault("values", (-5.0, 5.0))
    kw.setdefault("trials", 3)
    kw.setdefault("base", SMALL)
    return SweepSpec(**kw)


class TestSweepSpec:
    @pytest.mark.parametrize("kw", [
        {"variable": "noise"},
        {"values": ()},
        {"trials": 0},
        {"schemes": ("stackelberg", "auction")},
        {"seed": -1},
        {"seed": 2 ** 64},
        {"variable": "num_modules", "values": (4.5,)},
        {"variable": "num_modules", "values": (-1,)},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            small_spec(**kw)

    def test_config_at(self):
        spec = small_spec(variable="num_modules", values=(4, 7))
        assert spec.values == (4.0, 7.0)
        assert spec.config_at(7.0).num_modules == 7
        assert small_spec().config_at(0.0).max_power == 1e-3
        assert spec.sweep_name == "num_modules"
        assert small_spec(name="fig1").sweep_name == "fig1"


class TestRunSweep:
    def test_direct_link_without_irs(self):
        spec = small_spec(variable="num_modules", values=(0,), trials=1, schemes=(DIRECT_LINK,))
        (row,) = run_sweep(spec).rows
        assert row.scheme == DIRECT_LINK and row.trials == 1 and row.failure_count == 0
        assert row.mean_V == 0.0 and row.mean_triggered == 0.0
        assert math.isnan(row.ci95_U)

    def test_paired_channels(self, monkeypatch):
        calls = []
        real = experiment.generate_channels

        def counting(cfg, rng):
            calls.append(cfg.max_power)
            return real(cfg, rng)

        monkeypatch.setattr(experiment, "generate_channels", counting)
        spec = small_spec(trials=2)
        res = run_sweep(spec)
        # one realization per (value, trial), shared by every scheme
        assert len(calls) == len(spec.values) * spec.trials
        assert len(res.rows) == len(spec.values) * len(spec.schemes)

    def test_schemes_see_identical_channels(self, monkeypatch):
        seen = {}
        real_s, real_r = experiment.run_stackelberg, experiment.run_random_pricing

        def spy(name, fn):
            def wrapped(ch, *a, **k):
                seen.setdefault(name, []).append(ch.H.tobytes() + ch.G.tobytes() + ch.Hd.tobytes())
                return fn(ch, *a, **k)
            return wrapped

        monkeypatch.setattr(experiment, "run_stackelberg", spy(STACKELBERG, real_s))
        monkeypatch.setattr(experiment, "run_random_pricing", spy(RANDOM_PRICING, real_r))
        run_sweep(small_spec(trials=2, schemes=(STACKELBERG, RANDOM_PRICING)))
        assert seen[STACKELBERG] == seen[RANDOM_PRICING]
        assert len(set(seen[STACKELBERG])) == 2  # trials differ, values share draws

    def test_rows_match_samples(self):
        res = run_sweep(small_spec(trials=4))
        for row in res.rows:
            s = res.samples[(row.sweep_value, row.scheme)]
            mean, ci = mean_ci95(s["U"])
            assert row.mean_U == float(format(mean, ".9g"))
            assert row.ci95_U == float(format(ci, ".9g"))
            np.testing.assert_allclose(s["U"] + s["V"], s["sum_rate"], rtol=1e-12)

    def test_failures_counted(self, monkeypatch):
        real = experiment.run_stackelberg
        count = {"n": 0}

        def flaky(ch, cfg, **kw):
            count["n"] += 1
            if count["n"] == 1:
                raise FollowerError("synthetic")
            return real(ch, cfg, **kw)

        monkeypatch.setattr(experiment, "run_stackelberg", flaky)
        res = run_sweep(small_spec(values=(0.0,), trials=20, schemes=(STACKELBERG, DIRECT_LINK)))
        rows = {r.scheme: r for r in res.rows}
        assert rows[STACKELBERG].failure_count == 1 and rows[STACKELBERG].trials == 19
        assert rows[DIRECT_LINK].failure_count == 0 and rows[DIRECT_LINK].trials == 20
        assert np.isnan(res.samples[(0.0, STACKELBERG)]["U"][0])

    def test_too_many_failures_abort(self, monkeypatch):
        def broken(*a, **k):
            raise FollowerError("synthetic")

        monkeypatch.setattr(experiment, "run_stackelberg", broken)
        with pytest.raises(SweepAborted):
            run_sweep(small_spec(values=(0.0,), trials=2, schemes=(STACKELBERG,)))

    def test_other_errors_propagate(self, monkeypatch):
        def buggy(*a, **k):
            raise KeyError("bug")

        monkeypatch.setattr(experiment, "run_stackelberg", buggy)
        with pytest.raises(KeyError):
            run_sweep(small_spec(values=(0.0,), trials=1, schemes=(STACKELBERG,)))

    def test_thread_count_invariant(self):
        spec = small_spec(trials=3)
        one, two = run_sweep(spec, threads=1), run_sweep(spec, threads=2)
        assert table_to_csv(one.rows) == table_to_csv(two.rows)
        with pytest.raises(ValueError):
            run_sweep(spec, threads=0)


class TestStatistics:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
    def test_ci_matches_scipy(self, xs):
        mean, half = mean_ci95(xs)
        x = np.asarray(xs)
        assert mean == pytest.approx(x.mean(), rel=1e-12, abs=1e-9)
        sem = stats.sem(x)
        if sem > 0:
            lo, hi = stats.t.interval(0.95, x.size - 1, loc=x.mean(), scale=sem)
            assert half == pytest.approx((hi - lo) / 2, rel=1e-9)
        else:
            assert half == 0.0

    def test_degenerate(self):
        assert all(math.isnan(v) for v in mean_ci95([]))
        m, h = mean_ci95([2.5])
        assert m == 2.5 and math.isnan(h)


row_values = st.floats(allow_infinity=False, width=64)


class TestCsv:
    def test_empty_schemes_header_only(self, tmp_path):
        res = run_sweep(small_spec(schemes=()))
        assert res.rows == []
        (path,) = emit_outputs(res.rows, str(tmp_path), name="empty")
        assert open(path).read() == ",".join(CSV_COLUMNS) + "\n"
        assert read_csv(path) == []

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(row_values, row_values, st.integers(0, 10 ** 6)), max_size=5))
    def test_round_trip(self, tmp_path_factory, data):
        rows = []
        for a, b, n in data:
            a9, b9 = (float(format(v, ".9g")) for v in (a, b))
            rows.append(SweepRow("s", a9, "stackelberg", n, b9, a9, b9, a9, b9, a9, b9, n))
        path = tmp_path_factory.mktemp("rt") / "t.csv"
        path.write_text(table_to_csv(rows))
        back = read_csv(path)
        # NaN != NaN, so compare the serialized forms as well as the fields
        assert table_to_csv(back) == table_to_csv(rows)
        for r, s in zip(rows, back):
            for c in CSV_COLUMNS:
                x, y = getattr(r, c), getattr(s, c)
                assert x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y))

    def test_round_trip_real_sweep(self, tmp_path):
        res = run_sweep(small_spec(trials=1))  # trials=1 gives NaN half-widths
        (path,) = emit_outputs(res.rows, str(tmp_path))
        back = read_csv(path)
        assert table_to_csv(back) == table_to_csv(res.rows)

    def test_nine_significant_digits(self):
        row = SweepRow("s", 1 / 3, "x", 1, *(math.pi,) * 7, 0)
        line = table_to_csv([row]).splitlines()[1]
        assert "0.333333333" in line and "3.14159265," in line

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(p)

    def test_unwritable_directory_leaves_nothing(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_outputs([], str(blocker / "sub"))
        assert sorted(os.listdir(tmp_path)) == ["file"]

    def test_failed_rename_cleans_up(self, tmp_path, monkeypatch):
        def fail(*a):
            raise OSError("disk gone")

        monkeypatch.setattr(experiment.os, "replace", fail)
        with pytest.raises(OSError):
            emit_outputs([], str(tmp_path), name="t")
        assert os.listdir(tmp_path) == []

    def test_existing_file_kept_on_failure(self, tmp_path, monkeypatch):
        target = tmp_path / "t.csv"
        target.write_text("old\n")
        monkeypatch.setattr(experiment.os, "replace", lambda *a: (_ for _ in ()).throw(OSError()))
        with pytest.raises(OSError):
            emit_outputs([], str(tmp_path), name="t")
        assert target.read_text() == "old\n"
        assert os.listdir(tmp_path) == ["t.csv"]


class TestPlots:
    def test_svg_well_formed_and_stable(self, tmp_path):
        res = run_sweep(small_spec(trials=2))
        paths = emit_outputs(res.rows, str(tmp_path / "a"), plots=True)
        again = emit_outputs(res.rows, str(tmp_path / "b"), plots=True)
        svgs = [p for p in paths if p.endswith(".svg")]
        assert len(svgs) == len(experiment.METRICS)
        for p, q in zip(paths, again):
            if p.endswith(".svg"):
                root = ET.parse(p).getroot()
                assert root.tag == "{http://www.w3.org/2000/svg}svg"
            assert open(p, "rb").read() == open(q, "rb").read()

    def test_empty_table_plot(self, tmp_path):
        paths = emit_outputs([], str(tmp_path), plots=True)
        for p in paths[1:]:
            ET.parse(p)


class TestConfig:
    def test_defaults(self):
        scenario, sweep = load_config(None)
        assert scenario == ScenarioConfig()
        spec = build_spec(scenario, sweep)
        assert spec.trials == 200 and spec.values == (-5.0, -2.5, 0.0, 2.5, 5.0)
        assert spec.schemes == (STACKELBERG, RANDOM_PRICING, DIRECT_LINK)

    def test_dump_round_trip(self, tmp_path):
        scenario = SMALL.replace(admm_penalty=0.5, irs_position=(190.0, 40.0), random_price_max=3.0)
        sweep = dict(load_config(None)[1], variable="num_modules", values=(4.0, 5.0), name="fig3")
        p = tmp_path / "c.ini"
        p.write_text(dump_config(scenario, sweep))
        s2, w2 = load_config(str(p))
        assert s2 == scenario and w2 == sweep

    def test_dbm_aliases_and_comments(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[scenario]\nmax_power_dbm = 0  # one milliwatt\nnoise_power_dbm = -80\n"
                     "warm_start = no\n[sweep]\nschemes = direct-link\n")
        scenario, sweep = load_config(str(p))
        assert scenario.max_power == 1e-3 and scenario.noise_power == pytest.approx(1e-11)
        assert scenario.warm_start is False and sweep["schemes"] == (DIRECT_LINK,)

    @pytest.mark.parametrize("text", ["[scenario]\nnum_mods = 3\n", "[sweep]\nrepeats = 3\n",
                                      "[other]\na = 1\n", "[scenario]\nnum_modules = many\n"])
    def test_errors(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        with pytest.raises(ValueError):
            load_config(str(p))


class TestCli:
    def test_print_config_round_trips(self, tmp_path, capsys):
        assert main(["print-config", "--seed", "7", "--trials", "3"]) == 0
        text = capsys.readouterr().out
        p = tmp_path / "c.ini"
        p.write_text(text)
        scenario, sweep = load_config(str(p))
        assert scenario.rng_seed == 7 and sweep["seed"] == 7 and sweep["trials"] == 3

    def test_solve_json(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[scenario]\nnum_antennas = 2\nnum_users = 2\nnum_modules = 2\n"
                       "elements_per_module = 2\n")
        out = tmp_path / "s.json"
        assert main(["solve", "--config", str(cfg), "--trial", "1", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["trial"] == 1 and set(payload["outcomes"]) == {STACKELBERG, RANDOM_PRICING, DIRECT_LINK}
        s = payload["outcomes"][STACKELBERG]
        assert s["U"] + s["V"] == pytest.approx(s["sum_rate"], rel=1e-12)
        assert len(s["phi"]["real"]) == 4 and len(s["W"]["real"]) == 2
        assert "equilibrium" not in s

    def test_sweep_writes_csv(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[scenario]\nnum_antennas = 2\nnum_users = 2\nnum_modules = 2\n"
                       "elements_per_module = 2\n[sweep]\nvalues = 0\nname = tiny\n")
        out = tmp_path / "out"
        rc = main(["sweep", "--config", str(cfg), "--trials", "2", "--schemes",
                   "direct-link,stackelberg", "--out", str(out), "--plots"])
        assert rc == 0
        rows = read_csv(out / "tiny.csv")
        assert [r.scheme for r in rows] == [DIRECT_LINK, STACKELBERG]
        assert (out / "tiny_V.svg").exists()
        assert capsys.readouterr().out.splitlines()[0] == str(out / "tiny.csv")

    def test_bad_inputs(self, tmp_path, capsys):
        assert main(["print-config", "--config", str(tmp_path / "missing.ini")]) == 2
        bad = tmp_path / "bad.ini"
        bad.write_text("[scenario]\nfoo = 1\n")
        assert main(["sweep", "--config", str(bad)]) == 2
        with pytest.raises(SystemExit):
            main(["sweep", "--schemes", "auction"])
        with pytest.raises(SystemExit):
            main(["sweep", "--seed", "-3"])

    def test_unwritable_output(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[scenario]\nnum_modules = 0\n[sweep]\nvalues = 0\n")
        blocker = tmp_path / "f"
        blocker.write_text("")
        rc = main(["sweep", "--config", str(cfg), "--trials", "1", "--schemes", "direct-link",
                   "--out", str(blocker / "x")])
        assert rc == 1
