import json
import os

import numpy as np
import pytest

from obsbench import fileio
from obsbench.errors import FormatError
from obsbench.harness import Scenario, default_scenario, run_scenario
from obsbench.model import Loadfile
from obsbench.observers import default_gains


def write(path, text):
    path.write_text(text)
    return path


class TestParseLoadfile:
    def test_minimal(self, tmp_path):
        lf = fileio.parse_loadfile(write(tmp_path / "a.csv", "time_s,current_a\n1,2\n2,-3\n"))
        np.testing.assert_array_equal(lf.current_a, [2.0, -3.0])
        assert lf.voltage_v is None

    def test_column_order_free(self, tmp_path):
        lf = fileio.parse_loadfile(write(tmp_path / "a.csv", "voltage_v,current_a,time_s\n3.7,1,0\n"))
        assert lf.voltage_v[0] == 3.7 and lf.time_s[0] == 0.0

    @pytest.mark.parametrize("text,match", [
        ("", "empty"),
        ("time_s\n1\n", "current_a"),
        ("time_s,current_a,humidity\n1,2,3\n", "humidity"),
        ("time_s,current_a\n1,2\n2\n", "row 3"),
        ("time_s,current_a\n1,2\n2,x\n", "row 3"),
        ("time_s,current_a\n1,2\n2,nan\n", "row 3"),
        ("time_s,current_a\n1,2\n3,2\n3,1\n", "row 4"),
        ("time_s,time_s,current_a\n1,1,2\n", "duplicated"),
    ])
    def test_errors_name_the_problem(self, tmp_path, text, match):
        with pytest.raises(FormatError, match=match):
            fileio.parse_loadfile(write(tmp_path / "bad.csv", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="cannot open"):
            fileio.parse_loadfile(tmp_path / "nope.csv")

    def test_round_trip_large(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 100_000
        lf = Loadfile(np.cumsum(rng.uniform(0.1, 2.0, n)), rng.normal(0, 50, n),
                      rng.uniform(2.5, 4.3, n), rng.uniform(-20, 60, n))
        path = tmp_path / "big.csv"
        fileio.write_loadfile(path, lf)
        back = fileio.parse_loadfile(path)
        for name in fileio.LOADFILE_COLUMNS:
            np.testing.assert_array_equal(getattr(back, name), getattr(lf, name))


class TestJson:
    def test_invalid_json_reports_line(self, tmp_path):
        with pytest.raises(FormatError, match="line 2"):
            fileio.read_json(write(tmp_path / "x.json", "{\n  oops\n}"))

    def test_params_round_trip(self, tmp_path, cell):
        path = tmp_path / "p.json"
        fileio.write_json(path, cell.to_dict())
        assert fileio.read_params(path) == cell

    def test_ocv_round_trip(self, tmp_path, ocv):
        path = tmp_path / "o.json"
        fileio.write_json(path, ocv.to_dict())
        assert fileio.read_ocv(path) == ocv

    def test_gains_round_trip(self, tmp_path, cell, ocv):
        g = default_gains("pid", cell, ocv, 1.0)
        path = tmp_path / "g.json"
        fileio.write_json(path, g.to_dict())
        back = fileio.read_gains(path)
        assert back.k_p == g.k_p and back.k_d == g.k_d and back.variant == "pid"

    def test_scenario_paths_resolve_next_to_file(self, tmp_path):
        path = tmp_path / "s.json"
        fileio.write_json(path, {"kind": "accuracy", "params": "cell.json"})
        s = fileio.read_scenario(path)
        assert s.resolve(s.params) == os.path.join(str(tmp_path), "cell.json")


class TestManifest:
    def test_digests_and_verify(self, tmp_path):
        a = write(tmp_path / "a.txt", "hello")
        m = fileio.RunManifest.create([str(a)], scenario={"kind": "accuracy"}, seed=3)
        assert m.inputs[str(a)] == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        assert m.verify() == []
        a.write_text("changed")
        assert m.verify() == [str(a)]

    def test_round_trip(self):
        m = fileio.RunManifest.create(seed=1, command="bench", note="x")
        assert fileio.RunManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m

    def test_bad_manifest(self):
        with pytest.raises(FormatError):
            fileio.RunManifest.from_dict({"inputs": {}})


def bundle(s, out):
    res = run_scenario(s)
    fileio.write_bundle(out, res, fileio.RunManifest.create(scenario=s.to_dict(), seed=s.seed))
    return res


def without_timestamp(path):
    data = json.loads(path.read_text())
    data.pop("timestamp")
    return data


class TestBundle:
    def test_contents(self, tmp_path):
        s = default_scenario("accuracy", duration_s=300.0, estimators=("pi", "srckf"))
        bundle(s, tmp_path)
        names = sorted(os.listdir(tmp_path))
        assert names == ["comparison.csv", "manifest.json", "metrics.json",
                         "trajectory_pi.csv", "trajectory_srckf.csv"]
        head = (tmp_path / "trajectory_pi.csv").read_text().splitlines()
        assert head[0] == ",".join(fileio.TRAJECTORY_HEADER) and len(head) == 301
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert set(metrics["pi"]) == {"soc_pct", "voltage_v", "convergence_time_s"}

    def test_rerun_from_manifest_is_byte_identical(self, tmp_path):
        s = default_scenario("voltage_noise", duration_s=400.0, seed=17)
        bundle(s, tmp_path / "a")
        manifest = fileio.RunManifest.from_dict(json.loads((tmp_path / "a/manifest.json").read_text()))
        bundle(Scenario.from_dict(manifest.scenario), tmp_path / "b")
        for name in os.listdir(tmp_path / "a"):
            a, b = tmp_path / "a" / name, tmp_path / "b" / name
            if name == "manifest.json":
                assert without_timestamp(a) == without_timestamp(b)
            else:
                assert a.read_bytes() == b.read_bytes(), name
