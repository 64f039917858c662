import csv
import json

import numpy as np
import pytest

from sccgan.cli import COMMANDS, main
from sccgan.imagecore import load_volume


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    for cmd in COMMANDS:
        assert main([cmd, "--help"]) == 0
    assert "required" in capsys.readouterr().out


def test_usage_errors(capsys, tmp_path):
    assert main(["no-such-command"]) == 2
    assert main(["pbs-check", "--k-mr", "10"]) == 2
    assert main(["pbs-check", "--k-mr", "ten", "--k-ct", "10"]) == 2
    assert main(["grad-check", "--out", str(tmp_path)]) == 2
    assert _err(capsys)["code"] == 2


def test_phantom_gen_then_evaluate_identical(tmp_path):
    out = tmp_path / "ph"
    assert main(["phantom-gen", "--slices", "4", "--height", "32", "--width", "32",
                 "--seed", "2", "--out", str(out)]) == 0
    ct = load_volume(out / "ct")
    assert ct.shape == (4, 32, 32)
    ev = tmp_path / "ev"
    assert main(["evaluate", "--gt", str(out / "ct"), "--syn", str(out / "ct"),
                 "--mr", str(out / "mr"), "--out", str(ev)]) == 0
    rep = json.loads((ev / "metrics.json").read_text())
    assert rep["volumes"][0]["mae"] == 0.0
    assert rep["volumes"][0]["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert rep["volumes"][0]["psnr"] == "inf"
    assert (ev / "metrics.csv").read_text().startswith("name,mae,psnr")
    assert json.loads((ev / "config.json").read_text())["command"] == "evaluate"


def test_missing_input_is_exit_3(tmp_path, capsys):
    assert main(["extract-mind", "--input", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 3
    assert _err(capsys)["code"] == 3
    assert main(["pbs-check", "--config", str(tmp_path / "missing.json")]) == 3


def test_malformed_volume_is_exit_4(tmp_path, capsys):
    (tmp_path / "v.json").write_text('{"dtype": "f32le", "shape": [2, 2, 2]}')
    (tmp_path / "v.raw").write_bytes(bytes(12))
    assert main(["extract-mind", "--input", str(tmp_path / "v"), "--out", str(tmp_path / "o")]) == 4
    assert "bytes" in _err(capsys)["message"]


def test_pbs_check_histogram(tmp_path):
    assert main(["pbs-check", "--k-mr", "30", "--k-ct", "20", "--draws", "200",
                 "--index", "15", "--index", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "pbs_histogram.csv")))
    assert set(rows[0]) == {"i", "ct_index", "count"}
    by_i = {}
    for r in rows:
        by_i.setdefault(int(r["i"]), {})[int(r["ct_index"])] = int(r["count"])
    assert by_i[0] == {0: 200}
    assert sum(by_i[15].values()) == 200
    assert set(by_i[15]) <= set(range(5, 16))


def test_pbs_check_bad_index(tmp_path):
    assert main(["pbs-check", "--k-mr", "5", "--k-ct", "5", "--index", "9",
                 "--out", str(tmp_path)]) == 4


def test_config_file_roundtrip(tmp_path):
    a = tmp_path / "a"
    assert main(["pbs-check", "--k-mr", "12", "--k-ct", "40", "--draws", "50",
                 "--seed", "7", "--out", str(a)]) == 0
    cfg = json.loads((a / "config.json").read_text())
    b = tmp_path / "b"
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({k: v for k, v in cfg.items() if k not in ("command", "out")}))
    assert main(["pbs-check", "--config", str(cfg_file), "--out", str(b)]) == 0
    assert (a / "pbs_histogram.csv").read_bytes() == (b / "pbs_histogram.csv").read_bytes()


def test_config_unknown_key(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"k_mr": 5, "k_ct": 5, "bogus": 1}))
    assert main(["pbs-check", "--config", str(cfg_file), "--out", str(tmp_path)]) == 2


def test_extract_mind_single_slice(tmp_path):
    ph = tmp_path / "ph"
    main(["phantom-gen", "--slices", "3", "--height", "16", "--width", "16", "--out", str(ph)])
    out = tmp_path / "m"
    assert main(["extract-mind", "--input", str(ph / "mr"), "--slice", "1", "--out", str(out)]) == 0
    f = load_volume(out / "mind_0001")
    assert f.shape == (80, 16, 16)
    np.testing.assert_array_equal(f.data.max(axis=0), 1.0)
    assert json.loads((out / "mind_params.json").read_text())["region_radius"] == 4


def test_grad_check_subset_and_failure_code(tmp_path, capsys):
    assert main(["grad-check", "--op", "square", "--op", "conv2d[x]", "--precision", "64",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "grad_check.csv")))
    assert [r["case"] for r in rows] == ["square", "conv2d[x]"]
    assert all(r["status"] == "PASS" for r in rows)
    assert main(["grad-check", "--op", "nonsense", "--out", str(tmp_path)]) == 2
    assert main(["grad-check", "--list"]) == 0


def _repeat(tmp_path, argv):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(argv + ["--out", str(d)]) == 0
        outs.append(_files(d))
    # config.json records the output dir, which differs by construction
    for o in outs:
        cfg = json.loads(o.pop("config.json"))
        cfg.pop("out")
        o["config"] = json.dumps(cfg, sort_keys=True).encode()
    return outs


@pytest.mark.parametrize("argv", [
    ["phantom-gen", "--slices", "3", "--height", "24", "--width", "24", "--noise", "30", "--seed", "5"],
    ["pbs-check", "--k-mr", "40", "--k-ct", "30", "--draws", "100", "--seed", "5"],
    ["pbs-check", "--k-mr", "40", "--k-ct", "30", "--draws", "100", "--mode", "RANDOM", "--seed", "5"],
    ["train-toy", "--steps", "3", "--slices", "4", "--height", "16", "--width", "16",
     "--base-channels", "2", "--res-blocks", "1", "--d-layers", "2", "--d-channels", "2",
     "--seed", "5", "--quiet"],
])
def test_repeat_is_bit_identical(tmp_path, argv):
    a, b = _repeat(tmp_path, argv)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k], k


def test_threads_do_not_change_results(tmp_path):
    base = ["phantom-gen", "--slices", "2", "--height", "16", "--width", "16", "--noise", "10"]
    assert main(base + ["--threads", "1", "--out", str(tmp_path / "t1")]) == 0
    assert main(base + ["--threads", "2", "--out", str(tmp_path / "t2")]) == 0
    assert (tmp_path / "t1" / "ct.raw").read_bytes() == (tmp_path / "t2" / "ct.raw").read_bytes()
    assert main(base + ["--threads", "0", "--out", str(tmp_path / "t0")]) == 2
