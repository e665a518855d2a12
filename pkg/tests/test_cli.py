import json

import numpy as np
import pytest

import asvinit
from asvinit import cli
from asvinit.arch import serialize


@pytest.fixture
def tiny_arch_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(serialize(asvinit.toy_net(3, 4, 4, name="tiny")))
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_analyze_arch34_csv(capsys):
    code, out, err = run(capsys, "analyze", "--builtin", "arch34", "--format", "csv")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 1 + 34
    first = lines[1].split(",")
    # layer 1: conv output 112x112x64
    assert first[0] == "1"
    assert first[7:10] == ["112", "112", "64"]


def test_analyze_arch50_parameter_count(capsys):
    code, out, _ = run(capsys, "analyze", "--builtin", "arch50")
    assert code == 0
    obj = json.loads(out)
    assert abs(obj["total_params"] - 2.07e7) / 2.07e7 < 0.02


def test_analyze_missing_file_exits_2(capsys):
    code, out, err = run(capsys, "analyze", "--arch", "/nonexistent/net.json")
    assert code == 2
    assert err.strip() != ""
    assert out == ""


def test_analyze_json_roundtrips(capsys):
    code, out, _ = run(capsys, "analyze", "--builtin", "arch34")
    report = asvinit.ShapeReport.from_json(out)
    assert report == asvinit.ShapeReport.build(asvinit.builtin("arch34"))


def test_analyze_deterministic(capsys):
    _, out1, _ = run(capsys, "analyze", "--builtin", "arch50", "--format", "csv")
    _, out2, _ = run(capsys, "analyze", "--builtin", "arch50", "--format", "csv")
    assert out1 == out2


def test_init_all_methods_table(capsys):
    code, out, _ = run(capsys, "init", "--builtin", "arch34", "--method", "all")
    assert code == 0
    obj = json.loads(out)
    assert obj["methods"] == list(asvinit.METHODS)
    layer1 = obj["layers"][0]["sigma_w"]
    # the max-pool + stride layer gets a clearly larger backward-adaptive sigma
    assert layer1["asv-backward"] > layer1["kaiming-backward"]


def test_compare_methods_csv_matches_init_all(capsys):
    code, out1, _ = run(capsys, "compare-methods", "--builtin", "arch34",
                        "--format", "csv")
    assert code == 0
    code, out2, _ = run(capsys, "init", "--builtin", "arch34", "--method", "all",
                        "--format", "csv")
    assert code == 0
    assert out1 == out2
    header = out1.splitlines()[0].split(",")
    assert header == ["layer", *asvinit.METHODS]


def test_forward_methods_coincide_on_pooling_free_net(capsys, tmp_path):
    net = asvinit.Architecture(
        name="plain", input_shape=(10, 10, 4),
        layers=(
            asvinit.LayerSpec(kind="Conv", out_channels=8, kernel=(3, 3)),
            asvinit.LayerSpec(kind="Conv", out_channels=16, kernel=(3, 3)),
            asvinit.LayerSpec(kind="FullyConnected", out_channels=10,
                              activation="Identity"),
        ),
    )
    path = tmp_path / "plain.json"
    path.write_text(serialize(net))
    # with the ReLU-style input constant the adaptive forward column equals
    # the fan-in rule at every layer
    _, out_asv, _ = run(capsys, "init", "--arch", str(path), "--method",
                        "asv-forward", "--tau0", "0.5")
    _, out_kai, _ = run(capsys, "init", "--arch", str(path), "--method",
                        "kaiming-forward")
    sig_asv = [r["sigma_w"] for r in json.loads(out_asv)["layers"]]
    sig_kai = [r["sigma_w"] for r in json.loads(out_kai)["layers"]]
    assert sig_asv == pytest.approx(sig_kai, abs=1e-12)


def test_emit_weights_deterministic_and_readable(capsys, tiny_arch_file, tmp_path):
    w1 = tmp_path / "w1.bin"
    w2 = tmp_path / "w2.bin"
    for path in (w1, w2):
        code, _, _ = run(capsys, "init", "--arch", tiny_arch_file,
                         "--method", "asv-forward", "--seed", "7",
                         "--emit-weights", str(path))
        assert code == 0
    assert w1.read_bytes() == w2.read_bytes()

    header, weights, biases = cli.read_weights(str(w1))
    assert header["seed"] == 7
    assert header["method"] == "asv-forward"
    arch = asvinit.toy_net(3, 4, 4, name="tiny")
    plan = asvinit.init_plan("asv-forward", arch)
    net = asvinit.sample_parameters(arch, plan, seed=7)
    for w_file, w_mem in zip(weights, net.weights):
        assert np.array_equal(w_file, w_mem)
    for b_file in biases:
        assert np.all(b_file == 0.0)


def test_simulate_passes_with_loose_threshold(capsys, tiny_arch_file):
    code, out, err = run(
        capsys, "simulate", "--arch", tiny_arch_file, "--method", "asv-forward",
        "--trials", "2x16", "--threshold", "5.0", "--seed", "1",
    )
    assert code == 0
    obj = json.loads(out)
    assert obj["passed"] is True


def test_simulate_zero_threshold_fails(capsys, tiny_arch_file):
    code, out, err = run(
        capsys, "simulate", "--arch", tiny_arch_file, "--method", "asv-forward",
        "--trials", "1x1", "--threshold", "0",
    )
    assert code == 1
    assert "FAIL" in err


def test_simulate_budget_exceeded_exit_3(capsys, tiny_arch_file, monkeypatch):
    monkeypatch.setenv("ASV_BUDGET", "4")
    code, _, err = run(
        capsys, "simulate", "--arch", tiny_arch_file, "--method", "asv-forward",
        "--trials", "2x16", "--threshold", "0.5",
    )
    assert code == 3
    assert "budget" in err.lower()


def test_simulate_sigma_override_explodes(capsys, tiny_arch_file, tmp_path):
    override = tmp_path / "sigma.json"
    override.write_text(json.dumps([10.0, 10.0, 10.0, 10.0]))
    code, out, err = run(
        capsys, "simulate", "--arch", tiny_arch_file,
        "--sigma-override", str(override),
        "--trials", "2x16", "--threshold", "0.2", "--format", "csv",
    )
    assert code == 1
    rows = [line.split(",") for line in out.strip().splitlines()[1:]]
    fwd = [float(r[3]) for r in rows if r[0] == "forward"]
    # sigma 10 on every layer: measured levels grow geometrically
    assert fwd[1] > 100 * fwd[0]
    assert fwd[2] > 100 * fwd[1]


def test_out_flag_writes_file(capsys, tmp_path):
    out_path = tmp_path / "report.json"
    code, out, _ = run(capsys, "analyze", "--builtin", "arch34",
                       "--out", str(out_path))
    assert code == 0
    assert out == ""
    assert json.loads(out_path.read_text())["name"] == "arch34"
