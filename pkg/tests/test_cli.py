import json

import numpy as np
import pytest

from kdn.cli import main
from kdn.model import ModelConfig, build_model, load_fixture, prefill

MODEL_JSON = json.dumps({"n_layers": 2, "n_heads": 2, "d_head": 4, "vocab_size": 32})


@pytest.fixture()
def workspace(tmp_path):
    (tmp_path / "model.json").write_text(MODEL_JSON)
    (tmp_path / "tokens.txt").write_text(" ".join(str(i % 32) for i in range(10)))
    return tmp_path


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- put / get ----------------------------------------------------------------------


def test_put_then_get(workspace, capsys):
    root = str(workspace / "store")
    code, out, _ = _run(capsys, [
        "put", "--root", root, "--model", str(workspace / "model.json"),
        "--tokens", str(workspace / "tokens.txt"),
    ])
    assert code == 0
    assert "key" in out
    code, out, _ = _run(capsys, [
        "get", "--root", root, "--model", MODEL_JSON,
        "--tokens", str(workspace / "tokens.txt"),
    ])
    assert code == 0
    assert "miss_suffix: 0 tokens" in out


def test_put_idempotent_message(workspace, capsys):
    root = str(workspace / "store")
    args = ["put", "--root", root, "--model", MODEL_JSON, "--tokens", str(workspace / "tokens.txt")]
    assert _run(capsys, args)[0] == 0
    code, out, _ = _run(capsys, args)
    assert code == 0 and "already stored" in out


def test_get_reports_miss(workspace, capsys):
    root = str(workspace / "store")
    _run(capsys, ["put", "--root", root, "--model", MODEL_JSON,
                  "--tokens", str(workspace / "tokens.txt")])
    (workspace / "other.txt").write_text("31 31 31")
    code, out, _ = _run(capsys, ["get", "--root", root, "--model", MODEL_JSON,
                                 "--tokens", str(workspace / "other.txt")])
    assert code == 0
    assert "miss_suffix: 3 tokens -> 31 31 31" in out


def test_get_json_output(workspace, capsys):
    root = str(workspace / "store")
    _run(capsys, ["put", "--root", root, "--model", MODEL_JSON,
                  "--tokens", str(workspace / "tokens.txt")])
    code, out, _ = _run(capsys, ["--output", "json", "get", "--root", root,
                                 "--model", MODEL_JSON, "--tokens", str(workspace / "tokens.txt")])
    assert code == 0
    rows = json.loads(out[: out.rindex("]") + 1])
    assert len(rows) == 1 and int(rows[0]["tokens"]) == 10


def test_missing_root_is_operational_error(workspace, capsys, monkeypatch):
    monkeypatch.delenv("KDN_ROOT", raising=False)
    code, _, err = _run(capsys, ["get", "--model", MODEL_JSON,
                                 "--tokens", str(workspace / "tokens.txt")])
    assert code == 1
    assert "store root" in err or "KDN_ROOT" in err


def test_bad_model_config(workspace, capsys):
    code, _, err = _run(capsys, ["put", "--root", str(workspace / "s"),
                                 "--model", "{broken", "--tokens", str(workspace / "tokens.txt")])
    assert code == 1 and "bad model config" in err


def test_bad_token_file(workspace, capsys):
    (workspace / "bad.txt").write_text("1 two 3")
    code, _, err = _run(capsys, ["put", "--root", str(workspace / "s"),
                                 "--model", MODEL_JSON, "--tokens", str(workspace / "bad.txt")])
    assert code == 1 and "integers" in err


def test_unknown_profile(workspace, capsys):
    code, _, err = _run(capsys, ["put", "--root", str(workspace / "s"), "--model", MODEL_JSON,
                                 "--tokens", str(workspace / "tokens.txt"), "--profile", "nope"])
    assert code == 1 and "unknown codec profile" in err


# -- blend ---------------------------------------------------------------------------


def test_blend_writes_outputs(workspace, capsys):
    req = workspace / "blend.json"
    req.write_text(json.dumps({
        "model": json.loads(MODEL_JSON),
        "segments": [[1, 2, 3, 4], [5, 6, 7, 8]],
        "ratio": 1.0,
    }))
    out_dir = workspace / "out"
    code, out, _ = _run(capsys, ["blend", "--request", str(req), "--out", str(out_dir)])
    assert code == 0
    report = json.loads((out_dir / "blend_report.json").read_text())
    assert report["recompute_ratio"] == 1.0
    assert report["kv_error"] == 0.0
    _, cache, states = load_fixture(out_dir / "blended.kdnf")
    model = build_model(ModelConfig.from_dict(json.loads(MODEL_JSON)))
    oracle_cache, _ = prefill(model, [1, 2, 3, 4, 5, 6, 7, 8])
    np.testing.assert_allclose(cache.k_pre, oracle_cache.k_pre, atol=1e-6)


def test_blend_ratio_out_of_range_is_usage_error(workspace, capsys):
    req = workspace / "blend.json"
    req.write_text(json.dumps({
        "model": json.loads(MODEL_JSON), "segments": [[1, 2]], "ratio": 2.0,
    }))
    code, _, err = _run(capsys, ["blend", "--request", str(req), "--out", str(workspace / "o")])
    assert code == 2
    assert "ratio" in err


def test_blend_bad_request_file(workspace, capsys):
    code, _, err = _run(capsys, ["blend", "--request", str(workspace / "nope.json")])
    assert code == 1 and "bad blend request" in err


# -- bench ----------------------------------------------------------------------------


def test_bench_codec_json(capsys):
    code, out, _ = _run(capsys, ["--output", "json", "bench", "codec", "--profile", "4bit-deflate"])
    assert code == 0
    rows = json.loads(out)
    by_name = {r["fixture"]: r for r in rows}
    assert float(by_name["smooth"]["ratio"]) >= 8.0
    assert float(by_name["random"]["max_err"]) >= 0.0


def test_bench_codec_inline_profile(capsys):
    inline = json.dumps({"quant_bits": 8, "group_size": 16, "anchor_stride": 16, "lossless_id": 1})
    code, out, _ = _run(capsys, ["bench", "codec", "--profile", inline])
    assert code == 0 and "smooth" in out


# -- cost -----------------------------------------------------------------------------


def test_cost_report_published(capsys):
    code, out, _ = _run(capsys, ["cost", "report"])
    assert code == 0
    assert "inject ratio (FT/KDN): 40.00x" in out
    assert "cost ratio   (IC/KDN): 2.53x" in out
    assert "delay ratio  (IC/KDN): 3.67x" in out


def _params_doc():
    return {
        "T": 3600, "C_gpu": 2 / 3600, "C_store": 1e-12, "C_net": 1e-12,
        "S_model": 5e9, "S_kv": 2e9, "S_text": 4e4,
        "T_prefill": 8, "T_Q": 0.4, "T_finetune": 900, "B": 1e10,
    }


def test_cost_sweep(workspace, capsys):
    p = workspace / "params.json"
    p.write_text(json.dumps(_params_doc()))
    code, out, _ = _run(capsys, ["cost", "sweep", "--params", str(p),
                                 "--sweep", "r1=0:1:0.25", "--objective", "money"])
    assert code == 0
    assert "threshold" in out
    assert out.count("\n") >= 5  # header + 5 grid rows + threshold line


def test_cost_sweep_bad_spec(workspace, capsys):
    p = workspace / "params.json"
    p.write_text(json.dumps(_params_doc()))
    code, _, err = _run(capsys, ["cost", "sweep", "--params", str(p), "--sweep", "r2=0:1:0.1"])
    assert code == 1 and "r1" in err


def test_cost_simulate(workspace, capsys):
    p = workspace / "params.json"
    p.write_text(json.dumps(_params_doc()))
    trace = workspace / "trace.json"
    trace.write_text(json.dumps([[0.0, "a"], [5.0, "a"], [10.0, "b"], [4000.0, "a"]]))
    code, out, _ = _run(capsys, ["--output", "json", "cost", "simulate",
                                 "--params", str(p), "--trace", str(trace)])
    assert code == 0
    assert "empirical mix: r1=0.2500 r2=0.5000" in out
    rows = json.loads(out[out.index("["):])
    for row in rows:
        assert float(row["max_abs_diff"]) < 1e-9


def test_cost_simulate_bad_trace(workspace, capsys):
    p = workspace / "params.json"
    p.write_text(json.dumps(_params_doc()))
    bad = workspace / "trace.json"
    bad.write_text("[[1.0]]")  # missing context field
    code, _, err = _run(capsys, ["cost", "simulate", "--params", str(p), "--trace", str(bad)])
    assert code == 1 and "bad trace file" in err
    bad.write_text("[]")
    code, _, err = _run(capsys, ["cost", "simulate", "--params", str(p), "--trace", str(bad)])
    assert code == 1 and "empty" in err


def test_usage_error_from_argparse(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
