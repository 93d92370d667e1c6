import re
import subprocess
import sys

import numpy as np
import pytest

from ftn import checkpoint
from ftn.cli import main
from ftn.data import make_sample
from ftn.images import read_pgm, write_ppm
from ftn.model import FTNConfig, FTNModel, micro_ftn_config
from ftn.tensor import Tensor, no_grad
from ftn.tensorfile import load_tensor, save_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_describe_token_counts(capsys, tmp_path):
    code, out, _ = run(capsys, "describe", "T", "--save-config", str(tmp_path / "t.json"))
    assert code == 0
    counts = [int(line.split()[7]) for line in out.splitlines() if re.match(r"\s+\d\s", line)]
    assert counts == [3136, 784, 196, 49]
    cfg = FTNConfig.from_json((tmp_path / "t.json").read_text())
    assert cfg.encoder.dims == (64, 128, 256, 512) and cfg.decoder.embed_dim == 512


def test_params_within_budget(capsys):
    code, out, _ = run(capsys, "params", "S")
    total = int(re.search(r"parameters: (\d+)", out).group(1))
    assert code == 0 and abs(total - 28e6) / 28e6 <= 0.05
    code, out, _ = run(capsys, "params", "T", "--with-decoder")
    assert code == 0 and "decoder" in out and "aux" in out


def test_flops_writes_csv_and_figure(capsys, tmp_path):
    code, out, _ = run(capsys, "flops", "B", "--size", "224", "224", "--csv", str(tmp_path / "b.csv"))
    assert code == 0 and "1 MAC = 1 FLOP" in out
    gflops = float(re.search(r"total\s+([\d.]+) GFLOPs", out).group(1))
    assert abs(gflops - 9.1) / 9.1 <= 0.15
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "group,layer,params,macs" and len(rows) > 20
    assert rows[-2].startswith("total,") and rows[-1].startswith("note,") and "softmax" in rows[-1]
    assert (tmp_path / "b.png").read_bytes()[:4] == b"\x89PNG"


def test_output_is_deterministic(capsys):
    first = run(capsys, "flops", "L", "--size", "256", "256", "--with-decoder")
    assert first == run(capsys, "flops", "L", "--size", "256", "256", "--with-decoder")


def test_help_documents_mac_convention():
    proc = subprocess.run([sys.executable, "-m", "ftn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "1 MAC = 1 FLOP" in proc.stdout


def test_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["flops", "T", "--size", "224"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_runtime_failures_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "describe", "Q")
    assert code == 1 and err.startswith("error: ParameterError:") and err.count("\n") == 1
    code, _, err = run(capsys, "flops", "T", "--size", "100", "100")
    assert code == 1 and "LayoutError" in err
    (tmp_path / "bad.ftnc").write_bytes(b"FTNC\x01\x00")
    code, _, err = run(capsys, "segment", "--checkpoint", str(tmp_path / "bad.ftnc"),
                       "--image", "x.ppm", "--out", "y.pgm")
    assert code == 1 and "CheckpointError" in err and "offset" in err


def test_forward_from_config_matches_library(capsys, tmp_path, rng):
    cfg = micro_ftn_config(seed=4)
    (tmp_path / "c.json").write_text(cfg.to_json())
    x = rng.random((2, 32, 32, 3)).astype(np.float32)
    save_tensor(tmp_path / "x.ftnt", x)
    code, _, _ = run(capsys, "forward", "--config", str(tmp_path / "c.json"),
                     "--input", str(tmp_path / "x.ftnt"), "--output", str(tmp_path / "y.ftnt"))
    assert code == 0
    with no_grad():
        ref = FTNModel(cfg).logits(Tensor(x)).data
    assert load_tensor(tmp_path / "y.ftnt").tobytes() == ref.tobytes()


def test_segment_from_checkpoint(capsys, tmp_path):
    model = FTNModel(micro_ftn_config(seed=1))
    checkpoint.save(model, tmp_path / "m.ftnc")
    sample = make_sample(5)
    write_ppm(tmp_path / "i.ppm", sample.image)
    code, out, _ = run(capsys, "segment", "--checkpoint", str(tmp_path / "m.ftnc"),
                       "--image", str(tmp_path / "i.ppm"), "--out", str(tmp_path / "l.pgm"))
    assert code == 0
    labels = read_pgm(tmp_path / "l.pgm")
    assert labels.shape == (32, 32) and labels.max() <= 1
    counts = [int(v) for v in out.splitlines()[-1].split(":")[1].split()]
    assert sum(counts) == 1024


def test_train_toy_writes_trace_plot_and_checkpoint(capsys, tmp_path):
    code, out, _ = run(capsys, "train-toy", "--steps", "3", "--seed", "0", "--batch-size", "2",
                       "--out", str(tmp_path / "trace.csv"), "--checkpoint", str(tmp_path / "m.ftnc"))
    assert code == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 4
    assert (tmp_path / "trace.png").exists()
    checkpoint.load(tmp_path / "m.ftnc")


def test_gradcheck_seed_7(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "7")
    err = float(re.search(r"max relative error ([\d.e+-]+)", out).group(1))
    assert code == 0 and err < 1e-3 and "200 coordinates" in out


def test_derive_variants(capsys, tmp_path):
    code, out, _ = run(capsys, "derive-variants", "--out", str(tmp_path / "v.json"))
    assert code == 0 and "frozen variants match" in out
