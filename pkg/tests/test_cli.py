import csv
import io
import json

import numpy as np
import pytest

from compfuse.checkpoint import save_checkpoint
from compfuse.cli import main
from compfuse.config import PipelineConfig, TrainConfig
from compfuse.data import make_sample
from compfuse.llm import decode_text
from compfuse.pipeline import init_params
from compfuse.train import train_stage

TINY_TRAIN = """
stage1_steps = 2
stage2_steps = 2
stage3_steps = 2
stage1_batch = 2
stage2_batch = 2
stage3_batch = 2
"""


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_flops_all_table(capsys):
    rc, out, _ = run(capsys, "flops", "--all")
    assert rc == 0
    lines = out.strip().splitlines()
    assert len(lines) == 7
    totals = {ln.split()[0]: int(ln.split()[7]) for ln in lines[2:]}
    assert totals["compress"] < totals["cross"] < totals["decoder"] < totals["combined"]


def test_flops_single_variant_csv(capsys):
    rc, out, _ = run(capsys, "flops", "--variant", "compress", "--csv", "--ntext", "0")
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 1 and rows[0]["variant"] == "compress" and rows[0]["fuse"] == "0"


def test_flops_bad_config_names_field(capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("d_t = -4\n")
    rc, _, err = run(capsys, "flops", "--config", str(tmp_path / "bad.cfg"))
    assert rc == 2 and "d_t" in err
    (tmp_path / "bad2.cfg").write_text("colour = red\n")
    rc, _, err = run(capsys, "flops", "--config", str(tmp_path / "bad2.cfg"))
    assert rc == 2 and "colour" in err


def test_config_from_environment(capsys, tmp_path, monkeypatch):
    (tmp_path / "c.cfg").write_text("d_t = 32\n")
    monkeypatch.setenv("COMPFUSE_CONFIG", str(tmp_path / "c.cfg"))
    _, env_out, _ = run(capsys, "flops", "--variant", "compress", "--csv")
    monkeypatch.delenv("COMPFUSE_CONFIG")
    _, default_out, _ = run(capsys, "flops", "--variant", "compress", "--csv")
    assert env_out != default_out


def test_usage_errors_exit_two(capsys):
    assert run(capsys, "flops", "--variant", "nope")[0] == 2
    assert run(capsys, "train")[0] == 2  # --out missing
    assert run(capsys, "generate", "--checkpoint", "/no/such.ckpt", "--image", "x.ppm")[0] == 2


def test_gradcheck_tolerance_zero_fails(capsys):
    rc, out, _ = run(capsys, "gradcheck", "--tolerance", "0", "--probes", "9")
    assert rc == 1 and "FAIL" in out


def test_gradcheck_default_passes(capsys):
    rc, out, _ = run(capsys, "gradcheck")
    assert rc == 0 and out.count(" ok ") == 9


def test_train_all_writes_outputs(capsys, tmp_path):
    (tmp_path / "t.cfg").write_text(TINY_TRAIN)
    out_dir = tmp_path / "run"
    rc, out, _ = run(capsys, "train", "--config", str(tmp_path / "t.cfg"), "--stage", "all", "--out", str(out_dir))
    assert rc == 0
    for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "trace.csv", "manifest.json"):
        assert (out_dir / name).is_file()
    m = json.loads((out_dir / "manifest.json").read_text())
    assert m["seed"] == 0 and m["config"] == str(tmp_path / "t.cfg") and m["version"]
    assert m["command"].startswith("compfuse train")


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    d = tmp_path_factory.mktemp("overfit")
    s = make_sample("color-caption", 0)
    p = init_params(PipelineConfig(), 0)
    st = TrainConfig(stage2_lr=1e-3, stage2_batch=1).stage(2)
    train_stage(p, st, [s], steps=300)
    save_checkpoint(d / "m.ckpt", p)
    np.save(d / "img.npy", s.image.pixels)
    return d, decode_text(s.target)


def test_generate_reproduces_overfit_caption(capsys, overfit):
    d, caption = overfit
    args = ("generate", "--checkpoint", str(d / "m.ckpt"), "--image", str(d / "img.npy"), "--prompt", "describe")
    rc, out, _ = run(capsys, *args)
    assert rc == 0
    assert out.splitlines()[1] == f"text: {caption}"
    assert run(capsys, *args)[1] == out  # deterministic
