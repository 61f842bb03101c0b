import struct

import numpy as np
import pytest

from compfuse.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from compfuse.config import PipelineConfig
from compfuse.pipeline import init_params


@pytest.mark.parametrize("comp,fusion", [("mlp", "combined"), ("conv2d", "cross"), ("none", "none")])
def test_round_trip_bit_exact(tmp_path, comp, fusion):
    p = init_params(PipelineConfig(compressor=comp, fusion=fusion, init_mode="unit"), 7)
    for t in p.named().values():  # include values that text formats would mangle
        t.data = t.data * np.pi
    p.llm.ln_b.data[0] = -0.0
    p.llm.ln_b.data[1] = 5e-324
    save_checkpoint(tmp_path / "a.ckpt", p)
    q = load_checkpoint(tmp_path / "a.ckpt")
    assert q.cfg == p.cfg
    assert p.named().keys() == q.named().keys()
    for name, t in p.named().items():
        assert q.named()[name].data.tobytes() == t.data.tobytes(), name


def test_layout_header(tmp_path):
    p = init_params(PipelineConfig(), 0)
    save_checkpoint(tmp_path / "a.ckpt", p)
    buf = (tmp_path / "a.ckpt").read_bytes()
    assert buf[:8] == MAGIC
    version, cfg_len = struct.unpack("<II", buf[8:16])
    assert version == 1 and b"compressor = mlp" in buf[16 : 16 + cfg_len]
    (n,) = struct.unpack("<I", buf[16 + cfg_len : 20 + cfg_len])
    assert n == len(p.named())


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_truncated_rejected(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", init_params(PipelineConfig(), 0))
    buf = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "b.ckpt").write_bytes(buf[: len(buf) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.ckpt")
