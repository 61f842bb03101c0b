import pytest

from compfuse.config import (
    FREEZE_SCHEDULE,
    ConfigError,
    PipelineConfig,
    TrainConfig,
    dump_config,
    load_config,
    parse_config,
)


def test_defaults_valid():
    cfg = PipelineConfig().validate()
    assert (cfg.patch_budget, cfg.n_compressed, cfg.grid_side, cfg.pool_window) == (256, 64, 16, 2)
    assert cfg.patch_dim == 768


def test_parse_comments_and_types():
    run = parse_config(
        """
        # toy
        d_t = 32   # width
        fusion = cross
        fusion_mask_visual = false
        stage2_lr = 5e-4
        """
    )
    assert run.pipeline.d_t == 32 and run.pipeline.fusion == "cross"
    assert run.pipeline.fusion_mask_visual is False
    assert run.train.stage2_lr == 5e-4


@pytest.mark.parametrize(
    "text,field",
    [
        ("bogus = 1", "bogus"),
        ("d_t = abc", "d_t"),
        ("d_t = 0", "d_t"),
        ("compressor = avgpool", "compressor"),
        ("n_compressed = 300", "n_compressed"),
        ("compressor = none", "fusion"),
        ("llm_heads = 3", "llm_heads"),
        ("warmup_ratio = 1.5", "warmup_ratio"),
    ],
)
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.field == field


def test_line_without_equals():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("d_t 64")


def test_dump_parse_round_trip(tmp_path):
    cfg = PipelineConfig(d_t=16, compressor="conv2d", fusion_mask_visual=False)
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path).pipeline == cfg


def test_freeze_schedule_and_stage_configs():
    assert FREEZE_SCHEDULE == {1: {"ve", "llm"}, 2: {"ve"}, 3: set()}
    t = TrainConfig()
    lrs = [t.stage(k).lr for k in (1, 2, 3)]
    assert lrs == sorted(lrs, reverse=True)
    with pytest.raises(ConfigError):
        t.stage(4)
