import pytest

from egotwin.config import PipelineConfig
from egotwin.errors import InvalidSpec


def test_defaults_are_valid_and_round_trip():
    cfg = PipelineConfig().validate()
    assert PipelineConfig.from_text(cfg.to_text()) == cfg
    assert cfg.voxel_size == 0.01 and cfg.truncation == 0.04 and cfg.workers == 1


def test_from_text_parses_types_and_comments():
    cfg = PipelineConfig.from_text("# tuned\nvoxel_size = 0.02  # coarser\ntruncation = 0.08\nransac_iterations = 64\n\n")
    assert cfg.voxel_size == 0.02 and cfg.truncation == 0.08
    assert cfg.ransac_iterations == 64 and isinstance(cfg.ransac_iterations, int)


@pytest.mark.parametrize(
    "text",
    ["nonsense_key = 1", "voxel_size 0.01", "voxel_size = abc", "ransac_iterations = 2.5", "voxel_size = -1", "trim_fraction = 1.5", "truncation = 0.01", "seed = -3", "eta_m = nan"],
)
def test_bad_text_raises(text):
    with pytest.raises(InvalidSpec):
        PipelineConfig.from_text(text)


def test_load_and_seed(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 7\n")
    cfg = PipelineConfig.load(p)
    assert cfg.seed == 7
    assert cfg.with_seed(None) is cfg and cfg.with_seed(3).seed == 3
    with pytest.raises(InvalidSpec):
        PipelineConfig.load(tmp_path / "missing.cfg")
