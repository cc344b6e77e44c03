"""Config validation, profiles, and the committed JSON files."""

from pathlib import Path

import pytest

from csifusion.config import (
    ExperimentConfig,
    TrainConfig,
    default_profile,
    desk_profile,
    load_config,
    save_config,
    with_train,
)
from csifusion.network import ArchSpec

REPO = Path(__file__).resolve().parent.parent


class TestValidation:
    def test_gamma_range_named_in_error(self):
        with pytest.raises(ValueError, match=r"train\.gamma must be in \[0, 1\], got 1.5"):
            TrainConfig(gamma=1.5)

    @pytest.mark.parametrize(
        "kw",
        [
            {"lr": 0.0},
            {"xi": -0.1},
            {"iterations": -1},
            {"batch_snapshots": 0},
            {"lr_decay_factor": 1.2},
            {"weighting": "cosine"},
            {"field_floor": 0.0},
            {"sigma_refresh_period": 0},
        ],
    )
    def test_bad_values_rejected(self, kw):
        name = next(iter(kw))
        with pytest.raises(ValueError, match=rf"train\.{name}"):
            TrainConfig(**kw)

    def test_arch_must_match_channel(self):
        base = desk_profile()
        with pytest.raises(ValueError, match="input_shape"):
            ExperimentConfig(
                channel=base.channel,
                arch=ArchSpec(input_shape=(2, 4, 4), fc_widths=(8, 2)),
                sizes=base.sizes,
            )


class TestProfiles:
    def test_default_scale(self):
        c = default_profile()
        assert c.channel.n_antennas == 16
        assert c.channel.n_subcarriers == 52
        assert c.sizes.multimodal == 2000
        assert c.train.iterations == 10_000
        assert c.arch.input_shape == (2, 16, 52)

    def test_desk_is_smaller(self):
        d, f = desk_profile(), default_profile()
        assert d.channel.n_antennas < f.channel.n_antennas
        assert d.sizes.multimodal < f.sizes.multimodal
        assert d.train.iterations < f.train.iterations
        assert d.arch.input_shape == (2, 8, 16)

    def test_dict_round_trip(self):
        for prof in (default_profile, desk_profile):
            c = prof()
            assert ExperimentConfig.from_dict(c.to_dict()) == c

    def test_with_train_override(self):
        c = with_train(desk_profile(), gamma=0.0, iterations=5)
        assert c.train.gamma == 0.0
        assert c.train.iterations == 5
        assert c.channel == desk_profile().channel


class TestLoadConfig:
    def test_profile_names(self):
        assert load_config("desk") == desk_profile()
        assert load_config("default") == default_profile()

    def test_committed_files_match_profiles(self):
        assert load_config(REPO / "configs" / "desk.json") == desk_profile()
        assert load_config(REPO / "configs" / "default.json") == default_profile()

    def test_json_file_round_trip(self, tmp_path):
        c = desk_profile()
        save_config(tmp_path / "c.json", c)
        assert load_config(tmp_path / "c.json") == c

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="neither a profile"):
            load_config("does-not-exist")
