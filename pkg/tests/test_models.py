import dataclasses

import pytest
import torch

from deblurkit import models
from deblurkit.efficiency import count_macs, count_params
from deblurkit.models import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    PRESETS,
    build_model,
    build_nafnet,
    build_nafreplocal,
    build_restormerl,
    build_sa_nafnet,
    load_checkpoint,
    load_model_config,
    read_checkpoint,
    save_checkpoint,
)
from deblurkit.reparam import convert_model

GATE_H, GATE_W = 1200, 1920


class TestNafnetGrid:
    @pytest.mark.parametrize(
        "width,last,expected",
        [(16, 28, 4.35e6), (32, 28, 17.11e6), (16, 14, 2.68e6)],
    )
    def test_published_param_counts(self, width, last, expected):
        total, _ = count_params(build_nafnet(width, last))
        assert abs(total - expected) / expected < 0.01

    def test_invalid_width_rejected(self):
        with pytest.raises(ConfigError):
            build_nafnet(width=2)
        with pytest.raises(ConfigError):
            build_nafnet(width=128)

    def test_forward_shape(self):
        model = build_nafnet(4, 1)
        out = model(torch.rand(1, 3, 32, 48))
        assert out.shape == (1, 3, 32, 48)

    def test_indivisible_input_rejected(self):
        model = build_nafnet(4, 1)
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, 30, 30))

    def test_param_count_is_config_pure(self):
        a, _ = count_params(build_nafnet(16, 14))
        b, _ = count_params(build_nafnet(16, 14))
        assert a == b


class TestNafRepLocal:
    def test_fused_param_target(self):
        model = build_nafreplocal().eval()
        total, _ = count_params(convert_model(model))
        assert abs(total - 4.76e6) / 4.76e6 < 0.02

    def test_middle_scag_param_delta_is_one_pointwise_conv(self):
        base = dataclasses.replace(models.NAFREPLOCAL_CONFIG, use_middle_scag=False)
        with_scag, _ = count_params(build_nafreplocal())
        without, _ = count_params(build_nafreplocal(base))
        channels = 32 * 2**4
        assert with_scag - without == channels * channels + channels

    def test_forward_shape(self):
        model = build_nafreplocal().eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 64, 64))
        assert out.shape == (1, 3, 64, 64)

    def test_family_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            build_nafreplocal(PRESETS["restormerl"])


class TestRestormerL:
    def test_param_target(self):
        total, _ = count_params(build_restormerl())
        assert abs(total - 1.41e6) / 1.41e6 < 0.05

    def test_macs_target(self):
        total, _ = count_macs(build_restormerl(), GATE_H, GATE_W)
        assert abs(total - 199.39e9) / 199.39e9 < 0.02

    def test_zero_residual_conv_gives_identity(self):
        model = build_restormerl().eval()
        torch.nn.init.zeros_(model.output.weight)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x), x)

    def test_refinement_flag_adds_blocks(self):
        cfg = dataclasses.replace(models.RESTORMERL_CONFIG, use_refinement=True)
        with_ref, _ = count_params(build_restormerl(cfg))
        without, _ = count_params(build_restormerl())
        assert with_ref > without
        # the no-refinement variant is the one matching the published size
        assert abs(without - 1.41e6) < abs(with_ref - 1.41e6)


class TestSaNafnet:
    def test_budget_headroom(self):
        model = build_sa_nafnet()
        params, _ = count_params(model)
        macs, _ = count_macs(model, GATE_H, GATE_W)
        assert params <= 4.51e6
        assert macs <= 172.2e9

    def test_removing_spatial_attention_reduces_params(self):
        cfg = dataclasses.replace(models.SA_NAFNET_CONFIG, spatial_attention_levels=())
        with_sa, _ = count_params(build_sa_nafnet())
        without, _ = count_params(build_sa_nafnet(cfg))
        assert with_sa > without

    def test_forward_shape(self):
        cfg = dataclasses.replace(
            models.SA_NAFNET_CONFIG, width=8, enc_blocks=(1, 1, 1, 1)
        )
        model = build_sa_nafnet(cfg).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 48, 48))
        assert out.shape == (1, 3, 48, 48)


class TestGlobalResidualIdentity:
    def test_zeroed_nafnet_is_identity(self):
        model = build_nafnet(4, 1).eval()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(x), x)


class TestModelConfig:
    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(family="unet").validated()

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"family": "nafnet", "depth": 3})

    def test_dict_roundtrip(self):
        cfg = models.NAFREPLOCAL_CONFIG
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_restormerl_head_divisibility(self):
        cfg = dataclasses.replace(models.RESTORMERL_CONFIG, heads=(3, 2, 4, 8))
        with pytest.raises(ConfigError):
            cfg.validated()

    def test_yaml_config_loading(self, tmp_path):
        import yaml

        path = tmp_path / "m.yaml"
        path.write_text(yaml.safe_dump({"family": "nafnet", "width": 8}))
        cfg = load_model_config(path)
        assert cfg.width == 8
        assert load_model_config("nafnet-c16-l28") == PRESETS["nafnet-c16-l28"]
        with pytest.raises(ConfigError):
            load_model_config("no-such-preset")


class TestCheckpoints:
    def test_roundtrip_forward_bit_exact(self, tmp_path):
        torch.manual_seed(0)
        model = build_nafnet(4, 1).eval()
        path = save_checkpoint(model, tmp_path / "m.pt")
        loaded = load_checkpoint(path)
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(model(x), loaded(x))

    def test_truncated_file_errors(self, tmp_path):
        model = build_nafnet(4, 1)
        path = save_checkpoint(model, tmp_path / "m.pt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_errors(self, tmp_path):
        model = build_nafnet(4, 1)
        path = save_checkpoint(model, tmp_path / "m.pt")
        payload = torch.load(path, weights_only=False)
        payload["format"] = 999
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(path)

    def test_ema_and_raw_weights_selectable(self, tmp_path):
        torch.manual_seed(1)
        model = build_nafnet(4, 1).eval()
        ema_state = {
            name: torch.full_like(param, 0.125)
            for name, param in model.named_parameters()
        }
        path = save_checkpoint(model, tmp_path / "m.pt", ema_state=ema_state)
        raw = load_checkpoint(path, prefer_ema=False)
        ema = load_checkpoint(path, prefer_ema=True)
        raw_params = dict(raw.named_parameters())
        for name, param in ema.named_parameters():
            assert torch.equal(param, torch.full_like(param, 0.125))
            assert torch.equal(raw_params[name], dict(model.named_parameters())[name])

    def test_missing_ema_errors(self, tmp_path):
        model = build_nafnet(4, 1)
        path = save_checkpoint(model, tmp_path / "m.pt")
        with pytest.raises(CheckpointError, match="EMA"):
            load_checkpoint(path, prefer_ema=True)

    def test_fused_flag_preserved(self, tmp_path):
        cfg = dataclasses.replace(
            models.NAFREPLOCAL_CONFIG, width=8, local_window=8
        )
        model = build_nafreplocal(cfg).eval()
        fused = convert_model(model)
        path = save_checkpoint(fused, tmp_path / "f.pt")
        assert read_checkpoint(path)["fused"] is True
        loaded = load_checkpoint(path)
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(fused(x), loaded(x))


def test_every_preset_builds_and_preserves_shape():
    for name, cfg in PRESETS.items():
        small = dataclasses.replace(
            cfg,
            width=8 if cfg.family != "restormerl" else 8,
            enc_blocks=(1, 1, 1, 1) if cfg.family != "restormerl" else (1, 1, 1),
            middle_blocks=1,
            dec_blocks=(1, 1, 1, 1) if cfg.family != "restormerl" else (1, 1, 1),
            local_window=16,
        )
        model = build_model(small).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 32, 32))
        assert out.shape == (1, 3, 32, 32), name
