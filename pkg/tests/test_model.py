import pytest
import torch

from mmsrdet.complexity import complexity_report, count_params
from mmsrdet.model import PRESETS, ModelConfig, build_model, preset, strip_sr


def test_presets_build_and_report_inputs():
    for name in PRESETS:
        m = build_model(name)
        assert m.cfg.backbone.in_channels == {"rgb": 3, "ir": 1}.get(name, 32 if name in ("multi",) else 4)
    with pytest.raises(KeyError):
        preset("yolov9")


def test_forward_shapes_and_sr_flag():
    m = build_model("multi").train()
    rgb, ir = torch.rand(2, 3, 64, 64), torch.rand(2, 1, 64, 64)
    raw, sr = m(rgb, ir)
    assert len(raw) == 1 and raw[0].shape == (2, 3, 16, 16, 5 + 8)
    assert sr.shape == (2, 3, 128, 128)
    m.eval()
    raw, sr = m(rgb, ir)
    assert sr is None
    _, sr = m(rgb, ir, return_sr=True)
    assert sr is not None


def test_yolov5s_three_detectors():
    m = build_model("yolov5s-nofocus").eval()
    raw, sr = m(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64))
    assert sr is None and [r.shape[2] for r in raw] == [16, 8, 4]
    assert m.strides == [4.0, 8.0, 16.0]
    raw, _ = build_model("yolov5s").eval()(torch.rand(1, 3, 64, 64), torch.rand(1, 1, 64, 64))
    assert [r.shape[2] for r in raw] == [8, 4, 2]


def test_unimodal_ignores_other_modality():
    m = build_model("rgb").eval()
    rgb = torch.rand(1, 3, 32, 32)
    a, _ = m(rgb, torch.zeros(1, 1, 32, 32))
    b, _ = m(rgb, torch.rand(1, 1, 32, 32))
    assert torch.equal(a[0], b[0])


def test_strip_sr_equivalence_and_independence():
    torch.manual_seed(0)
    m = build_model("multi").eval()
    s = strip_sr(m)
    assert s.sr is None and not s.training
    x = (torch.rand(4, 3, 64, 64), torch.rand(4, 1, 64, 64))
    a, _ = m(*x)
    b, _ = s(*x)
    assert (a[0] - b[0]).abs().max() <= 1e-6
    with torch.no_grad():
        next(s.parameters()).add_(1.0)
    assert not torch.equal(next(s.parameters()), next(m.parameters()))
    assert count_params(m) - count_params(s) == count_params(m.sr)


def test_inference_report_excludes_sr():
    m = build_model("multi")
    rep = complexity_report(m, 64)
    assert rep.total_params == count_params(strip_sr(m))
    assert complexity_report(m, 64, include_sr=True).total_params == count_params(m)


def test_config_validation():
    with pytest.raises(ValueError):
        build_model(ModelConfig(modality="depth"))
    with pytest.raises(ValueError):
        build_model(ModelConfig(fusion="sum"))
