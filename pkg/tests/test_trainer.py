import math

import numpy as np
import pytest
import torch

from artifact.errors import ContractError, DimensionError, TrainingAborted
from artifact.imagecore import ProtectionTarget, save_image, synthetic_images
from artifact.objectives import EOTConfig
from artifact.surrogate import SurrogateEncoder
from artifact.trainer import (
    AdamHyper,
    AdamMoments,
    TrainConfig,
    adam_step,
    load_dataset,
    pretrain_surrogate,
    train,
)


def _toy_cfg(**kw):
    base = dict(epochs=2, batch_size=4, image_size=32, width_multiplier=0.125, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def _adam_reference(g, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    # scalar Adam written out in plain floats
    p, m, v = 0.0, 0.0, 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_first_step():
    params = {"w": torch.zeros((), dtype=torch.float64)}
    adam_step(params, {"w": torch.tensor(0.5, dtype=torch.float64)}, AdamMoments(), AdamHyper(lr=1e-3))
    assert float(params["w"]) == pytest.approx(-9.9999998e-4, rel=1e-9)
    assert float(params["w"]) == pytest.approx(_adam_reference(0.5, 1), rel=1e-12)


def test_adam_many_steps_match_reference():
    params = {"w": torch.zeros((), dtype=torch.float64)}
    moments = AdamMoments()
    for _ in range(25):
        adam_step(params, {"w": torch.tensor(-0.2, dtype=torch.float64)}, moments, AdamHyper())
    assert moments.step == 25
    assert float(params["w"]) == pytest.approx(_adam_reference(-0.2, 25), rel=1e-12)


def test_adam_zero_gradient_keeps_params():
    params = {"a": torch.randn(3, 4), "b": torch.randn(2)}
    before = {k: v.clone() for k, v in params.items()}
    adam_step(params, {k: torch.zeros_like(v) for k, v in params.items()}, AdamMoments(), AdamHyper())
    for k in params:
        assert torch.equal(params[k], before[k])


def test_adam_sign_symmetry():
    pa = {"w": torch.zeros(4, dtype=torch.float64)}
    pb = {"w": torch.zeros(4, dtype=torch.float64)}
    g = torch.tensor([0.1, -2.0, 3.0, 1e-4], dtype=torch.float64)
    adam_step(pa, {"w": g}, AdamMoments(), AdamHyper())
    adam_step(pb, {"w": -g}, AdamMoments(), AdamHyper())
    assert torch.equal(pa["w"], -pb["w"])


def test_adam_rejects_bad_gradients():
    params = {"w": torch.zeros(2)}
    with pytest.raises(TrainingAborted):
        adam_step(params, {"w": torch.tensor([1.0, float("nan")])}, AdamMoments(), AdamHyper())
    with pytest.raises(ContractError):
        adam_step(params, {"v": torch.zeros(2)}, AdamMoments(), AdamHyper())


@pytest.mark.parametrize(
    "kwargs", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(epsilon=2.0), dict(image_size=40)]
)
def test_config_validation(kwargs):
    with pytest.raises((ContractError, DimensionError)):
        TrainConfig(**kwargs)

def test_config_round_trip():
    cfg = _toy_cfg(eot=EOTConfig(apply_prob=0.25))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ContractError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_dataset_skips_unreadable(tmp_path, caplog):
    save_image(synthetic_images(1, 32)[0], tmp_path / "ok.png")
    (tmp_path / "bad.png").write_bytes(b"junk")
    data = load_dataset([tmp_path / "ok.png", tmp_path / "bad.png"], 32)
    assert data.shape == (1, 3, 32, 32)
    assert "bad.png" in caplog.text
    with pytest.raises(ContractError, match="empty"):
        load_dataset([tmp_path / "bad.png"], 32)


def test_training_deterministic(tmp_path):
    data = synthetic_images(8, 32, seed=1)
    cfg = _toy_cfg()
    _, rep_a = train(cfg, data, tmp_path / "a")
    _, rep_b = train(cfg, data, tmp_path / "b")
    for name in ("epoch_0001.wgck", "final.wgck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert rep_a.l_adv == rep_b.l_adv and rep_a.l_pert == rep_b.l_pert
    assert len(rep_a.l_adv) == 2 and all(n > 0 for n in rep_a.update_norm)


def test_training_leaves_surrogate_untouched():
    enc = SurrogateEncoder(seed=42)
    before = enc.checksum()
    train(_toy_cfg(epochs=1), synthetic_images(4, 32, seed=2), enc=enc)
    assert enc.checksum() == before


def test_training_aborts_on_nonfinite_loss():
    data = synthetic_images(4, 32, seed=2)
    data[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingAborted, match="step 1"):
        train(_toy_cfg(epochs=1, batch_size=4), data)


def test_report_csv(tmp_path):
    _, rep = train(_toy_cfg(epochs=2), synthetic_images(4, 32, seed=2))
    rep.write_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "epoch,l_adv,l_pert,total,seconds"
    assert float(rows[1].split(",")[1]) == rep.l_adv[0]


def test_custom_target_used():
    tgt = ProtectionTarget.from_image(torch.zeros(3, 32, 32))
    state, rep = train(_toy_cfg(epochs=1), synthetic_images(4, 32, seed=2), target=tgt)
    assert np.isfinite(rep.l_adv[0])


def test_pretrain_surrogate_reduces_loss():
    cfg = _toy_cfg(batch_size=4, learning_rate=3e-3)
    enc, hist = pretrain_surrogate(cfg, synthetic_images(8, 32, seed=3), epochs=40)
    assert hist[-1] <= 0.7 * hist[0]
    assert not any(p.requires_grad for p in enc.parameters())
