from __future__ import annotations

from unittest.mock import patch

import pytest
import torch

from petdiff.network.denoiser import DenoiserError
from petdiff.runners.trainer import Trainer, TrainingError, cosine_lr, load_trained
from petdiff.storage import load_checkpoint

from conftest import tiny_config


@pytest.fixture
def trainer(tiny_dataset, tmp_path):
    return Trainer(tiny_config(tiny_dataset, tmp_path / "run"))


def test_trainer_initialization(trainer):
    """Test the trainer wires model, schedule and data together"""
    assert trainer.name == "Runner:Trainer"
    assert trainer.step == 0
    assert trainer.schedule.T == 20
    assert len(trainer.sampler.records) == 6
    assert len(trainer.val_records) == 1


def test_cosine_lr_endpoints():
    """Test the cosine learning rate at start, middle and end"""
    assert cosine_lr(0, 100, 1e-4, 1e-6) == pytest.approx(1e-4)
    assert cosine_lr(50, 100, 1e-4, 1e-6) == pytest.approx((1e-4 + 1e-6) / 2)
    assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6)


def test_learning_rate_anneals_to_minimum(trainer):
    """Test the scheduler follows the cosine curve to lr_min"""
    trainer.run(progress=False)
    assert trainer.step == 4
    lrs = [entry["lr"] for entry in trainer.history]
    assert lrs == pytest.approx([cosine_lr(s, 4, 1e-4, 1e-6) for s in range(1, 5)], rel=1e-6)
    assert trainer.optimizer.param_groups[0]["lr"] == pytest.approx(1e-6, rel=1e-6)


def test_history_and_validation(trainer):
    """Test history records loss terms and validation scores"""
    trainer.run(progress=False)
    assert [entry["step"] for entry in trainer.history] == [1, 2, 3, 4]
    assert {"loss", "mse", "vlb", "lr"} <= set(trainer.history[0])
    assert "val_psnr" in trainer.history[1] and "val_ssim" in trainer.history[1]


def test_loss_decreases_on_a_fixed_batch(tiny_dataset, tmp_path):
    """Test the optimiser reduces the loss on one batch"""
    trainer = Trainer(tiny_config(tiny_dataset, tmp_path, lr=2e-3, lr_min=2e-3, steps=60))
    batch = trainer.sampler.next_batch()
    t = torch.full((batch.spet.shape[0],), trainer.schedule.T - 1)
    eps = torch.randn(batch.spet.shape, generator=torch.Generator().manual_seed(0))

    with torch.no_grad():
        before = trainer.loss_terms(batch, t, eps)["mse"].item()
    for _ in range(60):
        trainer.train_step(batch)
    with torch.no_grad():
        after = trainer.loss_terms(batch, t, eps)["mse"].item()
    assert after < before


def test_network_failure_becomes_training_error(trainer):
    """Test network errors surface as TrainingError with the step"""
    batch = trainer.sampler.next_batch()
    with patch.object(trainer.model, "forward", side_effect=DenoiserError("non-finite activations")):
        with pytest.raises(TrainingError) as info:
            trainer.train_step(batch)
    assert info.value.step == 0


def test_non_finite_loss_stops_training(trainer):
    """Test a NaN loss stops training"""
    batch = trainer.sampler.next_batch()
    nan = torch.tensor(float("nan"))
    with patch("petdiff.runners.trainer.hybrid_loss_terms", return_value={"loss": nan, "mse": nan, "vlb": nan}):
        with pytest.raises(TrainingError):
            trainer.train_step(batch)


def test_checkpoint_round_trip(trainer):
    """Test a saved checkpoint rebuilds the same network"""
    final = trainer.run(progress=False)
    model, config, schedule = load_trained(final)
    assert config == trainer.config
    assert schedule.T == trainer.config.timesteps
    for name, tensor in trainer.model.state_dict().items():
        assert torch.equal(model.state_dict()[name], tensor.cpu()), name


def test_intermediate_checkpoints(tiny_dataset, tmp_path):
    """Test periodic checkpoints are written"""
    trainer = Trainer(tiny_config(tiny_dataset, tmp_path, checkpoint_every=2))
    trainer.run(progress=False)
    assert (tmp_path / "checkpoints" / "step_000002" / "checkpoint.json").exists()
    assert not (tmp_path / "checkpoints" / "step_000004").exists()
    assert (tmp_path / "checkpoint" / "checkpoint.json").exists()


def test_baseline_checkpoint_has_no_guidance_parameters(tiny_dataset, tmp_path):
    """Test iddpm checkpoints hold no CT encoder, HWA or DAA tensors"""
    final = Trainer(tiny_config(tiny_dataset, tmp_path, variant="iddpm")).run(progress=False)
    state, metadata = load_checkpoint(final)
    assert metadata["parameter_groups"]["hwa"] == 0
    assert metadata["parameter_groups"]["daa"] == 0
    assert metadata["parameter_groups"]["ct_encoder"] == 0
    assert not any(name.startswith(("hwa.", "daa_", "ct_encoder.")) for name in state)


def test_training_is_reproducible(tiny_dataset, tmp_path):
    """Test two runs with one seed give identical weights"""
    a = Trainer(tiny_config(tiny_dataset, tmp_path / "a"))
    b = Trainer(tiny_config(tiny_dataset, tmp_path / "b"))
    a.run(progress=False)
    b.run(progress=False)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for name, tensor in a.model.state_dict().items():
        assert torch.equal(b.model.state_dict()[name], tensor), name


def test_dose_filter(tiny_dataset, tmp_path):
    """Test the dose filter restricts the training records"""
    trainer = Trainer(tiny_config(tiny_dataset, tmp_path), doses=[0.05])
    assert {r.dose.fraction for r in trainer.sampler.records} == {0.05}


def test_variants_consume_identical_batches(tiny_dataset, tmp_path):
    """Every ablation variant sees the same crops, timesteps and noise in the same order"""
    seen = {}
    for variant in ("iddpm", "full"):
        trainer = Trainer(tiny_config(tiny_dataset, tmp_path / variant, variant=variant))
        steps = []
        with patch.object(trainer, "loss_terms", wraps=trainer.loss_terms) as loss_terms:
            for _ in range(3):
                batch = trainer.sampler.next_batch()
                trainer.train_step(batch)
                steps.append(batch)
        draws = [(c.args[1], c.args[2]) for c in loss_terms.call_args_list]
        seen[variant] = (steps, draws)

    (baseline_batches, baseline_draws), (full_batches, full_draws) = seen["iddpm"], seen["full"]
    for a, b in zip(baseline_batches, full_batches):
        assert a.ids == b.ids
        assert torch.equal(a.lpet, b.lpet) and torch.equal(a.spet, b.spet) and torch.equal(a.ct, b.ct)
        assert torch.equal(a.dose, b.dose)
    for (t_a, eps_a), (t_b, eps_b) in zip(baseline_draws, full_draws):
        assert torch.equal(t_a, t_b)
        assert torch.equal(eps_a, eps_b)
    assert len(baseline_draws) == len(full_draws) == 3
