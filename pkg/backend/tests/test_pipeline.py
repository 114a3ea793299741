"""
Tests for the style-transfer pipeline: gradients, training-step contracts,
the KL controller wiring, synthesis and latent traversal.
"""

import numpy as np
import pytest

from config import StyleConfig
from constants import N_BANDS, N_FRAMES, StyleSource, TrainMode
from data.toydata import make_dataset
from ml import pipeline
from ml.errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    IndexRangeError,
    StateError,
)
from ml.numerics import RngStream, finite_diff_check
from ml.pipeline import (
    AcousticModel,
    Batch,
    LossRecord,
    PipelineTraverser,
    ReferenceEncoder,
    acoustic_decode,
    bridge_train_step,
    build_train_state,
    compute_losses,
    current_beta,
    draw_step_noise,
    finalize_training,
    reference_encode,
    sample_bridge_latents,
    synthesize,
    train,
    train_bridge,
    train_step,
    train_system,
    traverse_latent,
)
from ml.quantizer import codebook_gradient

FD_FLOOR = 1e-4


def small_config(**overrides) -> StyleConfig:
    values = dict(
        latent_dim=4, codebook_size=8, hidden=8, T_refiner=5, T_bridge=5,
        batch=3, dataset_n=20, steps=3, log_every=0, ramp=10,
    )
    values.update(overrides)
    return StyleConfig(**values)


def make_setup(**overrides):
    config = small_config(**overrides)
    state = build_train_state(config)
    dataset = make_dataset(config.dataset_n, config.seed)
    return state, dataset


def first_batch(dataset, size=3) -> Batch:
    return Batch(mels=dataset.mels[:size], contents=dataset.contents[:size])


def snapshot(params):
    return {name: value.copy() for name, value in params.items()}


def objective_fn(state, batch, noise, beta, mode, terms=pipeline.ALL_TERMS):
    def f(params):
        result = compute_losses(state, batch, noise, beta, mode, terms)
        return result.objective, result.grads
    return f


# ==================== Gradients ====================

def test_full_gradients_without_vq_match_finite_differences():
    state, dataset = make_setup(use_vq=False)
    batch = first_batch(dataset)
    noise = draw_step_noise(state, len(batch))
    params = {**state.front_parameters(), **state.refiner_parameters()}
    report = finite_diff_check(
        objective_fn(state, batch, noise, 0.3, TrainMode.ONE_STAGE),
        params, tol=1e-4, max_entries=12, scale_floor=FD_FLOOR,
    )
    assert report.passed, report


def test_decoder_and_refiner_gradients_with_vq_match_finite_differences():
    state, dataset = make_setup()
    batch = first_batch(dataset)
    noise = draw_step_noise(state, len(batch))
    report = finite_diff_check(
        objective_fn(state, batch, noise, 0.3, TrainMode.ONE_STAGE),
        state.acoustic.parameters(), tol=1e-4, max_entries=12, scale_floor=FD_FLOOR,
    )
    assert report.passed, report


@pytest.mark.parametrize("term", ["vq", "kl"])
def test_encoder_gradients_of_latent_terms_match_finite_differences(term):
    state, dataset = make_setup()
    batch = first_batch(dataset)
    noise = draw_step_noise(state, len(batch))
    params = {**state.encoder.parameters(), **state.posterior.parameters("posterior.")}
    report = finite_diff_check(
        objective_fn(state, batch, noise, 0.7, TrainMode.ONE_STAGE, terms=(term,)),
        params, tol=1e-4, max_entries=12, scale_floor=FD_FLOOR,
    )
    assert report.passed, report


def test_codebook_gradient_without_ema():
    state, dataset = make_setup(quantizer_ema=False)
    assert "codebook.embeddings" in state.front_parameters()
    batch = first_batch(dataset)
    result = compute_losses(state, batch, draw_step_noise(state, 3), 0.0, TrainMode.VAEFS, terms=("vq",))
    expected = codebook_gradient(state.codebook, result.indices, 2.0 * (result.q - result.z) / 3)
    assert np.allclose(result.grads["codebook.embeddings"], expected)


def test_ema_mode_never_trains_codebook_by_gradient():
    state, _ = make_setup()
    assert "codebook.embeddings" not in state.front_parameters()
    assert "codebook.embeddings" in state.model_parameters()


# ==================== Training step ====================

def test_total_loss_is_sum_of_terms():
    state, dataset = make_setup()
    batch = first_batch(dataset)
    blob = state.rng.get_state()
    beta = current_beta(state)
    expected = compute_losses(state, batch, draw_step_noise(state, 3), beta, TrainMode.ONE_STAGE)
    state.rng.set_state(blob)

    record = train_step(state, batch, TrainMode.ONE_STAGE)
    assert record.l_all == pytest.approx(expected.objective)
    assert record.l_all == pytest.approx(record.l_rec + record.beta * record.kl + record.l_q + record.l_r)
    assert record.l_r > 0


def test_loss_record_with_bridge_loss():
    record = LossRecord.compose(1, 0.5, 2.0, 0.1, 0.05, 0.3)
    assert record.l_all == pytest.approx(0.5 + 0.2 + 0.05 + 0.3)
    updated = record.with_bridge_loss(0.4)
    assert updated.l_b == 0.4
    assert updated.l_all == pytest.approx(record.l_all + 0.4)


def test_vaefs_has_no_refiner_loss():
    state, dataset = make_setup(mode="vaefs")
    assert state.acoustic.refiner is None
    record = train_step(state, first_batch(dataset), TrainMode.VAEFS)
    assert record.l_r == 0.0
    with pytest.raises(ConfigurationError):
        train_step(state, first_batch(dataset), TrainMode.ONE_STAGE)


def test_unknown_training_mode():
    state, dataset = make_setup()
    with pytest.raises(ConfigurationError):
        train_step(state, first_batch(dataset), "three_stage")


def test_stage_two_updates_only_the_refiner():
    state, dataset = make_setup(mode="two_stage")
    front = snapshot(state.front_parameters())
    codebook = state.codebook.embeddings.copy()
    refiner = snapshot(state.refiner_parameters())

    train_step(state, first_batch(dataset), TrainMode.TWO_STAGE_S2)

    for name, value in state.front_parameters().items():
        assert np.array_equal(value, front[name]), name
    assert np.array_equal(state.codebook.embeddings, codebook)
    assert any(not np.array_equal(v, refiner[k]) for k, v in state.refiner_parameters().items())
    assert state.controller.updates == 1
    assert state.adam.step == 0
    assert state.refiner_adam.step == 1


def test_stage_one_leaves_refiner_untouched():
    state, dataset = make_setup(mode="two_stage")
    refiner = snapshot(state.refiner_parameters())
    record = train_step(state, first_batch(dataset), TrainMode.TWO_STAGE_S1)
    assert record.l_r == 0.0
    for name, value in state.refiner_parameters().items():
        assert np.array_equal(value, refiner[name])


def test_gradient_leak_into_frozen_parameters_is_rejected(monkeypatch):
    state, dataset = make_setup(mode="two_stage")
    real_loss = pipeline.ddpm_loss

    def leaky_loss(*args, **kwargs):
        loss = real_loss(*args, **kwargs)
        loss.param_grads["encoder.proj.W0"] = np.zeros_like(state.encoder.proj.weights[0])
        return loss

    monkeypatch.setattr(pipeline, "ddpm_loss", leaky_loss)
    refiner = snapshot(state.refiner_parameters())
    with pytest.raises(ContractViolationError):
        train_step(state, first_batch(dataset), TrainMode.TWO_STAGE_S2)
    for name, value in state.refiner_parameters().items():
        assert np.array_equal(value, refiner[name])
    with pytest.raises(ContractViolationError):
        bridge_train_step(state, np.zeros((3, 4)))


def test_bridge_step_touches_only_the_bridge():
    state, _ = make_setup()
    bridge_names = set(state.bridge.parameters())
    before = snapshot(state.model_parameters())

    loss = bridge_train_step(state, RngStream(5).normal((3, 4)))

    assert loss > 0
    assert state.last_bridge_loss == loss
    changed = {name for name, value in state.model_parameters().items() if not np.array_equal(value, before[name])}
    assert changed and changed <= bridge_names
    assert state.adam.step == 0


def test_bridge_step_rejects_wrong_latent_width():
    state, _ = make_setup()
    with pytest.raises(DimensionError):
        bridge_train_step(state, np.zeros((3, 5)))


@pytest.mark.slow
def test_bridge_learns_shifted_gaussian_latents():
    state = build_train_state(small_config(latent_dim=2, hidden=64, T_bridge=50, lr=2e-3))
    target = np.array([2.0, 3.0])
    rng = RngStream(21)
    for _ in range(6000):
        bridge_train_step(state, target + 0.5 * rng.normal((128, 2)))
    samples = sample_bridge_latents(state, 10_000, RngStream(22))
    assert np.all(np.abs(samples.mean(axis=0) - target) <= 0.1 * target)


def test_controller_updates_once_per_step_and_feeds_next_beta():
    state, dataset = make_setup()
    betas_after = []
    records = train(state, dataset, TrainMode.ONE_STAGE, 4, on_step=lambda r: betas_after.append(state.controller.beta))
    assert state.controller.updates == 4
    assert len(state.history) == 4
    assert records[0].beta == state.config.beta_min
    for i in range(3):
        assert records[i + 1].beta == betas_after[i]


def test_bridge_loss_is_recorded_in_history():
    state, dataset = make_setup()
    records = train(state, dataset, TrainMode.ONE_STAGE, 2)
    assert all(r.l_b > 0 for r in records)
    assert state.history[-1] == records[-1]
    assert state.bridge_adam.step == 2


def test_cost_annealing_when_controller_disabled():
    state, dataset = make_setup(use_controlvae=False, ramp=4, use_bridge=False)
    records = train(state, dataset, TrainMode.VAEFS, 6)
    assert [r.beta for r in records] == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0, 1.0])
    assert state.controller.updates == 0


def test_training_is_deterministic():
    a, dataset = make_setup()
    b, _ = make_setup()
    train(a, dataset, TrainMode.ONE_STAGE, 3)
    train(b, dataset, TrainMode.ONE_STAGE, 3)
    assert a.history == b.history
    pb = b.model_parameters()
    for name, value in a.model_parameters().items():
        assert np.array_equal(value, pb[name]), name


def test_trained_parameters_stay_float32_representable():
    state, dataset = make_setup()
    train(state, dataset, TrainMode.ONE_STAGE, 2)
    for name, value in state.model_parameters().items():
        assert np.array_equal(value, value.astype(np.float32).astype(np.float64)), name


def test_reconstruction_error_decreases():
    state, dataset = make_setup(mode="vaefs", use_bridge=False, lr=5e-3)
    records = train(state, dataset, TrainMode.VAEFS, 300)
    first = np.mean([r.l_rec for r in records[:20]])
    last = np.mean([r.l_rec for r in records[-20:]])
    assert last < 0.7 * first


def test_two_stage_system_runs_both_stages_and_finalizes():
    state, dataset = make_setup(mode="two_stage")
    records = train_system(state, dataset, 3)
    assert len(records) == 6
    assert [r.l_r == 0.0 for r in records] == [True] * 3 + [False] * 3
    assert state.trained
    assert state.latent_mean.shape == (4,)
    assert np.all(state.latent_scale > 0)


def test_train_system_resumes_inside_the_current_stage():
    state, dataset = make_setup(mode="two_stage")
    train(state, dataset, TrainMode.TWO_STAGE_S1, 4)
    records = train_system(state, dataset, 3)
    assert len(records) == 2
    assert state.step == 6


def test_bridge_only_training_keeps_the_encoder_fixed():
    state, dataset = make_setup()
    encoder = snapshot(state.encoder.parameters())
    records = train_bridge(state, dataset, 3)
    assert [r.step for r in records] == [1, 2, 3]
    assert all(r.l_rec == 0.0 and r.l_b > 0 for r in records)
    for name, value in state.encoder.parameters().items():
        assert np.array_equal(value, encoder[name])


# ==================== Components ====================

def test_reference_encoder_is_invariant_to_frame_order():
    encoder = ReferenceEncoder(N_BANDS, 32, RngStream(0))
    mel = make_dataset(10, seed=0).mels[0]
    perm = RngStream(1).generator.permutation(N_FRAMES)
    assert np.allclose(reference_encode(encoder, mel), reference_encode(encoder, mel[:, perm]))


def test_zero_weight_encoder_gives_zero_summary():
    encoder = ReferenceEncoder(N_BANDS, 32)
    h = reference_encode(encoder, make_dataset(10, seed=0).mels[:3])
    assert h.shape == (3, 32)
    assert np.all(h == 0.0)


def test_reference_encoder_rejects_wrong_band_count():
    with pytest.raises(DimensionError):
        reference_encode(ReferenceEncoder(N_BANDS, 32), np.zeros((N_BANDS + 1, N_FRAMES)))


def test_constant_content_gives_identical_columns():
    model = AcousticModel(4, 8, "vaefs", RngStream(0))
    mel = acoustic_decode(model, np.full(N_FRAMES, 3), np.array([0.1, -0.2, 0.3, 0.0]))
    assert mel.shape == (N_BANDS, N_FRAMES)
    assert np.allclose(mel, mel[:, :1])


def test_decoder_rejects_bad_inputs():
    model = AcousticModel(4, 8, "vaefs", RngStream(0))
    with pytest.raises(ConfigurationError):
        acoustic_decode(model, np.full(N_FRAMES, 8), np.zeros(4))
    with pytest.raises(DimensionError):
        acoustic_decode(model, np.zeros(N_FRAMES - 1, dtype=int), np.zeros(4))
    with pytest.raises(DimensionError):
        acoustic_decode(model, np.zeros(N_FRAMES, dtype=int), np.zeros(5))


def test_unknown_system_mode():
    with pytest.raises(ConfigurationError):
        AcousticModel(4, 8, "three_stage")


# ==================== Inference ====================

def test_synthesis_requires_training():
    state, dataset = make_setup()
    with pytest.raises(StateError):
        synthesize(state, dataset.contents[:1], StyleSource.BRIDGE, RngStream(0))
    with pytest.raises(StateError):
        PipelineTraverser(state)


def test_bridge_synthesis_disabled():
    state, dataset = make_setup(use_bridge=False)
    finalize_training(state, dataset)
    with pytest.raises(StateError):
        synthesize(state, dataset.contents[:1], StyleSource.BRIDGE, RngStream(0))


def test_bridge_synthesis_never_runs_the_encoder(monkeypatch):
    state, dataset = make_setup()
    finalize_training(state, dataset)

    def fail(*args, **kwargs):
        raise AssertionError("reference encoder used on the bridge path")

    monkeypatch.setattr(pipeline, "reference_encode", fail)
    result = synthesize(state, dataset.contents[:2], StyleSource.BRIDGE, RngStream(0))
    assert result.refined.shape == (2, N_BANDS, N_FRAMES)
    assert result.latent.posterior is None


def test_reference_synthesis_decodes_quantized_posterior_mean():
    state, dataset = make_setup()
    finalize_training(state, dataset)
    result = synthesize(
        state, dataset.contents[:2], StyleSource.REFERENCE, RngStream(0), reference=dataset.mels[2:4], refine=False
    )
    mu = result.latent.posterior.mu
    assert np.array_equal(result.latent.z, mu)
    assert np.array_equal(result.latent.q, state.codebook.embeddings[result.latent.index])
    assert np.allclose(result.coarse, acoustic_decode(state.acoustic, dataset.contents[:2], result.latent.q))
    assert np.array_equal(result.refined, result.coarse)


def test_reference_synthesis_needs_matching_references():
    state, dataset = make_setup()
    finalize_training(state, dataset)
    with pytest.raises(ConfigurationError):
        synthesize(state, dataset.contents[:2], StyleSource.REFERENCE, RngStream(0))
    with pytest.raises(DimensionError):
        synthesize(state, dataset.contents[:2], StyleSource.REFERENCE, RngStream(0), reference=dataset.mels[:3])


def test_prior_synthesis_is_seeded():
    state, dataset = make_setup()
    finalize_training(state, dataset)
    a = synthesize(state, dataset.contents[:1], StyleSource.PRIOR, RngStream(3))
    b = synthesize(state, dataset.contents[:1], StyleSource.PRIOR, RngStream(3))
    assert np.array_equal(a.refined, b.refined)


def test_traverse_edge_cases():
    state, dataset = make_setup()
    contents = dataset.contents[0]
    with pytest.raises(StateError):
        traverse_latent(state, 0, [0.0], contents, RngStream(0))
    finalize_training(state, dataset)
    assert traverse_latent(state, 0, [], contents, RngStream(0)) == []
    with pytest.raises(IndexRangeError):
        traverse_latent(state, 4, [0.0], contents, RngStream(0))
    with pytest.raises(IndexRangeError):
        traverse_latent(state, -1, [0.0], contents, RngStream(0))


def test_traverse_identical_values_give_identical_mels():
    state, dataset = make_setup()
    finalize_training(state, dataset)
    mels = traverse_latent(state, 1, [0.5, 0.5, 0.5], dataset.contents[0], RngStream(0))
    assert len(mels) == 3
    assert mels[0].shape == (N_BANDS, N_FRAMES)
    assert np.array_equal(mels[0], mels[1])
    assert np.array_equal(mels[1], mels[2])


def test_pipeline_traverser_is_reproducible():
    state, dataset = make_setup()
    finalize_training(state, dataset)
    traverser = PipelineTraverser(state, seed=4)
    assert traverser.latent_dim == 4
    a = traverser.traverse(2, [-1.0, 1.0], dataset.contents[0])
    b = traverser.traverse(2, [-1.0, 1.0], dataset.contents[0])
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
