"""Tests for the bound, its gradient, the training schedule and checkpoints"""

import logging
import os

import numpy as np
import pandas as pd
import pytest

import checkpoint
import cli
from baseline_edlstm import generation_report, train_edlstm
from dataset import generate_corpus
from evaluation import EvalConfig, run_task, sign_test
from errors import ConfigError, ContractError, FormatError, NumericalError
from numerics import backward
from trainer import (
    LOSS_COLUMNS,
    ModelCheckpoint,
    ModelParams,
    TrainConfig,
    TrainingMonitor,
    anneal,
    elbo,
    loss_frame,
    train,
    write_loss_log,
)


def small_train_config(**overrides):
    settings = dict(batch_size=3, iterations=3, freeze_iterations=1, anneal_start=0, anneal_end=2,
                    state_size=8, canvas_size=8, components=2, checkpoint_interval=2, log_interval=1, seed=5)
    settings.update(overrides)
    return TrainConfig(**settings)


def test_anneal_schedule():
    config = TrainConfig(anneal_start=10, anneal_end=30, beta_start=100.0, beta_end=1.0)
    assert anneal(0, config) == 100.0
    assert anneal(9, config) == 100.0
    assert anneal(20, config) == pytest.approx(10.0)
    assert anneal(30, config) == 1.0
    assert anneal(10_000, config) == 1.0
    with pytest.raises(ContractError):
        anneal(-1, config)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta_start=1.0, beta_end=2.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(anneal_start=5, anneal_end=4).validate()


@pytest.mark.parametrize("seed", range(10))
def test_elbo_gradient_matches_finite_differences(seed, numeric_grad):
    """Fixed-noise bound on a 16-pixel model with S=D=8, T=3, N=1, K=2"""
    from trainer import ModelShapes, initialize

    model = initialize(seed, ModelShapes(pixels=16, canvas_size=8, state_size=8, components=2, object_counts=(1,)))
    rng = np.random.default_rng(100 + seed)
    images = (rng.random((3, 16)) < 0.4).astype(float)
    noise = rng.standard_normal((3, 1, 2))

    leaves = model.leaves()
    named = leaves.named()
    grads = dict(zip(named, backward(elbo(leaves, images, 1, noise).elbo, list(named.values()))))

    arrays = model.named()
    for name, array in arrays.items():
        indices = [tuple(rng.integers(s) for s in array.shape) for _ in range(4)]
        expected = numeric_grad(lambda: elbo(model, images, 1, noise).elbo.item(), array, indices)
        for index, value in expected.items():
            assert grads[name][index] == pytest.approx(value, rel=1e-4, abs=1e-6), (name, index)


def test_elbo_parts(tiny_model):
    rng = np.random.default_rng(0)
    images = (rng.random((2, 4, 16)) < 0.5).astype(float)
    noise = rng.standard_normal((2, 4, 2, 2))
    terms = elbo(tiny_model, images, 2, noise, beta=3.0)
    assert terms.elbo.item() == pytest.approx(terms.recon.item() - 3.0 * terms.kl.item())
    with pytest.raises(ContractError):
        elbo(tiny_model, images, 2, noise, beta=0.0)


def test_elbo_averages_monte_carlo_draws(tiny_model):
    rng = np.random.default_rng(1)
    images = (rng.random((3, 16)) < 0.5).astype(float)
    noise = rng.standard_normal((2, 3, 1, 2))
    both = elbo(tiny_model, images, 1, noise).elbo.item()
    separate = [elbo(tiny_model, images, 1, noise[m]).elbo.item() for m in range(2)]
    assert both == pytest.approx(np.mean(separate))


def test_zero_iterations_returns_initialization(small_corpora):
    result = train(small_train_config(iterations=0), small_corpora["train"])
    assert result.iteration == 0
    assert result.history == []
    from trainer import initialize, model_shapes

    fresh = initialize(5, model_shapes(small_train_config(), 256, (1, 2)))
    for name, value in fresh.named().items():
        np.testing.assert_array_equal(result.params.named()[name], value)


def test_training_is_reproducible_and_respects_freeze(small_corpora):
    corpus = small_corpora["train"]
    config = small_train_config(freeze_iterations=10)
    first = train(config, corpus)
    second = train(config, corpus)
    assert first.history == second.history
    for name, value in first.params.named().items():
        np.testing.assert_array_equal(value, second.params.named()[name])

    initial = train(small_train_config(iterations=0), corpus)
    for name, value in first.params.lgssm.named().items():
        np.testing.assert_array_equal(value, initial.params.lgssm.named()[name])
    assert not np.array_equal(first.params.renderer.w_v, initial.params.renderer.w_v)


def test_lgssm_trains_after_freeze(small_corpora):
    corpus = small_corpora["train"]
    result = train(small_train_config(freeze_iterations=1, iterations=3), corpus)
    initial = train(small_train_config(iterations=0), corpus)
    assert not np.array_equal(result.params.lgssm.prior_means, initial.params.lgssm.prior_means)


def test_history_and_callbacks(small_corpora):
    snapshots = []
    result = train(small_train_config(iterations=4), small_corpora["train"], callback=snapshots.append)
    assert [record[0] for record in result.history] == [0, 1, 2, 3]
    assert [s.iteration for s in snapshots] == [2, 4]
    assert all(np.isfinite(record[1:]).all() for record in result.history)
    frame = result.loss_frame()
    assert list(frame.columns) == LOSS_COLUMNS
    assert frame["beta"].iloc[-1] == 1.0


def test_resume_continues_iteration_count(small_corpora):
    corpus = small_corpora["train"]
    first = train(small_train_config(iterations=2), corpus)
    resumed = train(small_train_config(iterations=2), corpus, initial=first)
    assert resumed.iteration == 4
    assert [record[0] for record in resumed.history] == [0, 1, 2, 3]


def test_nan_loss_aborts(small_corpora):
    corpus = small_corpora["train"]
    start = train(small_train_config(iterations=0), corpus)
    start.params.renderer.b_v[:] = np.nan
    with pytest.raises(NumericalError) as info:
        train(small_train_config(), corpus, initial=start)
    assert info.value.iteration == 0


def test_empty_corpus_is_rejected(small_corpora):
    class Empty:
        sequences = []

    with pytest.raises(ContractError):
        train(small_train_config(), Empty())


def test_checkpoint_round_trip(tmp_path, tiny_model):
    saved = ModelCheckpoint(params=tiny_model, iteration=7, history=[(0, -1.0, -2.0, 0.5, 100.0)])
    path = tmp_path / "model.pdyc"
    saved.save(path)
    loaded = ModelCheckpoint.load(path)
    assert loaded.iteration == 7
    assert loaded.history == saved.history
    for name, value in tiny_model.named().items():
        np.testing.assert_array_equal(loaded.params.named()[name], value)
    data = path.read_bytes()
    assert checkpoint.encode_blocks(*checkpoint.decode_blocks(data)) == data


def test_checkpoint_rejects_corruption(tmp_path, tiny_model):
    data = checkpoint.encode_blocks(ModelCheckpoint(params=tiny_model).to_blocks(), 3)
    corrupted = bytearray(data)
    corrupted[len(data) // 2] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        checkpoint.decode_blocks(bytes(corrupted))
    with pytest.raises(FormatError, match="magic"):
        checkpoint.decode_blocks(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        checkpoint.decode_blocks(data[:10])
    bumped = bytearray(data)
    bumped[4] = 9
    with pytest.raises(FormatError, match="version"):
        checkpoint.decode_blocks(bytes(bumped))


def test_model_params_missing_block(tiny_model):
    blocks = tiny_model.named()
    blocks.pop("renderer/w_v")
    with pytest.raises(FormatError):
        ModelParams.from_named(blocks)


def test_loss_log_is_deterministic(tmp_path):
    history = [(0, -10.123456789, -9.0, 1.1, 100.0), (1, -9.5, -8.75, 0.75, 50.0)]
    write_loss_log(history, tmp_path / "a.csv")
    write_loss_log(history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "iteration,elbo,recon,kl,beta"
    assert loss_frame(history)["iteration"].tolist() == [0, 1]


def test_training_monitor_logs_every_interval(caplog):
    monitor = TrainingMonitor(log_interval=2)
    with caplog.at_level(logging.INFO, logger="trainer"):
        for i in range(4):
            monitor.update((i, -1.0, -0.5, 0.5, 1.0))
    assert len(caplog.records) == 2
    assert "elbo" in caplog.records[0].getMessage()
    assert monitor.recent_mean("kl") == pytest.approx(0.5)


@pytest.mark.slow
def test_desk_scale_training_improves_reconstruction():
    from dataset import DatasetConfig

    corpus = generate_corpus(DatasetConfig(height=32, width=32, object_counts=(1, 2), train_per_count=200,
                                           test_per_count=1), threads=4)["train"]
    config = TrainConfig(batch_size=10, iterations=300, freeze_iterations=100, anneal_start=100, anneal_end=200,
                         state_size=64, canvas_size=64, log_interval=50)
    result = train(config, corpus)
    frame = result.loss_frame()
    assert frame["recon"].tail(20).mean() > frame["recon"].head(20).mean()
    assert np.isfinite(frame["elbo"]).all()


def single_step_model():
    from trainer import ModelShapes, initialize

    return initialize(3, ModelShapes(pixels=16, canvas_size=8, state_size=8, components=1, object_counts=(1,)))


def test_elbo_matches_step_by_step_composition():
    from inference_net import infer, log_q, sample_positions
    from lgssm import log_marginal
    from renderer import log_likelihood_image, render

    model = single_step_model()
    image = (np.random.default_rng(7).random((1, 16)) < 0.5).astype(float)
    noise = np.array([[[0.3, -1.2]]])
    posterior = infer(model.inference, image, 1)
    a = sample_positions(posterior, noise)
    recon = log_likelihood_image(render(model.renderer, a), image).sum().item()
    kl = log_q(posterior, a).item() - log_marginal(model.lgssm.resolve(), a).item()
    assert elbo(model, image, 1, noise, beta=2.5).elbo.item() == pytest.approx(recon - 2.5 * kl, abs=1e-10)


def test_monte_carlo_estimate_matches_quadrature():
    """Mean of the estimator over 10^4 draws against a 20x20 Gauss-Hermite grid"""
    model = single_step_model()
    image = (np.random.default_rng(8).random((1, 16)) < 0.5).astype(float)

    nodes, weights = np.polynomial.hermite_e.hermegauss(20)
    exact = 0.0
    for x, wx in zip(nodes, weights):
        for y, wy in zip(nodes, weights):
            exact += wx * wy * elbo(model, image, 1, np.array([[[x, y]]])).elbo.item()
    exact /= 2.0 * np.pi

    rng = np.random.default_rng(9)
    group_means = [elbo(model, image, 1, rng.standard_normal((100, 1, 1, 2))).elbo.item() for _ in range(100)]
    estimate = np.mean(group_means)
    standard_error = np.std(group_means, ddof=1) / np.sqrt(len(group_means))
    assert abs(estimate - exact) < 3.0 * standard_error


@pytest.fixture(scope="module")
def desk_run():
    """desk32 corpora with the model and the ED-LSTM trained on the same iteration budget"""
    threads = os.cpu_count() or 1
    args = cli.build_parser().parse_args(["train", "--dataset", "unused", "--preset", "desk32",
                                          "--threads", str(threads)])
    run = cli.build_config(args)
    corpora = generate_corpus(run.dataset, threads=threads)
    model = train(run.train, corpora["train"])
    baseline = train_edlstm(run.baseline, corpora["train"])
    return run, corpora, model, baseline


@pytest.mark.slow
def test_desk_scale_reconstruction_improves_by_half(desk_run):
    _, _, model, _ = desk_run
    frame = model.loss_frame()
    initial_nll = -frame["recon"].iloc[0]
    final_nll = -frame["recon"].tail(200).mean()
    assert final_nll <= 0.5 * initial_nll


@pytest.mark.slow
def test_desk_scale_positions_are_recovered(desk_run):
    run, corpora, model, _ = desk_run
    records = run_task("infer", model.params, corpora["test"], EvalConfig(threads=run.threads))
    assert len(records) >= 100
    assert np.median([r["aligned_rmse"] for r in records]) < 0.1 * run.dataset.width


@pytest.mark.slow
def test_desk_scale_interpolation_beats_generation(desk_run):
    run, corpora, model, _ = desk_run
    records = pd.DataFrame(run_task("interpolate", model.params, corpora["test"], EvalConfig(threads=run.threads)))
    assert records["interpolation_error"].mean() <= records["generation_error"].mean()
    assert sign_test(records["interpolation_error"], records["generation_error"])["p_value"] < 0.05


@pytest.mark.slow
def test_desk_scale_generation_is_no_worse_than_the_lstm(desk_run):
    run, corpora, model, baseline = desk_run
    assert run.train.iterations == run.baseline.iterations
    ours = np.mean([r["generation_nll"]
                    for r in run_task("generate", model.params, corpora["test"], EvalConfig(threads=run.threads))])
    lstm = np.mean([r["generation_nll"] for r in generation_report(baseline.params, corpora["test"], run.baseline)])
    assert np.isfinite(ours) and np.isfinite(lstm)
    assert ours <= lstm
    assert max(ours, lstm) < np.log(2.0)
