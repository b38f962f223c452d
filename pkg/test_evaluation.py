"""Tests for alignment, the evaluation tasks, overlays and report summaries"""

import numpy as np
import pandas as pd
import pytest

from errors import ContractError
from evaluation import (
    EvalConfig,
    align,
    calculate_stats,
    emit_overlay,
    format_summary,
    generation_task,
    interpolation_task,
    overlay,
    position_inference_task,
    read_pgm,
    read_report,
    run_task,
    sign_test,
    summarize_report,
    threshold,
    trajectory_figure,
    write_pgm,
    write_report,
    write_trajectory_svg,
)
from inference_net import infer
from numerics import value_of
from trainer import ModelShapes, initialize


def rotation(degrees):
    angle = np.radians(degrees)
    return np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


def test_align_identity():
    points = np.random.default_rng(0).normal(size=(10, 2, 2))
    result = align(points, points)
    assert result.scale == pytest.approx(1.0)
    np.testing.assert_allclose(result.rotation, np.eye(2), atol=1e-12)
    assert result.permutation == (0, 1)
    assert result.error < 1e-12


def test_align_recovers_similarity_transform():
    points = np.random.default_rng(1).normal(size=(12, 1, 2))
    truth = 2.0 * points @ rotation(30).T + np.array([5.0, -3.0])
    result = align(points, truth)
    assert result.scale == pytest.approx(2.0)
    np.testing.assert_allclose(result.rotation, rotation(30), atol=1e-10)
    np.testing.assert_allclose(result.translation, [5.0, -3.0], atol=1e-10)
    assert result.error < 1e-10

    back = align(truth, points)
    assert back.scale == pytest.approx(0.5)
    np.testing.assert_allclose(back.rotation, rotation(-30), atol=1e-10)


def test_align_finds_object_order():
    points = np.random.default_rng(2).normal(size=(8, 3, 2))
    truth = points[:, [2, 0, 1]]
    result = align(points, truth)
    assert result.permutation == (2, 0, 1)
    assert result.error < 1e-10
    np.testing.assert_allclose(result.apply(points), truth, atol=1e-10)


def test_align_error_is_invariant_to_similarity_of_the_input():
    rng = np.random.default_rng(3)
    points, truth = rng.normal(size=(10, 2, 2)), rng.normal(size=(10, 2, 2))
    moved = 0.3 * points @ rotation(75).T + 4.0
    assert align(moved, truth).error == pytest.approx(align(points, truth).error)


def test_align_excludes_reflections():
    points = np.random.default_rng(4).normal(size=(10, 1, 2))
    mirrored = points * np.array([-1.0, 1.0])
    result = align(points, mirrored)
    assert np.linalg.det(result.rotation) == pytest.approx(1.0)
    assert result.error > 1e-3


def test_align_rejects_bad_input():
    with pytest.raises(ContractError):
        align(np.zeros((5, 1, 2)), np.ones((5, 1, 2)))
    with pytest.raises(ContractError):
        align(np.zeros((5, 1, 2)), np.zeros((5, 2, 2)))


def test_overlay_shades_by_time():
    frames = np.zeros((4, 2, 3), dtype=np.uint8)
    frames[0, 0, 0] = frames[3, 0, 0] = 1
    frames[1, 1, 2] = 1
    image = overlay(frames)
    assert image[0, 0] == 1.0
    assert image[1, 2] == pytest.approx(0.5)
    assert image[0, 1] == 0.0
    with pytest.raises(ContractError):
        overlay(np.full((2, 2, 2), 0.5))


def test_pgm_round_trip(tmp_path):
    path = write_pgm(tmp_path / "image.pgm", np.array([[0.0, 0.5], [1.0, 0.25]]))
    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(path), [[0, 128], [255, 64]])


def test_panel_overlay(tmp_path):
    frames = np.zeros((3, 4, 5), dtype=np.uint8)
    frames[2, 1, 1] = 1
    path = emit_overlay(frames, tmp_path / "panels.pgm", mode="panels", reference=frames)
    image = read_pgm(path)
    assert image.shape == (4, 11)
    assert np.all(image[:, 5] == 128)
    np.testing.assert_array_equal(image[:, :5], image[:, 6:])
    with pytest.raises(ContractError):
        emit_overlay(frames, tmp_path / "x.pgm", mode="panels")
    with pytest.raises(ContractError):
        emit_overlay(frames, tmp_path / "x.pgm", mode="sideways")


def test_threshold():
    probs = np.array([[0.2, 0.5, 0.7, 0.49]])
    np.testing.assert_array_equal(threshold(probs, (2, 2)), [[[0, 1], [1, 0]]])


def test_generation_task(small_model, small_corpora):
    sequence = small_corpora["test"].subset(2)[0]
    result = generation_task(small_model, sequence.frames, 2, horizon=4, observed=2,
                             truth=sequence.frames[2:6])
    assert result.positions.shape == (4, 2, 2)
    assert result.probs.shape == (4, 256)
    assert np.all((result.probs > 0) & (result.probs < 1))
    assert result.components.shape == (2,)
    assert result.step_nll.shape == (4,)
    assert result.nll > 0

    again = generation_task(small_model, sequence.frames, 2, horizon=4, observed=2)
    np.testing.assert_array_equal(again.positions, result.positions)
    assert again.nll is None
    with pytest.raises(ContractError):
        generation_task(small_model, sequence.frames, 2, horizon=0, observed=2)
    with pytest.raises(ContractError):
        generation_task(small_model, sequence.frames, 2, horizon=4, observed=2, truth=sequence.frames[2:5])


def test_interpolation_task(small_model, small_corpora):
    sequence = small_corpora["test"].subset(1)[0]
    result = interpolation_task(small_model, sequence.frames, 1, observed=2)
    assert result.positions.shape == (8, 1, 2)
    assert result.generated.shape == (4, 1, 2)
    assert result.probs.shape == (8, 256)
    assert result.mask.tolist() == [True, True, False, False, False, False, True, True]
    assert np.all(np.isfinite(result.positions))
    generated = generation_task(small_model, sequence.frames, 1, horizon=4, observed=2)
    np.testing.assert_array_equal(result.components, generated.components)
    with pytest.raises(ContractError):
        interpolation_task(small_model, sequence.frames, 1, observed=4)


def test_position_inference_task(small_model, small_corpora):
    corpus = small_corpora["test"]
    sequence = corpus.subset(2)[0]
    means, alignment = position_inference_task(small_model, sequence, corpus.transform)
    assert means.shape == (8, 2, 2)
    assert sorted(alignment.permutation) == [0, 1]
    assert alignment.error >= 0


def test_image_shaped_frames_are_flattened_for_inference(small_model, small_corpora):
    corpus = small_corpora["test"]
    sequence = corpus.subset(1)[0]
    assert sequence.frames.shape == (8, 16, 16)
    means, _ = position_inference_task(small_model, sequence, corpus.transform)
    flat = value_of(infer(small_model.inference, sequence.frames.reshape(8, 256).astype(float), 1).means)
    np.testing.assert_array_equal(means, flat)


def test_trajectory_svg_is_byte_deterministic(tmp_path):
    truth = np.stack([np.linspace(2, 13, 8), np.linspace(3, 12, 8)], axis=-1)[:, None]
    first = write_trajectory_svg(trajectory_figure(truth, "run", inferred=truth + 0.5), tmp_path / "a.svg")
    second = write_trajectory_svg(trajectory_figure(truth, "run", inferred=truth + 0.5), tmp_path / "b.svg")
    assert first.read_bytes() == second.read_bytes()
    text = first.read_text()
    assert "<svg" in text
    assert "<dc:date>" not in text


@pytest.mark.parametrize("task, metrics", [
    ("infer", set()),
    ("generate", {"generation_nll", "generation_error"}),
    ("interpolate", {"generation_error", "interpolation_error", "interpolation_nll"}),
])
def test_run_task(task, metrics, tmp_path, small_model, small_corpora):
    config = EvalConfig(observed=2, horizon=4, plot_sequences=1, threads=2)
    records = run_task(task, small_model, small_corpora["test"], config, out_dir=tmp_path)
    assert [r["sequence"] for r in records] == list(range(6))
    for record in records:
        assert set(record) == {"task", "sequence", "n_objects", "aligned_rmse", "scale"} | metrics
        assert all(np.isfinite(record[m]) for m in metrics)
    assert (tmp_path / f"{task}_0000.svg").read_text().lstrip().startswith("<?xml")
    assert (tmp_path / f"{task}_0000.pgm").exists()
    assert not (tmp_path / f"{task}_0001.svg").exists()


def test_run_task_is_deterministic_across_threads(small_model, small_corpora):
    corpus = small_corpora["test"]
    single = run_task("interpolate", small_model, corpus, EvalConfig(observed=2, threads=1, max_sequences=3))
    threaded = run_task("interpolate", small_model, corpus, EvalConfig(observed=2, threads=3, max_sequences=3))
    assert single == threaded
    assert len(single) == 3


def test_run_task_rejects_bad_input(small_corpora):
    model = initialize(0, ModelShapes(pixels=256, canvas_size=4, state_size=4, object_counts=(1,)))
    with pytest.raises(ContractError):
        run_task("infer", model, small_corpora["test"], EvalConfig())
    with pytest.raises(ContractError):
        run_task("dream", model, small_corpora["test"], EvalConfig())


def test_generation_needs_enough_steps(small_model, small_corpora):
    with pytest.raises(ContractError):
        run_task("generate", small_model, small_corpora["test"], EvalConfig(observed=5, horizon=25))


def test_sign_test():
    result = sign_test(np.zeros(10), np.ones(10))
    assert (result["wins"], result["losses"], result["ties"]) == (10, 0, 0)
    assert result["p_value"] == pytest.approx(0.5 ** 10)
    tied = sign_test([1.0, 2.0], [1.0, 2.0])
    assert tied["ties"] == 2 and tied["p_value"] == 1.0
    assert sign_test([2.0, 2.0, 0.0], [1.0, 1.0, 1.0])["p_value"] == pytest.approx(0.875)


def test_calculate_stats():
    assert calculate_stats([]) is None
    assert calculate_stats([np.nan]) is None
    values = calculate_stats([1.0, 2.0, 3.0, np.nan, np.inf])
    assert values["count"] == 3
    assert values["mean"] == pytest.approx(2.0)
    assert values["median"] == pytest.approx(2.0)
    assert values["std"] == pytest.approx(1.0)
    assert calculate_stats([4.0])["std"] == 0.0


def test_report_round_trip_and_summary(tmp_path):
    records = [{"task": "interpolate", "sequence": i, "n_objects": 1, "aligned_rmse": 0.1 * i,
                "scale": 1.0, "generation_error": 2.0 + i, "interpolation_error": 1.0 + i,
                "interpolation_nll": 0.2} for i in range(4)]
    records.append({"task": "infer", "sequence": 0, "n_objects": 2, "aligned_rmse": 0.5, "scale": 2.0})
    path = write_report(records, tmp_path / "report.jsonl")
    frame = read_report(path)
    assert isinstance(frame, pd.DataFrame)
    assert len(frame) == 5

    summary = summarize_report(frame)
    assert sorted(summary) == ["infer", "interpolate"]
    assert "interpolation_error" not in summary["infer"]
    assert summary["interpolate"]["interpolation_error"]["mean"] == pytest.approx(2.5)
    comparison = summary["interpolate"]["interpolation_vs_generation"]
    assert comparison["wins"] == 4
    assert comparison["p_value"] == pytest.approx(0.0625)
    text = format_summary(summary)
    assert "[interpolate]" in text and "4 wins" in text
