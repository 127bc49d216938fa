"""Trainer tests: optimizer oracle, flag isolation, determinism, diagnostics."""
import json
import os

import numpy as np
import pytest

from lanestream.core import BEVGridSpec
from lanestream.engine import Tensor
from lanestream.model import LaneSegmentModel, ModelConfig
from lanestream.synth import ScenarioSpec, generate_sequence
from lanestream.training import (
    ABLATION_VARIANTS,
    AdamW,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    ablate,
    cosine_lr,
    evaluate_model,
    format_ablation_table,
)

GRID = BEVGridSpec(height_cells=40, width_cells=20, x_range=20.0, y_range=10.0, channels=12)


def make_model(seed=0, **kw):
    base = dict(bev_channels=12, channels=12, layers=2, queries=12, stream_slots=4, dn_total=12)
    base.update(kw)
    return LaneSegmentModel(ModelConfig(**base), GRID, seed=seed)


def make_sequences(count=3, frames=4, speed=2.0, noise=0.05, seed0=11):
    return [
        generate_sequence(
            ScenarioSpec(
                template="straight",
                frames=frames,
                speed=speed,
                seed=seed0 + i,
                grid=GRID,
                noise_sigma=noise,
            )
        )
        for i in range(count)
    ]


def tiny_config(**kw):
    base = dict(
        epochs=2,
        lr=1e-3,
        single_frame_fraction=0.5,
        stream=True,
        dbpe=True,
        dn=True,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model):
    return {name: t.data.copy() for name, t in model.params.items()}


# optimizer -------------------------------------------------------------------


def test_adamw_matches_reference_update():
    # five steps on a fixed-gradient scalar against a hand-rolled reference
    p = Tensor(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    ref = np.array([1.0, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    for k in range(1, 6):
        g = np.array([0.5, -1.5]) * k
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9**k)
        v_hat = v / (1.0 - 0.999**k)
        ref = ref - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * ref)
        assert np.allclose(p.data, ref, atol=1e-15)


def test_adamw_skips_parameters_without_gradients():
    p = Tensor(np.array([3.0]))
    q = Tensor(np.array([4.0]))
    opt = AdamW([p, q], lr=0.1, weight_decay=0.5)
    p.grad = np.array([1.0])
    before = q.data.copy()
    opt.step()
    assert np.array_equal(q.data, before)
    assert p.data[0] != 3.0


def test_cosine_schedule_endpoints():
    assert cosine_lr(2e-4, 0, 100) == pytest.approx(2e-4)
    assert cosine_lr(2e-4, 99, 100) == pytest.approx(0.0, abs=1e-18)
    mid = cosine_lr(2e-4, 50, 101)
    assert mid == pytest.approx(1e-4, rel=1e-12)
    assert cosine_lr(2e-4, 0, 1) == 2e-4


# flag isolation -----------------------------------------------------------------


def frozen_names(model, before, after):
    return [n for n in before if np.array_equal(before[n], after[n])]


def run_short_fit(cfg, seqs=None, model=None):
    model = model or make_model(seed=cfg.seed)
    seqs = seqs or make_sequences(count=2, frames=3)
    before = snapshot(model)
    trainer = Trainer(model, cfg)
    trainer.fit(seqs)
    return model, before, snapshot(model)


def test_disabled_stream_freezes_stream_parameters():
    cfg = tiny_config(stream=False, dn=False, epochs=1)
    model, before, after = run_short_fit(cfg)
    for name in before:
        if name.startswith("stream."):
            assert np.array_equal(before[name], after[name]), name
    assert not np.array_equal(before["query.content"], after["query.content"])


def test_disabled_dn_freezes_dn_parameters():
    cfg = tiny_config(stream=False, dn=False, epochs=1)
    model, before, after = run_short_fit(cfg)
    for name in before:
        if name.startswith("dn."):
            assert np.array_equal(before[name], after[name]), name


def test_static_pe_freezes_later_layer_pe_parameters():
    cfg = tiny_config(stream=False, dn=False, dbpe=False, epochs=1)
    model, before, after = run_short_fit(cfg)
    assert np.array_equal(before["l1.pe.w"], after["l1.pe.w"])
    assert np.array_equal(before["l1.pe.b"], after["l1.pe.b"])
    # layer-0 encoding is always in the graph
    assert not np.array_equal(before["l0.pe.w"], after["l0.pe.w"])


def test_enabled_flags_update_their_parameters():
    cfg = tiny_config(epochs=2)
    model, before, after = run_short_fit(cfg, seqs=make_sequences(count=2, frames=3, speed=2.0))
    assert any(
        not np.array_equal(before[n], after[n]) for n in before if n.startswith("stream.")
    )
    assert any(not np.array_equal(before[n], after[n]) for n in before if n.startswith("dn."))
    assert not np.array_equal(before["l1.pe.w"], after["l1.pe.w"])


def test_zero_stream_alpha_drops_stream_term():
    seqs = make_sequences(count=1, frames=3)
    model = make_model(seed=2)
    cfg = tiny_config(alphas=(1.0, 0.0, 1.0))
    trainer = Trainer(model, cfg)
    frames = seqs[0]
    _, _, bundle = trainer.frame_loss(frames[0], None, None)
    trainer.global_step = 1
    loss, terms, _ = trainer.frame_loss(frames[1], bundle, frames[0].gt)
    assert terms["stream_covered"] > 0
    expected = terms["detection"] + terms["denoise"]
    assert terms["total"] == pytest.approx(expected, rel=1e-12)


# the loop -------------------------------------------------------------------


def test_phase_split_in_history():
    cfg = tiny_config(epochs=4, single_frame_fraction=0.5, dn=False)
    model = make_model(seed=1)
    trainer = Trainer(model, cfg)
    trainer.fit(make_sequences(count=1, frames=3))
    phases = [row["phase"] for row in trainer.history]
    assert phases == ["single_frame", "single_frame", "streaming", "streaming"]


def test_loss_decreases_on_toy_data():
    # single-frame objective throughout so epoch losses are comparable
    seqs = make_sequences(count=3, frames=4, noise=0.03)
    cfg = tiny_config(epochs=4, lr=2e-3, stream=False)
    model = make_model(seed=0)
    trainer = Trainer(model, cfg)
    history = trainer.fit(seqs)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_fixed_seed_is_bit_identical_over_100_steps():
    # 3 sequences x 4 frames x 9 epochs = 108 steps per run
    def run():
        seqs = make_sequences(count=3, frames=4)
        cfg = tiny_config(epochs=9, single_frame_fraction=0.5)
        model = make_model(seed=0)
        trainer = Trainer(model, cfg)
        history = trainer.fit(seqs)
        state = np.concatenate([t.data.ravel() for t in model.params.tensors()])
        return state, [row["train_loss"] for row in history], trainer.global_step

    s1, l1, n1 = run()
    s2, l2, n2 = run()
    assert n1 == n2 >= 100
    assert np.array_equal(s1, s2)
    assert l1 == l2


def test_nan_aborts_with_diagnostics(tmp_path):
    seqs = make_sequences(count=1, frames=2)
    model = make_model(seed=0)
    model.params["head.type.b1"].data[:] = np.nan
    trainer = Trainer(model, tiny_config(epochs=1), out_dir=str(tmp_path))
    with pytest.raises(TrainingDiverged):
        trainer.fit(seqs)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert "terms" in dump and "context" in dump and "config" in dump
    assert dump["context"]["step"] == 0


def test_history_and_checkpoint_files(tmp_path):
    seqs = make_sequences(count=1, frames=3)
    cfg = tiny_config(epochs=2, dn=False)
    model = make_model(seed=4)
    trainer = Trainer(model, cfg, out_dir=str(tmp_path))
    trainer.fit(seqs, val_seqs=seqs)
    lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    for line in lines:
        row = json.loads(line)
        assert {"epoch", "phase", "train_loss", "report"} <= set(row)
        assert 0.0 <= row["report"]["map"] <= 1.0
    assert (tmp_path / "checkpoint.bin").exists()
    assert (tmp_path / "checkpoint.json").exists()


def test_batch_accumulation_scales_gradients():
    seqs = make_sequences(count=1, frames=4)
    results = []
    for bs in (1, 4):
        model = make_model(seed=6)
        cfg = tiny_config(epochs=1, batch_size=bs, stream=False, dn=False)
        Trainer(model, cfg).fit(seqs)
        results.append(snapshot(model))
    # different batch sizes take different optimizer paths
    assert not np.array_equal(results[0]["query.content"], results[1]["query.content"])


def test_evaluate_model_reports_unit_interval_metrics():
    model = make_model(seed=0)
    seqs = make_sequences(count=1, frames=2)
    report = evaluate_model(model, seqs, stream=True, dynamic_pe=True)
    d = report.to_dict()
    for key in ("map", "top_lsls", "ols"):
        assert d[key] is None or 0.0 <= d[key] <= 1.0


# ablations -----------------------------------------------------------------------


def test_ablation_table_rows_and_files(tmp_path):
    seqs = make_sequences(count=1, frames=2)
    base = tiny_config(epochs=1)
    mc = dict(bev_channels=12, channels=12, layers=2, queries=12, stream_slots=4, dn_total=12)
    table = ablate(
        ModelConfig(**mc),
        GRID,
        seqs,
        seqs,
        base,
        seeds=(0,),
        out_dir=str(tmp_path),
    )
    names = [r["variant"] for r in table["rows"]]
    assert names == ["baseline", "+dbpe", "+dbpe+dn", "+stream+dbpe+dn"]
    saved = json.loads((tmp_path / "ablation.json").read_text())
    assert saved == table
    text = (tmp_path / "ablation.txt").read_text()
    lines = text.strip().splitlines()
    assert lines[0].split() == ["variant", "mAP", "Acc_b", "TOP_lsls", "OLS"]
    assert len(lines) == 2 + len(names)


def test_format_ablation_table_alignment():
    rows = [
        {"variant": "baseline", "map": 0.5, "acc_b": None, "top_lsls": 0.25, "ols": 0.375},
        {"variant": "+stream+dbpe+dn", "map": 0.625, "acc_b": 1.0, "top_lsls": 0.5, "ols": 0.5},
    ]
    text = format_ablation_table(rows)
    lines = text.splitlines()
    assert len({len(l) for l in lines if l}) <= 2  # header/body widths agree
    assert "-" in lines[2].split()[2] or "None" not in text
