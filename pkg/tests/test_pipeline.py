import numpy as np
import pytest

from stadm import numerics as nx
from stadm.data import EegEpoch, Montage, builtin_montage, synth_pairs, write_epoch
from stadm.errors import ConfigError, DataError, DimensionError
from stadm.evaluation import evaluate_run
from stadm.mae import MaeConfig, MaskedAutoencoder
from stadm.numerics import Adam, Tensor
from stadm.pipeline import (Checkpoint, StadmModel, TrainConfig, _batches, default_bypass_window, format_config,
                            load_config, load_pairs, pairs_from_epochs, parse_config_text, sample_arrays,
                            super_resolve, super_resolve_many, train, train_pairs, training_step)

TINY = dict(stc_dim=8, stc_heads=2, mtd_dim=8, mtd_heads=2, mtd_kernels=(3, 5), mtd_blocks=1, steps=10)


def toy_pairs(n=4, hr="synthetic-8"):
    return pairs_from_epochs(synth_pairs(range(n), builtin_montage(hr), 2))


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, "batch_size": 4, "epochs": 3, **kw})


@pytest.fixture(scope="module")
def tiny_ckpt():
    return train_pairs(tiny_cfg(epochs=20, learning_rate=1e-2), toy_pairs())


def write_pairs(directory, pairs):
    directory.mkdir(exist_ok=True)
    for i, (lr, hr) in enumerate(pairs):
        write_epoch(directory / f"p{i}.lr.stad", lr)
        write_epoch(directory / f"p{i}.hr.stad", hr)
    return directory


# ---------------------------------------------------------------- config

def test_config_text_with_sections():
    text = "learning_rate = 2e-4  # comment\nbatch_size = 4\n[mtd]\nkernels = 3, 5\nblocks = 1\n"
    d = parse_config_text(text)
    assert d == {"learning_rate": 2e-4, "batch_size": 4, "mtd_kernels": (3, 5), "mtd_blocks": 1}


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 3\nepochs = 7\nschedule = \"linear\"\n")
    cfg = load_config(path, {"epochs": 2, "batch_size": None})
    assert (cfg.seed, cfg.epochs, cfg.schedule, cfg.batch_size) == (3, 2, "linear", 8)


def test_format_config_round_trip():
    cfg = TrainConfig(learning_rate=3e-3, mtd_kernels=(3, 5, 7), sample_mode="paper_literal")
    assert TrainConfig.from_dict(parse_config_text(format_config(cfg))) == cfg


@pytest.mark.parametrize("text", ["nonsense = 1", "batch_size = many", "just words", "batch_size = 1",
                                  "schedule = quadratic", "latent_space = pixels"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(parse_config_text(text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_paper_scale_values():
    cfg = TrainConfig.paper_scale()
    assert (cfg.batch_size, cfg.epochs, cfg.steps, cfg.learning_rate) == (32, 300, 1000, 1e-4)


def test_bypass_window():
    assert default_bypass_window(90) == 45
    assert default_bypass_window(2800) == 40
    assert default_bypass_window(7) == 7


def test_batches_merge_single_tail():
    order = np.arange(9)
    assert [len(b) for b in _batches(order, 4)] == [4, 5]
    assert [len(b) for b in _batches(order, 3)] == [3, 3, 3]
    assert np.array_equal(np.concatenate(_batches(order, 4)), order)


# ---------------------------------------------------------------- training step

def model_for(pairs, **kw):
    return StadmModel(tiny_cfg(**kw), pairs.geometry, float(np.sqrt(np.mean(pairs.hr ** 2))))


def test_training_step_loss_is_finite(rng):
    pairs = toy_pairs()
    loss = training_step(model_for(pairs), pairs.lr, pairs.hr, rng)
    assert np.isfinite(loss) and loss >= 0


def test_exact_noise_oracle_gives_zero_loss(rng):
    pairs = toy_pairs()
    model = model_for(pairs)
    z0 = model.encode_hr(pairs.hr)
    abar = model.schedule.alpha_bar

    def oracle(z_t, t, c, training=False):
        a = abar[np.asarray(t) - 1][:, None, None]
        return Tensor((z_t.data - np.sqrt(a) * z0) / np.sqrt(1 - a))

    model.predict_noise = oracle
    assert training_step(model, pairs.lr, pairs.hr, rng) == pytest.approx(0.0, abs=1e-20)


def test_initial_loss_is_noise_power():
    pairs = toy_pairs(64)
    model = model_for(pairs)
    loss = training_step(model, pairs.lr, pairs.hr, np.random.default_rng(0))
    assert loss == pytest.approx(1.0, abs=0.1)


def test_unpaired_batch_rejected(rng):
    pairs = toy_pairs()
    with pytest.raises(DimensionError):
        training_step(model_for(pairs), pairs.lr[:3], pairs.hr, rng)


def test_gradient_reaches_every_parameter():
    pairs = toy_pairs()
    model = model_for(pairs)
    opt = Adam(model.params, lr=1e-2)
    # the decoder starts at zero, so one update is needed before gradient flows upstream
    training_step(model, pairs.lr, pairs.hr, np.random.default_rng(1), opt)
    training_step(model, pairs.lr, pairs.hr, np.random.default_rng(2))
    grads = np.concatenate([p.grad.ravel() for _, p in model.params.items()])
    assert np.mean(grads != 0) >= 0.99


def test_codec_is_frozen():
    pairs = toy_pairs()
    codec = MaskedAutoencoder(MaeConfig(n_channels=8, n_samples=90, window_length=10, d_lat=6, heads=2))
    before = {k: v.data.copy() for k, v in codec.params.items()}
    model = StadmModel(tiny_cfg(latent_space="mae"), pairs.geometry, 1.0, codec)
    opt = Adam(model.params, lr=1e-2)
    for seed in range(3):
        training_step(model, pairs.lr, pairs.hr, np.random.default_rng(seed), opt)
    for name, p in codec.params.items():
        assert not p.grad.any()
        assert np.array_equal(p.data, before[name])


# ---------------------------------------------------------------- training runs

def test_toy_training_halves_loss():
    ckpt = train_pairs(tiny_cfg(epochs=300, learning_rate=1e-2), toy_pairs())
    trace = np.array(ckpt.loss_trace)
    assert len(trace) == 300
    assert trace[-10:].mean() < 0.5 * trace[:10].mean()


def test_desk_run_is_finite():
    pairs = pairs_from_epochs(synth_pairs(range(8), builtin_montage("synthetic-32"), 2))
    ckpt = train_pairs(TrainConfig(), pairs)
    assert len(ckpt.loss_trace) == 50 and np.isfinite(ckpt.loss_trace).all()
    assert ckpt.geometry.n_samples == 90 and len(ckpt.geometry.lr_montage) == 16


def test_training_is_deterministic():
    a = train_pairs(tiny_cfg(), toy_pairs())
    b = train_pairs(tiny_cfg(), toy_pairs())
    assert a.loss_trace == b.loss_trace
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)


def test_seed_changes_run():
    assert train_pairs(tiny_cfg(seed=1), toy_pairs()).loss_trace != train_pairs(tiny_cfg(), toy_pairs()).loss_trace


def test_max_steps_caps_training():
    assert len(train_pairs(tiny_cfg(epochs=50, max_steps=7), toy_pairs()).loss_trace) == 7


def test_small_dataset_is_repeated_to_fill_a_batch():
    assert len(train_pairs(tiny_cfg(batch_size=8, epochs=2), toy_pairs(2)).loss_trace) == 2


def test_empty_dataset(tmp_path):
    (tmp_path / "data").mkdir()
    with pytest.raises(DataError):
        train(tiny_cfg(), tmp_path / "data")
    with pytest.raises(DataError):
        train(tiny_cfg(), tmp_path / "missing")
    assert [p.name for p in tmp_path.iterdir()] == ["data"]


def test_pair_validation(tmp_path):
    d = write_pairs(tmp_path / "d", synth_pairs(range(2), builtin_montage("synthetic-8"), 2))
    (d / "p1.lr.stad").unlink()
    with pytest.raises(DataError, match="unpaired"):
        load_pairs(d)
    a = synth_pairs([0], builtin_montage("synthetic-8"), 2)
    b = synth_pairs([1], builtin_montage("synthetic-16"), 2)
    with pytest.raises(DataError):
        pairs_from_epochs(a + b)
    with pytest.raises(DataError):
        train_pairs(tiny_cfg(), pairs_from_epochs(a))


def test_mae_mode_needs_codec():
    with pytest.raises(ConfigError):
        train_pairs(tiny_cfg(latent_space="mae"), toy_pairs())


# ---------------------------------------------------------------- sampling and checkpoints

def test_super_resolve_shape_and_determinism(tiny_ckpt):
    lr = EegEpoch(tiny_ckpt.geometry.lr_montage, 256.0, toy_pairs().lr[0])
    a, b = super_resolve(tiny_ckpt, lr, seed=5), super_resolve(tiny_ckpt, lr, seed=5)
    assert a.data.shape == (8, 90) and a.montage.same_layout(tiny_ckpt.geometry.hr_montage)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, super_resolve(tiny_ckpt, lr, seed=6).data)
    literal = super_resolve(tiny_ckpt, lr, seed=5, mode="paper_literal")
    assert np.isfinite(literal.data).all()


def test_batched_sampling_matches_single(tiny_ckpt):
    pairs = toy_pairs()
    lrs = [EegEpoch(pairs.geometry.lr_montage, 256.0, x) for x in pairs.lr]
    many = super_resolve_many(tiny_ckpt, lrs, [3, 4, 5, 6], chunk=3)
    for lr, seed, sr in zip(lrs, [3, 4, 5, 6], many):
        np.testing.assert_allclose(sr.data, super_resolve(tiny_ckpt, lr, seed).data, atol=1e-12)


def test_super_resolve_rejects_other_montage(tiny_ckpt):
    lr_montage = tiny_ckpt.geometry.lr_montage
    moved = Montage("moved", lr_montage.labels, lr_montage.positions * 0.9)
    other = EegEpoch(moved, 256.0, toy_pairs().lr[0])
    with pytest.raises(DataError):
        super_resolve(tiny_ckpt, other, seed=0)
    with pytest.raises(DimensionError):
        sample_arrays(tiny_ckpt.model(), np.zeros((1, 3, 90)), [0])


def test_sampling_clip_follows_training_latents(tiny_ckpt):
    model = tiny_ckpt.model()
    bound = np.abs(model.encode_hr(toy_pairs().hr)).max()
    assert model.clip == pytest.approx(1.05 * bound)
    assert StadmModel(tiny_cfg(sample_clip=0.0), tiny_ckpt.geometry, 1.0, latent_bound=1.0).clip is None


def test_checkpoint_round_trip(tmp_path, tiny_ckpt):
    tiny_ckpt.save(tmp_path / "m.stpk")
    back = Checkpoint.load(tmp_path / "m.stpk")
    assert back.config == tiny_ckpt.config and back.loss_trace == tiny_ckpt.loss_trace
    assert back.signal_scale == tiny_ckpt.signal_scale and back.latent_bound == tiny_ckpt.latent_bound
    lr = EegEpoch(tiny_ckpt.geometry.lr_montage, 256.0, toy_pairs().lr[1])
    assert super_resolve(back, lr, 2).data.tobytes() == super_resolve(tiny_ckpt, lr, 2).data.tobytes()
    back.save(tmp_path / "again.stpk")
    assert (tmp_path / "m.stpk").read_bytes() == (tmp_path / "again.stpk").read_bytes()


def test_checkpoint_with_codec(tmp_path):
    codec = MaskedAutoencoder(MaeConfig(n_channels=8, n_samples=90, window_length=10, d_lat=6, heads=2))
    ckpt = train_pairs(tiny_cfg(latent_space="mae", epochs=1), toy_pairs(), codec)
    ckpt.save(tmp_path / "m.stpk")
    back = Checkpoint.load(tmp_path / "m.stpk")
    lr = EegEpoch(ckpt.geometry.lr_montage, 256.0, toy_pairs().lr[0])
    assert super_resolve(back, lr, 1).data.tobytes() == super_resolve(ckpt, lr, 1).data.tobytes()


# ---------------------------------------------------------------- evaluate_run

def test_evaluate_run_rows_and_reproducibility(tmp_path, tiny_ckpt, monkeypatch):
    d = write_pairs(tmp_path / "test", synth_pairs([50, 51], builtin_montage("synthetic-8"), 2))
    text = evaluate_run(tiny_ckpt, d, seed=0, out=tmp_path / "r.csv")
    lines = text.splitlines()
    assert lines[0] == "pair,factor,pcc,mae,nmse,snr_db"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["p0", "p1", "mean"]
    assert (tmp_path / "r.csv").read_text() == text
    assert evaluate_run(tiny_ckpt, d, seed=0) == text
    monkeypatch.setenv("STADM_THREADS", "2")
    assert evaluate_run(tiny_ckpt, d, seed=0) == text


def test_evaluate_run_empty(tmp_path, tiny_ckpt):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        evaluate_run(tiny_ckpt, tmp_path / "empty", out=tmp_path / "r.csv")
    assert not (tmp_path / "r.csv").exists()


def test_no_grad_sampling_leaves_no_graph(tiny_ckpt):
    model = tiny_ckpt.model()
    sample_arrays(model, toy_pairs().lr[:1], [0])
    assert all(not p.grad.any() for _, p in model.params.items())
    assert nx.grad_enabled()
