import math
import zipfile

import numpy as np
import pytest
import torch
from PIL import Image

from gradcheck import check, discriminator_loss_fn, generator_loss_fn, toy_batch, toy_model
from growthcast.cgan import (
    DiscriminatorConfig,
    GanModel,
    GeneratorConfig,
    TrainConfig,
    discriminator_forward,
    generator_forward,
    generator_objective,
    learning_rate_at,
    load_checkpoint,
    loss_cgan,
    loss_l1,
    patch_grid_size,
    predict,
    save_checkpoint,
    train,
    write_history,
)
from growthcast.cgan.model import discriminator_step, generator_step, make_optimizers, to_batch
from growthcast.datamodel import PairManifest, read_records
from growthcast.errors import ConfigError, DataError, NumericError, ShapeError, TrainingError
from growthcast.pairing import PairingConfig, build_pairs
from growthcast.preprocess import AugmentConfig, bytes_to_tensor, tensor_to_bytes
from growthcast.synthcrop import SynthConfig, generate_dataset


def small_model(size=64, base=8, seed=0, **train_kw):
    return GanModel.create(
        GeneratorConfig.for_size(size, base_channels=base),
        DiscriminatorConfig(base_channels=base),
        TrainConfig(seed=seed, **{"epochs": 2, **train_kw}),
    )


def random_image(rng, size):
    return rng.uniform(-1, 1, (size, size, 3)).astype(np.float32)


def receptive_grid(n, levels):
    """Independent derivation: out = floor((n + 2p - k) / s) + 1 per conv."""
    convs = [(4, 2, 1)] * levels + [(4, 1, 1)] * 2
    for k, s, p in convs:
        n = math.floor((n + 2 * p - k) / s) + 1
    return n


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size", [64, 128, 256])
def test_generator_shape_ladder(size):
    cfg = GeneratorConfig.for_size(size, base_channels=4)
    model = GanModel.create(cfg, DiscriminatorConfig(base_channels=4))
    x = torch.zeros(1, 3, size, size)
    with torch.no_grad():
        out, skips, decoder = model.generator(x, stochastic=False, return_features=True)
    assert out.shape == x.shape
    for k, f in enumerate(skips):
        assert f.shape == (1, cfg.level_channels(k), size >> (k + 1), size >> (k + 1))
    # decoder outputs run innermost first and double in size each level
    for i, f in enumerate(decoder):
        assert f.shape[-1] == size >> (cfg.depth - 1 - i)
    assert decoder[-1].shape == x.shape


@pytest.mark.parametrize("size,expected", [(64, 6), (128, 14), (256, 30)])
def test_patch_grid(size, expected):
    assert receptive_grid(size, 3) == expected
    assert patch_grid_size(size, 3) == expected
    model = GanModel.create(GeneratorConfig.for_size(size, base_channels=4),
                            DiscriminatorConfig(base_channels=4))
    scores = discriminator_forward(model, np.zeros((size, size, 3)), np.zeros((size, size, 3)))
    assert scores.logits.shape == (expected, expected)
    assert scores.mean == pytest.approx(scores.logits.mean(), abs=1e-6)


def test_generator_rejects_wrong_shape():
    model = small_model()
    with pytest.raises(ShapeError):
        generator_forward(model, np.zeros((32, 32, 3)))
    with pytest.raises(ShapeError):
        discriminator_forward(model, np.zeros((64, 64, 3)), np.zeros((32, 32, 3)))


def test_invalid_generator_config():
    with pytest.raises(ConfigError):
        GeneratorConfig(input_size=100, depth=8)
    with pytest.raises(ConfigError):
        GeneratorConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=3)


def test_output_range_and_determinism(rng):
    model = small_model()
    x = random_image(rng, 64)
    a = generator_forward(model, x, stochastic=False)
    b = generator_forward(model, x, stochastic=False)
    assert a.shape == x.shape
    assert np.all(np.abs(a) < 1)
    np.testing.assert_array_equal(a, b)


def test_stochastic_outputs_differ(rng):
    model = small_model()
    x = random_image(rng, 64)
    diffs = [
        np.any(generator_forward(model, x, True) != generator_forward(model, x, True))
        for _ in range(10)
    ]
    assert any(diffs)


def test_zero_weights_give_bias_logits():
    model = small_model()
    with torch.no_grad():
        for p in model.discriminator.parameters():
            p.zero_()
        model.discriminator.net[-1].bias.fill_(0.37)
    scores = discriminator_forward(model, np.ones((64, 64, 3)), -np.ones((64, 64, 3)))
    np.testing.assert_allclose(scores.logits, 0.37, atol=1e-7)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_loss_unit_values():
    z = torch.zeros(4, 1, 30, 30, dtype=torch.float64)
    assert abs(loss_cgan(z, z, "discriminator").item() - 2 * math.log(2)) < 1e-9
    y = torch.rand(1, 3, 8, 8)
    assert loss_l1(y, y).item() == 0.0
    assert loss_l1(torch.ones(1, 3, 8, 8), -torch.ones(1, 3, 8, 8)).item() == 2.0


def test_generator_loss_limit():
    big = torch.full((1, 1, 4, 4), 60.0, dtype=torch.float64)
    assert loss_cgan(None, big, "generator").item() < 1e-20


def test_loss_per_patch_oracle(rng):
    real = rng.normal(size=(4, 4)) * 3
    fake = rng.normal(size=(4, 4)) * 3
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    d_sum = g_sum = 0.0
    for i in range(4):
        for j in range(4):
            d_sum += -math.log(sig(real[i, j])) - math.log(1 - sig(fake[i, j]))
            g_sum += -math.log(sig(fake[i, j]))
    assert loss_cgan(real, fake, "discriminator").item() == pytest.approx(d_sum / 16, rel=1e-12)
    assert loss_cgan(real, fake, "generator").item() == pytest.approx(g_sum / 16, rel=1e-12)


def test_loss_extreme_logits_stay_finite():
    real = torch.tensor([[1e4, -1e4]], dtype=torch.float64)
    assert math.isfinite(loss_cgan(real, -real, "discriminator").item())


def test_loss_errors():
    with pytest.raises(NumericError):
        loss_cgan(torch.tensor([float("nan")]), torch.zeros(1), "discriminator")
    with pytest.raises(NumericError):
        loss_cgan(None, torch.tensor([float("inf")]), "generator")
    with pytest.raises(ValueError):
        loss_cgan(torch.zeros(1), torch.zeros(1), "critic")
    with pytest.raises(ShapeError):
        loss_l1(torch.zeros(2, 2), torch.zeros(2, 3))


def test_l1_elementwise_oracle(rng):
    a, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 5, 5))
    total = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel()))
    assert loss_l1(a, b).item() == pytest.approx(total / a.size, rel=1e-12)


def test_combined_objective_has_no_hidden_weighting(rng):
    fake = torch.as_tensor(rng.normal(size=(1, 1, 6, 6)))
    y, y_hat = torch.as_tensor(rng.normal(size=(1, 3, 8, 8))), torch.as_tensor(rng.normal(size=(1, 3, 8, 8)))
    total, adv, l1 = generator_objective(fake, y, y_hat, 100.0)
    assert total.item() == (loss_cgan(None, fake, "generator") + 100.0 * loss_l1(y, y_hat)).item()
    assert adv.item() == loss_cgan(None, fake, "generator").item()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generator_gradients_match_finite_differences(seed):
    model = toy_model(seed)
    x, y = toy_batch(seed)
    rel, zero_max = check(model.generator.parameters(), generator_loss_fn(model, x, y),
                          200, np.random.default_rng(seed))
    assert len(rel) == 200
    assert rel.max() < 1e-4
    assert zero_max < 1e-6


def test_discriminator_gradients_match_finite_differences():
    model = toy_model(3)
    x, y = toy_batch(3)
    rel, zero_max = check(model.discriminator.parameters(), discriminator_loss_fn(model, x, y),
                          100, np.random.default_rng(3))
    assert rel.max() < 1e-4
    assert zero_max < 1e-6


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=160, learning_rate=1e-4)
    assert learning_rate_at(cfg, 0) == 1e-4
    assert learning_rate_at(cfg, 80) == 1e-4
    assert learning_rate_at(cfg, 120) == pytest.approx(0.5e-4)
    assert learning_rate_at(cfg, 160) == 0.0
    rates = [learning_rate_at(cfg, e) for e in range(161)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_steps_touch_only_their_network(rng):
    model = small_model()
    opt_g, opt_d = make_optimizers(model)
    x = to_batch([random_image(rng, 64)])
    y = to_batch([random_image(rng, 64)])
    fake = model.generator(x, stochastic=True)
    g0, d0 = model.parameter_digest("generator"), model.parameter_digest("discriminator")
    discriminator_step(model, opt_d, x, y, fake)
    d1 = model.parameter_digest("discriminator")
    assert model.parameter_digest("generator") == g0 and d1 != d0
    generator_step(model, opt_g, x, y, fake)
    assert model.parameter_digest("discriminator") == d1
    assert model.parameter_digest("generator") != g0


def test_update_counts_and_history(rng, tmp_path):
    model = small_model(epochs=2)
    pairs = [(random_image(rng, 64), random_image(rng, 64)) for _ in range(2)]
    train(model, None, augment_config=AugmentConfig.disabled(64), images=pairs)
    assert [h["epoch"] for h in model.history] == [1, 2]
    assert all(h["d_updates"] == 2 and h["g_updates"] == 2 for h in model.history)
    path = write_history(model.history, tmp_path / "history.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,loss_d,loss_g_adv,loss_g_l1,lr"
    assert len(lines) == 3


def test_training_is_deterministic(rng):
    pairs = [(random_image(rng, 64), random_image(rng, 64)) for _ in range(3)]
    digests = []
    for _ in range(2):
        model = small_model(seed=5)
        train(model, None, augment_config=AugmentConfig(target_size=64, seed=5), images=pairs)
        digests.append((model.parameter_digest("generator"), model.history))
    assert digests[0] == digests[1]


def test_train_rejects_empty_and_mismatched():
    model = small_model()
    with pytest.raises(DataError):
        train(model, PairManifest((), horizon=3))
    with pytest.raises(ConfigError):
        train(model, None, augment_config=AugmentConfig.disabled(32), images=[])


def test_non_finite_loss_names_step(rng):
    model = small_model()
    with torch.no_grad():
        model.discriminator.net[-1].bias.fill_(float("nan"))
    pairs = [(random_image(rng, 64), random_image(rng, 64))]
    with pytest.raises(TrainingError, match="epoch 1, step 1"):
        train(model, None, augment_config=AugmentConfig.disabled(64), images=pairs)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    ds = generate_dataset(SynthConfig(n_plants=8, stages=6, image_size=64, seed=3),
                          tmp_path_factory.mktemp("tiny"))
    return build_pairs(read_records(ds.records_path), PairingConfig(horizon=3), root=ds.root)


def test_l1_decreases_over_first_epochs(tiny_manifest):
    """Smoke property: the mean L1 term falls every epoch for 5 epochs."""
    decreasing = 0
    for seed in range(5):
        model = GanModel.create(GeneratorConfig.for_size(64, base_channels=8),
                                DiscriminatorConfig(base_channels=8),
                                TrainConfig(epochs=10, seed=seed))
        train(model, tiny_manifest,
              augment_config=AugmentConfig(target_size=64, random_crop=False, seed=seed))
        l1 = [h["loss_g_l1"] for h in model.history[:5]]
        decreasing += all(b < a for a, b in zip(l1, l1[1:]))
    assert decreasing >= 4


# ---------------------------------------------------------------------------
# inference and checkpoints
# ---------------------------------------------------------------------------

def test_predict_order_and_empty(rng):
    model = small_model()
    assert predict(model, []) == []
    xs = [random_image(rng, 64) for _ in range(5)]
    outs = predict(model, xs, stochastic=False, batch_size=2)
    for x, y in zip(xs, outs):
        np.testing.assert_allclose(y, generator_forward(model, x, stochastic=False), atol=1e-6)


def test_predict_writes_bytes(tmp_path):
    model = small_model()
    with torch.no_grad():
        last = model.generator.up[0][1]
        last.weight.zero_()
        last.bias.copy_(torch.tensor([100.0, -100.0, 0.0]))
    predict(model, [np.zeros((64, 64, 3), np.float32)], False, out_dir=tmp_path, names=["a.png"])
    with Image.open(tmp_path / "a.png") as im:
        img = np.asarray(im)
    assert img.dtype == np.uint8
    assert np.all(img[..., 0] == 255) and np.all(img[..., 1] == 0) and np.all(img[..., 2] == 128)


def test_byte_round_trip_bound():
    b = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(tensor_to_bytes(bytes_to_tensor(b)), b)
    assert np.abs(bytes_to_tensor(tensor_to_bytes(np.linspace(-1, 1, 10001))) - np.linspace(-1, 1, 10001)).max() <= 1 / 255 + 1e-6


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model()
    pairs = [(random_image(rng, 64), random_image(rng, 64))]
    train(model, None, augment_config=AugmentConfig.disabled(64), images=pairs)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    for net in ("generator", "discriminator"):
        assert loaded.parameter_digest(net) == model.parameter_digest(net)
    assert loaded.history == model.history
    assert loaded.generator_config == model.generator_config
    assert loaded.train_config == model.train_config
    # re-saving reproduces the archive byte for byte
    again = save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert again.read_bytes() == path.read_bytes()
    with zipfile.ZipFile(path) as zf:
        assert set(zf.namelist()) == {"checkpoint.json", "parameters.bin"}


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("nope")
    with pytest.raises(DataError):
        load_checkpoint(bad)
