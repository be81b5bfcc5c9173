import math

import numpy as np
import pytest

from siglab.datagen import SimpleGenSpec, sample_simple
from siglab.errors import ContractError, ShapeError, TrainingError
from siglab.numkit import Tape, Var, ad, backward, check_gradients
from siglab.sigcli.gradients import composed_check
from siglab.sigmodel import (Architecture, DomainData, PartitionDims, SigModel, TrainConfig, Trainer,
                             class_confusion, infer_latents, load_checkpoint, loss_vae, loss_y, partition,
                             predict_labels, predict_target, reparameterize, save_checkpoint, train_fit)


def small_arch(**kw):
    base = dict(input_dim=4, num_domains=3, dims=PartitionDims(1, 1, 1, 1), enc_hidden=(8,), dec_hidden=(8,),
                cls_hidden=(6,))
    return Architecture(**(base | kw))


def tiny_data(seed=0, n=40, U=3):
    ds = sample_simple(SimpleGenSpec(num_domains=U, samples_per_domain=n, master_seed=seed))
    src = ds.view(list(range(1, U)), "train")
    tgt = ds.view([0], "train")
    return DomainData(src.X, src.u, src.y), DomainData(tgt.X, tgt.u)


# -- encoder ---------------------------------------------------------------------


def test_zero_heads_give_bias_rows():
    m = SigModel.init(small_arch(), 0)
    m.params["enc.mu.W"][:] = 0.0
    m.params["enc.mu.b"][:] = [[0.1, -0.2, 0.3, 0.4]]
    mu, _ = m.encode(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(mu, np.repeat([[0.1, -0.2, 0.3, 0.4]], 5, axis=0))


def test_encoder_gradient_matches_finite_differences():
    m = SigModel.init(small_arch(), 1)
    for k in m.buffers:
        m.buffers[k] = m.buffers[k] + 0.3
    x = np.random.default_rng(1).normal(size=(6, 4))
    names = [k for k in m.params if k.startswith("enc.")]

    def loss(tape, v):
        full = m.const_vars() | v
        mu, _ = m.encode_vars(full, tape.const(x), train=False)
        return ad.sum(mu)

    errs = check_gradients(loss, {k: m.params[k] for k in names})
    # logvar head does not touch mu; its gradient is exactly zero on both routes
    assert max(e for k, e in errs.items() if "logvar" not in k) < 1e-4
    assert all(errs[k] == 0.0 for k in names if "logvar" in k)


def test_encode_eval_deterministic():
    m = SigModel.init(small_arch(), 2)
    x = np.random.default_rng(2).normal(size=(7, 4))
    a, b = m.encode(x), m.encode(x)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_encode_shape_mismatch():
    with pytest.raises(ShapeError):
        SigModel.init(small_arch(), 0).encode(np.zeros((2, 3)))


# -- reparameterization ----------------------------------------------------------


def test_reparameterize_zero_noise():
    mu = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(reparameterize(mu, np.array([[0.3, 0.1]]), np.zeros((1, 2))), mu)


def test_reparameterize_unit_scale():
    mu = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(reparameterize(mu, np.zeros((1, 2)), np.ones((1, 2))), mu + 1)


def test_reparameterize_variance_monte_carlo():
    lv = np.full((100000, 1), math.log(2.5))
    eps = np.random.default_rng(0).normal(size=lv.shape)
    z = reparameterize(np.zeros_like(lv), lv, eps)
    assert abs(z.var() / 2.5 - 1) < 0.05


def test_reparameterize_shape_check():
    with pytest.raises(ShapeError):
        reparameterize(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)))


# -- partition -------------------------------------------------------------------


def test_partition_single_columns():
    z = np.arange(8.0).reshape(2, 4)
    parts = partition(z, PartitionDims(1, 1, 1, 1))
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(p, z[:, i:i + 1])


def test_partition_two_block():
    z = np.arange(8.0).reshape(2, 4)
    z1, z2, z3, z4 = partition(z, PartitionDims(0, 2, 2, 0))
    assert z1.shape == (2, 0) and z4.shape == (2, 0)
    np.testing.assert_array_equal(np.hstack([z1, z2, z3, z4]), z)


def test_partition_dim_mismatch():
    with pytest.raises(ShapeError):
        partition(np.zeros((2, 5)), PartitionDims(1, 1, 1, 1))


def test_partition_dims_validation():
    with pytest.raises(ContractError):
        PartitionDims(1, 0, 0, 1)


# -- classifier ------------------------------------------------------------------


def test_classify_depends_on_domain_embedding():
    m = SigModel.init(small_arch(), 0)
    m.params["embed"] = np.random.default_rng(0).normal(size=m.params["embed"].shape)
    z = np.array([[0.5], [0.5]])
    logits = m.classify(z, z, [0, 1])
    assert not np.allclose(logits[0], logits[1])


def test_zero_final_layer_gives_uniform():
    m = SigModel.init(small_arch(num_classes=3), 0)
    m.params["cls.out.W"][:] = 0.0
    m.params["cls.out.b"][:] = 0.0
    _, probs = predict_target(m, np.random.default_rng(0).normal(size=(4, 4)), 1)
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)


def test_unknown_domain_rejected():
    m = SigModel.init(small_arch(), 0)
    with pytest.raises(ContractError):
        m.classify(np.zeros((1, 1)), np.zeros((1, 1)), [3])


def test_target_inference_reads_target_embedding_row():
    m = SigModel.init(small_arch(), 0)
    x = np.random.default_rng(0).normal(size=(5, 4))
    _, base = predict_target(m, x, 2)
    m.params["embed"][1] += 3.0
    np.testing.assert_array_equal(predict_target(m, x, 2)[1], base)
    m.params["embed"][2] += 3.0
    assert not np.allclose(predict_target(m, x, 2)[1], base)


# -- losses ----------------------------------------------------------------------


def test_loss_vae_perfect_fit_is_zero():
    x = np.array([[0.3, -1.0]])
    total, _, _ = loss_vae(x, x, np.zeros((1, 2)), np.zeros((1, 2)), 1.0)
    assert float(total.value) == 0.0


def test_loss_vae_without_kl_is_mse():
    x, xh = np.array([[0.0, 1.0]]), np.array([[0.5, -1.0]])
    total, recon, _ = loss_vae(x, xh, np.ones((1, 2)), np.ones((1, 2)), 0.0)
    assert float(total.value) == float(recon.value) == 0.25 + 4.0


def test_loss_vae_hand_case():
    total, recon, kl = loss_vae([[0.0]], [[1.0]], [[1.0]], [[0.0]], 1.0)
    assert float(recon.value) == 1.0 and float(kl.value) == 0.5
    assert float(total.value) == 1.5


def test_loss_y_large_margin_vanishes():
    logits = np.array([[60.0, -60.0], [-60.0, 60.0]])
    assert float(loss_y(logits, [0, 1]).value) < 1e-40


def test_loss_y_uniform_binary():
    assert float(loss_y(np.zeros((4, 2)), [0, 1, 1, 0]).value) == pytest.approx(math.log(2), abs=1e-15)


def test_confusion_zero_for_one_hot_batch():
    logits = Var(np.array([[5000.0, 0.0, 0.0], [0.0, 5000.0, 0.0], [0.0, 0.0, 5000.0]]))
    assert float(class_confusion(logits).value) == 0.0


def test_confusion_positive_for_uniform_batch():
    value = float(class_confusion(Var(np.zeros((4, 2)))).value)
    assert value == pytest.approx(0.5)


def test_loss_y_confusion_switch():
    logits = np.zeros((4, 2))
    base = float(loss_y(logits, [0, 1, 0, 1]).value)
    assert float(loss_y(logits, [0, 1, 0, 1], True).value) == pytest.approx(base + 0.5)


# -- inference -------------------------------------------------------------------


def test_tie_breaks_to_lowest_class():
    np.testing.assert_array_equal(predict_labels(np.array([[0.5, 0.5], [0.2, 0.8]])), [0, 1])


def test_predicted_probabilities_sum_to_one():
    m = SigModel.init(small_arch(num_classes=3), 3)
    _, probs = predict_target(m, np.random.default_rng(3).normal(size=(10, 4)), 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_infer_latents_repeatable():
    m = SigModel.init(small_arch(), 4)
    x = np.random.default_rng(4).normal(size=(10, 4))
    np.testing.assert_array_equal(infer_latents(m, x), infer_latents(m, x))


# -- training --------------------------------------------------------------------


def test_train_config_validation():
    for kw in (dict(lr=0.0), dict(alpha=-1.0), dict(batch_size=1), dict(align_block="z4"),
               dict(centroid_decay=1.0)):
        with pytest.raises(ContractError):
            TrainConfig(**kw)


def test_alpha_beta_zero_collapses_to_classification_loss():
    src, tgt = tiny_data()
    res = train_fit(src, tgt, TrainConfig(epochs=3, batch_size=16, alpha=0.0, beta=0.0), small_arch())
    assert res.steps
    for s in res.steps + res.history:
        assert s.l_total == s.l_y


def test_loss_composition_every_step():
    src, tgt = tiny_data(1)
    cfg = TrainConfig(epochs=3, batch_size=16, alpha=0.7, beta=0.3)
    res = train_fit(src, tgt, cfg, small_arch())
    for s in res.steps:
        assert abs(s.l_total - (s.l_y + cfg.beta * s.l_vae + cfg.alpha * s.l_align)) <= 1e-10


def test_fixed_seed_bit_identical_history():
    src, tgt = tiny_data(2)
    cfg = TrainConfig(epochs=3, batch_size=16, alpha=0.5, seed=9)
    a = train_fit(src, tgt, cfg, small_arch())
    b = train_fit(src, tgt, cfg, small_arch())
    assert [s.as_dict() for s in a.steps] == [s.as_dict() for s in b.steps]
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def test_visiting_order_is_seed_controlled():
    src, tgt = tiny_data(2)
    a = train_fit(src, tgt, TrainConfig(epochs=2, batch_size=16, seed=1), small_arch())
    b = train_fit(src, tgt, TrainConfig(epochs=2, batch_size=16, seed=2), small_arch())
    assert [s.l_total for s in a.steps] != [s.l_total for s in b.steps]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    src, tgt = tiny_data(3)
    with pytest.raises(TrainingError) as err:
        train_fit(src, tgt, TrainConfig(lr=1e12, epochs=5, batch_size=16), small_arch())
    assert err.value.epoch is not None and err.value.batch is not None


def test_train_fit_feature_mismatch():
    src, tgt = tiny_data()
    with pytest.raises(ShapeError):
        train_fit(src, DomainData(tgt.X[:, :3], tgt.u), TrainConfig(epochs=1, batch_size=16), small_arch())


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_small_sgd_step_decreases_total_loss(lr):
    arch = small_arch()
    model = SigModel.init(arch, 0)
    cfg = TrainConfig(alpha=0.5, beta=0.3)
    rng = np.random.default_rng(5)
    xs, xt = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    ys, us, ut = np.arange(8) % 2, rng.integers(1, 3, size=8), np.zeros(8, dtype=np.int64)

    def loss_at(params, weights=None):
        tape = Tape()
        v = {k: tape.param(p, name=k) for k, p in params.items()}
        saved = model.params
        model.params = params
        total, parts = Trainer(model, cfg).step_loss(tape, v, xs, ys, us, xt, ut, train=False, weights=weights)
        model.params = saved
        return tape, v, total, parts

    tape, v, total, parts = loss_at(model.params)
    names = list(model.params)
    grads = backward(tape, total, [v[k] for k in names])
    stepped = {k: model.params[k] - lr * g for k, g in zip(names, grads)}
    after = loss_at(stepped, parts["weights"])[2]
    assert float(after.value) < float(total.value)


def test_composed_loss_gradient_check():
    check = composed_check(0)
    assert check.max_error < 1e-3, check.errors


def test_source_accuracy_under_default_hyperparameters():
    ds = sample_simple(SimpleGenSpec(num_domains=8, samples_per_domain=1000))
    sources = list(range(1, 8))
    tr, val = ds.view(sources, "train"), ds.view(sources, "val")
    tgt = ds.view([0], "train")
    arch = Architecture(input_dim=4, num_domains=8, dims=PartitionDims(2, 0, 2, 0))
    res = train_fit(DomainData(tr.X, tr.u, tr.y), DomainData(tgt.X, tgt.u), TrainConfig(seed=0), arch,
                    source_val=DomainData(val.X, val.u, val.y))
    pred, _ = predict_target(res.model, tr.X, tr.u)
    assert (pred == tr.y).mean() > 0.95


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    src, tgt = tiny_data()
    cfg = TrainConfig(epochs=1, batch_size=16, seed=4)
    res = train_fit(src, tgt, cfg, small_arch())
    save_checkpoint(tmp_path / "m.json", res.model, cfg)
    model, cfg2 = load_checkpoint(tmp_path / "m.json")
    assert cfg2 == cfg and model.arch == res.model.arch
    for k in res.model.params:
        np.testing.assert_array_equal(model.params[k], res.model.params[k])
    for k in res.model.buffers:
        np.testing.assert_array_equal(model.buffers[k], res.model.buffers[k])
    np.testing.assert_array_equal(infer_latents(model, src.X), infer_latents(res.model, src.X))


def test_checkpoint_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.json")
