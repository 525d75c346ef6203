import hashlib
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossloc import diffcore as dc
from crossloc import encoders as en
from crossloc import training as tr
from crossloc.augment import AugmentConfig
from crossloc.datamodel import DataError, Dataset, Pose, Run, Sample
from crossloc.datamodel import is_same_place
from crossloc.losses import LossWeights, joint_embedding_loss

import oracles

TINY = en.EncoderConfig(image_channels=2, feature_dim=3, clusters=2, cloud_hidden=(4,),
                        mlp_hidden=4, n_pts=12)


def _digest(store, prefix):
    h = hashlib.sha256()
    for k in sorted(store.names()):
        if k.startswith(prefix):
            h.update(k.encode() + store[k].tobytes())
    return h.hexdigest()


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(places_per_batch=1)
    with pytest.raises(ValueError):
        tr.TrainConfig(paradigm="distill")
    with pytest.raises(ValueError):
        tr.TrainConfig(loss_preset="je-only")
    with pytest.raises(ValueError):
        tr.TrainConfig(je_warmup=-1)
    assert tr.TrainConfig(paradigm="teacher-student").paradigm == "teacher_student"


def test_je_warmup_ramp():
    cfg = tr.TrainConfig(je_warmup=3)
    assert [cfg.weights_at(e).je for e in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]
    assert cfg.weights_at(0).sm == 0.1 and tr.TrainConfig().weights_at(0).je == 1.0


def test_adam_first_step_closed_form():
    # m1 = (1-b1) g, v1 = (1-b2) g^2; bias-corrected ratio is sign(g) * |g| / (|g| + eps')
    P = dc.ParamStore({"w": np.array([2.0])})
    g = np.array([0.3])
    tr.optimizer_step(P, {"w": g}, tr.AdamState(), lr=0.1)
    assert math.isclose(P["w"][0], 2.0 - 0.1 * 0.3 / (0.3 + 1e-8), rel_tol=1e-15)


def test_adam_zero_gradient_is_noop():
    P = dc.ParamStore({"w": np.array([1.0, -1.0])})
    tr.optimizer_step(P, {"w": np.zeros(2)}, tr.AdamState())
    assert np.array_equal(P["w"], [1.0, -1.0])


def test_batch_shape_and_triplets(tiny_dataset):
    b = tr.build_batch(tiny_dataset, 4, np.random.default_rng(0), n_pts=12)
    assert b.pixels.shape == (8, 48, 64, 3) and b.points.shape == (8, 12, 3)
    assert np.array_equal(b.positive, b.anchor ^ 1)


def test_negatives_valid_over_10k_batches(tiny_dataset):
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        b = tr.build_batch(tiny_dataset, 4, rng, n_pts=1)
        assert np.all(b.place_of[b.negative] != b.place_of[b.anchor])
    for seed in range(50):
        b = tr.build_batch(tiny_dataset, 4, np.random.default_rng(seed), n_pts=4)
        for a, p, n in zip(b.anchor, b.positive, b.negative):
            assert is_same_place(b.samples[a].pose, b.samples[p].pose)
            assert not is_same_place(b.samples[a].pose, b.samples[n].pose)


def test_two_place_dataset_negative_is_other_place(tiny_world):
    _, runs = tiny_world
    keep = lambda r: Run(r.run_id, tuple(s for s in r.samples if s.place in (0, 1)))
    ds = Dataset.from_runs([keep(r) for r in runs])
    for seed in range(20):
        b = tr.build_batch(ds, 2, np.random.default_rng(seed), n_pts=4)
        assert np.all(b.place_of[b.negative] != b.place_of[b.anchor])


def test_insufficient_places():
    run = Run("r", (Sample(0, "r", Pose(0, 0)),))
    run2 = Run("q", (Sample(0, "q", Pose(1, 0)),))
    ds = Dataset.from_runs([run, run2])
    with pytest.raises(DataError):
        tr.build_batch(ds, 2, np.random.default_rng(0))


def test_epoch_batches_cover_all_places(tiny_dataset):
    groups = tr.epoch_batches(tiny_dataset, 3, np.random.default_rng(0))
    assert len(groups) == math.ceil(8 / 3)
    assert set(k for g in groups for k in g) == set(tiny_dataset.usable_places(2))
    assert all(len(set(g)) == 3 for g in groups)


def _cfg(**kw):
    kw.setdefault("augment", AugmentConfig.identity())
    return tr.TrainConfig(places_per_batch=2, **kw)


def test_zero_lr_leaves_params_unchanged(tiny_dataset):
    P = en.init_params(TINY, 0, ("image",))
    ck = tr.train_teacher(tiny_dataset, _cfg(teacher_epochs=1, lr=0.0), TINY, params=P)
    assert _digest(ck.params, "image") == _digest(P, "image")


def test_zero_epoch_student_unchanged_and_teacher_frozen(tiny_dataset):
    teacher = tr.train_teacher(tiny_dataset, _cfg(teacher_epochs=1), TINY)
    before = _digest(teacher.params, "image")
    init = en.init_params(TINY, 0, ("cloud",))
    st0 = tr.train_student(tiny_dataset, teacher, _cfg(student_epochs=0), TINY, params=init)
    assert _digest(st0.params, "cloud") == _digest(init, "cloud")
    st2 = tr.train_student(tiny_dataset, teacher, _cfg(student_epochs=2), TINY)
    assert _digest(teacher.params, "image") == before
    assert _digest(st2.params, "image") == before
    assert _digest(st2.params, "cloud") != _digest(init, "cloud")


def test_student_rejects_mismatched_config(tiny_dataset):
    teacher = tr.train_teacher(tiny_dataset, _cfg(teacher_epochs=0), TINY)
    other = en.EncoderConfig(image_channels=3, feature_dim=3, clusters=2, cloud_hidden=(4,),
                             n_pts=12)
    with pytest.raises(DataError):
        tr.train_student(tiny_dataset, teacher, _cfg(), other)


def test_combined_je_only_gradients_match_standalone(tiny_dataset):
    P = en.init_params(TINY, 3)
    b = tr.build_batch(tiny_dataset, 2, np.random.default_rng(0), n_pts=12)
    cfg = _cfg()

    def grads(fn):
        leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in P.items()}
        fn(leaves).backward()
        return {k: t.grad for k, t in leaves.items()}

    g1 = grads(lambda L: tr.combined_graph(b, L, TINY, cfg, LossWeights(0, 0, 1)).total)
    g2 = grads(lambda L: joint_embedding_loss(en.image_graph(b.pixels, L, TINY),
                                              en.cloud_graph(b.points, L, TINY), cfg.distance))
    for k in P:
        assert np.allclose(g1[k], g2[k], atol=1e-14)


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = _cfg(epochs=2)
    a = tr.train_combined(tiny_dataset, cfg, TINY)
    b = tr.train_combined(tiny_dataset, cfg, TINY)
    en.save_checkpoint(tmp_path / "a", a)
    en.save_checkpoint(tmp_path / "b", b)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert all(math.isfinite(h) for h in a.history)


def test_nan_loss_aborts(tiny_dataset):
    P = en.init_params(TINY, 0, ("image",))
    P["image.conv1.w"] = np.full_like(P["image.conv1.w"], np.nan)
    with pytest.raises(tr.NumericError):
        tr.train_teacher(tiny_dataset, _cfg(teacher_epochs=1), TINY, params=P)


def test_train_log_records(tiny_dataset):
    buf = io.StringIO()
    tr.train_combined(tiny_dataset, _cfg(epochs=1), TINY, tr.TrainLog(buf))
    rec = json.loads(buf.getvalue().splitlines()[0])
    assert {"stage", "epoch", "loss", "sm", "cm", "je", "wall_s"} <= set(rec)
    assert math.isclose(rec["loss"], rec["total"])


@settings(max_examples=10)
@given(st.integers(0, 50))
def test_mean_je_distance_matches_direct(seed):
    from crossloc import synthbench as sb
    world = sb.generate_world(1, 8)
    samples = sb.generate_runs(world, 2)[0].samples[:3]
    P = en.init_params(TINY, seed)
    img = en.embed_images([s.image for s in samples], P, TINY)
    cld = en.embed_clouds([s.submap for s in samples], P, TINY)
    want = math.fsum(oracles.dist("smooth_l1", i, c) for i, c in zip(img, cld)) / 3
    assert math.isclose(tr.mean_je_distance(samples, P, TINY), want, rel_tol=1e-12)
