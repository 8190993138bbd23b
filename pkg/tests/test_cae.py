import dataclasses
import itertools
import json

import numpy as np
import pytest

from hetcd.cae import (
    CaeConfig,
    TranslationResult,
    build_cae,
    cae_change_map,
    cae_losses,
    affinity_prior,
    affinity_priors,
    load_cae,
    load_translation,
    otsu_threshold,
    save_cae,
    save_translation,
    train_cae,
    translate,
    translation_weight,
)
from hetcd.raster import Raster

TINY = CaeConfig(patch_size=6, patches_per_batch=3, batches_per_epoch=4, epochs=2, code_channels=2, hidden_channels=3, seed=5)


def _brute_alpha(px, py):
    """Loop-by-loop change prior for one patch pair of n pixels."""

    def affinity(p):
        n = len(p)
        d = [[float(np.sqrt(((p[i] - p[j]) ** 2).sum())) for j in range(n)] for i in range(n)]
        width = sum(d[i][j] for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        return [[np.exp(-d[i][j] ** 2 / width**2) for j in range(n)] for i in range(n)]

    ax, ay = affinity(px), affinity(py)
    n = len(px)
    alpha = [sum(abs(ax[i][j] - ay[i][j]) for j in range(n)) / n for i in range(n)]
    lo, hi = min(alpha), max(alpha)
    return np.array([(a - lo) / (hi - lo) for a in alpha])


def test_affinity_prior_matches_brute_force_3x3(rng):
    px = rng.standard_normal((3, 3, 2))
    py = rng.standard_normal((3, 3, 3))
    prior = affinity_prior(px, py)
    np.testing.assert_allclose(prior.alpha.ravel(), _brute_alpha(px.reshape(9, 2), py.reshape(9, 3)), atol=1e-12)
    np.testing.assert_allclose(prior.pi, 1.0 - prior.alpha)


def test_batched_prior_equals_single(rng):
    px = rng.standard_normal((4, 5, 5, 2))
    py = rng.standard_normal((4, 5, 5, 1))
    batch = affinity_priors(px, py)
    for b in range(4):
        np.testing.assert_allclose(batch.alpha[b], affinity_prior(px[b], py[b]).alpha, atol=1e-12)


def test_identical_structure_gives_zero_prior(rng):
    p = rng.standard_normal((4, 4, 2))
    assert np.all(affinity_prior(p, 3.0 * p).alpha == 0.0)


def test_constant_patches_give_zero_prior():
    prior = affinity_prior(np.full((3, 3, 2), 0.4), np.full((3, 3, 1), -0.2))
    assert np.all(prior.alpha == 0.0) and np.all(prior.pi == 1.0)


def test_displaced_pixel_attains_patch_max(rng):
    # two clusters in both modalities; pixel 5 changes cluster in y only
    labels = np.array([0, 0, 0, 0, 1, 0, 1, 1, 1], float)
    px = (labels[:, None] + rng.normal(0, 0.05, (9, 2))).reshape(3, 3, 2)
    moved = labels.copy()
    moved[5] = 1.0
    py = (moved[:, None] + rng.normal(0, 0.05, (9, 1))).reshape(3, 3, 1)
    prior = affinity_prior(px, py)
    brute = _brute_alpha(px.reshape(9, 2), py.reshape(9, 1))
    assert int(np.argmax(brute)) == 5 and prior.alpha[1, 2] == 1.0
    np.testing.assert_allclose(prior.alpha.ravel(), brute, atol=1e-12)


def test_zero_translation_weight_gives_zero_tr_loss(rng):
    model = build_cae(2, 1, TINY)
    x = rng.uniform(-1, 1, (2, 4, 4, 2))
    y = rng.uniform(-1, 1, (2, 4, 4, 1))
    terms, _ = cae_losses(model, x, y, np.ones((2, 4, 4)), np.zeros((2, 4, 4)), with_grads=False)
    assert terms.tr == 0.0 and terms.rec > 0.0


def test_matching_codes_give_zero_code_loss(rng):
    model = build_cae(2, 2, TINY)
    model.encoder_y.params = [p.copy() for p in model.encoder_x.params]
    x = rng.uniform(-1, 1, (2, 4, 4, 2))
    w = np.ones((2, 4, 4))
    terms, _ = cae_losses(model, x, x, w, w, with_grads=False)
    assert terms.code == 0.0


def test_code_loss_reaches_encoders_only(rng):
    cfg = dataclasses.replace(TINY, w_rec=0.0, w_cyc=0.0, w_tr=0.0)
    model = build_cae(2, 1, cfg)
    x = rng.uniform(-1, 1, (2, 4, 4, 2))
    y = rng.uniform(-1, 1, (2, 4, 4, 1))
    w = rng.uniform(0, 1, (2, 4, 4))
    _, grads = cae_losses(model, x, y, w, w)
    sizes = [len(n.params) for n in model.nets]
    parts = np.split(np.arange(len(grads)), np.cumsum(sizes)[:-1])
    ex, dx, ey, dy = ([grads[i] for i in idx] for idx in parts)
    assert all(np.all(g == 0) for g in dx + dy)
    assert any(np.any(g != 0) for g in ex) and any(np.any(g != 0) for g in ey)


def test_loss_gradients_match_finite_differences(rng):
    model = build_cae(2, 3, TINY)
    x = rng.uniform(-1, 1, (2, 5, 5, 2))
    y = rng.uniform(-1, 1, (2, 5, 5, 3))
    prior_pi = rng.uniform(0, 1, (2, 5, 5))
    pi = rng.uniform(0, 1, (2, 5, 5))
    _, grads = cae_losses(model, x, y, prior_pi, pi)
    params = model.flat_params()
    h, worst = 1e-6, 0.0
    for k, p in enumerate(params):
        for idx in itertools.islice(np.ndindex(p.shape), 0, None, max(1, p.size // 6)):
            old = p[idx]
            p[idx] = old + h
            lp = cae_losses(model, x, y, prior_pi, pi, with_grads=False)[0].total
            p[idx] = old - h
            lm = cae_losses(model, x, y, prior_pi, pi, with_grads=False)[0].total
            p[idx] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - grads[k][idx]) / max(abs(num), abs(grads[k][idx]), 1e-7))
    assert worst < 1e-5


def test_loss_weights_scale_terms(rng):
    model = build_cae(1, 1, TINY)
    x = rng.uniform(-1, 1, (1, 4, 4, 1))
    w = np.ones((1, 4, 4))
    t1, _ = cae_losses(model, x, x, w, w, with_grads=False)
    model.config = dataclasses.replace(TINY, w_code=0.0, w_tr=2.0)
    t2, _ = cae_losses(model, x, x, w, w, with_grads=False)
    assert t2.total == pytest.approx(t1.rec + t1.cyc + 2.0 * t1.tr)


def test_tiled_translation_equals_whole_image(rng):
    x = Raster.from_array(rng.uniform(-1, 1, (13, 11, 2)))
    y = Raster.from_array(rng.uniform(-1, 1, (13, 11, 1)))
    whole = translate(build_cae(2, 1, dataclasses.replace(TINY, tile_size=64)), x, y)
    tiled = translate(build_cae(2, 1, dataclasses.replace(TINY, tile_size=4)), x, y)
    for part in ("x_hat", "y_hat", "d_x", "d_y"):
        np.testing.assert_allclose(getattr(tiled, part).data, getattr(whole, part).data, atol=1e-12)


def test_difference_sign_convention(rng):
    x = Raster.from_array(rng.uniform(-1, 1, (8, 8, 2)))
    y = Raster.from_array(rng.uniform(-1, 1, (8, 8, 3)))
    r = translate(build_cae(2, 3, TINY), x, y)
    np.testing.assert_allclose(r.d_x.data, r.x_hat.data - x.data)
    np.testing.assert_allclose(r.d_y.data, y.data - r.y_hat.data)


def test_translate_checks_channels(rng):
    x = Raster.from_array(rng.uniform(-1, 1, (8, 8, 2)))
    with pytest.raises(ValueError):
        translate(build_cae(3, 2, TINY), x, x)


def test_translation_weight_range(rng):
    x, y = rng.standard_normal((6, 6, 2)), rng.standard_normal((6, 6, 1))
    w = translation_weight(x, y, x + rng.standard_normal(x.shape), y)
    assert w.min() == 0.0 and w.max() == 1.0
    assert np.all(translation_weight(x, y, x, y) == 1.0)


def _exhaustive_otsu(v, bins=256):
    hist, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    centers = 0.5 * (edges[:-1] + edges[1:])
    scores = {}
    for k in range(1, bins):
        w0, w1 = hist[:k].sum(), hist[k:].sum()
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[:k] * centers[:k]).sum() / w0
        m1 = (hist[k:] * centers[k:]).sum() / w1
        scores[k] = w0 * w1 * (m0 - m1) ** 2
    best = max(scores.values())
    return edges[min(k for k, s in scores.items() if s >= best - 1e-12 * best)]


@pytest.mark.parametrize("seed", range(5))
def test_otsu_matches_exhaustive_search(seed):
    r = np.random.default_rng(seed)
    v = np.concatenate([r.normal(0, 1, 700), r.normal(4 + seed, 0.5, 300)])
    got, want = otsu_threshold(v), _exhaustive_otsu(v)
    np.testing.assert_array_equal(v >= got, v >= want)
    assert got == pytest.approx(want, abs=1e-12)


def test_otsu_constant_input():
    assert otsu_threshold(np.full(10, 3.0)) is None


def test_otsu_separates_bimodal_scores():
    r = np.random.default_rng(9)
    low, high = r.normal(0, 1, 4000), r.normal(8, 1, 1000)
    t = otsu_threshold(np.concatenate([low, high]))
    agree = (np.sum(low < t) + np.sum(high >= t)) / 5000
    assert agree >= 0.99


def test_change_map_of_identical_translation_is_empty(rng):
    z = Raster.from_array(np.zeros((5, 5, 1)))
    binary, score = cae_change_map(TranslationResult(z, z, z, z))
    assert binary.dtype == np.uint8 and not binary.any()


def test_training_is_deterministic(rng):
    x = rng.uniform(-1, 1, (16, 16, 2))
    y = rng.uniform(-1, 1, (16, 16, 1))
    a = train_cae(x, y, TINY)
    b = train_cae(x, y, TINY)
    assert [r.total for r in a.history] == [r.total for r in b.history]
    assert all(np.array_equal(p, q) for p, q in zip(a.flat_params(), b.flat_params()))
    assert len(a.history) == TINY.epochs and a.n_updates == TINY.epochs * TINY.batches_per_epoch


def test_training_rejects_small_rasters(rng):
    with pytest.raises(ValueError):
        train_cae(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), TINY)


def test_save_load_cae_and_translation(tmp_path, rng):
    x = rng.uniform(-1, 1, (12, 12, 2))
    y = rng.uniform(-1, 1, (12, 12, 1))
    model = train_cae(x, y, dataclasses.replace(TINY, epochs=1))
    save_cae(model, tmp_path / "cae")
    back = load_cae(tmp_path / "cae")
    assert back.config == model.config and back.history == model.history
    assert (tmp_path / "cae" / "history.csv").read_text().startswith("epoch,L_rec,L_code,L_cyc,L_tr,total")
    r1 = translate(model, Raster.from_array(x), Raster.from_array(y))
    r2 = translate(back, Raster.from_array(x), Raster.from_array(y))
    np.testing.assert_array_equal(r1.d_x.data, r2.d_x.data)
    save_translation(r1, tmp_path / "tr")
    r3 = load_translation(tmp_path / "tr")
    np.testing.assert_array_equal(r3.y_hat.data, r1.y_hat.data.astype(np.float32))
    assert r3.d_x.names == r1.d_x.names
    index = json.loads((tmp_path / "tr" / "translation.json").read_text())
    assert index["d_y"]["dtype"] == "f32le" and index["d_y"]["layout"] == "band-sequential"


def test_trained_cae_separates_confounders(trained_cae, translation, bundle):
    h = trained_cae.history
    assert h[-1].total < h[0].total
    mag = np.sqrt((translation.d_x.data**2).sum(-1) + (translation.d_y.data**2).sum(-1))
    unchanged = mag[bundle.region_masks["unchanged"].astype(bool)].mean()
    confounder = mag[bundle.region_masks["confounder"].astype(bool)].mean()
    assert unchanged < confounder


def test_confounders_detected_more_often_than_targets(translation, bundle):
    binary, _ = cae_change_map(translation)
    rate = lambda m: binary[m.astype(bool)].mean()  # noqa: E731
    assert rate(bundle.region_masks["confounder"]) > rate(bundle.ground_truth)
