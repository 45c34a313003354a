import numpy as np
import pytest
import torch

from past import data as D
from past.errors import DivergenceError, ValidationError
from past.preprocess import crop_slices_2d, normalize_intensity
from past.translation import (
    GanConfig,
    TranslationModel,
    discriminator_step,
    generator_step,
    load_translation,
    make_optimizers,
    save_translation,
    to_unit,
    train_translation,
    translate_slice,
    translate_volume,
)


@pytest.fixture(scope="module")
def pools(small_phantom):
    def slices(vols):
        out = []
        for v in vols:
            c = normalize_intensity(crop_slices_2d(v)[0])
            out += [c.voxels[:, :, k] for k in range(c.shape[2])]
        return out

    return slices([v for v, _ in small_phantom.source_cases]), slices(small_phantom.target_cases)


def _fresh(seed=0, **kw):
    torch.manual_seed(seed)
    return TranslationModel(**kw)


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _changed(before, module):
    after = module.state_dict()
    return any(not torch.equal(before[k], after[k]) for k in before)


def test_descent_smoke(pools):
    m = train_translation(*pools, GanConfig(steps=200, rng_seed=0))
    cyc = [r["cycle"] for r in m.train_log if r["phase"] == "gen"]
    assert cyc[-1] < cyc[0]


def test_cycle_only_on_identical_pools_trends_down(pools):
    src, _ = pools
    cfg = GanConfig(steps=60, lambda_adv=0.0, lambda_recon=0.0, lambda_cycle=10.0, rng_seed=1)
    m = train_translation(src, src, cfg)
    cyc = [r["cycle"] for r in m.train_log if r["phase"] == "gen"]
    assert np.median(cyc[-10:]) < np.median(cyc[:10])


def test_one_step_log_bookkeeping(pools):
    m = train_translation(*pools, GanConfig(steps=1))
    phases = [r["phase"] for r in m.train_log]
    assert sorted(phases) == ["disc", "gen"]


def test_determinism(pools):
    cfg = GanConfig(steps=5, rng_seed=3)
    a = train_translation(*pools, cfg)
    b = train_translation(*pools, cfg)
    assert a.train_log == b.train_log


def test_pool_validation():
    good = [np.zeros((16, 16))]
    with pytest.raises(ValidationError):
        train_translation([], good, GanConfig(steps=1))
    with pytest.raises(ValidationError):
        train_translation([np.zeros((16, 16)), np.zeros((16, 20))], good, GanConfig(steps=1))
    with pytest.raises(ValidationError):
        GanConfig(steps=0).validate()
    with pytest.raises(ValidationError):
        GanConfig(lambda_adv=0, lambda_cycle=0, lambda_recon=0).validate()


def test_divergence_reports_step():
    bad = [np.full((16, 16), 1e38, dtype=np.float32)]
    with pytest.raises(DivergenceError) as info:
        train_translation(bad, bad, GanConfig(steps=3))
    assert info.value.step == 0


def test_encoder_reuse_is_structural():
    m = _fresh()
    x = torch.rand(2, 1, 16, 16) * 2 - 1
    with torch.no_grad():
        d0, g0 = m.discriminate(x, D.Domain.SOURCE), m.s2t(x)
        for p in m.enc_s.parameters():
            p.add_(0.05)
        d1, g1 = m.discriminate(x, D.Domain.SOURCE), m.s2t(x)
    assert not torch.equal(d0, d1) and not torch.equal(g0, g1)
    assert m.encoder(D.Domain.SOURCE) is m.enc_s
    assert set(map(id, m.disc_parameters())).isdisjoint(map(id, m.gen_parameters()))


def test_phase_updates_touch_disjoint_parameters():
    m = _fresh()
    cfg = GanConfig()
    opt_d, opt_g = make_optimizers(m, cfg)
    xs, xt = torch.rand(4, 1, 16, 16) * 2 - 1, torch.rand(4, 1, 16, 16) * 2 - 1

    before = {n: _snapshot(getattr(m, n)) for n in ("enc_s", "enc_t", "cls_s", "cls_t", "dec_s2t", "dec_t2s")}
    generator_step(m, opt_g, xs, xt, cfg)
    for n in ("enc_s", "enc_t", "cls_s", "cls_t"):
        assert not _changed(before[n], getattr(m, n)), n
    assert _changed(before["dec_s2t"], m.dec_s2t) and _changed(before["dec_t2s"], m.dec_t2s)

    before = {n: _snapshot(getattr(m, n)) for n in before}
    discriminator_step(m, opt_d, xs, xt, cfg)
    for n in ("dec_s2t", "dec_t2s"):
        assert not _changed(before[n], getattr(m, n)), n
    assert _changed(before["enc_s"], m.enc_s) and _changed(before["cls_t"], m.cls_t)


def test_translate_slice_contract():
    m = _fresh()
    x = np.random.default_rng(0).uniform(0, 255, (224, 224)).astype(np.float32)
    y1, y2 = translate_slice(m, x), translate_slice(m, x)
    assert y1.shape == (224, 224)
    np.testing.assert_array_equal(y1, y2)
    assert np.isfinite(y1).all() and y1.min() >= 0.0 and y1.max() <= 255.0
    with pytest.raises(ValidationError):
        translate_slice(m, np.zeros((18, 16)))
    with pytest.raises(ValidationError):
        translate_slice(m, np.zeros((4, 16, 16)))


def test_translate_volume_is_slicewise():
    m = _fresh(5)
    rng = np.random.default_rng(1)
    v = D.Volume(rng.uniform(0, 255, (32, 32, 16)), case_id="s", domain=D.Domain.SOURCE)
    out = translate_volume(m, v)
    assert out.domain is D.Domain.TARGET and out.shape == v.shape
    for k in range(16):
        np.testing.assert_array_equal(out.voxels[:, :, k], translate_slice(m, v.voxels[:, :, k]))
    swapped = v.voxels.copy()
    swapped[:, :, [2, 7]] = swapped[:, :, [7, 2]]
    out_sw = translate_volume(m, v.replace(voxels=swapped))
    expect = out.voxels.copy()
    expect[:, :, [2, 7]] = expect[:, :, [7, 2]]
    np.testing.assert_array_equal(out_sw.voxels, expect)


def test_checkpoint_round_trip(tmp_path, pools):
    m = train_translation(*pools, GanConfig(steps=2))
    save_translation(m, tmp_path / "g.ckpt")
    m2 = load_translation(tmp_path / "g.ckpt")
    assert m2.arch == m.arch and m2.train_log == m.train_log
    x = pools[0][0]
    np.testing.assert_array_equal(translate_slice(m, x), translate_slice(m2, x))
    assert (tmp_path / "g.ckpt").read_bytes() == save_translation(m2, tmp_path / "h.ckpt").read_bytes()


def test_unit_scale():
    x = torch.tensor([0.0, 127.5, 255.0])
    assert torch.equal(to_unit(x), torch.tensor([-1.0, 0.0, 1.0]))
