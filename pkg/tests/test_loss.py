import numpy as np
import pytest
from scipy.signal import correlate

from lrrfuse import autodiff as ad
from lrrfuse import lrrw
from lrrfuse.errors import ContractError, FormatError, ShapeError, SizeError
from lrrfuse.loss import (
    FeatureTaps,
    LossConfig,
    TinyBackbone,
    VGG16Backbone,
    VGG_BLOCKS,
    VGG_CHANNELS,
    convert_torchvision_vgg16,
    load_backbone,
    loss_deep,
    loss_middle,
    loss_pixel,
    loss_shallow,
    loss_total,
)

# sums and squared norms of the four taps for uniform(seed 42) 1x32x32,
# frozen after matching a scipy.signal.correlate forward pass to 5e-16
GOLDEN_TAPS = [
    (1302.0368373140338, 976.7957811734992),
    (353.3812985247202, 175.58420323111744),
    (109.63808274936467, 46.3641579384737),
    (60.21014747103216, 20.468651597071997),
]


@pytest.fixture(scope="module")
def tiny():
    return TinyBackbone.load()


def rand_taps(rng, scale=1.0):
    shapes = [(4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 2, 2)]
    return FeatureTaps(*(ad.Tensor(rng.normal(size=s) * scale) for s in shapes))


def reference_forward(weights, img):
    x, taps = img, []
    for i, w in enumerate(weights):
        y = np.stack([sum(correlate(x[c], w[o, c], mode="same") for c in range(x.shape[0])) for o in range(w.shape[0])])
        y = np.maximum(y, 0)
        taps.append(y)
        x = y.reshape(y.shape[0], y.shape[1] // 2, 2, y.shape[2] // 2, 2).mean(axis=(2, 4)) if i < 3 else y
    return taps


class TestTinyBackbone:
    def test_zero_image(self, tiny):
        assert all(not t.data.any() for t in tiny.features(np.zeros((1, 32, 32))))

    def test_shipped_file_matches_generator(self, tiny):
        fresh = TinyBackbone.generate()
        for a, b in zip(tiny.weights, fresh.weights):
            assert np.array_equal(a, b)

    def test_golden_checksums(self, tiny):
        taps = tiny.features(np.random.default_rng(42).uniform(size=(1, 32, 32)))
        for t, (s, q) in zip(taps, GOLDEN_TAPS):
            assert float(t.data.sum()) == pytest.approx(s, rel=1e-12)
            assert float((t.data ** 2).sum()) == pytest.approx(q, rel=1e-12)

    def test_matches_reference_forward(self, tiny):
        img = np.random.default_rng(3).uniform(size=(1, 16, 24))
        for t, ref in zip(tiny.features(img), reference_forward(tiny.weights, img)):
            np.testing.assert_allclose(t.data, ref, rtol=0, atol=1e-12)

    def test_tap_sizes_non_increasing(self, tiny):
        taps = tiny.features(np.ones((1, 32, 48)))
        assert [t.shape for t in taps] == [(4, 32, 48), (8, 16, 24), (16, 8, 12), (32, 4, 6)]

    def test_too_small(self, tiny):
        with pytest.raises(SizeError):
            tiny.features(np.zeros((1, 8, 32)))

    def test_file_round_trip(self, tiny, tmp_path):
        tiny.save(tmp_path / "t.lrrw")
        again = TinyBackbone.load(tmp_path / "t.lrrw")
        assert all(np.array_equal(a, b) for a, b in zip(tiny.weights, again.weights))

    def test_bad_file(self, tmp_path):
        lrrw.save(tmp_path / "t.lrrw", {"conv1": np.zeros((4, 1, 3, 3))})
        with pytest.raises(FormatError):
            TinyBackbone.load(tmp_path / "t.lrrw")


def random_vgg(seed=0):
    rng = np.random.default_rng(seed)
    w, c_in = {}, 3
    for block in VGG_BLOCKS:
        for name in block:
            c = VGG_CHANNELS[name[:5]] // 16  # shrunk widths keep the test fast
            w[f"{name}.weight"] = rng.normal(0, np.sqrt(2 / (9 * c_in)), (c, c_in, 3, 3)).astype(np.float32)
            w[f"{name}.bias"] = rng.normal(0, 0.01, c).astype(np.float32)
            c_in = c
    return w


class TestVGG:
    @pytest.fixture
    def small_widths(self, monkeypatch):
        import lrrfuse.loss as L

        monkeypatch.setattr(L, "VGG_CHANNELS", {k: v // 16 for k, v in VGG_CHANNELS.items()})

    def test_deterministic(self, small_widths, tmp_path):
        lrrw.save(tmp_path / "vgg.lrrw", random_vgg())
        bb = VGG16Backbone.load(tmp_path / "vgg.lrrw")
        img = np.random.default_rng(1).uniform(size=(1, 32, 32))
        a, b = bb.features(img), bb.features(img)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))
        assert [t.shape[1] for t in a] == [32, 16, 8, 4]

    def test_preprocessing(self, small_widths, tmp_path):
        # with only conv1_1 inspected: identity-like kernel on channel 0 recovers the normalized gray
        w = random_vgg()
        w["conv1_1.weight"][:] = 0
        w["conv1_1.weight"][0, 0, 1, 1] = 1
        w["conv1_1.bias"][:] = 10  # keep the ramp open
        w["conv1_2.weight"][:] = 0
        w["conv1_2.weight"][0, 0, 1, 1] = 1
        w["conv1_2.bias"][:] = 0
        lrrw.save(tmp_path / "vgg.lrrw", w)
        img = np.random.default_rng(2).uniform(size=(1, 16, 16))
        phi1 = VGG16Backbone.load(tmp_path / "vgg.lrrw").features(img)[0].data[0]
        np.testing.assert_allclose(phi1, (img[0] - 0.485) / 0.229 + 10, atol=1e-5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            VGG16Backbone.load(tmp_path / "none.lrrw")

    def test_missing_layer(self, small_widths, tmp_path):
        w = random_vgg()
        del w["conv3_2.bias"]
        lrrw.save(tmp_path / "vgg.lrrw", w)
        with pytest.raises(FormatError, match="conv3_2"):
            VGG16Backbone.load(tmp_path / "vgg.lrrw")

    def test_torchvision_conversion(self):
        sd = {f"features.{i}.{p}": np.full((2,), i, np.float64) for i in range(31) for p in ("weight", "bias")}
        out = convert_torchvision_vgg16(sd)
        assert len(out) == 20
        assert out["conv4_3.weight"][0] == 21 and out["conv2_1.bias"].dtype == np.float32

    def test_config_requires_path(self):
        with pytest.raises(ContractError):
            LossConfig(backbone="vgg16-file")


class TestTerms:
    def test_pixel(self):
        a = np.random.default_rng(0).uniform(size=(1, 2, 2))
        assert loss_pixel(a, a).data == 0
        assert float(loss_pixel(a + 1, a).data) == 4.0

    def test_pixel_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(2, 1, 9, 7))
        assert abs(float(loss_pixel(a, b).data) - sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))) <= 1e-12

    def test_pixel_shape(self):
        with pytest.raises(ShapeError):
            loss_pixel(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))

    def test_shallow(self):
        rng = np.random.default_rng(2)
        t, u = rand_taps(rng), rand_taps(rng)
        assert float(loss_shallow(t, t).data) == 0
        base = float(loss_shallow(t, u).data)
        doubled = [FeatureTaps(*(ad.scale(x, 2.0) for x in taps)) for taps in (t, u)]
        assert float(loss_shallow(*doubled).data) == pytest.approx(4 * base, rel=1e-14)
        assert abs(base - np.sum((t.phi1.data - u.phi1.data) ** 2)) <= 1e-12 * max(1, base)

    def test_middle_fixed_points(self):
        rng = np.random.default_rng(3)
        ir, vi = rand_taps(rng), rand_taps(rng)
        cfg = LossConfig()
        f = FeatureTaps(ir.phi1, *(ad.Tensor(cfg.w_ir * a.data + cfg.w_vi * b.data) for a, b in zip(ir[1:], vi[1:])))
        assert float(loss_middle(f, ir, vi, cfg).data) == pytest.approx(0, abs=1e-20)
        pure_ir = LossConfig(w_ir=1.0, w_vi=0.0)
        assert float(loss_middle(ir, ir, vi, pure_ir).data) == 0

    def test_middle_duplicate_formula(self):
        rng = np.random.default_rng(4)
        f, ir, vi = rand_taps(rng), rand_taps(rng), rand_taps(rng)
        expected = 0.0
        for k, beta in ((1, 0.01), (2, 0.5)):
            expected += beta * np.sum((f[k].data - (3.0 * ir[k].data + 0.5 * vi[k].data)) ** 2)
        got = float(loss_middle(f, ir, vi, LossConfig()).data)
        assert abs(got - expected) <= 1e-10 * max(1, expected)

    def test_middle_ignores_first_and_last_taps(self):
        rng = np.random.default_rng(5)
        f, ir, vi = rand_taps(rng), rand_taps(rng), rand_taps(rng)
        g = FeatureTaps(ad.Tensor(f.phi1.data + 5), f.phi2, f.phi3, ad.Tensor(f.phi4.data * 3))
        assert loss_middle(f, ir, vi, LossConfig()).data == loss_middle(g, ir, vi, LossConfig()).data

    def test_deep(self):
        rng = np.random.default_rng(6)
        f, ir = rand_taps(rng), rand_taps(rng)
        assert float(loss_deep(f, f).data) == 0
        perm = FeatureTaps(f.phi1, f.phi2, f.phi3, ad.Tensor(f.phi4.data[::-1].copy()))
        assert float(loss_deep(perm, f).data) > 0
        F = f.phi4.data.reshape(32, -1)
        G = ir.phi4.data.reshape(32, -1)
        expected = np.sum((F @ F.T / F.shape[1] - G @ G.T / G.shape[1]) ** 2)
        assert abs(float(loss_deep(f, ir).data) - expected) <= 1e-10 * max(1, expected)


class TestTotal:
    def test_all_zero(self, tiny):
        z = np.zeros((1, 16, 16))
        total, terms = loss_total(z, z, z, LossConfig(), tiny)
        assert float(total.data) == 0 and all(v == 0 for v in terms.values())

    def test_pixel_only(self):
        class ZeroBackbone:
            def features(self, img):
                return FeatureTaps(*(ad.scale(ad.as_tensor(img), 0.0) for _ in range(4)))

        I_vi = np.zeros((1, 2, 2))
        I_f = np.full((1, 2, 2), 0.5)
        total, terms = loss_total(I_f, I_vi, I_vi, LossConfig(), ZeroBackbone())
        assert terms["pixel"] == 1.0 and float(total.data) == 10.0

    def test_compositional_oracle(self, tiny):
        rng = np.random.default_rng(7)
        I_f, I_ir, I_vi = rng.uniform(size=(3, 1, 32, 32))
        cfg = LossConfig()
        total, terms = loss_total(I_f, I_ir, I_vi, cfg, tiny)
        tf, ti, tv = (tiny.features(x) for x in (I_f, I_ir, I_vi))
        expected = (
            cfg.gamma1 * float(loss_pixel(I_f, I_vi).data)
            + cfg.gamma2 * float(loss_shallow(tf, tv).data)
            + float(loss_middle(tf, ti, tv, cfg).data)
            + cfg.gamma4 * float(loss_deep(tf, ti).data)
        )
        assert abs(float(total.data) - expected) <= 1e-10 * expected
        s = ((cfg.gamma1 * terms["pixel"] + cfg.gamma2 * terms["shallow"]) + terms["middle"]) + cfg.gamma4 * terms["deep"]
        assert s == terms["total"]
        assert all(v >= 0 for v in terms.values())

    def test_gamma1_ablation(self, tiny):
        rng = np.random.default_rng(8)
        I_f, I_ir, I_vi = rng.uniform(size=(3, 1, 16, 16))

        def grad(cfg):
            x = ad.Tensor(I_f, requires_grad=True)
            ad.backward(loss_total(x, I_ir, I_vi, cfg, tiny)[0])
            return x.grad

        g0 = grad(LossConfig(gamma1=0.0))
        g10 = grad(LossConfig())
        np.testing.assert_allclose(g10 - g0, 10 * 2 * (I_f - I_vi), rtol=0, atol=1e-9)

    def test_gradcheck(self, tiny):
        from lrrfuse import gradcheck

        res = [r for r in gradcheck.run_suite(1) if r.op == "loss_total/I_f"]
        assert res and res[0].passed

    def test_shape_errors(self, tiny):
        with pytest.raises(ShapeError):
            loss_total(np.zeros((1, 16, 16)), np.zeros((1, 16, 20)), np.zeros((1, 16, 16)), LossConfig(), tiny)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            LossConfig(gamma1=-1)
        with pytest.raises(ContractError):
            LossConfig(w_ir=0.5, w_vi=0.5)

    def test_load_backbone(self):
        assert isinstance(load_backbone(LossConfig()), TinyBackbone)
