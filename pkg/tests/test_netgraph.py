"""Architecture wiring, train/inference behaviour, and checkpoint round-trips."""
import numpy as np
import pytest

from triplenet import anchors as A
from triplenet import losses as L
from triplenet import netgraph as G
from triplenet import tensor as T
from triplenet.netgraph import ConfigError, Mode, NetworkConfig, build_network, pairnet_config

from gradcheck_util import analytic_grads, numeric_grad, rel_error, weighted_sum


def small_cfg(**kw):
    base = dict(input_size=(32, 32), num_classes=2, encoder_levels=[(8, 2), (8, 4), (8, 8), (8, 16)],
                decoder_levels=3, decoder_channels=8, ic_channels=4)
    base.update(kw)
    return NetworkConfig(**base)


def images(cfg, n=2, seed=0):
    return T.tensor(np.random.default_rng(seed).random((n, 3) + cfg.input_size))


def run(net, x, mode, **kw):
    with T.Tape() as tape:
        out = net.forward(x, mode, **kw)
    return out, tape


class TestConfig:
    def test_decoder_sizes(self):
        cfg = NetworkConfig(input_size=(64, 64), encoder_levels=[(8, 4), (8, 8), (8, 16), (8, 32)], decoder_levels=3)
        assert cfg.decoder_grid_sizes() == [(4, 4), (8, 8), (16, 16)]

    @pytest.mark.parametrize("kw,msg", [
        (dict(decoder_levels=5), "decoder_levels"),
        (dict(encoder_levels=[(8, 4), (8, 4)]), "strictly increasing"),
        (dict(encoder_levels=[(8, 4), (8, 12)]), "power-of-two"),
        (dict(input_size=(30, 32)), "does not divide"),
        (dict(anchors_per_cell=0), "anchors_per_cell"),
        (dict(seg_levels="some"), "seg_levels"),
        (dict(seg_loss_strategy="bicubic"), "seg_loss_strategy"),
        (dict(detection=False), "needs detection"),
    ])
    def test_invalid_rejected_with_reason(self, kw, msg):
        with pytest.raises(ConfigError, match=msg):
            build_network(small_cfg(**kw))

    def test_dict_round_trip(self):
        cfg = small_cfg(asf=False, seg_levels="fine")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="unknown"):
            NetworkConfig.from_dict({**cfg.to_dict(), "dropout": 0.5})


class TestBuild:
    def test_same_seed_bit_identical(self):
        a, b = build_network(small_cfg(), 3), build_network(small_cfg(), 3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and np.array_equal(va, vb)
        c = build_network(small_cfg(), 4)
        assert not np.array_equal(a.params["enc0.down0.weight"].data, c.params["enc0.down0.weight"].data)

    def test_ic_parameter_bookkeeping(self):
        cfg = small_cfg()
        on, off = build_network(cfg), build_network(cfg.with_toggles(ic=False))
        extra = set(on.params) - set(off.params)
        assert set(off.params) <= set(on.params)
        assert all(k.startswith("ic") for k in extra)
        k1, dch, ic = cfg.num_classes + 1, cfg.decoder_channels, cfg.ic_channels
        per_level = (ic * k1 * 9 + ic) + (ic * ic * 9 + ic) + (dch * (dch + ic) * 9 + dch)
        assert on.num_parameters() - off.num_parameters() == cfg.decoder_levels * per_level
        # shared parameters are initialized identically
        for k in off.params:
            assert np.array_equal(on.params[k].data, off.params[k].data)

    def test_parameter_count_is_function_of_config(self):
        assert build_network(small_cfg(), 0).num_parameters() == build_network(small_cfg(), 9).num_parameters()

    def test_untrained_detection_is_background(self):
        net = build_network(small_cfg())
        out = net.forward(images(net.cfg), Mode.INFERENCE)
        rows, _ = L.flatten_detections(out, 2)
        p = np.exp(T.log_softmax(rows.data, axis=-1))
        assert p[..., 1:].max() < A.SCORE_FLOOR


class TestShapes:
    def test_level_shapes(self):
        cfg = NetworkConfig(input_size=(64, 64), num_classes=2, encoder_levels=[(8, 4), (8, 8), (8, 16), (8, 32)],
                            decoder_levels=3, decoder_channels=8, anchors_per_cell=3)
        out = build_network(cfg).forward(images(cfg, 1), Mode.TRAIN)
        assert [lv.det_cls_logits.shape[1:] for lv in out.levels] == [(9, 4, 4), (9, 8, 8), (9, 16, 16)]
        assert [lv.det_box_deltas.shape[1:] for lv in out.levels] == [(12, 4, 4), (12, 8, 8), (12, 16, 16)]
        assert [lv.agnostic_logits.shape[1] for lv in out.levels] == [2, 2, 2]
        assert [lv.seg_logits.shape[1] for lv in out.levels] == [3, 3, 3]
        assert out.fused_seg_logits.shape == (1, 3, 16, 16)

    def test_wrong_input_size_rejected(self):
        net = build_network(small_cfg())
        with pytest.raises(ValueError, match="expected images"):
            net.forward(T.tensor(np.zeros((1, 3, 16, 16))))


class TestBlocks:
    def _net(self):
        return build_network(small_cfg())

    def test_residual_zero_branch(self):
        net = self._net()
        unit = G.ResidualUnit(net, "probe", 4, 4)
        for c in (unit.conv1, unit.conv2):
            c.p.weight.data[...] = 0
        net.bn_train = True
        x = T.tensor(np.random.default_rng(0).normal(size=(2, 4, 5, 5)))
        np.testing.assert_array_equal(G.residual_unit(x, unit).data, np.maximum(x.data, 0))

    def test_residual_projection_shape_and_grad(self):
        net = self._net()
        unit = G.ResidualUnit(net, "probe", 3, 5)
        net.bn_train = True
        rng = np.random.default_rng(1)
        x = T.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = rng.normal(size=(2, 5, 4, 4))
        fn = lambda: weighted_sum(G.residual_unit(x, unit), w)
        assert G.residual_unit(x, unit).shape == (2, 5, 4, 4)
        leaves = [x, unit.conv1.p.weight, unit.proj.p.weight, unit.bn2.state.scale]
        for a, t in zip(analytic_grads(fn, leaves), leaves):
            assert rel_error(a, numeric_grad(fn, t)) < 1e-4

    def test_skip_fuse_equal_sizes_no_resize(self):
        net = self._net()
        unit = G.ResidualUnit(net, "probe", 8, 8)
        dec = T.tensor(np.random.default_rng(2).normal(size=(1, 4, 4, 4)))
        enc = T.tensor(np.random.default_rng(3).normal(size=(1, 4, 4, 4)))
        with T.Tape() as tape:
            y = G.skip_fuse(dec, enc, unit)
        assert "bilinear_resize" not in tape.op_counts()
        assert y.shape == (1, 8, 4, 4)

    def test_skip_fuse_rejects_non_integral_ratio(self):
        net = self._net()
        unit = G.ResidualUnit(net, "probe", 8, 8)
        with pytest.raises(ValueError, match="integer multiple"):
            G.skip_fuse(T.tensor(np.zeros((1, 4, 3, 3))), T.tensor(np.zeros((1, 4, 4, 4))), unit)

    def test_gate_range_and_half_gate(self):
        net = self._net()
        se = G.SEBlock(net, "probe_se", 6, 4, 2)
        rng = np.random.default_rng(4)
        dec = T.tensor(rng.normal(size=(2, 6, 2, 2)) * 5)
        g = G.se_gate(dec, se).data
        assert ((g > 0) & (g < 1)).all() and g.shape == (2, 4, 1, 1)
        se.expand.p.weight.data[...] = 0
        se.expand.p.bias.data[...] = 0
        np.testing.assert_array_equal(G.se_gate(dec, se).data, 0.5)
        # encoder features enter the fuse unit exactly halved
        enc = T.tensor(rng.normal(size=(2, 4, 4, 4)))
        unit = G.ResidualUnit(net, "probe_fuse", 10, 8)
        net.bn_train = False
        a = G.attention_skip_fuse(dec, enc, unit, se)
        b = G.skip_fuse(dec, T.tensor(enc.data * 0.5), unit)
        np.testing.assert_array_equal(a.data, b.data)

    def test_gate_clamp_bit_exact(self):
        net = self._net()
        se = G.SEBlock(net, "probe_se", 6, 4, 2)
        unit = G.ResidualUnit(net, "probe_fuse", 10, 8)
        rng = np.random.default_rng(5)
        dec, enc = T.tensor(rng.normal(size=(2, 6, 2, 2))), T.tensor(rng.normal(size=(2, 4, 4, 4)))
        net.bn_train = True
        a = G.attention_skip_fuse(dec, enc, unit, se, clamp_gate=True)
        b = G.skip_fuse(dec, enc, unit)
        assert np.array_equal(a.data, b.data)

    def test_gradient_reaches_se_bottleneck(self):
        net = self._net()
        se = G.SEBlock(net, "probe_se", 6, 4, 2)
        unit = G.ResidualUnit(net, "probe_fuse", 10, 8)
        rng = np.random.default_rng(6)
        dec, enc = T.tensor(rng.normal(size=(2, 6, 2, 2))), T.tensor(rng.normal(size=(2, 4, 4, 4)))
        net.bn_train = True
        (g,) = analytic_grads(lambda: weighted_sum(G.attention_skip_fuse(dec, enc, unit, se), rng),
                              [se.squeeze.p.weight])
        assert np.abs(g).max() > 0

    def test_detection_head_siblings_isolated(self):
        net = self._net()
        head = G.DetectionHead(net, "probe_det", 8, 2, 3)
        x = T.tensor(np.random.default_rng(7).normal(size=(1, 8, 4, 4)))
        cls, box = G.detection_head(x, head)
        assert cls.shape == (1, 9, 4, 4) and box.shape == (1, 12, 4, 4)
        head.cls.p.weight.data += 1.0
        cls2, box2 = G.detection_head(x, head)
        assert np.array_equal(box.data, box2.data) and not np.array_equal(cls.data, cls2.data)

    def test_segmentation_head_zero_weights_uniform(self):
        net = self._net()
        head = G.Conv(net, "probe_seg", 8, 3)
        head.p.weight.data[...] = 0
        y = G.segmentation_head(T.tensor(np.random.default_rng(8).normal(size=(1, 8, 4, 4))), head)
        assert y.shape == (1, 3, 4, 4)
        np.testing.assert_allclose(T.softmax_over_channels(y).data, 1 / 3, rtol=0, atol=1e-15)

    def test_inner_connect_zeroed_seg_path(self):
        net = self._net()
        ic = G.InnerConnect(net, "probe_ic", 8, 3, 4)
        rng = np.random.default_rng(9)
        feat, seg = T.tensor(rng.normal(size=(1, 8, 4, 4))), T.tensor(rng.normal(size=(1, 3, 4, 4)))
        ic.c2.p.weight.data[...] = 0
        y = G.inner_connect(feat, seg, ic)
        ref = T.relu(ic.fuse(T.concat_channels([feat, T.tensor(np.zeros((1, 4, 4, 4)))])))
        assert y.shape == (1, 8, 4, 4)
        assert np.array_equal(y.data, ref.data)
        with pytest.raises(ValueError, match="spatial"):
            G.inner_connect(feat, T.tensor(np.zeros((1, 3, 2, 2))), ic)

    def test_fused_single_level_is_plain_head(self):
        net = self._net()
        head = G.Conv(net, "probe_fused", 8, 3)
        f = T.tensor(np.random.default_rng(10).normal(size=(1, 8, 4, 4)))
        assert np.array_equal(G.fused_segmentation([f], (4, 4), head).data, G.segmentation_head(f, head).data)
        with pytest.raises(ValueError, match="at least one"):
            G.fused_segmentation([], (4, 4), head)

    def test_fused_order_is_part_of_contract(self):
        net = self._net()
        head = G.Conv(net, "probe_fused", 8, 3)
        rng = np.random.default_rng(11)
        coarse, fine = T.tensor(rng.normal(size=(1, 4, 2, 2))), T.tensor(rng.normal(size=(1, 4, 4, 4)))
        a = G.fused_segmentation([coarse, fine], (4, 4), head)
        b = G.fused_segmentation([fine, coarse], (4, 4), head)
        assert a.shape == (1, 3, 4, 4)
        assert not np.allclose(a.data, b.data)
        # permuting the weight input channels accordingly restores the output
        w = head.p.weight.data
        head.p.weight.data[...] = np.concatenate([w[:, 4:], w[:, :4]], axis=1)
        c = G.fused_segmentation([fine, coarse], (4, 4), head)
        np.testing.assert_allclose(c.data, a.data, rtol=0, atol=1e-12)


class TestForwardModes:
    def test_ic_gradient_reaches_seg_head(self):
        cfg = small_cfg()
        net = build_network(cfg, 1)
        x = images(cfg)
        rng = np.random.default_rng(0)

        def det_only():
            out = net.forward(x, Mode.TRAIN)
            rows, _ = L.flatten_detections(out, cfg.num_classes)
            return weighted_sum(rows, np.random.default_rng(1))
        (g,) = analytic_grads(det_only, [net.params["seg1.weight"]])
        assert np.abs(g).max() > 0
        del rng

    def test_det_logits_identical_across_modes(self):
        cfg = small_cfg()
        net = build_network(cfg, 2)
        x = images(cfg)
        tr = net.forward(x, Mode.TRAIN, bn_train=False)
        inf = net.forward(x, Mode.INFERENCE)
        for a, b in zip(tr.levels, inf.levels):
            assert np.array_equal(a.det_cls_logits.data, b.det_cls_logits.data)
            assert np.array_equal(a.det_box_deltas.data, b.det_box_deltas.data)

    def test_inference_drops_supervision_heads(self):
        cfg = small_cfg()
        net = build_network(cfg)
        out = net.forward(images(cfg), Mode.INFERENCE)
        assert all(lv.agnostic_logits is None and lv.seg_logits is None for lv in out.levels)
        assert out.seg_output is out.fused_seg_logits

    def test_op_count_train_minus_inference(self):
        cfg = small_cfg()
        net = build_network(cfg)
        x = images(cfg)
        _, tr = run(net, x, Mode.TRAIN)
        _, inf = run(net, x, Mode.INFERENCE)
        assert len(inf.records) < len(tr.records)
        diff = dict(tr.op_counts(by_scope=True))
        for k, v in inf.op_counts(by_scope=True).items():
            diff[k] -= v
        diff = {k: v for k, v in diff.items() if v}
        assert diff == {(f"seg_agn/{i}", "conv2d"): 1 for i in range(cfg.decoder_levels)}

    def test_inference_extra_cost_is_ic_path_only(self):
        cfg = small_cfg()
        x = images(cfg)
        _, full = run(build_network(cfg), x, Mode.INFERENCE)
        _, base = run(build_network(cfg.with_toggles(ic=False, cas=False)), x, Mode.INFERENCE)
        fc, bc = full.op_counts(by_scope=True), base.op_counts(by_scope=True)
        extra = {k: v - bc.get(k, 0) for k, v in fc.items() if v != bc.get(k, 0)}
        assert all(k in fc for k in bc)
        for (sc, op), n in extra.items():
            assert sc.startswith(("seg_ca/", "ic/")), sc
        for i in range(cfg.decoder_levels):
            assert extra[(f"seg_ca/{i}", "conv2d")] == 1
        assert not any(s.startswith("seg_agn") for s in full.scopes())

    def test_pairnet_equivalence(self):
        cfg = small_cfg(mfs=False, ic=False, cas=False, asf=False)
        a = build_network(cfg, 5)
        b = build_network(pairnet_config(small_cfg()), 5)
        assert cfg.is_pairnet and list(a.params) == list(b.params)
        x = images(cfg)
        oa, ob = a.forward(x, Mode.TRAIN), b.forward(x, Mode.TRAIN)
        for la, lb in zip(oa.levels, ob.levels):
            assert np.array_equal(la.det_cls_logits.data, lb.det_cls_logits.data)
            assert np.array_equal(la.seg_logits.data, lb.seg_logits.data)
        assert oa.fused_seg_logits is None and oa.levels[0].agnostic_logits is None

    def test_network_gate_clamp_matches_plain_fusion(self):
        cfg = small_cfg()
        asf = build_network(cfg, 6)
        plain = build_network(cfg.with_toggles(asf=False), 6)
        asf.clamp_gates = True
        x = images(cfg)
        oa, op = asf.forward(x, Mode.TRAIN), plain.forward(x, Mode.TRAIN)
        for la, lp in zip(oa.levels, op.levels):
            assert np.array_equal(la.features.data, lp.features.data)
        assert np.array_equal(oa.fused_seg_logits.data, op.fused_seg_logits.data)

    def test_levels_coarse_to_fine(self):
        out = build_network(small_cfg()).forward(images(small_cfg()), Mode.TRAIN)
        sizes = [lv.features.shape[2] for lv in out.levels]
        assert sizes == sorted(sizes)


# ---------------------------------------------------------------------------
# End-to-end gradient check on a tiny network
# ---------------------------------------------------------------------------

E2E_CFG = NetworkConfig(input_size=(16, 16), num_classes=2, encoder_levels=[(8, 2), (8, 4), (8, 8)],
                        decoder_levels=2, decoder_channels=8, ic_channels=4, se_reduction=2)
E2E_INSTANCES = 20


def e2e_problem(seed):
    rng = np.random.default_rng(seed)
    net = build_network(E2E_CFG, seed)
    # move BN affine and biases off their neutral init so every parameter matters
    for p in net.parameters():
        if p.name.endswith(("bias", "shift")):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    x = T.tensor(rng.random((2, 3, 16, 16)))
    masks = rng.integers(0, 3, size=(2, 16, 16)).astype(np.uint8)
    an = A.generate_anchors(E2E_CFG).boxes
    ms = []
    for _ in range(2):
        gt = np.concatenate([rng.uniform(0.3, 0.7, (2, 2)), rng.uniform(0.2, 0.6, (2, 2))], axis=1)
        ms.append(A.match_anchors(an, gt, rng.integers(1, 3, size=2)))

    def loss():
        out = net.forward(x, Mode.TRAIN)
        return L.compute_losses(E2E_CFG, out, ms, masks)[0]
    return net, loss


def directional_errors(net, loss, rng, step=1e-6, floor=1e-4):
    """Per-parameter-tensor directional derivative errors for one instance.

    The step is small because relu kinks sit within 1e-5 of some activations.
    Derivatives below ``floor`` (e.g. conv biases feeding a batch norm, whose
    true gradient is zero) are compared in absolute terms.
    """
    params = net.parameters()
    grads = analytic_grads(loss, params)
    errs = {}
    for p, g in zip(params, grads):
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        base = p.data.copy()
        p.data[...] = base + step * v
        fp = float(loss().data)
        p.data[...] = base - step * v
        fm = float(loss().data)
        p.data[...] = base
        num, ana = (fp - fm) / (2 * step), float((g * v).sum())
        errs[p.name] = abs(num - ana) / max(abs(num), abs(ana), floor)
    return errs


def test_end_to_end_gradient_check():
    worst = 0.0
    for seed in range(E2E_INSTANCES):
        net, loss = e2e_problem(seed)
        errs = directional_errors(net, loss, np.random.default_rng(100 + seed))
        name, err = max(errs.items(), key=lambda kv: kv[1])
        worst = max(worst, err)
        assert err < 1e-3, f"instance {seed}: {name} rel error {err:.2e}"
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_cfg()
        net = build_network(cfg, 7)
        net.bn_train = True
        net.forward(images(cfg))  # populate running stats
        path = tmp_path / "m.tnck"
        G.save_checkpoint(net, path)
        back = G.load_checkpoint(path)
        assert back.cfg == cfg and back.seed == 7
        for (k, a), (k2, b) in zip(net.state_dict().items(), back.state_dict().items()):
            assert k == k2 and a.tobytes() == b.tobytes()
        G.save_checkpoint(back, tmp_path / "again.tnck")
        assert path.read_bytes() == (tmp_path / "again.tnck").read_bytes()

    def test_header(self, tmp_path):
        G.save_checkpoint(build_network(small_cfg()), tmp_path / "m.tnck")
        raw = (tmp_path / "m.tnck").read_bytes()
        assert raw[:4] == b"TNCK" and int.from_bytes(raw[4:8], "little") == G.CKPT_VERSION

    def test_corrupt_files_rejected(self, tmp_path):
        p = tmp_path / "m.tnck"
        G.save_checkpoint(build_network(small_cfg()), p)
        raw = p.read_bytes()
        (tmp_path / "bad.tnck").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="not a checkpoint"):
            G.read_checkpoint(tmp_path / "bad.tnck")
        (tmp_path / "short.tnck").write_bytes(raw[:-10])
        with pytest.raises(ValueError, match="truncated"):
            G.read_checkpoint(tmp_path / "short.tnck")
        (tmp_path / "v9.tnck").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
        with pytest.raises(ValueError, match="version 9"):
            G.read_checkpoint(tmp_path / "v9.tnck")
        (tmp_path / "long.tnck").write_bytes(raw + b"\0\0")
        with pytest.raises(ValueError, match="2 trailing bytes"):
            G.read_checkpoint(tmp_path / "long.tnck")

    def test_load_state_mismatch_named(self):
        a = build_network(small_cfg())
        b = build_network(small_cfg(ic=False))
        with pytest.raises(ValueError, match="unexpected"):
            b.load_state_dict(a.state_dict())
