import numpy as np
import pytest

from intquant import kernels
from intquant.converter import (
    ConcatOp,
    ConversionError,
    LinearOp,
    clamp_codes,
    convert,
    integer_only_audit,
    run_inference,
    run_inference_batched,
    verify_correspondence,
)
from intquant.graph import FloatGraph, MissingRangeError, Node, site_params
from intquant.kernels import FusedOutputStage, ParamsMismatchError, QuantizedTensor, ShapeError
from intquant.quantization import (
    QuantParams,
    choose_params,
    normalize_multiplier,
    quantize,
    quantize_bias,
    weight_params,
)
from intquant.simtrain.data import make_bars, make_spiral
from intquant.simtrain.trainer import simulated_logits


def dense_graph(w, b, ranges, act=None):
    nodes = [Node("dense", (-1,), {"weight": np.asarray(w, float), "bias": np.asarray(b, float)})]
    if act:
        nodes.append(Node(act, (0,)))
    return FloatGraph((np.shape(w)[1],), nodes, dict(ranges))


class TestConvert:
    def test_multipliers_match_real_ratio(self, trained_mlp):
        qg = convert(trained_mlp.graph)
        m = qg.meta
        for i, op in enumerate(qg.ops):
            in_scale = qg.op_params(op.inputs[0]).scale
            real = m.weight_scales[i] * in_scale / m.out_scales[i]
            mult = op.stage.multiplier
            assert (1 << 30) <= mult.m0_raw < (1 << 31)
            assert abs(mult.to_float() - real) / real <= 2.0**-30

    def test_identity_batch_norm_is_a_no_op(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 4))
        # var + eps == 1 exactly, so folding leaves w unchanged
        bn = {"gamma": np.ones(3), "beta": np.zeros(3), "mean": np.zeros(3), "var": np.full(3, 0.75)}
        with_bn = FloatGraph(
            (4,),
            [Node("dense", (-1,), {"weight": w}), Node("batch_norm", (0,), bn, {"epsilon": 0.25}), Node("relu", (1,))],
            {"input": (-2.0, 2.0), "n2": (0.0, 5.0)},
        )
        plain = dense_graph(w, np.zeros(3), {"input": (-2.0, 2.0), "n1": (0.0, 5.0)}, act="relu")
        assert convert(with_bn) == convert(plain)

    def test_relu6_on_matching_range_clamps_to_full_codes(self):
        g = dense_graph(np.eye(2), np.zeros(2), {"input": (-1.0, 1.0), "n1": (0.0, 6.0)}, act="relu6")
        stage = convert(g).ops[0].stage
        assert (stage.clamp_min, stage.clamp_max) == (0, 255)

    def test_clamp_codes(self):
        p = choose_params(-2.0, 10.0, 8).params
        assert clamp_codes("relu", p) == (p.zero_point, 255)
        assert clamp_codes("relu6", p) == (p.zero_point, quantize(6.0, p))
        assert clamp_codes(None, p) == (0, 255)

    def test_empty_graph_returns_input(self):
        g = FloatGraph((3,), [], {"input": (-1.0, 1.0)})
        qg = convert(g)
        x = qg.quantize_input(np.array([[0.5, -0.25, 1.0]]))
        assert run_inference(qg, x) == x

    def test_single_layer_matches_direct_kernel(self):
        rng = np.random.default_rng(1)
        w, b = rng.normal(size=(5, 7)), rng.normal(scale=0.1, size=5)
        g = dense_graph(w, b, {"input": (-3.0, 3.0), "n0": (-8.0, 8.0)})
        qg = convert(g)
        x = rng.normal(size=(11, 7))
        got = run_inference(qg, qg.quantize_input(x))

        in_p = site_params((-3.0, 3.0), 8)
        out_p = site_params((-8.0, 8.0), 8)
        wp = weight_params(w)

        stage = FusedOutputStage(
            quantize_bias(b, wp.scale, in_p.scale),
            normalize_multiplier(wp.scale * in_p.scale / out_p.scale),
            out_p.zero_point,
        )
        direct = kernels.gemm_quantized(
            QuantizedTensor(quantize(w, wp), wp), QuantizedTensor(quantize(x, in_p).T, in_p), out_p, stage
        )
        assert np.array_equal(got.codes, direct.codes.T)
        assert got.params == out_p

    def test_weights_are_narrow_uint8(self, trained_cnn):
        qg = convert(trained_cnn.graph)
        for op in qg.ops:
            if isinstance(op, LinearOp):
                assert op.weights.dtype == np.uint8
                assert op.weights.min() >= 1

    def test_integer_only(self, trained_cnn):
        assert integer_only_audit(convert(trained_cnn.graph)) == []

    def test_audit_flags_float(self, trained_mlp):
        import dataclasses

        qg = convert(trained_mlp.graph)
        bad = dataclasses.replace(qg.ops[0], weights=qg.ops[0].weights.astype(np.float32))
        qg = dataclasses.replace(qg, ops=(bad,) + qg.ops[1:])
        assert integer_only_audit(qg) == ["ops[0].weights: float32 array"]

    def test_concat_inputs_harmonized(self, trained_cnn):
        qg = convert(trained_cnn.graph)
        cat = [i for i, op in enumerate(qg.ops) if isinstance(op, ConcatOp)]
        assert cat
        for i in cat:
            for j in qg.ops[i].inputs:
                assert qg.op_params(j) == qg.op_params(i)

    def test_missing_range(self):
        g = dense_graph(np.eye(2), np.zeros(2), {"input": (-1.0, 1.0)})
        with pytest.raises(MissingRangeError, match="n0"):
            convert(g)

    def test_multiplier_out_of_range_names_layer(self):
        g = dense_graph(np.full((2, 2), 50.0), np.zeros(2), {"input": (-10.0, 10.0), "n0": (0.0, 1e-3)})
        with pytest.raises(ConversionError, match="layer 0"):
            convert(g)

    def test_output_must_be_last_op(self):
        w = np.eye(2)
        g = FloatGraph(
            (2,),
            [
                Node("dense", (-1,), {"weight": w, "bias": np.zeros(2)}),
                Node("dense", (-1,), {"weight": w, "bias": np.zeros(2)}),
                Node("softmax", (0,)),
            ],
            {"input": (-1.0, 1.0), "n0": (-1.0, 1.0), "n1": (-1.0, 1.0)},
        )
        with pytest.raises(ConversionError):
            convert(g)

    def test_deterministic(self, trained_cnn):
        assert convert(trained_cnn.graph) == convert(trained_cnn.graph.copy())


class TestInference:
    def test_rejects_wrong_params(self, trained_mlp):
        qg = convert(trained_mlp.graph)
        x = QuantizedTensor(np.zeros((1, 2), np.int64), QuantParams(0.5, 3))
        with pytest.raises(ParamsMismatchError):
            run_inference(qg, x)

    def test_rejects_wrong_shape(self, trained_mlp):
        qg = convert(trained_mlp.graph)
        with pytest.raises(ShapeError):
            run_inference(qg, qg.quantize_input(np.zeros((4, 3))))

    def test_batched_and_pairwise_identical(self, trained_cnn):
        qg = convert(trained_cnn.graph)
        x = qg.quantize_input(make_bars(300, seed=9).features())
        ref = run_inference(qg, x)
        assert run_inference(qg, x, pairwise=True) == ref
        assert run_inference_batched(qg, x, threads=4, chunk=64) == ref
        assert run_inference_batched(qg, x, threads=1, chunk=1000) == ref

    def test_integer_accuracy_tracks_simulation(self, trained_mlp):
        ds = make_spiral(600, seed=5)
        qg = convert(trained_mlp.graph)
        int_pred = np.argmax(run_inference(qg, qg.quantize_input(ds.features())).codes, axis=1)
        sim_pred = np.argmax(simulated_logits(trained_mlp.graph, ds.features()), axis=1)
        assert np.mean(int_pred == sim_pred) >= 0.99
        assert np.mean(int_pred == ds.y) >= 0.95


class TestCorrespondence:
    def test_mlp_within_one_code(self, trained_mlp):
        qg = convert(trained_mlp.graph)
        rep = verify_correspondence(trained_mlp.graph, qg, make_spiral(1000, seed=2).features())
        assert rep.max_divergence <= 1
        assert rep.argmax_agreement >= 0.99
        assert [k for _, k, _ in rep.layers] == ["dense"] * 3

    def test_cnn_within_one_code(self, trained_cnn):
        qg = convert(trained_cnn.graph)
        rep = verify_correspondence(trained_cnn.graph, qg, make_bars(300, seed=2).features())
        assert rep.max_divergence <= 1
        assert rep.argmax_agreement >= 0.99
        assert rep.notes and rep.notes[0].startswith("concat sites")

    def test_zero_weights_exact(self):
        g = dense_graph(np.zeros((3, 4)), np.zeros(3), {"input": (-1.0, 1.0), "n0": (-1.0, 1.0)})
        rep = verify_correspondence(g, convert(g), np.random.default_rng(0).normal(size=(50, 4)))
        assert rep.max_divergence == 0

    def test_report_deterministic_tsv(self, trained_cnn):
        qg = convert(trained_cnn.graph)
        x = make_bars(50, seed=3).features()
        a = verify_correspondence(trained_cnn.graph, qg, x).to_tsv()
        assert a == verify_correspondence(trained_cnn.graph, qg, x).to_tsv()
        lines = a.splitlines()
        assert "layer\tkind\tmax_code_divergence" in lines
        assert lines[-1] == "samples\t50"
        assert lines[-2].startswith("argmax_agreement\t")
