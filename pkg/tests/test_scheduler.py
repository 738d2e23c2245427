"""Scheduling disciplines: step order, dataflow audits, masking, combination."""
import numpy as np
import pytest

from pfvsr.generator import ConfigError, Model, ModelConfig
from pfvsr.resample import bicubic_upsample
from pfvsr.scheduler import (MASKABLE_INPUTS, NotAnInputError, ScheduleTrace,
                             VideoSequence, ablate_input, combine,
                             input_membership, run_model)
from pfvsr.tensor import ShapeError, Tensor

CASES = [("ivsr", 0, 1), ("rvsr", 0, 1), ("hvsr", 0, 1),
         ("lovsr", 1, 1), ("govsr", 1, 1)]


def make_model(framework, bp, bs, filters=8, init=True, seed=0, **kw):
    cfg = ModelConfig(framework=framework, blocks_precursor=bp,
                      blocks_successor=bs, filters=filters, **kw)
    return Model(cfg, seed=seed, init=init)


def make_seq(n, h=4, w=4, seed=0, **kw):
    rng = np.random.default_rng(seed)
    frames = [Tensor(rng.uniform(0.0, 1.0, (1, 3, h, w))) for _ in range(n)]
    return VideoSequence(frames, **kw)


class TestSequence:
    def test_validation(self):
        with pytest.raises(ShapeError):
            VideoSequence([])
        frames = [Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5)))]
        with pytest.raises(ShapeError):
            VideoSequence(frames)
        with pytest.raises(ConfigError):
            make_seq(3, padding_mode="wrap")
        with pytest.raises(ConfigError):
            make_seq(3, margin=2, padding_mode="extend")
        with pytest.raises(ConfigError):   # margin only with extend padding
            make_seq(5, margin=1)

    def test_hr_pairing(self):
        lr = [Tensor(np.zeros((1, 3, 4, 4))) for _ in range(2)]
        hr = [Tensor(np.zeros((1, 3, 16, 16))) for _ in range(2)]
        seq = VideoSequence(lr, hr_frames=hr, scale=4)
        assert len(seq.core_hr()) == 2
        with pytest.raises(ShapeError):
            VideoSequence(lr, hr_frames=hr[:1], scale=4)
        with pytest.raises(ShapeError):
            VideoSequence(lr, hr_frames=hr, scale=2)
        with pytest.raises(ValueError):
            make_seq(2).core_hr()

    def test_margin_trims_core(self):
        seq = make_seq(5, margin=1, padding_mode="extend")
        assert list(seq.core_indices) == [1, 2, 3]
        model = make_model("govsr", 1, 1, init=False)
        result = run_model(model, seq)
        assert len(result.sr) == 3
        assert result.core_indices == range(1, 4)


class TestTraceAudit:
    @pytest.mark.parametrize("framework,bp,bs", CASES)
    @pytest.mark.parametrize("n", range(1, 8))
    def test_causal_for_all_lengths(self, framework, bp, bs, n):
        model = make_model(framework, bp, bs, init=False)
        result = run_model(model, make_seq(n))
        result.trace.check(n)
        assert len(result.sr) == n

    def test_govsr_runs_precursor_backward(self):
        model = make_model("govsr", 1, 1, init=False)
        result = run_model(model, make_seq(4))
        pre = [s.timestep for s in result.trace.steps if s.network == "precursor"]
        suc = [s.timestep for s in result.trace.steps if s.network == "successor"]
        assert pre == [3, 2, 1, 0]
        assert suc == [0, 1, 2, 3]

    def test_lovsr_runs_precursor_forward(self):
        model = make_model("lovsr", 1, 1, init=False)
        result = run_model(model, make_seq(4))
        pre = [s.timestep for s in result.trace.steps if s.network == "precursor"]
        assert pre == [0, 1, 2, 3]

    def test_edge_replication_tokens(self):
        model = make_model("ivsr", 0, 1, init=False)
        result = run_model(model, make_seq(3))
        gen = [s for s in result.trace.steps if s.network == "generator"]
        assert gen[0].consumed == ("I[0]", "I[0]", "I[1]")
        assert gen[2].consumed == ("I[1]", "I[2]", "I[2]")

    def test_reachability_per_framework(self):
        n = 7
        expected = {
            "ivsr": {2, 3, 4},
            "rvsr": {0, 1, 2, 3},
            "hvsr": {0, 1, 2, 3, 4},
            "lovsr": {0, 1, 2, 3, 4, 5},
            "govsr": set(range(n)),
        }
        for framework, bp, bs in CASES:
            model = make_model(framework, bp, bs, init=False)
            trace = run_model(model, make_seq(n)).trace
            assert trace.reachable_frames("SR[3]") == expected[framework], framework

    def test_govsr_first_output_sees_whole_clip(self):
        model = make_model("govsr", 1, 1, init=False)
        trace = run_model(model, make_seq(5)).trace
        assert trace.reachable_frames("SR[0]") == set(range(5))

    def test_lovsr_lookahead_is_bounded(self):
        model = make_model("lovsr", 1, 1, init=False)
        trace = run_model(model, make_seq(7)).trace
        for t in range(7):
            assert max(trace.reachable_frames(f"SR[{t}]")) <= min(t + 2, 6)

    def test_duplicate_production_is_flagged(self):
        trace = ScheduleTrace()
        trace.add("precursor", 0, ("I[0]",), ("Hp[0]",))
        trace.add("precursor", 1, ("I[1]",), ("Hp[0]",))
        with pytest.raises(AssertionError, match="produced twice"):
            trace.producers()

    def test_consume_before_produce_is_flagged(self):
        trace = ScheduleTrace()
        trace.add("successor", 0, ("Hp[1]",), ("SRs[0]",))
        trace.add("precursor", 1, ("I[1]",), ("Hp[1]",))
        with pytest.raises(AssertionError, match="produced later"):
            trace.check(2)
        lone = ScheduleTrace()
        lone.add("successor", 0, ("Hs[9]",), ("SRs[0]",))
        with pytest.raises(AssertionError, match="never produced"):
            lone.check(2)

    def test_trace_lines_format(self):
        model = make_model("ivsr", 0, 1, init=False)
        lines = run_model(model, make_seq(2)).trace.to_lines()
        assert lines[0] == "step=0 net=generator t=0 consumed=I[0],I[0],I[1] produced=SRg[0]"


class TestStepOrder:
    def test_stateless_framework_is_order_invariant(self):
        model = make_model("ivsr", 0, 1, seed=3)
        seq = make_seq(4, seed=11)
        plain = run_model(model, seq)
        shuffled = run_model(model, seq, order=[2, 0, 3, 1])
        for a, b in zip(plain.sr, shuffled.sr):
            assert np.array_equal(a.data, b.data)

    def test_recurrent_frameworks_reject_custom_order(self):
        seq = make_seq(3)
        with pytest.raises(ConfigError):
            run_model(make_model("rvsr", 0, 1, init=False), seq, order=[2, 1, 0])
        with pytest.raises(ConfigError):
            run_model(make_model("govsr", 1, 1, init=False), seq, order=[2, 1, 0])

    def test_order_must_be_a_permutation(self):
        with pytest.raises(ConfigError):
            run_model(make_model("ivsr", 0, 1, init=False), make_seq(3), order=[0, 0, 1])


class TestCombination:
    def test_baseline_rides_on_bicubic(self):
        model = make_model("hvsr", 0, 1, init=False)
        seq = make_seq(3, seed=2)
        result = run_model(model, seq)
        for t, sr in zip(result.core_indices, result.sr):
            base = bicubic_upsample(seq.frames[t], 4)
            assert np.array_equal(sr.data, base.data)

    def test_ovsr_output_is_exact_sum_of_streams(self):
        model = make_model("govsr", 1, 1, seed=4)
        result = run_model(model, make_seq(3, seed=9))
        for sr, p, s in zip(result.sr, result.sr_precursor, result.sr_successor):
            assert np.array_equal(sr.data, p.data + s.data)

    def test_ovsr_with_bicubic_base(self):
        model = make_model("govsr", 1, 1, seed=4, residual_base="bicubic")
        seq = make_seq(3, seed=9)
        result = run_model(model, seq)
        for t, sr, s in zip(result.core_indices, result.sr, result.sr_successor):
            base = bicubic_upsample(seq.frames[t], 4)
            assert np.array_equal(sr.data, base.data + s.data)

    def test_successor_only_model_runs(self):
        model = make_model("govsr", 0, 2, init=False)
        result = run_model(model, make_seq(3))
        assert result.sr_precursor is None
        nets = {s.network for s in result.trace.steps}
        assert nets == {"successor", "combine"}
        suc = [s for s in result.trace.steps if s.network == "successor"]
        assert all("0" in s.consumed for s in suc)   # precursor states replaced by zeros

    def test_combine_shape_mismatch(self):
        a = Tensor(np.zeros((1, 3, 8, 8)))
        b = Tensor(np.zeros((1, 3, 8, 4)))
        with pytest.raises(ShapeError):
            combine(a, b)

    def test_batch_lanes_stay_independent(self):
        model = make_model("lovsr", 1, 1, seed=7)
        rng = np.random.default_rng(0)
        stack = [rng.uniform(0, 1, (2, 3, 4, 4)) for _ in range(3)]
        both = run_model(model, VideoSequence([Tensor(f) for f in stack]))
        solo = run_model(model, VideoSequence([Tensor(f[1:2]) for f in stack]))
        for a, b in zip(both.sr, solo.sr):
            assert np.allclose(a.data[1:2], b.data, atol=1e-10)


class TestMasking:
    def test_membership_tables(self):
        govsr = input_membership(ModelConfig(framework="govsr"))
        assert govsr["precursor"] == frozenset({"I[t-1]", "I[t]", "I[t+1]", "H[t+1]"})
        assert govsr["successor"] == frozenset(MASKABLE_INPUTS)
        ivsr = input_membership(ModelConfig(framework="ivsr", blocks_precursor=0,
                                            blocks_successor=1))
        assert ivsr["generator"] == frozenset({"I[t-1]", "I[t]", "I[t+1]"})
        rvsr = input_membership(ModelConfig(framework="rvsr", blocks_precursor=0,
                                            blocks_successor=1))
        assert rvsr["generator"] == frozenset({"I[t-1]", "I[t]", "H[t-1]"})

    def test_unknown_input_name(self):
        model = make_model("govsr", 1, 1, init=False)
        with pytest.raises(NotAnInputError):
            ablate_input(model, make_seq(3), [("successor", "X[t]")])

    def test_absent_network(self):
        model = make_model("ivsr", 0, 1, init=False)
        with pytest.raises(NotAnInputError):
            ablate_input(model, make_seq(3), [("precursor", "I[t]")])

    def test_never_consumed_input(self):
        ivsr = make_model("ivsr", 0, 1, init=False)
        with pytest.raises(NotAnInputError):
            ablate_input(ivsr, make_seq(3), [("generator", "H[t-1]")])
        govsr = make_model("govsr", 1, 1, init=False)
        with pytest.raises(NotAnInputError):   # backward precursor has no past state
            ablate_input(govsr, make_seq(3), [("precursor", "H[t-1]")])
        rvsr = make_model("rvsr", 0, 1, init=False)
        with pytest.raises(NotAnInputError):   # third stream is structurally zero
            ablate_input(rvsr, make_seq(3), [("generator", "I[t+1]")])

    def test_masked_tokens_show_in_trace(self):
        model = make_model("govsr", 1, 1, init=False)
        result = ablate_input(model, make_seq(3), [("precursor", "H[t+1]")])
        pre = [s for s in result.trace.steps if s.network == "precursor"]
        assert all(s.consumed[-1] == "0" for s in pre)
        result2 = ablate_input(model, make_seq(3), [("successor", "I[t]")])
        suc = [s for s in result2.trace.steps if s.network == "successor"]
        assert all(s.consumed[1] == "0" for s in suc)

    def test_masking_changes_the_output(self):
        model = make_model("lovsr", 1, 1, seed=8)
        seq = make_seq(3, seed=5)
        plain = run_model(model, seq)
        masked = ablate_input(model, seq, [("successor", "I[t]")])
        assert any(not np.array_equal(a.data, b.data)
                   for a, b in zip(plain.sr, masked.sr))

    def test_mask_all_targets_every_network(self):
        model = make_model("govsr", 1, 1, init=False)
        result = ablate_input(model, make_seq(3), [("all", "I[t]")])
        for s in result.trace.steps:
            if s.network in ("precursor", "successor"):
                assert s.consumed[1] == "0"
