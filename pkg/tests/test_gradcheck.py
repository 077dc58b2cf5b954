"""The model-wide gradient checker itself: catches real bugs, reports
clean passes, groups tensors sensibly."""

import numpy as np

from mmixer import mcu as mcu_mod
from mmixer import tensor as T
from mmixer.cli import run_gradcheck
from mmixer.gradcheck import group_report, rel_error


def test_sampled_gradcheck_passes():
    rows, elapsed = run_gradcheck(seed=1, samples=4)
    assert max(err for _, err, _ in rows) <= 1e-4
    assert elapsed < 60.0


def test_group_report_collapses_prefixes():
    rows = [("mcu.0.W_f", 1e-6, 4), ("mcu.0.W_g", 5e-6, 4),
            ("mcu.1.W_f", 2e-6, 4), ("bank.W_u", 3e-6, 4),
            ("enc.0.weight", 4e-6, 4)]
    grouped = dict((k, (e, n)) for k, e, n in group_report(rows))
    assert grouped["mcu.0"] == (5e-6, 8)
    assert grouped["mcu.1"] == (2e-6, 4)
    assert grouped["bank"] == (3e-6, 4)
    assert grouped["enc"] == (4e-6, 4)


def test_injected_sign_flip_in_state_update_backward_is_caught(monkeypatch):
    # corrupt the backward of the convex state mix (forward untouched):
    # the gradient through the kept-state path flips sign
    def broken_convex_mix(gate, a, b):
        out = gate.data * a.data + (1.0 - gate.data) * b.data

        def back(g):
            from mmixer.tensor import _unbroadcast

            if gate.requires_grad:
                gate.accumulate_grad(
                    _unbroadcast(g * (a.data - b.data), gate.data.shape)
                )
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * gate.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(
                    _unbroadcast(-(g * (1.0 - gate.data)), b.data.shape)
                )

        return T.make_node(out, (gate, a, b), back)

    monkeypatch.setattr(mcu_mod, "convex_mix", broken_convex_mix)
    rows, _ = run_gradcheck(seed=1, samples=4)
    assert max(err for _, err, _ in rows) > 1e-4


def test_rel_error_metric_behavior():
    a = np.array([1.0, 2.0, 3.0])
    assert rel_error(a, a) == 0.0
    assert rel_error(a, -a) > 1.0  # sign flips are loud
    assert rel_error(a, a + 1e-7) < 1e-6
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
