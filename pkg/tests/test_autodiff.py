import numpy as np
import pytest

from cabp import autodiff as ad
from cabp.autodiff import MissingBackwardRule, Tape, TapeStateError
from cabp.compression import compress
from cabp.ledger import MemoryLedger
from cabp.nn import functional as F
from cabp.nn.kernels import Conv2dSpec, SavePolicy
from cabp.tensor import AllocCategory, Tensor, dtype_code

from oracles import GRAD_CASES, GRAD_RTOL, INSTANCES_PER_OP, run_grad_case


# -- Tensor ----------------------------------------------------------------
def test_tensor_bytes_match_shape():
    t = Tensor(np.zeros((2, 3, 4)), AllocCategory.ACTIVATION, dtype="f32")
    assert t.size == 24 and t.nbytes == 24 * 4
    assert Tensor(np.zeros(5), dtype="f64").nbytes == 40


def test_tensor_category_is_read_only():
    t = Tensor([1.0], AllocCategory.PARAMETER)
    with pytest.raises(AttributeError):
        t.category = AllocCategory.GRADIENT
    assert t.category is AllocCategory.PARAMETER


def test_integer_data_becomes_f32_and_bad_dtype_rejected():
    assert Tensor([1, 2]).dtype == np.float32
    with pytest.raises(TypeError):
        dtype_code(np.int32)


# -- primitives --------------------------------------------------------------
def test_sum_of_ones():
    assert ad.sum(Tensor(np.ones((2, 3)))).item() == 6.0


def test_add_identical_doubles():
    x = Tensor(np.array([1.5, -2.0, 3.0]))
    np.testing.assert_array_equal(ad.add(x, x).data, [3.0, -4.0, 6.0])


def test_max_over_axis():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 0.0]]))
    np.testing.assert_array_equal(ad.max(x, axis=1).data, [2.0, 3.0])


def test_leading_singleton_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert ad.add(a, Tensor(np.ones((1, 3)))).shape == (2, 3)
    assert ad.add(a, Tensor(np.ones(3))).shape == (2, 3)
    with pytest.raises(ValueError):
        ad.add(a, Tensor(np.ones((2, 1))))
    with pytest.raises(ValueError):
        ad.mul(a, Tensor(np.ones((3, 2))))


def test_compare_is_not_recorded():
    with Tape() as tape:
        out = ad.compare(Tensor([1.0, 3.0], requires_grad=True), Tensor([2.0, 2.0]), "gt")
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    assert tape.nodes == []


def test_zero_size_reductions_rejected():
    with pytest.raises(ValueError):
        ad.sum(Tensor(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        ad.max(Tensor(np.zeros((0,))))


# -- backward ----------------------------------------------------------------
def test_linear_sum_gradient_is_x_per_row():
    x = np.array([[1.0, -2.0, 3.0]])
    w = Tensor(np.zeros((2, 3)), requires_grad=True, dtype="f64")
    with Tape() as tape:
        loss = ad.sum(F.linear(Tensor(x, dtype="f64"), w))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[w], np.repeat(x, 2, axis=0))


def test_relu_chain_passes_positive_gradient():
    x = Tensor(np.array([0.5, 2.0, 7.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(F.relu(F.relu(x)))
    np.testing.assert_array_equal(tape.backward(loss)[x], [1.0, 1.0, 1.0])


def test_fan_out_accumulates_by_addition():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True, dtype="f64")
    with Tape() as tape:
        loss = ad.sum(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    np.testing.assert_array_equal(tape.backward(loss)[x], [7.0, 1.0])


def test_backward_visits_nodes_in_reverse_order():
    order = []
    ad.register_backward("trace_op")(lambda node, g: (order.append(node.label), g)[1])
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        h = x
        for i in range(4):
            h = ad._record("trace_op", (h,), None, h.data.copy(), label=f"n{i}")
        loss = ad.sum(h)
    tape.backward(loss)
    assert order == ["n3", "n2", "n1", "n0"]


def test_missing_rule_names_the_op():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ad._record("no_such_op", (x,), None, x.data.copy())
        loss = ad.sum(y)
    with pytest.raises(MissingBackwardRule, match="no_such_op"):
        tape.backward(loss)


def test_recording_during_backward_is_an_error():
    def bad_rule(node, g):
        node.tape.record("add", (), None, Tensor(g))
        return g

    ad.register_backward("records_in_backward")(bad_rule)
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad._record("records_in_backward", (x,), None, x.data.copy()))
    with pytest.raises(TapeStateError):
        tape.backward(loss)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


# -- ledger interaction --------------------------------------------------------
def _conv_inputs(policy):
    x = Tensor(np.ones((2, 3, 8, 8)), AllocCategory.INPUT)
    w = Tensor(np.ones((4, 3, 3, 3)) * 0.1, AllocCategory.PARAMETER, requires_grad=True)
    return x, w, Conv2dSpec(3, 4, 3, 1, 1), policy


def test_record_full_conv_charges_bytes_of_x():
    ledger = MemoryLedger()
    x, w, spec, pol = _conv_inputs(SavePolicy.full())
    with Tape(ledger):
        F.conv2d(x, w, None, spec, pol, label="c")
    assert ledger.current(AllocCategory.ACTIVATION) == x.nbytes


def test_record_pooled_conv_charges_quarter():
    ledger = MemoryLedger()
    x, w, spec, pol = _conv_inputs(SavePolicy.pooled(2))
    with Tape(ledger):
        F.conv2d(x, w, None, spec, pol, label="c")
    assert ledger.current(AllocCategory.ACTIVATION) == x.nbytes // 4 == compress(x, 2).nbytes


def test_backward_returns_activation_and_scratch_to_baseline():
    ledger = MemoryLedger()
    ledger.alloc(123, AllocCategory.ACTIVATION, "preexisting")
    x, w, spec, pol = _conv_inputs(SavePolicy.pooled(2))
    with Tape(ledger) as tape:
        loss = ad.sum(F.relu(F.conv2d(x, w, None, spec, pol, label="c")))
    assert ledger.current(AllocCategory.ACTIVATION) > 123
    tape.backward(loss)
    assert ledger.current(AllocCategory.ACTIVATION) == 123
    assert ledger.current(AllocCategory.SCRATCH) == 0
    assert ledger.peak_by_category[AllocCategory.SCRATCH] == x.nbytes  # inflate buffer existed


def test_release_without_backward_frees_everything():
    ledger = MemoryLedger()
    x, w, spec, pol = _conv_inputs(SavePolicy.full())
    with Tape(ledger) as tape:
        F.relu(F.conv2d(x, w, None, spec, pol))
    tape.release()
    assert ledger.current(AllocCategory.ACTIVATION) == 0


def test_no_tape_means_no_recording():
    x, w, spec, pol = _conv_inputs(SavePolicy.full())
    y = F.conv2d(x, w, None, spec, pol)
    assert not y.requires_grad


def test_repeated_runs_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 3, 9, 9)))
        w = Tensor(rng.standard_normal((5, 3, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(F.relu(F.conv2d(x, w, None, Conv2dSpec(3, 5, 3, 2, 1), SavePolicy.pooled(2))))
        return loss.data.copy(), tape.backward(loss)[w].copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# -- finite-difference gradient checks ----------------------------------------
@pytest.mark.parametrize("op", sorted(GRAD_CASES))
def test_gradcheck_f64(op):
    worst = max(run_grad_case(op, i) for i in range(INSTANCES_PER_OP))
    assert worst < GRAD_RTOL, f"{op}: max relative error {worst:.3e}"


def test_gradcheck_f32_loose():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (2, 3, 5, 5)).astype(np.float32)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3, 3)), requires_grad=True, dtype="f32")
    spec = Conv2dSpec(3, 2, 3, 1, 1)
    with Tape() as tape:
        loss = ad.sum(F.conv2d(Tensor(x), w, None, spec))
    g = tape.backward(loss)[w]
    w64 = w.data.astype(np.float64)
    num = np.zeros_like(w64)
    h = 1e-3
    for i in range(w64.size):
        for sgn in (1, -1):
            wp = w64.copy()
            wp.reshape(-1)[i] += sgn * h
            val = float(F.conv2d(Tensor(x, dtype="f64"), Tensor(wp, dtype="f64"), None, spec).data.sum())
            num.reshape(-1)[i] += sgn * val / (2 * h)
    rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-3)
    assert rel.max() < 1e-3
