"""Built-in oracle checks runnable from the CLI without a test harness.

Each check recomputes its expectation from first principles (nested-loop convolution,
finite differences, exhaustive enumeration) and compares the library against it.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import evaluation as E
from . import model as M
from . import ndtensor as nd
from . import sampling as S
from . import training as T
from .pianoroll import ContextMask, Pianoroll


def _check(name, fn):
    try:
        fn()
    except AssertionError as e:
        print(f"FAIL {name}: {e}")
        return False
    except Exception as e:  # a crash is also a failure, with the reason
        print(f"FAIL {name}: {type(e).__name__}: {e}")
        return False
    print(f"PASS {name}")
    return True


def _random_roll(rng, i, t, p):
    data = np.zeros((i, t, p), dtype=np.uint8)
    for a in range(i):
        for b in range(t):
            data[a, b, rng.integers(0, p)] = 1
    return Pianoroll(data, pitch_offset=36, resolution=1)


def check_convolution(trials):
    rng = np.random.default_rng(0)
    for _ in range(trials):
        b = int(rng.integers(1, 3))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        t, p = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        kt, kp = int(rng.choice([1, 3])), int(rng.choice([1, 3]))
        x = rng.normal(size=(b, cin, t, p))
        w = rng.normal(size=(cout, cin, kt, kp))
        fast = nd.conv2d_same(nd.constant(x), nd.constant(w)).data
        slow = np.zeros_like(fast)
        for bi, o, ti, pi, dt, dp in itertools.product(
                range(b), range(cout), range(t), range(p), range(kt), range(kp)):
            ts, ps = ti + dt - kt // 2, pi + dp - kp // 2
            if 0 <= ts < t and 0 <= ps < p:
                slow[bi, o, ti, pi] += (x[bi, :, ts, ps] * w[o, :, dt, dp]).sum()
        assert np.max(np.abs(fast - slow)) < 1e-6, "convolution differs from oracle"


def check_gradients(coords):
    rng = np.random.default_rng(1)
    config = M.ModelConfig(num_layers=4, num_channels=4, instruments=2, pitches=4)
    params = M.init_parameters(config, rng)
    roll = _random_roll(rng, 2, 5, 4)
    mask = T.sample_context((2, 5), rng)
    _, grads = T.loss(params, roll, mask, mode="train")
    h = 1e-5
    names = [n for n, _ in params.named_tensors()]
    tensors = dict(params.named_tensors())
    checked = 0
    while checked < coords:
        name = names[int(rng.integers(0, len(names)))]
        flat = tensors[name].data.reshape(-1)
        idx = int(rng.integers(0, flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        up, _ = T.loss(params, roll, mask, mode="train")
        flat[idx] = orig - h
        down, _ = T.loss(params, roll, mask, mode="train")
        flat[idx] = orig
        num = (up - down) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        if abs(num - ana) >= 1e-9:  # zero-gradient coordinates agree absolutely
            denom = max(abs(num), abs(ana), 1e-8)
            assert abs(num - ana) / denom < 1e-4, \
                f"gradient mismatch at {name}[{idx}]: {ana} vs {num}"
        checked += 1


def check_softmax():
    rng = np.random.default_rng(2)
    z = rng.uniform(-50, 50, size=(20, 53))
    out = nd.softmax_over_last(nd.constant(z)).data
    assert np.abs(out.sum(axis=-1) - 1).max() < 1e-6, "rows do not sum to one"
    flat = nd.softmax_over_last(nd.constant(np.zeros(53))).data
    assert np.abs(flat - 1 / 53).max() < 1e-12, "uniform logits not uniform"


def check_anneal_schedule():
    rng = np.random.default_rng(3)
    for _ in range(20):
        amin = rng.uniform(0, 0.5)
        amax = rng.uniform(amin, 1.0)
        eta = rng.uniform(0.1, 1.0)
        n_steps = int(rng.integers(1, 200))
        sched = S.AnnealSchedule(alpha_min=amin, alpha_max=amax, eta=eta,
                                 num_steps=n_steps)
        for n in (0, int(np.ceil(eta * n_steps)), n_steps - 1):
            want = max(amin, amax - n * (amax - amin) / (eta * n_steps))
            assert S.anneal_alpha(n, sched) == want, "schedule formula mismatch"


def check_uniform_model_nll():
    config = M.ModelConfig(num_layers=2, num_channels=4, instruments=4, pitches=53)
    params = M.init_parameters(config, np.random.default_rng(4))
    for layer in params.layers:
        layer.kernels.data[:] = 0.0
    roll = _random_roll(np.random.default_rng(5), 4, 8, 53)
    res = E.framewise_nll(params, roll, E.EvalConfig(num_orderings=2, seed=0))
    want = 4 * np.log(53)
    assert abs(res.nll - want) < 1e-6, f"uniform NLL {res.nll} != {want}"


def check_orderless_loss_identity():
    rng = np.random.default_rng(6)
    config = M.ModelConfig(num_layers=3, num_channels=4, instruments=1, pitches=2)
    params = M.init_parameters(config, rng)
    roll = _random_roll(rng, 1, 3, 2)
    d = 3

    masks, weights = [], []
    for size in range(d):
        subsets = list(itertools.combinations(range(d), size))
        for cells in subsets:
            m = np.zeros(d, dtype=bool)
            m[list(cells)] = True
            masks.append(m.reshape(1, 3))
            weights.append(1.0 / (d * len(subsets)))
    scaled = T.loss_value(params, np.repeat(roll.data[None], len(masks), axis=0),
                          np.stack(masks))
    lhs = float(np.dot(weights, d * scaled))

    total = 0.0
    cells = [(0, b) for b in range(3)]
    for order in itertools.permutations(cells):
        nll = 0.0
        mask = np.zeros((1, 3), dtype=bool)
        for cell in order:
            probs = M.conditionals(params, roll, ContextMask(mask.copy()))
            nll -= np.log(float((probs[cell] * roll.data[cell]).sum()))
            mask[cell] = True
        total += nll
    rhs = total / 6
    assert abs(lhs - rhs) < 1e-10, f"loss identity violated: {lhs} vs {rhs}"


def check_ancestral_exactness(chains):
    params = M.init_parameters(
        M.ModelConfig(num_layers=2, num_channels=3, instruments=1, pitches=2),
        np.random.default_rng(7))
    blank = S.constant_pitch_roll(1, 2, 2, resolution=1)
    uncond = M.conditionals(params, blank, ContextMask.empty((1, 2)))
    given = {}
    for cell in (0, 1):
        for value in (0, 1):
            data = np.zeros((1, 2, 2), dtype=np.uint8)
            data[0, cell, value] = 1
            data[0, 1 - cell, 0] = 1
            roll = Pianoroll(data, pitch_offset=36, resolution=1)
            probs = M.conditionals(params, roll,
                                   ContextMask.from_cells([(0, cell)], (1, 2)))
            given[(cell, value)] = probs[0, 1 - cell]
    joint = np.zeros((2, 2))
    for a in (0, 1):
        for b in (0, 1):
            joint[a, b] = 0.5 * uncond[0, 0, a] * given[(0, a)][b] \
                + 0.5 * uncond[0, 1, b] * given[(1, b)][a]

    rolls = np.repeat(blank.data[None], chains, axis=0)
    S.ancestral_fill_batch(params, rolls, np.zeros((chains, 1, 2), dtype=bool),
                           np.random.default_rng(8))
    counts = np.zeros((2, 2))
    for a, b in zip(rolls[:, 0, 0].argmax(-1), rolls[:, 0, 1].argmax(-1)):
        counts[a, b] += 1
    tv = 0.5 * np.abs(counts / chains - joint).sum()
    assert tv < 0.05, f"ancestral total variation {tv:.3f} too large"


def check_checkpoint_round_trip():
    import os
    import tempfile
    params = M.init_parameters(
        M.ModelConfig(num_layers=3, num_channels=4, instruments=2, pitches=5),
        np.random.default_rng(9))
    with tempfile.TemporaryDirectory() as tmp:
        a = os.path.join(tmp, "a.ckpt")
        b = os.path.join(tmp, "b.ckpt")
        M.save_checkpoint(params, a)
        M.save_checkpoint(M.load_checkpoint(a), b)
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read(), "checkpoint bytes changed on round trip"


def run_selftest(quick=False):
    trials = 10 if quick else 30
    coords = 10 if quick else 25
    chains = 5000 if quick else 20000
    results = [
        _check("convolution vs nested-loop oracle", lambda: check_convolution(trials)),
        _check("gradients vs finite differences", lambda: check_gradients(coords)),
        _check("softmax normalization", check_softmax),
        _check("anneal schedule formula", check_anneal_schedule),
        _check("uniform-model framewise NLL", check_uniform_model_nll),
        _check("orderless loss enumeration identity", check_orderless_loss_identity),
        _check("ancestral sampling exactness", lambda: check_ancestral_exactness(chains)),
        _check("checkpoint round trip", check_checkpoint_round_trip),
    ]
    ok = all(results)
    print("selftest:", "all checks passed" if ok else "FAILURES above")
    return ok
