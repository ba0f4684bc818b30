import math

import numpy as np
import pytest

import seqsearch.optim as optim
from seqsearch.optim import (
    HISTORY_FIELDS, SGD, Adam, NonFiniteGradient, TrainConfig, compute_step, gate_gradients_all, train,
    write_history,
)
from seqsearch.bloch import Tape, apply_rf, evolve
from seqsearch.losses import composite, default_weights, expected_rf_energy, expected_rf_number
from seqsearch.population import sample_population, stratified_indices
from seqsearch.scheduler import (
    N_RF, RHO_RF_MIN, fixed_space, idle_from_rho, init_search_space, path_ops, sample_path,
)
from seqsearch.sequence import hahn_echo


def scalar_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam on one float."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_quadratic_reference():
    ref = scalar_adam(1.0, lambda x: 2 * x, 0.1, 500)
    assert abs(ref) < 1e-3
    x = np.array([1.0])
    opt = Adam(0.1)
    for _ in range(500):
        opt.step({"x": x}, {"x": 2 * x})
    assert abs(x[0]) < 1e-3
    assert x[0] == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_adam_zero_grad_leaves_params():
    x = np.array([0.3, -2.0])
    Adam(0.1).step({"x": x}, {"x": np.zeros(2)})
    assert x.tolist() == [0.3, -2.0]


def test_sgd_step():
    x = np.array([1.0])
    SGD(0.01).step({"x": x}, {"x": np.array([2.0])})
    assert x[0] == pytest.approx(1.0 - 0.02)
    with pytest.raises(NonFiniteGradient):
        SGD(0.01).step({"x": x}, {"x": np.array([np.nan])})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=2000, population=1000)
    with pytest.raises(ValueError):
        TrainConfig(gate_estimator="two-path")
    assert TrainConfig(batch=100, population=10_000).iterations == 100
    assert TrainConfig(batch=100, population=10_000, iters_per_epoch=3).iterations == 3
    assert TrainConfig(experiment="E3", weights={"null": 1.0}).loss_weights().null == 1.0


# -- gradients of one step ------------------------------------------------------


@pytest.fixture(scope="module")
def batch():
    return sample_population(30, 4)


def _path_loss(space, path, batch, exp="E1"):
    w = default_weights(exp)
    tape = Tape(path_ops(space, path), batch)
    n, _ = expected_rf_number(space)
    e, _, _ = expected_rf_energy(space)
    return composite(exp, tape.magnitude, batch.tissue, batch.m0, n, e, w).total


def test_weight_gradients_match_finite_differences(batch):
    sp = init_search_space(5)
    sp.rf_rho += 0.5          # off the floor so both directions are feasible
    path = (2, 6, 1, 5, 4)
    step = compute_step(sp, batch, path, "E1", default_weights("E1"))
    h = 1e-6
    # active candidates only; inactive flips are deliberately left out of the step
    for name, idx in (("flip", (0, 2)), ("phase", (2, 1)), ("rf_rho", (4, 4)), ("wait_rho", (1, 1)),
                      ("flip", (4, 4))):
        sp2 = sp.copy()
        getattr(sp2, name)[idx] += h
        up = _path_loss(sp2, path, batch)
        getattr(sp2, name)[idx] -= 2 * h
        down = _path_loss(sp2, path, batch)
        num = (up - down) / (2 * h)
        assert step.weight_grads[name][idx] == pytest.approx(num, rel=1e-5, abs=1e-10), name


def test_only_active_path_gets_weight_gradients(batch):
    sp = init_search_space(6)
    path = (1, 7, 3, 0, 6)
    step = compute_step(sp, batch, path, "E1", default_weights("E1"))
    for layer in range(5):
        for cand in range(8):
            active = cand == path[layer]
            if cand < N_RF:
                vals = [step.weight_grads[k][layer, cand] for k in ("flip", "phase", "rf_rho")]
            else:
                vals = [step.weight_grads["wait_rho"][layer, cand - N_RF]]
            if not active:
                assert all(v == 0 for v in vals)
    assert step.weight_grads["flip"][0, 1] != 0


def test_all_gate_gradients_match_brute_force(batch):
    sp = init_search_space(8)
    path = (0, 5, 3, 7, 2)
    tape = Tape(path_ops(sp, path), batch)
    br = composite("E1", tape.magnitude, batch.tissue, batch.m0, 0.0, 0.0)
    g = tape.backward(br.dl_dmag)
    fast = gate_gradients_all(sp, path, tape, g.adj_out)
    for layer in (1, 3):
        gm, gz = g.adj_out[layer]
        m_in, z_in = tape.inputs[layer]
        for cand in np.flatnonzero(sp.mask[layer]):
            flip, phase, idle = sp.candidate_op(layer, int(cand))
            m, z = (m_in, z_in) if flip is None else apply_rf(m_in, z_in, flip, phase, batch.b1)
            m, z = evolve(m, z, idle, batch)
            direct = np.sum((np.conj(gm) * m).real) + np.sum(gz * z)
            assert fast[layer, cand] == pytest.approx(direct, rel=1e-10, abs=1e-14)
    # the active entry equals the tape's own gate gradient
    assert fast[3, 7] == pytest.approx(g.gate[3], rel=1e-12)


def test_frozen_space_has_no_arch_gradient(batch):
    sp = fixed_space(hahn_echo(70, 140))
    step = compute_step(sp, batch, (0, 0), "E1", default_weights("E1"))
    assert step.arch_grad is None


# -- training loop ------------------------------------------------------------------


def _small_cfg(**kw):
    base = dict(epochs=3, batch=30, population=90, seed=2, iters_per_epoch=4)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rates_leave_space_unchanged():
    pop = sample_population(90, 0)
    sp = init_search_space(1)
    before = sp.copy()
    train(sp, pop, _small_cfg(lr_weights=0.0, lr_arch=0.0))
    for name in ("flip", "phase", "wait_rho", "alpha"):
        assert np.array_equal(getattr(sp, name), getattr(before, name))
    assert np.array_equal(sp.rf_rho, np.maximum(before.rf_rho, RHO_RF_MIN))


def test_training_is_deterministic(tmp_path):
    pop = sample_population(90, 0)
    runs = []
    for k in range(2):
        sp = init_search_space(3)
        res = train(sp, pop, _small_cfg())
        write_history(res.history, tmp_path / f"h{k}.csv")
        runs.append(sp)
    assert (tmp_path / "h0.csv").read_bytes() == (tmp_path / "h1.csv").read_bytes()
    assert np.array_equal(runs[0].alpha, runs[1].alpha)
    header = (tmp_path / "h0.csv").read_text().splitlines()[0]
    assert header == ",".join(HISTORY_FIELDS)


def test_rf_idle_floor_after_every_step():
    pop = sample_population(90, 0)
    sp = init_search_space(4)
    seen = []
    train(sp, pop, _small_cfg(lr_weights=5.0), progress=lambda row: seen.append(idle_from_rho(sp.rf_rho).min()))
    assert min(seen) >= 6.2 - 1e-9
    assert np.all(idle_from_rho(sp.wait_rho) > 0)


def test_updates_touch_only_sampled_candidates():
    pop = sample_population(90, 0)
    sp = init_search_space(5)
    before = sp.copy()
    cfg = _small_cfg(epochs=1, iters_per_epoch=1)
    # replay the loop's RNG stream to learn which path was sampled
    rng = np.random.default_rng(cfg.seed)
    stratified_indices(pop.tissue, cfg.batch, rng)
    path = sample_path(sp, rng)
    train(sp, pop, cfg)
    changed = (sp.flip != before.flip) | (sp.phase != before.phase)
    for layer in range(5):
        for cand in range(N_RF):
            if changed[layer, cand]:
                assert path[layer] == cand


def test_nonfinite_loss_aborts_run(monkeypatch):
    real = optim.compute_step

    def broken(*a, **k):
        out = real(*a, **k)
        out.breakdown.total = float("nan")
        return out

    monkeypatch.setattr(optim, "compute_step", broken)
    pop = sample_population(90, 0)
    res = train(init_search_space(0), pop, _small_cfg(epochs=20, iters_per_epoch=1, max_bad_epochs=5))
    assert res.failed
    assert len(res.history) == 6
    assert all(row["bad_steps"] == 1 for row in res.history)


def test_checkpoints_written(tmp_path):
    pop = sample_population(90, 0)
    train(init_search_space(0), pop, _small_cfg(checkpoint_every=2, checkpoint_dir=str(tmp_path)))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_00002.json"]
