"""Random small instances for central-difference gradient checks.

Each case draws a parameter set and a scalar objective. Draws whose ReLU
pre-activations come within ``KINK_MARGIN`` of zero are rejected and redrawn,
so the finite differences never straddle a kink.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from mvvin.autodiff import ParamSet, Tensor, grad_check, no_grad, ops
from mvvin.env.render import Observation, Region
from mvvin.env.scene import NUM_ACTIONS, Action, OBJECT_CLASSES

H = 1e-6
KINK_MARGIN = 1e-3
TOLERANCE = 1e-4


def _ps(**arrays) -> ParamSet:
    return ParamSet({k: Tensor(np.asarray(v, dtype=float), requires_grad=True) for k, v in arrays.items()})


def _lstm(m, n, rng, scale=0.5):
    return {"w_ih": rng.normal(0, scale, (m, 4 * n)), "w_hh": rng.normal(0, scale, (n, 4 * n)), "b": rng.normal(0, scale, 4 * n)}


CASES = {}


def case(fn):
    CASES[fn.__name__.removesuffix("_case")] = fn
    return fn


@case
def linear_case(rng):
    d0, k = (int(v) for v in rng.integers(1, 8, size=2))
    ps = _ps(F=rng.normal(size=d0), W=rng.normal(size=(d0, k)), B=rng.normal(size=k))
    return ps, lambda q: ops.sum(ops.square(ops.linear_apply(q["F"], q["W"], q["B"])))


@case
def conv_case(rng):
    c, k = (int(v) for v in rng.integers(1, 4, size=2))
    h, w = (int(v) for v in rng.integers(3, 8, size=2))
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    s = tuple(int(v) for v in rng.integers(1, 3, size=2))
    ps = _ps(x=rng.normal(size=(c, h, w)), K=rng.normal(size=(k, c, kh, kw)), b=rng.normal(size=k))
    return ps, lambda q: ops.sum(ops.square(ops.conv2d_apply(q["x"], q["K"], s, activate=True, bias=q["b"])))


@case
def relu_case(rng):
    n = int(rng.integers(1, 8))
    ps = _ps(x=rng.normal(size=n), w=rng.normal(size=n))
    return ps, lambda q: ops.sum(ops.mul(ops.relu(q["x"]), q["w"]))


@case
def softmax_case(rng):
    n = int(rng.integers(1, 8))
    ps = _ps(x=rng.normal(size=n), w=rng.normal(size=n))
    return ps, lambda q: ops.sum(ops.mul(ops.softmax(q["x"]), q["w"]))


@case
def log_softmax_case(rng):
    n = int(rng.integers(1, 8))
    ps = _ps(x=rng.normal(size=(2, n)), w=rng.normal(size=(2, n)))
    return ps, lambda q: ops.sum(ops.mul(ops.log_softmax(q["x"]), q["w"]))


@case
def lstm_case(rng):
    m, n = (int(v) for v in rng.integers(1, 6, size=2))
    ps = _ps(x=rng.normal(size=m), h=rng.uniform(-0.9, 0.9, n), c=rng.normal(size=n), **_lstm(m, n, rng))
    wh, wc = rng.normal(size=n), rng.normal(size=n)

    def f(q):
        h, c = ops.lstm_cell_apply(q["x"], q["h"], q["c"], q)
        return ops.add(ops.sum(ops.mul(h, wh)), ops.sum(ops.mul(c, wc)))

    return ps, f


@case
def elementwise_case(rng):
    n = int(rng.integers(1, 8))
    ps = _ps(a=rng.normal(size=n), b=rng.uniform(0.5, 2.0, size=n), m=rng.normal(size=(n, n)))
    return ps, lambda q: ops.sum(
        ops.add(
            ops.mul(ops.tanh(q["a"]), ops.log(q["b"])),
            ops.sub(ops.sigmoid(ops.matmul(q["m"], q["a"])), ops.mean(ops.exp(ops.mul(q["b"], 0.3)))),
        )
    )


@case
def shape_ops_case(rng):
    k = int(rng.integers(1, 5))
    ps = _ps(v=rng.normal(size=k), m=rng.normal(size=(2, 3, 3)), w=rng.normal(size=(k + 2) * 9))

    def f(q):
        tiled = ops.concat([ops.tile_map(q["v"], 3, 3), q["m"]], axis=0)
        moved = ops.transpose(tiled, (2, 0, 1))
        return ops.add(ops.sum(ops.mul(ops.flatten(ops.transpose(moved, (1, 2, 0))), q["w"])), ops.mean(ops.index(q["m"], (slice(0, 1),))))

    return ps, f


# ---------------------------------------------------------------- composites


def tiny_config(enabled=("rgb", "depth", "segmentation", "region_feature", "region_proposal")):
    from mvvin import config

    return config.from_dict(
        {
            "env": {"depth_shape": [3, 4], "rgb_shape": [2, 1, 1], "seg_dim": 3, "region_dim": 3, "max_steps": 4},
            "modalities": {
                "enabled": list(enabled),
                "grid": [1, 1],
                "rgb": {"kind": "conv", "layers": [[2, 1, 1, 1, 1]]},
                "depth": {"kind": "conv", "layers": [[2, 2, 2, 1, 2], [2, 2, 2, 1, 1]]},
                "segmentation": {"kind": "linear", "layers": [[2]]},
                "region_feature": {"kind": "linear", "layers": [[2]]},
                "region_proposal": {"kind": "linear", "layers": [[2]]},
                "target": {"kind": "linear", "layers": [[2]]},
                "action": {"kind": "linear", "layers": [[2]]},
                "attention_hidden": 2,
                "aggregate_channels": 2,
            },
            "model": {"hidden_size": 2, "target_dim": 3, "head_gain": 1.0},
            "meta": {"k": 2, "phi_channels": [2, 2], "phi_widths": [2, 2]},
        }
    )


def random_observation(rng, cfg) -> Observation:
    e = cfg.env
    n_reg = int(rng.integers(0, 4))
    regions = tuple(
        Region(str(OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))]), rng.normal(size=e.region_dim), rng.uniform(0, 1, 4), float(c), 1 / float(c) - 1)
        for c in sorted(rng.uniform(0.2, 0.9, n_reg), reverse=True)
    )
    seg = rng.dirichlet(np.ones(e.seg_dim)) * 0.9
    return Observation(rng.normal(size=tuple(e.rgb_shape)), rng.uniform(0.1, 2.0, tuple(e.depth_shape)), seg, regions)


@dataclass
class _Ep:
    obs: list
    prev_actions: list
    target_vec: np.ndarray


def _network_case(rng, steps: int = 2):
    from mvvin.meta import actor_critic_loss
    from mvvin.policy import init_network, network_spec_from_config, replay

    cfg = tiny_config()
    spec = network_spec_from_config(cfg)
    params = init_network(spec, int(rng.integers(1 << 30)))
    for v in params.values():  # non-zero biases so no unit sits exactly on a kink
        v.data = v.data + rng.normal(0, 0.3, v.shape)
    obs = [random_observation(rng, cfg) for _ in range(steps)]
    actions = [Action(int(a)) for a in rng.integers(NUM_ACTIONS, size=steps)]
    ep = _Ep(obs, [None] + actions[:-1], rng.normal(size=cfg.model.target_dim))
    rewards = list(rng.normal(size=steps))
    return cfg, spec, params, ep, actions, rewards, replay, actor_critic_loss


@case
def composite_case(rng):
    """Processors, attention, aggregation, LSTM, heads and the navigation loss together."""
    from mvvin.meta import discounted_returns

    cfg, spec, params, ep, actions, rewards, replay, actor_critic_loss = _network_case(rng)
    with no_grad():
        _, _, values, _ = replay(ep, params, spec)
    # the advantage is a stop-gradient quantity; freeze it at the base point
    adv = discounted_returns(rewards, 0.9) - np.array([v.data[0] for v in values])

    def f(q):
        _, logits, values, _ = replay(ep, q, spec)
        return actor_critic_loss(logits, values, actions, rewards, 0.9, 0.05, advantages=adv)

    return params, f


@case
def interaction_loss_case(rng):
    from mvvin.meta import init_phi, interaction_loss, phi_spec_for

    cfg, spec, params, ep, actions, rewards, replay, _ = _network_case(rng, steps=2)
    phi = init_phi(phi_spec_for(spec, (2, 2), (2, 2)), int(rng.integers(1 << 30)))
    for v in phi.values():
        v.data = v.data + rng.normal(0, 0.3, v.shape)
    both = ParamSet({**{f"theta.{k}": v for k, v in params.items()}, **{f"phi.{k}": v for k, v in phi.items()}})

    def f(q):
        hs, logits, _, _ = replay(ep, q.subset("theta"), spec)
        return interaction_loss(hs, logits, actions, q.subset("phi"))

    return both, f


def draw(name: str, rng, max_tries: int = 200):
    """A case instance whose ReLU inputs all stay at least ``KINK_MARGIN`` from zero."""
    for _ in range(max_tries):
        ps, f = CASES[name](rng)
        with no_grad(), ops.relu_margin() as box:
            f(ps)
        if box[0] > KINK_MARGIN:
            return ps, f
    raise RuntimeError(f"could not draw a kink-free instance of {name}")


@dataclass
class SuiteResult:
    name: str
    instances: int
    worst: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def run_case(name: str, instances: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        ps, f = draw(name, rng)
        worst = max(worst, grad_check(f, ps, h=H))
    return SuiteResult(name, instances, worst, time.perf_counter() - t0)


def run_suite(instances: int = 20, seed: int = 0) -> list[SuiteResult]:
    return [run_case(name, instances, seed) for name in CASES]
