"""Learned interaction loss, inner adaptation and first-order meta-gradients.

Per task the agent acts for k steps under theta, takes one SGD step on the
learned interaction loss L_int (which never sees rewards) and continues
under the adapted parameters; with ``readapt`` this repeats every k steps.
The outer objective is the actor-critic navigation loss over the whole
episode. Its theta-gradient treats the inner gradient as a constant
(first order). Its phi-gradient is -psi times a mixed second derivative of
L_int, contracted with the outer gradient at the adapted parameters and
evaluated by central differences of grad_phi L_int.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mvvin.autodiff import ParamSet, Tensor, backward_pass, enable_grad, no_grad, ops
from mvvin.autodiff.params import he_scaled_init
from mvvin.env.scene import NUM_ACTIONS
from mvvin.errors import ArgumentError, NumericError, OracleError
from mvvin.perception import param_seed
from mvvin.policy import MemoryState, NetworkSpec, Trajectory, Window, one_hot, replay

# ---------------------------------------------------------------- interaction loss net


@dataclass(frozen=True)
class PhiSpec:
    feature_dim: int
    channels: tuple[int, int] = (16, 16)
    widths: tuple[int, int] = (2, 2)

    def param_shapes(self):
        d, (c1, c2), (w1, w2) = self.feature_dim, self.channels, self.widths
        return [
            ("conv1.w", (c1, d, 1, w1), d * w1),
            ("conv1.b", (c1,), d * w1),
            ("conv2.w", (c2, c1, 1, w2), c1 * w2),
            ("conv2.b", (c2,), c1 * w2),
            ("head.w", (c2, 1), c2),
            ("head.b", (1,), c2),
        ]


def phi_spec_for(spec: NetworkSpec, channels=(16, 16), widths=(2, 2)) -> PhiSpec:
    return PhiSpec(spec.hidden_size + 2 * NUM_ACTIONS, tuple(channels), tuple(widths))


def init_phi(spec: PhiSpec, seed: int) -> ParamSet:
    params = ParamSet()
    for name, shape, fan in spec.param_shapes():
        if name.endswith(".b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            params[name] = he_scaled_init(shape, fan, np.random.default_rng(param_seed(seed, "phi." + name)))
    return params


def _causal_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    width = w.shape[3]
    if width > 1:
        pad = Tensor(np.zeros((x.shape[0], 1, width - 1)))
        x = ops.concat([pad, x], axis=2)
    return ops.conv2d_apply(x, w, stride=(1, 1), activate=True, bias=b)


def interaction_loss(hs: Sequence[Tensor], logits: Sequence[Tensor], actions: Sequence, phi: ParamSet) -> Tensor:
    """Two causal temporal convs over per-step [h, logits, onehot(a)], mean over time, linear head."""
    if not hs:
        raise ArgumentError("interaction loss needs at least one step")
    rows = [ops.concat([h, z, Tensor(one_hot(a))], axis=0) for h, z, a in zip(hs, logits, actions)]
    x = ops.transpose(ops.stack(rows), (1, 0))  # D x T
    x = ops.reshape(x, (x.shape[0], 1, x.shape[1]))
    x = _causal_conv(x, phi["conv1.w"], phi["conv1.b"])
    x = _causal_conv(x, phi["conv2.w"], phi["conv2.b"])
    pooled = ops.mean(ops.reshape(x, (x.shape[0], x.shape[2])), axis=1)
    return ops.reshape(ops.linear_apply(pooled, phi["head.w"], phi["head.b"], activate=False), (1,))


# ---------------------------------------------------------------- navigation loss


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def actor_critic_loss(logits: Sequence[Tensor], values: Sequence[Tensor], actions, rewards, gamma: float, beta: float, advantages=None) -> Tensor:
    """Sum over steps of -log pi(a) * adv + 0.5 (R - V)^2 - beta * H(pi), advantage detached.

    ``advantages`` replaces the detached ``R - V`` with fixed values; finite
    difference checks need that, since a perturbed V would otherwise move the
    advantage as well.
    """
    if len(logits) == 0:
        raise ArgumentError("navigation loss needs at least one step")
    T = len(logits)
    returns = discounted_returns(rewards, gamma)
    z = ops.stack(logits)  # T x A
    v = ops.reshape(ops.stack(values), (T,))
    logp = ops.log_softmax(z)
    idx = (np.arange(T), np.array([int(a) for a in actions]))
    logp_a = ops.index(logp, idx)
    adv = Tensor(returns - v.data if advantages is None else np.asarray(advantages, dtype=float))
    err = ops.sub(Tensor(returns), v)
    policy_term = ops.mul(ops.mul(logp_a, adv), -1.0)
    value_term = ops.mul(ops.square(err), 0.5)
    total = ops.sum(ops.add(policy_term, value_term))
    if beta:
        ent = ops.mul(ops.sum(ops.mul(ops.softmax(z), logp)), -1.0)
        total = ops.sub(total, ops.mul(ent, beta))
    return total


def navigation_loss(traj: Trajectory, gamma: float, beta: float) -> Tensor:
    if not traj.steps:
        raise ArgumentError("navigation loss needs a trajectory with at least one step")
    return actor_critic_loss(
        [s.logits for s in traj.steps],
        [s.value for s in traj.steps],
        [s.action for s in traj.steps],
        [s.reward for s in traj.steps],
        gamma,
        beta,
    )


# ---------------------------------------------------------------- inner adaptation


def leaf_copy(params: ParamSet | dict, requires_grad: bool = True) -> ParamSet:
    items = params.items() if isinstance(params, (ParamSet, dict)) else params
    return ParamSet({k: Tensor(np.array(v.data if isinstance(v, Tensor) else v), requires_grad=requires_grad) for k, v in items})


def inner_gradient(params: ParamSet | dict, inner_loss: Callable[[ParamSet], Tensor]) -> dict[str, np.ndarray]:
    """Gradient of ``inner_loss`` at the values of ``params`` (graph-free copies)."""
    with enable_grad():
        leaf = leaf_copy(params)
        loss = inner_loss(leaf)
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("interaction loss is not finite")
        backward_pass(loss)
    return leaf.grads()


def sgd_nodes(params: ParamSet, grads: dict[str, np.ndarray], psi: float) -> ParamSet:
    """theta' = theta - psi * g, as graph nodes whose backward passes gradients straight to theta."""
    return ParamSet({k: ops.sub(v, Tensor(psi * grads[k])) for k, v in params.items()})


def window_inner_loss(window: Window, spec: NetworkSpec, phi: ParamSet) -> Callable[[ParamSet], Tensor]:
    def f(theta: ParamSet) -> Tensor:
        init = MemoryState(Tensor(window.init_h), Tensor(window.init_c))
        hs, logits, _, _ = replay(window, theta, spec, init)
        return interaction_loss(hs, logits, window.actions, phi)

    return f


def inner_adapt(params: ParamSet, window: Window, phi: ParamSet, psi: float, spec: NetworkSpec) -> ParamSet:
    """One SGD step on L_int over the window; ``params`` itself is left untouched."""
    phi_const = leaf_copy(phi, requires_grad=False)
    g = inner_gradient(params, window_inner_loss(window, spec, phi_const))
    return sgd_nodes(params, g, psi)


# ---------------------------------------------------------------- generic meta-gradients


OuterLoss = Callable[[ParamSet, ParamSet], Tensor]


def first_order_meta_grad(params: ParamSet | dict, inner_loss, outer_loss: OuterLoss, psi: float) -> dict[str, np.ndarray]:
    """d/dtheta of outer(theta, theta') with theta' = theta - psi * grad inner, inner gradient held constant."""
    theta = leaf_copy(params)
    g = inner_gradient(theta, inner_loss)
    with enable_grad():
        adapted = sgd_nodes(theta, g, psi)
        backward_pass(outer_loss(theta, adapted))
    return theta.grads()


def meta_objective(params: ParamSet | dict, inner_loss, outer_loss: OuterLoss, psi: float) -> float:
    theta = leaf_copy(params, requires_grad=False)
    g = inner_gradient(theta, inner_loss)
    with no_grad():
        adapted = sgd_nodes(theta, g, psi)
        return outer_loss(theta, adapted).item()


def exact_meta_gradient_oracle(params: ParamSet | dict, inner_loss, outer_loss: OuterLoss, psi: float, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of theta -> outer(theta, theta - psi * grad inner(theta))."""
    base = leaf_copy(params, requires_grad=False)
    f0 = meta_objective(base, inner_loss, outer_loss, psi)
    if meta_objective(base, inner_loss, outer_loss, psi) != f0:
        raise OracleError("meta objective is not deterministic; fix the rollout seed or use argmax")
    flat = base.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        vals = []
        for sgn in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += sgn * h
            vals.append(meta_objective(base.unflatten(pert), inner_loss, outer_loss, psi))
        if not all(np.isfinite(vals)):
            raise NumericError(f"meta objective not finite at coordinate {i}")
        grad[i] = (vals[0] - vals[1]) / (2 * h)
    out, pos = {}, 0
    for k, v in base.items():
        out[k] = grad[pos : pos + v.size].reshape(v.shape)
        pos += v.size
    return out


# ---------------------------------------------------------------- trajectory objective


@dataclass
class FixedEpisode:
    """Observations, actions and rewards of a recorded episode, replayable under any parameters."""

    obs: list
    prev_actions: list
    actions: list
    rewards: list
    target_vec: np.ndarray
    k: int
    readapt: bool

    @classmethod
    def from_trajectory(cls, traj: Trajectory, target_vec: np.ndarray, k: int, readapt: bool, adapted: bool = True) -> "FixedEpisode":
        return cls(
            [s.obs for s in traj.steps],
            [s.prev_action for s in traj.steps],
            [s.action for s in traj.steps],
            [s.reward for s in traj.steps],
            target_vec,
            k if adapted else 10**9,
            readapt,
        )


def episode_replay(theta: ParamSet, ep: FixedEpisode, spec: NetworkSpec, phi: ParamSet, psi: float):
    """Replay ``ep`` under theta, adapting after every k steps; returns (logits, values)."""
    phi_const = leaf_copy(phi, requires_grad=False)
    T = len(ep.actions)
    state = MemoryState.zeros(spec.hidden_size)
    current = theta
    logits, values = [], []
    start, adapted_once = 0, False
    while start < T:
        end = min(T, start + ep.k)
        chunk = _Chunk(ep.obs[start:end], ep.prev_actions[start:end], ep.target_vec)
        init = state
        hs, zs, vs, state = replay(chunk, current, spec, init)
        logits += zs
        values += vs
        if end < T and (ep.readapt or not adapted_once) and end - start == ep.k:
            win = Window({k: v.data for k, v in current.items()}, init.h.data, init.c.data, ep.target_vec, chunk.obs, chunk.prev_actions, ep.actions[start:end])
            g = inner_gradient(current, window_inner_loss(win, spec, phi_const))
            current = sgd_nodes(current, g, psi)
            adapted_once = True
        start = end
    return logits, values


def episode_nav_loss(theta: ParamSet, ep: FixedEpisode, spec: NetworkSpec, phi: ParamSet, psi: float, gamma: float, beta: float, advantages=None) -> Tensor:
    """Navigation loss of the replayed, adapted episode.

    Inner gradients enter as constants, which is the first-order reading under
    autodiff; the finite-difference oracle differentiates the same values as a
    function of theta. ``advantages`` pins the detached advantage term.
    """
    logits, values = episode_replay(theta, ep, spec, phi, psi)
    return actor_critic_loss(logits, values, ep.actions, ep.rewards, gamma, beta, advantages)


def episode_advantages(theta, ep: FixedEpisode, spec, phi, psi, gamma) -> np.ndarray:
    """Detached ``R - V`` of the replayed episode at ``theta``."""
    with no_grad():
        _, values = episode_replay(leaf_copy(theta, requires_grad=False), ep, spec, phi, psi)
    return discounted_returns(ep.rewards, gamma) - np.array([v.item() for v in values])


@dataclass
class _Chunk:
    obs: list
    prev_actions: list
    target_vec: np.ndarray


def episode_first_order_grad(theta, ep: FixedEpisode, spec, phi, psi, gamma, beta) -> dict[str, np.ndarray]:
    leaf = leaf_copy(theta)
    with enable_grad():
        backward_pass(episode_nav_loss(leaf, ep, spec, phi, psi, gamma, beta))
    return leaf.grads()


def episode_exact_oracle(theta, ep: FixedEpisode, spec, phi, psi, gamma, beta, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Finite-difference meta-gradient of the replayed episode objective.

    Advantages are frozen at the base point so the oracle and autodiff agree on
    what is treated as a constant.
    """
    base = leaf_copy(theta, requires_grad=False)
    adv = episode_advantages(base, ep, spec, phi, psi, gamma)

    def f(p: ParamSet) -> float:
        with no_grad():
            return episode_nav_loss(p, ep, spec, phi, psi, gamma, beta, adv).item()

    f0 = f(base)
    if f(base) != f0:
        raise OracleError("episode objective is not deterministic")
    flat = base.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (f(base.unflatten(hi)) - f(base.unflatten(lo))) / (2 * h)
    out, pos = {}, 0
    for k, v in base.items():
        out[k] = grad[pos : pos + v.size].reshape(v.shape)
        pos += v.size
    return out


# ---------------------------------------------------------------- phi gradients


def phi_grad_from_window(window: Window, spec: NetworkSpec, phi: ParamSet, theta_values: dict, ) -> dict[str, np.ndarray]:
    """grad_phi L_int on the window with theta fixed at ``theta_values``."""
    with enable_grad():
        leaf_phi = leaf_copy(phi)
        theta = leaf_copy(theta_values, requires_grad=False)
        loss = window_inner_loss(window, spec, leaf_phi)(theta)
        backward_pass(loss)
    return leaf_phi.grads()


def phi_meta_grad(windows: Sequence[Window], outer_grads: Sequence[dict], spec: NetworkSpec, phi: ParamSet, psi: float, fd_eps: float) -> dict[str, np.ndarray]:
    """sum_m -psi * d/dphi [grad_theta L_int(theta_m; phi) . v_m] by central differences along v_m."""
    total = {k: np.zeros_like(v.data) for k, v in phi.items()}
    for win, v in zip(windows, outer_grads):
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in v.values())))
        if norm == 0.0 or psi == 0.0:
            continue
        eps = fd_eps / norm
        plus = {k: win.params[k] + eps * v[k] for k in win.params}
        minus = {k: win.params[k] - eps * v[k] for k in win.params}
        gp = phi_grad_from_window(win, spec, phi, plus)
        gm = phi_grad_from_window(win, spec, phi, minus)
        for k in total:
            total[k] = total[k] - psi * (gp[k] - gm[k]) / (2 * eps)
    return total


def phi_imitation_grad(windows: Sequence[Window], spec: NetworkSpec, phi: ParamSet, nav_loss_value: float) -> dict[str, np.ndarray]:
    """Gradient of mean_m (L_int(window_m) - L_nav)^2 with respect to phi."""
    total = {k: np.zeros_like(v.data) for k, v in phi.items()}
    if not windows:
        return total
    with enable_grad():
        leaf_phi = leaf_copy(phi)
        terms = []
        for win in windows:
            theta = leaf_copy(win.params, requires_grad=False)
            li = window_inner_loss(win, spec, leaf_phi)(theta)
            terms.append(ops.square(ops.sub(li, Tensor([nav_loss_value]))))
        loss = ops.mul(ops.sum(ops.concat(terms, axis=0)), 1.0 / len(terms))
        backward_pass(loss)
    return leaf_phi.grads()
