"""Strategy dispatch: client update, aggregation, prediction, personalization.

Five strategies share one client optimizer, a forward-backward splitting
step: an explicit gradient step on the data term followed by the exact
proximal map of a per-step quadratic model of the penalty. For FedProx and
the NIW strategy the quadratic model is the penalty itself, so the step is
exact; the mixture strategy uses the Jensen majorizer of its log-sum-exp
penalty at the current iterate (center = responsibility-weighted prototype
average, curvature 1/(sigma^2 |D_i|)), which has the same gradient there.
With one prototype the majorizer is the FedProx penalty, so the K=1
reduction holds bit for bit. FedAvg has no penalty and takes plain SGD
steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import baselines, mixture, niw, nn, optim
from .rng import stream

STRATEGY_NAMES = ("niw", "mixture", "fedavg", "fedprox", "fedbabu")


@dataclass(frozen=True)
class ClientResult:
    client_id: int
    params: np.ndarray  # final local mean m_i
    loss: float  # mean training loss over the local steps
    beta: np.ndarray | None = None  # mixture gating parameters


def _epoch_batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Reshuffled minibatch index arrays, identical across strategies."""
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo : lo + batch_size]


def _restore_slice(new: np.ndarray, old: np.ndarray, keep: np.ndarray) -> np.ndarray:
    out = new.copy()
    out[keep] = old[keep]
    return out


class Strategy:
    """Interface each federated strategy implements."""

    name: str = ""

    def init_state(self, arch, init_params, config, total_data_size):
        raise NotImplementedError

    def client_update(
        self, state, client_id, inputs, labels, arch, config, lr, round_idx,
        retained=None,
    ) -> ClientResult:
        raise NotImplementedError

    def aggregate(self, state, results, config):
        """Returns (new state, logged server objective)."""
        raise NotImplementedError

    def restore_heads(self, new_state, prev_state, arch):
        """Copy head slices of mean-like vectors back from the previous state.

        Inductively pins every head at its round-0 value: floating-point
        averaging of N_f bit-identical heads is not exact, and the Bayesian
        aggregations shrink means, so body-update needs an explicit restore.
        """
        raise NotImplementedError

    def global_predict(self, state, x, arch, config, rng) -> np.ndarray:
        raise NotImplementedError

    def personalize(
        self, state, inputs, labels, arch, config, epochs, lr, rng
    ) -> np.ndarray:
        raise NotImplementedError


class FedAvgStrategy(Strategy):
    """Plain parameter averaging; also the base for FedProx and FedBABU."""

    name = "fedavg"

    def _mu(self, config) -> float:
        return 0.0

    def init_state(self, arch, init_params, config, total_data_size):
        return init_params.copy()

    def client_update(
        self, state, client_id, inputs, labels, arch, config, lr, round_idx,
        retained=None,
    ) -> ClientResult:
        m = state.copy()
        mu = self._mu(config)
        head = nn.head_freeze_mask(arch) if config.body_update else None
        brng = stream(config.seed, "batch", client_id, round_idx)
        losses = []
        n = inputs.shape[0]
        for idx in _epoch_batches(n, config.batch_size, config.local_epochs, brng):
            batch = nn.Batch(inputs=inputs[idx], labels=labels[idx])
            ce, g = nn.loss_and_grad(m, arch, batch)
            if head is not None:
                g = g.copy()
                g[head] = 0.0
            if mu > 0.0:
                diff = m - state
                losses.append(ce + 0.5 * mu * float(diff @ diff))
                m = optim.prox_quadratic_step(m, g, lr, state, mu)
            else:
                losses.append(ce)
                m = nn.sgd_step(m, g, lr)
        return ClientResult(client_id=client_id, params=m, loss=float(np.mean(losses)))

    def aggregate(self, state, results, config):
        new = baselines.fedavg_aggregate([r.params for r in results])
        return new, float(np.mean([r.loss for r in results]))

    def restore_heads(self, new_state, prev_state, arch):
        return _restore_slice(new_state, prev_state, nn.head_freeze_mask(arch))

    def global_predict(self, state, x, arch, config, rng):
        batch = nn.Batch(inputs=x, labels=np.zeros(len(x), dtype=np.int64))
        return nn.softmax(nn.forward(state, arch, batch))

    def personalize(self, state, inputs, labels, arch, config, epochs, lr, rng):
        m = state.copy()
        n = inputs.shape[0]
        for idx in _epoch_batches(n, config.batch_size, epochs, rng):
            batch = nn.Batch(inputs=inputs[idx], labels=labels[idx])
            _, g = nn.loss_and_grad(m, arch, batch)
            m = nn.sgd_step(m, g, lr)
        return m


class FedProxStrategy(FedAvgStrategy):
    name = "fedprox"

    def _mu(self, config) -> float:
        return config.mu_prox


class FedBabuStrategy(FedAvgStrategy):
    """FedAvg with the body-update flag forced on (head frozen in training)."""

    name = "fedbabu"


class NiwStrategy(Strategy):
    name = "niw"

    def init_state(self, arch, init_params, config, total_data_size):
        post = niw.niw_init(nn.param_count(arch), total_data_size)
        # the broadcast starting point is the usual random network init; the
        # prior location only enters through the server update's shrinkage
        return replace(post, m0=init_params.copy())

    def client_update(
        self, state, client_id, inputs, labels, arch, config, lr, round_idx,
        retained=None,
    ) -> ClientResult:
        n = inputs.shape[0]
        w = niw.penalty_weight(state, config.p_keep, n, config.penalty_mode)
        m0 = state.m0
        m = m0.copy()
        head = nn.head_freeze_mask(arch) if config.body_update else None
        brng = stream(config.seed, "batch", client_id, round_idx)
        mrng = stream(config.seed, "mask", client_id, round_idx)
        full = nn.full_mask(arch)
        losses = []
        for idx in _epoch_batches(n, config.batch_size, config.local_epochs, brng):
            batch = nn.Batch(inputs=inputs[idx], labels=labels[idx])
            mask = (
                full
                if config.p_keep >= 1.0
                else nn.sample_dropout_mask(config.p_keep, arch, mrng)
            )
            ce, g = nn.loss_and_grad(m, arch, batch, mask)
            diff = m - m0
            losses.append(ce + 0.5 * float(w @ (diff * diff)))
            if head is not None:
                g = g.copy()
                g[head] = 0.0
            m = optim.prox_quadratic_step(m, g, lr, m0, w)
        return ClientResult(client_id=client_id, params=m, loss=float(np.mean(losses)))

    def aggregate(self, state, results, config):
        means = [r.params for r in results]
        new = niw.niw_server_update(
            means, state, config.n_clients, config.p_keep, config.epsilon
        )
        obj = niw.niw_server_objective(
            new.m0, new.v0_diag, means, state, config.n_clients,
            config.p_keep, config.epsilon,
        )
        return new, obj

    def restore_heads(self, new_state, prev_state, arch):
        m0 = _restore_slice(new_state.m0, prev_state.m0, nn.head_freeze_mask(arch))
        return replace(new_state, m0=m0)

    def global_predict(self, state, x, arch, config, rng):
        return niw.niw_global_predict(x, state, arch, config.sample_count, rng)

    def personalize(self, state, inputs, labels, arch, config, epochs, lr, rng):
        return niw.niw_personalize(
            inputs, labels, state, arch, epochs, lr, rng,
            p_keep=config.p_keep, batch_size=config.batch_size,
            penalty_mode=config.penalty_mode,
        )


class MixtureStrategy(Strategy):
    name = "mixture"

    def init_state(self, arch, init_params, config, total_data_size):
        protos = tuple(
            init_params
            + 0.01 * stream(config.seed, "proto", j).normal(size=init_params.size)
            for j in range(config.k_prototypes)
        )
        gating_arch = nn.MlpArch((*arch.layer_sizes[:-1], config.k_prototypes))
        gating = nn.init_params(gating_arch, stream(config.seed, "gating"))
        return mixture.MixtureGlobalPosterior(
            prototypes=protos,
            sigma_sq=config.sigma_sq,
            epsilon=config.epsilon,
            gating=gating,
            gating_arch=gating_arch,
        )

    def _start(self, state, inputs, labels, arch, config, retained):
        if config.mixture_client_init == "retained" and retained is not None:
            return retained.copy()
        batch = nn.Batch(inputs=inputs, labels=labels)
        scores = [nn.loss_and_grad(r, arch, batch)[0] for r in state.prototypes]
        return state.prototypes[int(np.argmin(scores))].copy()

    def client_update(
        self, state, client_id, inputs, labels, arch, config, lr, round_idx,
        retained=None,
    ) -> ClientResult:
        n = inputs.shape[0]
        m = self._start(state, inputs, labels, arch, config, retained)
        head = nn.head_freeze_mask(arch) if config.body_update else None
        quad = 1.0 / (state.sigma_sq * n)
        brng = stream(config.seed, "batch", client_id, round_idx)
        losses = []
        for idx in _epoch_batches(n, config.batch_size, config.local_epochs, brng):
            batch = nn.Batch(inputs=inputs[idx], labels=labels[idx])
            ce, g = nn.loss_and_grad(m, arch, batch)
            pen, _ = mixture.mix_penalty(m, state.prototypes, state.sigma_sq)
            losses.append(ce + pen / n)
            # majorizer center: responsibility-weighted prototype average
            wts = mixture.prototype_weights(m, state.prototypes, state.sigma_sq)
            center = np.zeros_like(m)
            for j, r in enumerate(state.prototypes):
                center += wts[j] * r
            if head is not None:
                g = g.copy()
                g[head] = 0.0
            m = optim.prox_quadratic_step(m, g, lr, center, quad)
        # gating learns to route this client's inputs to its nearest prototype
        beta = state.gating
        grng = stream(config.seed, "gate", client_id, round_idx)
        for idx in _epoch_batches(n, config.batch_size, 1, grng):
            beta = mixture.gating_local_update(
                beta, state.gating_arch, inputs[idx], m, state.prototypes, lr,
                head_frozen=config.body_update,
            )
        return ClientResult(
            client_id=client_id, params=m, loss=float(np.mean(losses)), beta=beta
        )

    def aggregate(self, state, results, config):
        means = [r.params for r in results]
        c = mixture.mix_e_step(means, state.prototypes, state.sigma_sq)
        protos = mixture.mix_m_step(means, c, state.sigma_sq, config.n_clients)
        beta = baselines.fedavg_aggregate([r.beta for r in results])
        new = replace(state, prototypes=protos, gating=beta)
        obj = mixture.mix_server_objective(protos, means, state.sigma_sq)
        return new, obj

    def restore_heads(self, new_state, prev_state, arch):
        keep = nn.head_freeze_mask(arch)
        protos = tuple(
            _restore_slice(new, old, keep)
            for new, old in zip(new_state.prototypes, prev_state.prototypes)
        )
        gkeep = nn.head_freeze_mask(new_state.gating_arch)
        gating = _restore_slice(new_state.gating, prev_state.gating, gkeep)
        return replace(new_state, prototypes=protos, gating=gating)

    def global_predict(self, state, x, arch, config, rng):
        return mixture.mix_global_predict(x, state, arch)

    def personalize(self, state, inputs, labels, arch, config, epochs, lr, rng):
        return mixture.mix_personalize(
            inputs, labels, state, arch, epochs, lr, rng,
            batch_size=config.batch_size, warm_start=config.warm_start,
        )


STRATEGIES: dict[str, Strategy] = {
    s.name: s
    for s in (
        NiwStrategy(),
        MixtureStrategy(),
        FedAvgStrategy(),
        FedProxStrategy(),
        FedBabuStrategy(),
    )
}
