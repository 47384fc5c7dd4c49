"""The online pre-training objectives and the kappa-blended fine-tuning policy losses."""

from __future__ import annotations

import numpy as np

from ..backbones import (
    ActorLoss, AwrLoss, BackboneConfig, CriticPair, GaussianPolicy, advantage_weights,
    critic_loss, iql_advantages, iql_q_loss, iql_v_loss,
)
from ..diffcore import GradVector, ParamVector, meta_grad
from ..replay import Batch


def online_pretrain_objective(psi: CriticPair, off_batch: Batch, on_batch: Batch,
                              policy: ParamVector, alpha: float, cfg: BackboneConfig,
                              rng: np.random.Generator | None = None,
                              mode: str = "exact") -> tuple[float, list[GradVector]]:
    """Meta-adaptation loss L_off(psi) + L_on(psi - alpha * grad L_off(psi)) for each critic.

    Both TD losses bootstrap from the pair's target networks and the frozen
    policy.  The twin critics are separable, so the objective and its gradient
    decompose per network.  ``rng`` drives target-policy smoothing (``None``
    turns it off).
    """
    off = critic_loss(psi, policy, off_batch, cfg, rng).network_loss()
    on = critic_loss(psi, policy, on_batch, cfg, rng).network_loss()
    total, grads = 0.0, []
    for net in psi.online:
        value, g = meta_grad(net, off, on, alpha, mode)
        total += value
        grads.append(g)
    return total, grads


def iql_pretrain_q_objective(q: CriticPair, v: ParamVector, off_batch: Batch, on_batch: Batch,
                             alpha: float, cfg: BackboneConfig,
                             mode: str = "exact") -> tuple[float, list[GradVector]]:
    off = iql_q_loss(q, v, off_batch, cfg).network_loss()
    on = iql_q_loss(q, v, on_batch, cfg).network_loss()
    total, grads = 0.0, []
    for net in q.online:
        value, g = meta_grad(net, off, on, alpha, mode)
        total += value
        grads.append(g)
    return total, grads


def iql_pretrain_v_objective(nu: ParamVector, q_target: CriticPair, off_batch: Batch, on_batch: Batch,
                             alpha: float, cfg: BackboneConfig,
                             mode: str = "exact") -> tuple[float, GradVector]:
    """Expectile-loss version of the meta-adaptation objective for V."""
    off = iql_v_loss(nu, q_target, off_batch, cfg)
    on = iql_v_loss(nu, q_target, on_batch, cfg)
    return meta_grad(nu, off, on, alpha, mode)


def finetune_policy_loss(policy: ParamVector, critic_off, critic_on, batch: Batch, kappa: float,
                         cfg: BackboneConfig | None = None) -> ActorLoss:
    """-mean[(1 - kappa) Q_off(s, pi(s)) + kappa Q_on(s, pi(s))].

    A term with zero weight is dropped entirely, so kappa = 1 never touches
    ``critic_off`` (which may then be ``None``).
    """
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa={kappa} violates 0 < kappa <= 1")
    cfg = cfg or BackboneConfig()
    terms = []
    if kappa < 1.0:
        if critic_off is None:
            raise ValueError("kappa < 1 needs an offline critic")
        terms.append((critic_off, 1.0 - kappa))
    if critic_on is None:
        raise ValueError("the blended loss needs an online pre-trained critic")
    terms.append((critic_on, kappa))
    return ActorLoss(batch.s, batch.a, tuple(terms), 0.0, cfg.max_action, cfg.policy_critic_mode)


def blended_advantages(q_off: CriticPair, v_off: ParamVector, q_on: CriticPair, v_on: ParamVector,
                       batch: Batch, kappa: float) -> np.ndarray:
    """kappa * A_on + (1 - kappa) * A_off, with kappa weighting the online pre-trained pair."""
    a_on = iql_advantages(q_on, v_on, batch)
    if kappa == 1.0:
        return a_on
    return kappa * a_on + (1.0 - kappa) * iql_advantages(q_off, v_off, batch)


def iql_finetune_policy_loss(policy: GaussianPolicy, q_off, v_off, q_on, v_on, batch: Batch,
                             kappa: float, beta: float, exp_clip: float = 10.0) -> AwrLoss:
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa={kappa} violates 0 < kappa <= 1")
    adv = blended_advantages(q_off, v_off, q_on, v_on, batch, kappa)
    return AwrLoss(batch.s, batch.a, advantage_weights(adv, beta, exp_clip))
