"""Normal-Inverse-Wishart hierarchical strategy.

The server keeps a diagonal NIW posterior (m0, v0_diag, l0, n0) over the
global parameter distribution. Clients minimize a dropout cross-entropy plus
a quadratic pull toward m0 weighted by the posterior confidence; the server
refreshes (m0, v0) in closed form from the participants' means; global
prediction samples backbone weights from the induced multivariate Student-t.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn, optim

# guard for V0^{-1}: variances this small mean the posterior collapsed
V_MIN = 1e-8

PENALTY_MODES = ("literal", "normalized")


class VarianceFloorViolation(ValueError):
    pass


@dataclass(frozen=True)
class NiwHyperParams:
    """Fixed top-level prior: mean mu0*1, scale sigma0*I, strengths lambda0/nu0.

    nu0 defaults to d+2 (resolved at init time, the smallest value giving the
    inverse-Wishart a finite mean).
    """

    mu0: float = 0.0
    sigma0: float = 1.0
    lambda0: float = 1.0
    nu0: float | None = None

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")
        if self.sigma0 <= 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")

    def resolved_nu0(self, d: int) -> float:
        return float(d + 2) if self.nu0 is None else float(self.nu0)


@dataclass(frozen=True)
class NiwGlobalPosterior:
    m0: np.ndarray  # (d,)
    v0_diag: np.ndarray  # (d,) positive
    l0: float
    n0: float
    d: int

    def __post_init__(self):
        if self.m0.shape != (self.d,) or self.v0_diag.shape != (self.d,):
            raise ValueError(
                f"posterior vectors must have shape ({self.d},), got "
                f"{self.m0.shape} and {self.v0_diag.shape}"
            )
        if not np.all(self.v0_diag > 0):
            raise ValueError("v0_diag entries must be positive")
        if not self.n0 - self.d + 1 > 2:
            raise ValueError(
                f"predictive needs n0 - d + 1 > 2, got {self.n0 - self.d + 1}"
            )

    @property
    def t_dof(self) -> float:
        return self.n0 - self.d + 1


@dataclass(frozen=True)
class NiwClientPosterior:
    m_i: np.ndarray
    p_keep: float
    epsilon: float

    def __post_init__(self):
        if not 0 < self.p_keep <= 1:
            raise ValueError(f"p_keep must be in (0, 1], got {self.p_keep}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def niw_init(
    d: int, total_data_size: int, hyper: NiwHyperParams | None = None
) -> NiwGlobalPosterior:
    """Conjugacy-pre-estimated posterior: l0 = |D|+lambda0, n0 = |D|+nu0."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if total_data_size < 0:
        raise ValueError(f"total_data_size must be >= 0, got {total_data_size}")
    hyper = hyper or NiwHyperParams()
    return NiwGlobalPosterior(
        m0=np.full(d, hyper.mu0, dtype=np.float64),
        v0_diag=np.full(d, hyper.sigma0, dtype=np.float64),
        l0=total_data_size + hyper.lambda0,
        n0=total_data_size + hyper.resolved_nu0(d),
        d=d,
    )


def penalty_weight(
    global_post: NiwGlobalPosterior,
    p_keep: float,
    data_size: int,
    penalty_mode: str = "literal",
) -> np.ndarray:
    """Per-coordinate quadratic weight w so the penalty is (1/2)sum w (m-m0)^2.

    "literal": w = p (n0+d+1) / (|D_i| v0)  -- the full posterior-confidence
    coefficient. "normalized": drops the (n0+d+1) confidence factor, keeping
    the Mahalanobis geometry; used when the literal weight (which grows with
    the parameter count) would swamp the data term at fixed lr.
    """
    if penalty_mode not in PENALTY_MODES:
        raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")
    if data_size < 1:
        raise ValueError(f"data_size must be >= 1, got {data_size}")
    if np.any(global_post.v0_diag < V_MIN):
        raise VarianceFloorViolation(
            f"v0 entry below floor {V_MIN}: min={global_post.v0_diag.min()}"
        )
    scale = global_post.n0 + global_post.d + 1 if penalty_mode == "literal" else 1.0
    return (p_keep * scale / data_size) / global_post.v0_diag


def niw_client_loss_grad(
    client: NiwClientPosterior,
    batch: nn.Batch,
    global_post: NiwGlobalPosterior,
    data_size: int,
    arch: nn.MlpArch,
    rng: np.random.Generator | None = None,
    mask: nn.DropoutMask | None = None,
    penalty_mode: str = "literal",
) -> tuple[float, np.ndarray]:
    """Local objective value and gradient at m_i.

    loss = mean-CE(batch; mask applied to m_i)
         + (1/|D_i|) (p/2)(n0+d+1) sum_k (m_i - m0)^2_k / v0_k
    The CE gradient flows only through kept dropout groups; the penalty
    gradient covers all coordinates. One fresh mask is drawn from rng per
    call (pass `mask` explicitly to pin it, e.g. for finite-difference
    checks).
    """
    if mask is None:
        if rng is None:
            raise ValueError("either rng or mask must be provided")
        mask = nn.sample_dropout_mask(client.p_keep, arch, rng)
    ce_loss, grad = nn.loss_and_grad(client.m_i, arch, batch, mask)
    w = penalty_weight(global_post, client.p_keep, data_size, penalty_mode)
    diff = client.m_i - global_post.m0
    loss = ce_loss + 0.5 * float(w @ (diff * diff))
    grad = grad + w * diff
    return loss, grad


def niw_server_update(
    client_means: list[np.ndarray],
    global_post: NiwGlobalPosterior,
    n_clients: int,
    p_keep: float,
    epsilon: float,
) -> NiwGlobalPosterior:
    """Closed-form minimizer of the server objective (partial participation).

    m0* = (p/(N+1)) (N/N_f) sum_{i in I} m_i
    v0* = (n0/(N+d+2)) [(1+N eps^2) + m0*^2 + (N/N_f) sum_i rho_i], floored,
    with rho_i = p m_i^2 - 2 p m0* m_i + m0*^2 per coordinate. l0 and n0 stay
    frozen at their initialization values.
    """
    n_f = len(client_means)
    if n_f == 0:
        raise ValueError("participant list is empty")
    if n_f > n_clients:
        raise ValueError(f"N_f={n_f} exceeds N={n_clients}")
    n0, d = global_post.n0, global_post.d
    total = np.zeros(d)
    for m in client_means:
        total += m
    m0_new = (p_keep / (n_clients + 1)) * (n_clients / n_f) * total

    scatter = np.zeros(d)
    for m in client_means:
        scatter += p_keep * m * m - 2 * p_keep * m0_new * m + m0_new * m0_new
    v0_new = (n0 / (n_clients + d + 2)) * (
        (1 + n_clients * epsilon**2)
        + m0_new * m0_new
        + (n_clients / n_f) * scatter
    )
    v0_new = np.maximum(v0_new, V_MIN)
    return replace(global_post, m0=m0_new, v0_diag=v0_new)


def niw_server_objective(
    m0: np.ndarray,
    v0_diag: np.ndarray,
    client_means: list[np.ndarray],
    global_post: NiwGlobalPosterior,
    n_clients: int,
    p_keep: float,
    epsilon: float,
) -> float:
    """Explicit server objective (additive constants dropped).

    KL part:      (1/2)[ n0 sum 1/v0 + nu0 sum log v0 + n0 sum m0^2/v0 ]
    client part:  (N/N_f) sum_i [ (n0/2) sum (rho_i + eps^2)/v0 + (1/2) sum log v0 ]
    with nu0 = d+2; niw_server_update returns its exact minimizer.
    """
    n_f = len(client_means)
    n0, d = global_post.n0, global_post.d
    nu0 = d + 2.0
    inv_v = 1.0 / v0_diag
    log_v = np.log(v0_diag)
    value = 0.5 * (
        n0 * inv_v.sum() + nu0 * log_v.sum() + n0 * float(m0 @ (m0 * inv_v))
    )
    for m in client_means:
        rho = p_keep * m * m - 2 * p_keep * m0 * m + m0 * m0
        value += (n_clients / n_f) * (
            0.5 * n0 * float((rho + epsilon**2) @ inv_v) + 0.5 * log_v.sum()
        )
    return value


def niw_mode(global_post: NiwGlobalPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode: mu* = m0, Sigma* = V0 / (n0 + d + 2)."""
    return global_post.m0.copy(), global_post.v0_diag / (
        global_post.n0 + global_post.d + 2
    )


def predictive_scale(global_post: NiwGlobalPosterior) -> np.ndarray:
    """Diagonal scale of the Student-t predictive: (l0+1) V0 / (l0 (n0-d+1))."""
    l0 = global_post.l0
    return (l0 + 1) * global_post.v0_diag / (l0 * global_post.t_dof)


def niw_sample_global(
    global_post: NiwGlobalPosterior, rng: np.random.Generator
) -> np.ndarray:
    """One multivariate Student-t draw: m0 + sqrt(scale) * z * sqrt(nu/u).

    z is a standard normal per coordinate and u a single shared chi-square(nu)
    draw, nu = n0 - d + 1.
    """
    nu = global_post.t_dof
    if nu <= 0:
        raise ValueError(f"Student-t dof must be positive, got {nu}")
    z = rng.standard_normal(global_post.d)
    u = rng.chisquare(nu)
    return global_post.m0 + np.sqrt(predictive_scale(global_post)) * z * np.sqrt(
        nu / u
    )


def niw_global_predict(
    x_batch: np.ndarray,
    global_post: NiwGlobalPosterior,
    arch: nn.MlpArch,
    sample_count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Class probabilities averaged over S Student-t backbone draws."""
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    batch = nn.Batch(inputs=x_batch, labels=np.zeros(len(x_batch), dtype=np.int64))
    probs = np.zeros((x_batch.shape[0], arch.num_classes))
    for _ in range(sample_count):
        theta = niw_sample_global(global_post, rng)
        probs += nn.softmax(nn.forward(theta, arch, batch))
    return probs / sample_count


def niw_personalize(
    inputs: np.ndarray,
    labels: np.ndarray,
    global_post: NiwGlobalPosterior,
    arch: nn.MlpArch,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    p_keep: float = 1.0 - 0.001,
    batch_size: int = 50,
    penalty_mode: str = "literal",
    penalty_scale: float = 1.0,
) -> np.ndarray:
    """Fine-tune a personal mean on local data, head trainable.

    Same objective as the client update with 1/|D^p| downweighting of the
    penalty, warm-started at m0. `penalty_scale` multiplies the quadratic
    weight (used by tests to probe the strong-prior limit).
    """
    n = inputs.shape[0]
    if n < 1:
        raise ValueError("personal training data is empty")
    m = global_post.m0.copy()
    w = penalty_scale * penalty_weight(global_post, p_keep, n, penalty_mode)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = nn.Batch(inputs=inputs[idx], labels=labels[idx])
            mask = nn.sample_dropout_mask(p_keep, arch, rng)
            _, ce_grad = nn.loss_and_grad(m, arch, batch, mask)
            m = optim.prox_quadratic_step(m, ce_grad, lr, global_post.m0, w)
    return m
