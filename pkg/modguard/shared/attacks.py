"""l2-constrained PGD attacks on the bare classifier, the HTRD and the two-fold baseline."""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch

from modguard.schemas.models import AttackConfig
from modguard.shared.errors import NonFiniteGradientError, ShapeMismatchError
from modguard.shared.nn import ArrayLike, Model, as_input, extract_features, feature_vjp, grads, loss_ce, one_hot
from modguard.shared.rejection import Autoencoder, SvmModel, reconstruction_mse, svm_input_gradient, svm_scores
from modguard.shared.seeding import derive_seed

logger = logging.getLogger(__name__)

MAX_HALVINGS = 20

Tensorish = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True, eq=False)
class AttackResult:
    """Final iterate of an attack; objective_trace has one entry per iteration used."""

    x_adv: np.ndarray
    iters_used: int
    success: bool
    objective_trace: Tuple[float, ...] = ()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttackResult):
            return NotImplemented
        return (
            np.array_equal(self.x_adv, other.x_adv)
            and self.iters_used == other.iters_used
            and self.success == other.success
            and self.objective_trace == other.objective_trace
        )


def _norm(v: Tensorish) -> float:
    if isinstance(v, torch.Tensor):
        return float(torch.linalg.vector_norm(v.to(torch.float64)))
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel()))


def project_l2(x_prime: Tensorish, x0: Tensorish, epsilon: float) -> Tensorish:
    """Closest point to x_prime in the l2 ball of radius epsilon around x0."""
    if tuple(x_prime.shape) != tuple(x0.shape):
        raise ShapeMismatchError(f"Cannot project {tuple(x_prime.shape)} onto ball around {tuple(x0.shape)}")
    if epsilon == 0:
        return x0.clone() if isinstance(x0, torch.Tensor) else np.array(x0, copy=True)
    delta = x_prime - x0
    norm = _norm(delta)
    if norm <= epsilon:
        return x_prime
    return x0 + delta * (epsilon / norm)


def project_l2_rows(x_prime: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Row-wise projection for a batch with per-row radii."""
    delta = (x_prime - x0).reshape(len(x0), -1)
    norms = torch.linalg.vector_norm(delta, dim=1)
    factor = torch.where(norms > eps, eps / torch.clamp(norms, min=torch.finfo(norms.dtype).tiny), 1.0)
    return x0 + (delta * factor[:, None]).reshape(x0.shape)


def _step(g: torch.Tensor, xi: float, normalize: bool) -> torch.Tensor:
    if not normalize:
        return xi * g
    norm = torch.linalg.vector_norm(g)
    if norm == 0:
        return torch.zeros_like(g)
    return xi * g / norm


def _check_finite(g: torch.Tensor, attack: str, iteration: int, label: int) -> None:
    if not torch.all(torch.isfinite(g)):
        raise NonFiniteGradientError(
            f"{attack}: non-finite input gradient at iteration {iteration} (frame label {label})"
        )


def _start(x0: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """x0, or a uniform draw from the ball when random_start is set."""
    if not cfg.random_start:
        return x0.clone()
    rng = np.random.default_rng(derive_seed(cfg.seed, "attack", "start"))
    direction = rng.standard_normal(x0.numel())
    direction /= np.linalg.norm(direction)
    radius = cfg.epsilon * rng.random() ** (1.0 / x0.numel())
    offset = torch.from_numpy(direction * radius).to(x0.dtype).reshape(x0.shape)
    return project_l2(x0 + offset, x0, cfg.epsilon)


def _result(x: torch.Tensor, iters: int, success: bool, trace) -> AttackResult:
    return AttackResult(
        x_adv=x.detach()[0].numpy().copy(),
        iters_used=iters,
        success=bool(success),
        objective_trace=tuple(float(v) for v in trace),
    )


def _label(model: Model, x: torch.Tensor) -> int:
    with torch.no_grad():
        logits, _ = model(x)
    return int(torch.argmax(logits, dim=1)[0])


def pgd_untargeted(m: Model, x: ArrayLike, y: int, cfg: AttackConfig) -> AttackResult:
    """Gradient ascent on loss_ce(f(x'), y) with projection onto the epsilon ball."""
    x0 = as_input(m, x)
    if cfg.epsilon == 0:
        return _result(x0, 0, _label(m, x0) != y, ())

    target = one_hot([y], m.num_outputs, m.dtype)
    x_adv = _start(x0, cfg)
    trace = []
    for it in range(cfg.max_iters):
        g = grads(m, x_adv, target, wrt_params=False).d_input
        _check_finite(g, "pgd_untargeted", it, y)
        x_adv = project_l2(x_adv + _step(g, cfg.xi, cfg.normalize_step), x0, cfg.epsilon)
        with torch.no_grad():
            logits, _ = m(x_adv)
            trace.append(float(loss_ce(logits, target)))
    return _result(x_adv, len(trace), _label(m, x_adv) != y, trace)


def pgd_batch(
    m: Model,
    x: torch.Tensor,
    target_dist: torch.Tensor,
    eps: torch.Tensor,
    steps: int,
    step_fraction: float,
) -> torch.Tensor:
    """
    Batched untargeted l2 PGD with per-row radii, used as the inner maximizer of training.

    Each row takes normalized ascent steps of eps_row * step_fraction on the
    cross-entropy against its own target distribution. Rows with eps == 0 are
    returned unchanged.
    """
    x0 = as_input(m, x).detach()
    eps = torch.as_tensor(eps, dtype=x0.dtype)
    active = eps > 0
    if not bool(torch.any(active)):
        return x0.clone()

    xi = (eps * step_fraction)[:, None, None]
    x_adv = x0.clone()
    for it in range(steps):
        # loss_ce averages over rows; the per-row normalization removes that scale
        g = grads(m, x_adv, target_dist, wrt_params=False).d_input
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradientError(f"pgd_batch: non-finite input gradient at step {it}")
        norms = torch.linalg.vector_norm(g.reshape(len(g), -1), dim=1)[:, None, None]
        direction = torch.where(norms > 0, g / torch.clamp(norms, min=torch.finfo(g.dtype).tiny), 0.0)
        x_adv = project_l2_rows(x_adv + xi * direction, x0, eps)
    return torch.where(active[:, None, None], x_adv, x0)


def _scores(m: Model, svm: SvmModel, x: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
    zeta = extract_features(m, x)[0]
    return zeta, svm_scores(svm, zeta)


def _psi(scores: np.ndarray, y: int) -> Tuple[float, int]:
    """s_y minus the best wrong-class score, and that class."""
    wrong = scores.copy()
    wrong[y] = -np.inf
    j = int(np.argmax(wrong))
    return float(scores[y] - scores[j]), j


def escapes_rejection(svm: SvmModel, scores: np.ndarray, y: int) -> bool:
    """Some wrong class outscores both the true class and the rejection score S0."""
    _, j = _psi(scores, y)
    return bool(scores[j] > max(scores[y], svm.threshold))


def htrd_objective(m: Model, svm: SvmModel, x: ArrayLike, y: int) -> float:
    """Psi(x) = s_y - max_{j != y} s_j on the features of x."""
    _, scores = _scores(m, svm, as_input(m, x))
    return _psi(scores, y)[0]


def attack_htrd(m: Model, svm: SvmModel, x: ArrayLike, y: int, cfg: AttackConfig) -> AttackResult:
    """
    Projected descent on Psi through the feature layer.

    Stops when Psi changes by at most tol, when the frame escapes the
    rejection rule, or after max_iters. A step that raises Psi by more than
    tol is retried at half the step size.
    """
    x0 = as_input(m, x)
    zeta, scores = _scores(m, svm, x0)
    if cfg.epsilon == 0:
        return _result(x0, 0, escapes_rejection(svm, scores, y), ())

    x_adv = _start(x0, cfg)
    zeta, scores = _scores(m, svm, x_adv)
    psi, j = _psi(scores, y)
    trace = []
    for it in range(cfg.max_iters):
        if escapes_rejection(svm, scores, y):
            break
        d_zeta = svm_input_gradient(svm, zeta, y) - svm_input_gradient(svm, zeta, j)
        g = feature_vjp(m, x_adv, d_zeta.reshape(m.feature_shape))
        _check_finite(g, "attack_htrd", it, y)

        xi = cfg.xi
        for _ in range(MAX_HALVINGS + 1):
            candidate = project_l2(x_adv - _step(g, xi, cfg.normalize_step), x0, cfg.epsilon)
            cand_zeta, cand_scores = _scores(m, svm, candidate)
            cand_psi, cand_j = _psi(cand_scores, y)
            if cand_psi <= psi + cfg.tol:
                break
            xi /= 2.0
        else:
            logger.debug(f"attack_htrd: no descent step after {MAX_HALVINGS} halvings at iteration {it}")
            break

        x_adv, zeta, scores, j = candidate, cand_zeta, cand_scores, cand_j
        trace.append(cand_psi)
        converged = abs(cand_psi - psi) <= cfg.tol
        psi = cand_psi
        if converged:
            break
    return _result(x_adv, len(trace), escapes_rejection(svm, scores, y), trace)


def _margin_head(y: int) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    def head(logits: torch.Tensor, _features: torch.Tensor) -> torch.Tensor:
        wrong = logits[0].clone()
        wrong[y] = -torch.inf
        return torch.max(wrong) - logits[0, y]

    return head


def _mse_gradient(h: Autoencoder, x: torch.Tensor) -> Tuple[torch.Tensor, float]:
    xin = as_input(h.model, x).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out, _ = h.model(xin)
        mse = torch.mean((out - xin.reshape(len(xin), -1)) ** 2)
        (g,) = torch.autograd.grad(mse, xin)
    return g.to(x.dtype), float(mse.detach())


def attack_twofold(
    g: Model,
    h: Autoencoder,
    x: ArrayLike,
    y: int,
    cfg: AttackConfig,
    ae_threshold: Optional[float] = None,
    grey_box: bool = False,
) -> AttackResult:
    """
    PGD against the retrained classifier g and detector h together.

    While g still predicts y, ascend the classification loss (logit margin or
    cross-entropy per cfg.twofold_loss). Once misclassified but flagged, descend
    the reconstruction error. Success requires a wrong label with an
    unflagged reconstruction error. The grey-box variant ignores h while
    generating and is judged against both.
    """
    threshold = h.threshold if ae_threshold is None else ae_threshold
    x0 = as_input(g, x)

    def joint(xa: torch.Tensor) -> bool:
        return _label(g, xa) != y and float(reconstruction_mse(h, xa)[0]) <= threshold

    if grey_box:
        res = pgd_untargeted(g, x0, y, cfg)
        return replace(res, success=joint(torch.from_numpy(res.x_adv).unsqueeze(0)))
    if cfg.epsilon == 0:
        return _result(x0, 0, joint(x0), ())

    target = one_hot([y], g.num_outputs, g.dtype)
    head = _margin_head(y) if cfg.twofold_loss == "margin" else None
    x_adv = _start(x0, cfg)
    trace = []
    for it in range(cfg.max_iters):
        if joint(x_adv):
            break
        if _label(g, x_adv) == y:
            res = grads(g, x_adv, target, head=head, wrt_params=False)
            _check_finite(res.d_input, "attack_twofold", it, y)
            x_adv = project_l2(x_adv + _step(res.d_input, cfg.xi, cfg.normalize_step), x0, cfg.epsilon)
            trace.append(res.value)
        else:
            grad, mse = _mse_gradient(h, x_adv)
            _check_finite(grad, "attack_twofold", it, y)
            x_adv = project_l2(x_adv - _step(grad, cfg.xi, cfg.normalize_step), x0, cfg.epsilon)
            trace.append(mse)
    return _result(x_adv, len(trace), joint(x_adv), trace)
