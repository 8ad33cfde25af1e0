"""Loss terms for both distillation stages.

All losses take the student-side tensor first and the teacher-side tensor
second. Teacher tensors are detached inside every loss, so no gradient ever
reaches them regardless of their ``requires_grad`` flag. Every loss is
averaged over the batch so its magnitude does not depend on batch size.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from dait.errors import ContractError, DegenerateInputError

DEFAULT_TEMPERATURE = 2.0
KL_ORDERS = ("as_printed", "teacher_first")


def _check_same_shape(name: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ContractError(
            f"{name}: student shape {tuple(a.shape)} != teacher shape {tuple(b.shape)}"
        )


def _check_temperature(T: float):
    if not T > 0:
        raise ContractError(f"temperature must be positive, got {T}")


def cosine_matrix(features: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every feature row against every anchor row.

    Args:
        features: ``(B, D)`` image embeddings.
        anchors: ``(N, D)`` class anchor embeddings.

    Returns:
        ``(B, N)`` tensor of cosines.

    Raises:
        DegenerateInputError: if a feature or anchor row has zero norm.
    """
    if features.ndim != 2 or anchors.ndim != 2:
        raise ContractError("cosine_matrix expects 2-D features and anchors")
    if features.shape[1] != anchors.shape[1]:
        raise ContractError(
            f"feature dim {features.shape[1]} != anchor dim {anchors.shape[1]}"
        )
    f_norm = features.norm(dim=1)
    a_norm = anchors.norm(dim=1)
    for label, norms in (("feature", f_norm), ("anchor", a_norm)):
        zero = (norms == 0).nonzero()
        if len(zero):
            raise DegenerateInputError(f"{label} row {int(zero[0])} has zero norm")
    return (features @ anchors.T) / (f_norm[:, None] * a_norm[None, :])


def _tempered_kl(
    student: torch.Tensor, teacher: torch.Tensor, T: float, kl_order: str
) -> torch.Tensor:
    if kl_order not in KL_ORDERS:
        raise ContractError(f"kl_order must be one of {KL_ORDERS}, got {kl_order!r}")
    log_p = F.log_softmax(student / T, dim=1)
    log_q = F.log_softmax(teacher.detach() / T, dim=1)
    if kl_order == "as_printed":
        # KL(student || teacher)
        kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)
    else:
        kl = (log_q.exp() * (log_q - log_p)).sum(dim=1)
    return T * T * kl.mean()


def sia_loss(
    cos_student: torch.Tensor,
    cos_teacher: torch.Tensor,
    T: float = DEFAULT_TEMPERATURE,
    kl_order: str = "as_printed",
) -> torch.Tensor:
    """Semantic image alignment: tempered KL between class-cosine distributions.

    Args:
        cos_student: ``(B, N)`` cosines of intermediate features to anchors.
        cos_teacher: ``(B, N)`` cosines of projected VLM features to anchors.
        T: Softmax temperature; the result is scaled by ``T**2``.
        kl_order: ``"as_printed"`` computes KL(student || teacher),
            ``"teacher_first"`` the conventional KL(teacher || student).
    """
    _check_same_shape("sia_loss", cos_student, cos_teacher)
    _check_temperature(T)
    return _tempered_kl(cos_student, cos_teacher, T, kl_order)


def logit_kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    T: float = DEFAULT_TEMPERATURE,
    kl_order: str = "as_printed",
) -> torch.Tensor:
    """Tempered logit KL used by the logit-mode (DAIT-L) second stage."""
    _check_same_shape("logit_kd_loss", student_logits, teacher_logits)
    _check_temperature(T)
    return _tempered_kl(student_logits, teacher_logits, T, kl_order)


def ira_loss(z_tilde: torch.Tensor, z_v: torch.Tensor) -> torch.Tensor:
    """Image representation alignment: mean absolute difference over (B, D)."""
    _check_same_shape("ira_loss", z_tilde, z_v)
    return (z_tilde - z_v.detach()).abs().mean()


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``logits`` (B, N) against integer ``labels`` (B,)."""
    n = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise ContractError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    log_probs = F.log_softmax(logits, dim=1)
    return -log_probs.gather(1, labels.long()[:, None]).mean()


def sra_loss(z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Spatial representation alignment between ``(B, D, H, W)`` maps.

    Squared L2 distance over channels at each site, averaged over the H*W
    sites and then over the batch. Channels are summed, not averaged.
    """
    _check_same_shape("sra_loss", z_s, z_t)
    if z_s.ndim != 4:
        raise ContractError(f"sra_loss expects 4-D maps, got shape {tuple(z_s.shape)}")
    return (z_s - z_t.detach()).pow(2).sum(dim=1).mean()


def _check_lam(lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")


def stage1_weights(lam: float) -> tuple[float, float, float]:
    """Coefficients ``(cls, sia, ira)`` of the first-stage objective."""
    _check_lam(lam)
    half = (1.0 - lam) / 2.0
    return lam, half, half


def stage2_weights(lam: float) -> tuple[float, float]:
    """Coefficients ``(cls, distill)`` of the second-stage objective."""
    _check_lam(lam)
    return lam, 1.0 - lam


def stage1_total(sia, ira, cls, lam: float):
    w_cls, w_half, _ = stage1_weights(lam)
    return w_cls * cls + w_half * (sia + ira)


def stage2_total(distill, cls, lam: float):
    w_cls, w_distill = stage2_weights(lam)
    return w_cls * cls + w_distill * distill
