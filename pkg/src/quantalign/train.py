"""Loss definitions and the optimization loop.

Four loss kinds share one loop: next-token pretraining (which manufactures
the full-precision baseline), knowledge distillation against a frozen
teacher, plain preference alignment against a frozen reference, and its
quantization-aware variant where the policy is evaluated through fake
quantization and gradients reach the latent weights via the straight-
through identity.

Sequence log probabilities for preference losses are summed over response
tokens only; prompt tokens never contribute. The reference policy of the
quantization-aware loss is the frozen fake-quantized original model, so at
step zero the loss sits exactly at ln 2 with both rewards at zero.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .errors import CapacityError, ConfigError, NumericError
from .model import (
    GradientSet,
    ModelCheckpoint,
    forward_sequence,
)
from .prefs import PreferenceDataset, PreferenceTriplet
from .quant import QuantSpec, fake_quant_forward, quantized_names, ste_backward

LOSS_KINDS = ("qdpo", "dpo", "kd", "lm_pretrain")


@dataclass
class LossSpec:
    """What to compute in one loss evaluation; required fields vary by kind."""

    kind: str
    beta: float = 0.1
    triplet: Optional[PreferenceTriplet] = None
    teacher: Optional[ModelCheckpoint] = None
    reference: Optional[ModelCheckpoint] = None
    tokens: Optional[Sequence[int]] = None
    quant_spec: Optional[QuantSpec] = None

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind in ("qdpo", "dpo"):
            if self.triplet is None:
                raise ConfigError(f"{self.kind} requires a preference triplet")
            if self.beta <= 0:
                raise ConfigError("beta must be positive")
        if self.kind == "qdpo" and self.quant_spec is None:
            raise ConfigError("qdpo requires a quant spec")
        if self.kind == "dpo" and self.reference is None:
            raise ConfigError("dpo requires a reference checkpoint")
        if self.kind == "kd" and (self.teacher is None or self.tokens is None):
            raise ConfigError("kd requires a teacher and tokens")
        if self.kind == "lm_pretrain" and self.tokens is None:
            raise ConfigError("lm_pretrain requires tokens")


@dataclass
class TrainConfig:
    # Alignment-stage defaults, validated on the seeded desk-scale run:
    # larger rates make the preference loss collapse the policy (loss
    # reaches zero while generations degrade).
    learning_rate: float = 2e-6
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"  # AdamW(b1=0.9, b2=0.999, eps=1e-8, weight decay 0)
    eval_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("steps, batch_size, and eval_every must be positive")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "eval_every": self.eval_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class RewardLogRow:
    step: int
    loss: float
    chosen_reward: float
    rejected_reward: float

    @property
    def margin(self) -> float:
        return self.chosen_reward - self.rejected_reward


REWARD_LOG_HEADER = "step,loss,chosen_reward,rejected_reward,margin"


def format_reward_row(row: RewardLogRow) -> str:
    return (
        f"{row.step},{row.loss:.10g},{row.chosen_reward:.10g},"
        f"{row.rejected_reward:.10g},{row.margin:.10g}"
    )


def write_reward_log(rows: Sequence[RewardLogRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(REWARD_LOG_HEADER + "\n")
        for r in rows:
            f.write(format_reward_row(r) + "\n")


# ---------------------------------------------------------------------------
# Differentiable building blocks
# ---------------------------------------------------------------------------


def _leaf_params(ckpt: ModelCheckpoint, dtype=None) -> Dict[str, torch.Tensor]:
    return {
        k: v.detach().to(dtype or v.dtype).clone().requires_grad_(True)
        for k, v in ckpt.params.items()
    }


def _fake_quant_leaves(
    latent: ModelCheckpoint, spec: QuantSpec
) -> Tuple[Dict[str, torch.Tensor], List[str]]:
    """Forward weights as fresh leaves: fake-quant values for quantized
    tensors, latent values elsewhere. Gradients land on these leaves and
    pass to the latent weights unchanged."""
    view = fake_quant_forward(latent.with_role("quantized_latent"), spec)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in view.params.items()}
    return leaves, list(latent.params.keys())


def _pad_batch(rows: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, List[int]]:
    lengths = [len(r) for r in rows]
    T = max(lengths)
    out = torch.zeros(len(rows), T, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(list(r), dtype=torch.long)
    return out, lengths


def batch_response_logprobs(
    params: Dict[str, torch.Tensor],
    config,
    triplets: Sequence[PreferenceTriplet],
    side: str,
) -> torch.Tensor:
    """Per-triplet sum of response-token log probabilities, as a tensor.

    ``side`` selects the chosen (``w``) or rejected (``l``) response.
    """
    rows = []
    spans = []
    for t in triplets:
        y = t.y_w if side == "w" else t.y_l
        if len(t.x) + len(y) > config.max_context:
            raise CapacityError(
                f"triplet of {len(t.x)} + {len(y)} tokens exceeds context "
                f"{config.max_context}"
            )
        rows.append(list(t.x) + list(y))
        spans.append((len(t.x), len(y)))
    tokens, _ = _pad_batch(rows)
    logits = forward_sequence(params, config, tokens)
    logps = torch.log_softmax(logits, dim=-1)
    sums = []
    for i, (start, n) in enumerate(spans):
        idx = tokens[i, start : start + n]
        picked = logps[i, start - 1 : start - 1 + n].gather(1, idx.unsqueeze(1)).squeeze(1)
        sums.append(picked.sum())
    return torch.stack(sums)


def _grads_from(loss: torch.Tensor, leaves: Dict[str, torch.Tensor]) -> GradientSet:
    names = list(leaves.keys())
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out: GradientSet = {}
    for name, g in zip(names, grads):
        out[name] = torch.zeros_like(leaves[name]) if g is None else g
    return out


def _check_finite(loss: torch.Tensor, what: str, step: Optional[int] = None) -> float:
    val = float(loss.item())
    if not math.isfinite(val):
        raise NumericError(f"non-finite {what} loss", step=step)
    return val


# ---------------------------------------------------------------------------
# Loss kinds
# ---------------------------------------------------------------------------


def preference_loss_terms(
    policy_lp_w: torch.Tensor,
    policy_lp_l: torch.Tensor,
    ref_lp_w: torch.Tensor,
    ref_lp_l: torch.Tensor,
    beta: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(loss, chosen rewards, rejected rewards) for a batch.

    loss = -log sigmoid(beta * [(lp_w - ref_w) - (lp_l - ref_l)]), averaged;
    rewards are beta times the per-side log ratios.
    """
    chosen = beta * (policy_lp_w - ref_lp_w)
    rejected = beta * (policy_lp_l - ref_lp_l)
    losses = -torch.nn.functional.logsigmoid(chosen - rejected)
    return losses.mean(), chosen, rejected


def qdpo_loss(
    theta_latent: ModelCheckpoint,
    ref_q: ModelCheckpoint,
    triplet: PreferenceTriplet,
    beta: float,
    spec: QuantSpec,
) -> Tuple[float, GradientSet]:
    """Quantization-aware preference loss for one triplet.

    The policy is evaluated through fake quantization of the latent
    weights; ``ref_q`` must be the frozen fake-quantized original model.
    Returned gradients are with respect to the latent weights via the
    straight-through identity.
    """
    triplet.validate()
    loss_t, grads, _, _ = _qdpo_batch(theta_latent, ref_q, [triplet], beta, spec)
    return loss_t, grads


def _qdpo_batch(
    theta_latent: ModelCheckpoint,
    ref_q: ModelCheckpoint,
    triplets: Sequence[PreferenceTriplet],
    beta: float,
    spec: QuantSpec,
    ref_lps: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> Tuple[float, GradientSet, RewardLogRow, Tuple[torch.Tensor, torch.Tensor]]:
    cfg = theta_latent.config
    leaves, _ = _fake_quant_leaves(theta_latent, spec)
    lp_w = batch_response_logprobs(leaves, cfg, triplets, "w")
    lp_l = batch_response_logprobs(leaves, cfg, triplets, "l")
    if ref_lps is None:
        with torch.no_grad():
            ref_w = batch_response_logprobs(ref_q.params, cfg, triplets, "w")
            ref_l = batch_response_logprobs(ref_q.params, cfg, triplets, "l")
    else:
        ref_w, ref_l = ref_lps
    loss, chosen, rejected = preference_loss_terms(lp_w, lp_l, ref_w, ref_l, beta)
    val = _check_finite(loss, "qdpo")
    grads_q = _grads_from(loss, leaves)
    grads = ste_backward(grads_q, latent=theta_latent)
    row = RewardLogRow(
        step=-1,
        loss=val,
        chosen_reward=float(chosen.detach().mean().item()),
        rejected_reward=float(rejected.detach().mean().item()),
    )
    return val, grads, row, (ref_w.detach(), ref_l.detach())


def dpo_loss(
    theta: ModelCheckpoint,
    ref: ModelCheckpoint,
    triplet: PreferenceTriplet,
    beta: float,
) -> Tuple[float, GradientSet]:
    """Plain preference loss: same structure without fake quantization."""
    triplet.validate()
    cfg = theta.config
    leaves = _leaf_params(theta)
    lp_w = batch_response_logprobs(leaves, cfg, [triplet], "w")
    lp_l = batch_response_logprobs(leaves, cfg, [triplet], "l")
    with torch.no_grad():
        ref_w = batch_response_logprobs(ref.params, cfg, [triplet], "w")
        ref_l = batch_response_logprobs(ref.params, cfg, [triplet], "l")
    loss, _, _ = preference_loss_terms(lp_w, lp_l, ref_w, ref_l, beta)
    val = _check_finite(loss, "dpo")
    return val, _grads_from(loss, leaves)


def kd_loss(
    student: ModelCheckpoint,
    teacher: ModelCheckpoint,
    tokens: Sequence[Sequence[int]],
    spec: Optional[QuantSpec] = None,
) -> Tuple[float, GradientSet]:
    """Mean KL(teacher || student) over next-token distributions.

    With a quant spec the student runs through fake quantization and the
    gradients pass to the latent weights via the straight-through identity.
    ``tokens`` is one sequence or a batch of equal-length sequences.
    """
    if teacher.config != student.config:
        raise ConfigError("teacher and student configs differ")
    if tokens and isinstance(tokens[0], int):
        tokens = [tokens]  # type: ignore[list-item]
    cfg = student.config
    if spec is not None:
        leaves, _ = _fake_quant_leaves(student, spec)
    else:
        leaves = _leaf_params(student)
    batch, _ = _pad_batch(tokens)
    if batch.shape[1] < 2:
        raise ConfigError("kd needs sequences of at least 2 tokens")
    student_logits = forward_sequence(leaves, cfg, batch)[:, :-1]
    with torch.no_grad():
        teacher_logits = forward_sequence(teacher.params, cfg, batch)[:, :-1]
        t_logp = torch.log_softmax(teacher_logits, dim=-1)
        t_p = t_logp.exp()
    s_logp = torch.log_softmax(student_logits, dim=-1)
    kl = (t_p * (t_logp - s_logp)).sum(dim=-1)  # [B, T-1]
    loss = kl.mean(dim=1).mean()
    val = _check_finite(loss, "kd")
    grads_q = _grads_from(loss, leaves)
    if spec is not None:
        grads_q = ste_backward(grads_q, latent=student)
    return val, grads_q


def lm_loss(
    ckpt_params: Dict[str, torch.Tensor],
    config,
    batch: torch.Tensor,
) -> torch.Tensor:
    """Next-token cross entropy: per-row mean, then batch mean."""
    if batch.shape[1] < 2:
        raise ConfigError("lm loss needs sequences of at least 2 tokens")
    logits = forward_sequence(ckpt_params, config, batch)[:, :-1]
    targets = batch[:, 1:]
    logps = torch.log_softmax(logits, dim=-1)
    nll = -logps.gather(2, targets.unsqueeze(2)).squeeze(2)
    return nll.mean(dim=1).mean()


def evaluate_loss_spec(ckpt: ModelCheckpoint, loss_spec: LossSpec) -> Tuple[float, GradientSet]:
    """Entry point behind ``model.loss_and_grad``."""
    loss_spec.validate()
    if loss_spec.kind == "lm_pretrain":
        leaves = _leaf_params(ckpt)
        batch, _ = _pad_batch([list(loss_spec.tokens)])
        loss = lm_loss(leaves, ckpt.config, batch)
        val = _check_finite(loss, "lm")
        return val, _grads_from(loss, leaves)
    if loss_spec.kind == "kd":
        return kd_loss(ckpt, loss_spec.teacher, list(loss_spec.tokens), loss_spec.quant_spec)
    if loss_spec.kind == "dpo":
        return dpo_loss(ckpt, loss_spec.reference, loss_spec.triplet, loss_spec.beta)
    if loss_spec.kind == "qdpo":
        ref_q = fake_quant_forward(ckpt.with_role("quantized_latent"), loss_spec.quant_spec)
        return qdpo_loss(ckpt, ref_q, loss_spec.triplet, loss_spec.beta, loss_spec.quant_spec)
    raise ConfigError(f"unknown loss kind {loss_spec.kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Deterministic AdamW over a name -> tensor map (weight decay zero).

    Hand-rolled because parameters live in plain dicts and gradients arrive
    as fresh tensors each step (through the straight-through identity),
    which does not fit an optimizer bound to persistent leaf tensors.
    """

    def __init__(self, params: Dict[str, torch.Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}

    def step(self, grads: GradientSet) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.sub_((m / bc1) / denom, alpha=self.lr)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final: ModelCheckpoint
    rows: List[RewardLogRow]
    saved_checkpoints: List[str] = field(default_factory=list)


def _batches_of_windows(
    tokens: Sequence[int], window: int, batch_size: int, steps: int, seed: int
):
    """Seeded random windows from a token stream, one batch per step."""
    rng = random.Random(seed)
    n = len(tokens)
    if n < window + 1:
        raise ConfigError(f"token stream too short for window {window}")
    toks = torch.tensor(list(tokens), dtype=torch.long)
    for _ in range(steps):
        starts = [rng.randrange(0, n - window) for _ in range(batch_size)]
        yield torch.stack([toks[s : s + window] for s in starts])


def _epoch_batches(
    dataset: PreferenceDataset, batch_size: int, steps: int, seed: int
):
    """Shuffled triplet batches, reshuffling each epoch, last partial dropped."""
    rng = random.Random(seed)
    triplets = list(dataset.triplets)
    if len(triplets) < batch_size:
        raise ConfigError(
            f"dataset of {len(triplets)} triplets smaller than batch {batch_size}"
        )
    produced = 0
    while produced < steps:
        order = list(range(len(triplets)))
        rng.shuffle(order)
        for i in range(0, len(order) - batch_size + 1, batch_size):
            if produced >= steps:
                return
            yield [triplets[j] for j in order[i : i + batch_size]]
            produced += 1


def train(
    config: TrainConfig,
    loss_kind: str,
    init: ModelCheckpoint,
    dataset: Optional[PreferenceDataset] = None,
    teacher: Optional[ModelCheckpoint] = None,
    reference: Optional[ModelCheckpoint] = None,
    quant_spec: Optional[QuantSpec] = None,
    corpus_tokens: Optional[Sequence[int]] = None,
    beta: float = 0.1,
    window: Optional[int] = None,
    checkpoint_dir=None,
    progress: Optional[Callable[[RewardLogRow], None]] = None,
) -> TrainResult:
    """Run ``config.steps`` optimizer steps of the requested loss kind.

    Deterministic for a fixed seed. Preference kinds need a non-empty
    ``dataset``; kd and lm_pretrain draw seeded windows from
    ``corpus_tokens``. Reference log probabilities are evaluated on the
    same padded batch as the policy's, so at step zero the quantization-
    aware loss sits exactly at ln 2. Emits one reward row per step and
    saves a checkpoint every ``eval_every`` steps when ``checkpoint_dir``
    is given. On a non-finite loss the loop aborts with a reference to the
    last healthy checkpoint.
    """
    from .checkpoint_io import save_checkpoint

    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if loss_kind in ("qdpo", "dpo"):
        if dataset is None or not dataset.triplets:
            raise ConfigError(f"{loss_kind} requires a non-empty preference dataset")
    if loss_kind in ("kd", "lm_pretrain") and corpus_tokens is None:
        raise ConfigError(f"{loss_kind} requires corpus tokens")
    if loss_kind == "kd" and teacher is None:
        raise ConfigError("kd requires a teacher checkpoint")
    if loss_kind in ("qdpo", "kd") and quant_spec is None:
        raise ConfigError(f"{loss_kind} requires a quant spec")

    model = init.clone()
    cfg = model.config
    opt = AdamW(model.params, lr=config.learning_rate)
    rows: List[RewardLogRow] = []
    saved: List[str] = []
    last_good: Optional[str] = None

    ref_q: Optional[ModelCheckpoint] = None
    if loss_kind == "qdpo":
        # Frozen reference: the fake-quantized original weights.
        view = fake_quant_forward(init.with_role("quantized_latent"), quant_spec)
        ref_q = ModelCheckpoint(
            cfg, {k: v.detach().clone() for k, v in view.params.items()}, role_tag="fp"
        )
    if loss_kind == "dpo" and reference is None:
        reference = init.clone()

    if loss_kind in ("qdpo", "dpo"):
        batches = _epoch_batches(dataset, config.batch_size, config.steps, config.seed)
    else:
        w = window or min(128, cfg.max_context)
        batches = _batches_of_windows(
            corpus_tokens, w, config.batch_size, config.steps, config.seed
        )

    for step, batch in enumerate(batches):
        try:
            if loss_kind == "qdpo":
                val, grads, row, _ = _qdpo_batch(model, ref_q, batch, beta, quant_spec)
                row.step = step
            elif loss_kind == "dpo":
                leaves = _leaf_params(model)
                lp_w = batch_response_logprobs(leaves, cfg, batch, "w")
                lp_l = batch_response_logprobs(leaves, cfg, batch, "l")
                with torch.no_grad():
                    ref_w = batch_response_logprobs(reference.params, cfg, batch, "w")
                    ref_l = batch_response_logprobs(reference.params, cfg, batch, "l")
                loss, chosen, rejected = preference_loss_terms(lp_w, lp_l, ref_w, ref_l, beta)
                val = _check_finite(loss, "dpo", step)
                grads = _grads_from(loss, leaves)
                row = RewardLogRow(
                    step=step,
                    loss=val,
                    chosen_reward=float(chosen.detach().mean().item()),
                    rejected_reward=float(rejected.detach().mean().item()),
                )
            elif loss_kind == "kd":
                val, grads = kd_loss(model, teacher, batch.tolist(), quant_spec)
                row = RewardLogRow(step=step, loss=val, chosen_reward=0.0, rejected_reward=0.0)
            else:  # lm_pretrain
                leaves = _leaf_params(model)
                loss = lm_loss(leaves, cfg, batch)
                val = _check_finite(loss, "lm", step)
                grads = _grads_from(loss, leaves)
                row = RewardLogRow(step=step, loss=val, chosen_reward=0.0, rejected_reward=0.0)
        except NumericError as e:
            e.step = step
            e.last_good = last_good
            raise
        opt.step(grads)
        rows.append(row)
        if progress is not None:
            progress(row)
        if checkpoint_dir is not None and (step + 1) % config.eval_every == 0:
            path = str(Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt")
            save_checkpoint(path, model)
            saved.append(path)
            last_good = path
    return TrainResult(final=model, rows=rows, saved_checkpoints=saved)
