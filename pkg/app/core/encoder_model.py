"""Desk-scale bidirectional transformer encoder with MLM and NSP heads.

Post-LN encoder blocks, GELU (tanh approximation), MLM output tied to the
token embedding matrix. Autograd supplies the exact backward pass; losses are
reduced in float64.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.core.example_gen import MAX_SEQ_LEN, PretrainExample
from app.core.tokenizer import CLS_ID, SEP_ID, SPECIAL_TOKENS
from app.errors import ConfigError, DataError, NumericError


LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02
# roundoff-level differences around a vanishing gradient are not errors
GRAD_CHECK_FLOOR = 1e-8


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ff_dim: int = 512
    vocab_size: int = 30000
    max_seq: int = MAX_SEQ_LEN
    seed: int = 0

    def validate(self) -> None:
        for name in ("layers", "hidden", "heads", "ff_dim", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.max_seq < 3:
            raise ConfigError(f"model.max_seq must be >= 3, got {self.max_seq}")
        if self.hidden % self.heads:
            raise ConfigError(
                f"model.hidden ({self.hidden}) must be divisible by model.heads ({self.heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class PretrainBatch:
    input_ids: torch.Tensor  # [B, T] long
    input_mask: torch.Tensor  # [B, T] bool
    segment_ids: torch.Tensor  # [B, T] long
    masked_positions: torch.Tensor  # [B, M] long
    masked_label_ids: torch.Tensor  # [B, M] long
    masked_weights: torch.Tensor  # [B, M] float
    nsp_labels: torch.Tensor  # [B] long

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])

    @classmethod
    def from_records(cls, records: np.ndarray) -> "PretrainBatch":
        return cls(
            input_ids=torch.from_numpy(records["input_ids"].astype(np.int64)),
            input_mask=torch.from_numpy(records["input_mask"].astype(bool)),
            segment_ids=torch.from_numpy(records["segment_ids"].astype(np.int64)),
            masked_positions=torch.from_numpy(records["masked_positions"].astype(np.int64)),
            masked_label_ids=torch.from_numpy(records["masked_label_ids"].astype(np.int64)),
            masked_weights=torch.from_numpy(records["masked_weights"].astype(np.float32)),
            nsp_labels=torch.from_numpy(records["nsp_label"].astype(np.int64)),
        )

    @classmethod
    def from_examples(cls, examples: Sequence[PretrainExample]) -> "PretrainBatch":
        if not examples:
            raise DataError("batch must contain at least one example")
        return cls(
            input_ids=torch.tensor([e.input_ids for e in examples], dtype=torch.long),
            input_mask=torch.tensor([e.input_mask for e in examples], dtype=torch.bool),
            segment_ids=torch.tensor([e.segment_ids for e in examples], dtype=torch.long),
            masked_positions=torch.tensor([e.masked_positions for e in examples], dtype=torch.long),
            masked_label_ids=torch.tensor([e.masked_label_ids for e in examples], dtype=torch.long),
            masked_weights=torch.tensor([e.masked_weights for e in examples], dtype=torch.float32),
            nsp_labels=torch.tensor([e.nsp_label for e in examples], dtype=torch.long),
        )


@dataclass
class ForwardOutput:
    mlm_logits: torch.Tensor  # [B, M, V]
    nsp_logits: torch.Tensor  # [B, 2]


@dataclass
class Losses:
    mlm_loss: torch.Tensor
    mlm_acc: float
    nsp_loss: torch.Tensor
    nsp_acc: float
    mlm_count: int = 0
    nsp_count: int = 0

    @property
    def total(self) -> torch.Tensor:
        return self.mlm_loss + self.nsp_loss


# ── Modules ──────────────────────────────────────────────────────────────────


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(config.hidden, config.hidden)
        self.key = nn.Linear(config.hidden, config.hidden)
        self.value = nn.Linear(config.hidden, config.hidden)
        self.output = nn.Linear(config.hidden, config.hidden)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def attention_probs(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.query(x)), self._split(self.key(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # PAD keys get exactly zero weight
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        probs = self.attention_probs(x, mask)
        context = probs @ self._split(self.value(x))
        b, _, t, _ = context.shape
        return self.output(context.transpose(1, 2).reshape(b, t, -1))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.attention = SelfAttention(config)
        self.attention_norm = nn.LayerNorm(config.hidden, eps=LAYER_NORM_EPS)
        self.intermediate = nn.Linear(config.hidden, config.ff_dim)
        self.output = nn.Linear(config.ff_dim, config.hidden)
        self.output_norm = nn.LayerNorm(config.hidden, eps=LAYER_NORM_EPS)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.attention_norm(x + self.attention(x, mask))
        ff = self.output(F.gelu(self.intermediate(x), approximate="tanh"))
        return self.output_norm(x + ff)


class EncoderModel(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        config.validate()
        super().__init__()
        self.config = config
        self.token_embeddings = nn.Embedding(config.vocab_size, config.hidden)
        self.position_embeddings = nn.Embedding(config.max_seq, config.hidden)
        self.segment_embeddings = nn.Embedding(2, config.hidden)
        self.embeddings_norm = nn.LayerNorm(config.hidden, eps=LAYER_NORM_EPS)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))

        self.mlm_transform = nn.Linear(config.hidden, config.hidden)
        self.mlm_norm = nn.LayerNorm(config.hidden, eps=LAYER_NORM_EPS)
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.pooler = nn.Linear(config.hidden, config.hidden)
        self.nsp_classifier = nn.Linear(config.hidden, 2)

    def _check_inputs(self, input_ids: torch.Tensor) -> None:
        if input_ids.ndim != 2 or input_ids.shape[0] == 0:
            raise DataError(f"expected a non-empty [batch, seq] id tensor, got shape {tuple(input_ids.shape)}")
        if input_ids.shape[1] > self.config.max_seq:
            raise DataError(f"sequence length {input_ids.shape[1]} exceeds max_seq {self.config.max_seq}")
        bad = (input_ids < 0) | (input_ids >= self.config.vocab_size)
        if bad.any():
            b, t = (int(v) for v in bad.nonzero()[0])
            raise DataError(
                f"token id {int(input_ids[b, t])} out of range for vocab_size "
                f"{self.config.vocab_size} (batch={b} position={t})"
            )

    def encode(
        self,
        input_ids: torch.Tensor,
        segment_ids: torch.Tensor,
        input_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Sequence output [B, T, H]."""
        self._check_inputs(input_ids)
        positions = torch.arange(input_ids.shape[1], device=input_ids.device)
        h = (
            self.token_embeddings(input_ids)
            + self.position_embeddings(positions)[None, :, :]
            + self.segment_embeddings(segment_ids)
        )
        h = self.embeddings_norm(h)
        for index, layer in enumerate(self.layers):
            h = layer(h, input_mask)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after encoder layer {index}")
        return h

    def pooled(self, sequence_output: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.pooler(sequence_output[:, 0]))

    def forward(self, batch: PretrainBatch) -> ForwardOutput:
        seq = self.encode(batch.input_ids, batch.segment_ids, batch.input_mask)
        index = batch.masked_positions[:, :, None].expand(-1, -1, seq.shape[-1])
        gathered = torch.gather(seq, 1, index)
        transformed = self.mlm_norm(F.gelu(self.mlm_transform(gathered), approximate="tanh"))
        mlm_logits = F.linear(transformed, self.token_embeddings.weight, self.mlm_bias)
        nsp_logits = self.nsp_classifier(self.pooled(seq))
        return ForwardOutput(mlm_logits=mlm_logits, nsp_logits=nsp_logits)


def _reset_parameters(model: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            if "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                nn.init.trunc_normal_(
                    param, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
                )


def init_params(config: ModelConfig) -> EncoderModel:
    """Fresh model; bitwise identical for equal configs (seed included)."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = EncoderModel(config)
    generator = torch.Generator().manual_seed(config.seed)
    _reset_parameters(model, generator)
    return model


def random_batch(
    config: ModelConfig,
    batch_size: int,
    seed: int,
    masked_slots: int = 4,
    max_length: int | None = None,
) -> PretrainBatch:
    """Synthetic batch with random lengths, padding and masked slots (describe/grad-check input).

    Rows are at most max_length real tokens long; the rest is PAD.
    """
    rng = np.random.default_rng(seed)
    t = config.max_seq
    longest = min(max_length or t, t)
    ids = np.zeros((batch_size, t), dtype=np.int64)
    mask = np.zeros((batch_size, t), dtype=bool)
    segments = np.zeros((batch_size, t), dtype=np.int64)
    positions = np.zeros((batch_size, masked_slots), dtype=np.int64)
    labels = np.zeros((batch_size, masked_slots), dtype=np.int64)
    weights = np.zeros((batch_size, masked_slots), dtype=np.float32)
    for row in range(batch_size):
        length = int(rng.integers(min(4, longest), longest + 1))
        ids[row, :length] = rng.integers(len(SPECIAL_TOKENS), config.vocab_size, size=length)
        ids[row, 0], ids[row, length - 1] = CLS_ID, SEP_ID
        mask[row, :length] = True
        segments[row, length // 2 : length] = 1
        inner = np.arange(1, max(2, length - 1))
        picked = np.sort(rng.choice(inner, size=min(masked_slots, len(inner)), replace=False))
        positions[row, : len(picked)] = picked
        labels[row, : len(picked)] = ids[row, picked]
        weights[row, : len(picked)] = 1.0
    return PretrainBatch(
        input_ids=torch.from_numpy(ids),
        input_mask=torch.from_numpy(mask),
        segment_ids=torch.from_numpy(segments),
        masked_positions=torch.from_numpy(positions),
        masked_label_ids=torch.from_numpy(labels),
        masked_weights=torch.from_numpy(weights),
        nsp_labels=torch.from_numpy(rng.integers(0, 2, size=batch_size)),
    )


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Parameter counts grouped by top-level component."""
    groups: dict[str, int] = {}
    for name, param in model.named_parameters():
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] == "layers" else parts[0]
        groups[group] = groups.get(group, 0) + param.numel()
    groups["total"] = sum(p.numel() for p in model.parameters())
    return groups


# ── Losses and gradients ─────────────────────────────────────────────────────


def compute_losses(output: ForwardOutput, batch: PretrainBatch) -> Losses:
    """Weighted MLM cross-entropy and NSP cross-entropy, both reduced in float64.

    Accuracy uses argmax, which picks the lowest index on ties.
    """
    weights = batch.masked_weights.to(torch.float64)
    weight_sum = weights.sum()
    if weight_sum <= 0:
        raise DataError("batch has no weighted MLM slots; loss cannot be normalized")

    mlm_logp = F.log_softmax(output.mlm_logits.to(torch.float64), dim=-1)
    mlm_nll = -mlm_logp.gather(-1, batch.masked_label_ids[:, :, None]).squeeze(-1)
    mlm_loss = (mlm_nll * weights).sum() / weight_sum
    mlm_hits = (output.mlm_logits.argmax(dim=-1) == batch.masked_label_ids).to(torch.float64)
    mlm_acc = float((mlm_hits * weights).sum() / weight_sum)

    nsp_logp = F.log_softmax(output.nsp_logits.to(torch.float64), dim=-1)
    nsp_loss = -nsp_logp.gather(-1, batch.nsp_labels[:, None]).mean()
    nsp_acc = float((output.nsp_logits.argmax(dim=-1) == batch.nsp_labels).to(torch.float64).mean())

    return Losses(
        mlm_loss=mlm_loss,
        mlm_acc=mlm_acc,
        nsp_loss=nsp_loss,
        nsp_acc=nsp_acc,
        mlm_count=int(weight_sum.item()),
        nsp_count=len(batch),
    )


def batch_loss(model: EncoderModel, batch: PretrainBatch) -> torch.Tensor:
    return compute_losses(model(batch), batch).total


def gradients(model: EncoderModel, batch: PretrainBatch) -> dict[str, torch.Tensor]:
    """d(mlm_loss + nsp_loss)/d(param) for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return grads


# ── Finite-difference gradient check ─────────────────────────────────────────


@dataclass
class TensorCheck:
    tensor: str
    coordinates: int
    analytic_norm: float
    relative_error: float
    worst_index: tuple[int, ...]
    worst_abs_diff: float
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0


@dataclass
class GradCheckReport:
    tolerance: float
    h: float
    atol: float = 0.0
    tensors: dict[str, TensorCheck] = field(default_factory=dict)
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max((c.relative_error for c in self.tensors.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.relative_error <= self.tolerance for c in self.tensors.values())

    def failures(self) -> list[TensorCheck]:
        return [c for c in self.tensors.values() if c.relative_error > self.tolerance]

    def worst(self) -> TensorCheck | None:
        return max(self.tensors.values(), key=lambda c: c.relative_error, default=None)

    def lines(self) -> list[str]:
        return [
            f"tensor={c.tensor} coords={c.coordinates} grad_norm={c.analytic_norm:.6e} "
            f"rel_error={c.relative_error:.3e} worst_index={list(c.worst_index)} "
            f"worst_abs_diff={c.worst_abs_diff:.3e} analytic={c.worst_analytic:.6e} numeric={c.worst_numeric:.6e}"
            for c in self.tensors.values()
        ]


def coordinate_errors(analytic, numeric) -> np.ndarray:
    """|a - n| / (|a| + |n|) per coordinate, denominator floored at GRAD_CHECK_FLOOR."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), GRAD_CHECK_FLOOR)


def relative_error(analytic, numeric) -> float:
    """Worst per-coordinate relative error."""
    return float(coordinate_errors(analytic, numeric).max())


def grad_check(
    module: nn.Module,
    loss_fn: Callable[[nn.Module], torch.Tensor],
    h: float = 1e-3,
    tolerance: float = 1e-3,
    samples: int = 20,
    seed: int = 0,
    atol: float | None = None,
) -> GradCheckReport:
    """Central differences on a float64 copy of `module`.

    At most `samples` random coordinates of every parameter tensor are
    compared against autograd, one relative error per coordinate. A tensor's
    error is its worst coordinate. Coordinates whose absolute difference is
    within `atol` score zero, so roundoff on vanishing gradients is not
    reported as a mismatch. atol defaults to tolerance * h (1e-6 at the
    defaults, the truncation order of central differences), which makes
    tolerance=0 an exact check.
    """
    atol = tolerance * h if atol is None else atol
    shadow = copy.deepcopy(module).double()
    shadow.zero_grad(set_to_none=True)
    loss_fn(shadow).backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in shadow.named_parameters()
    }
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, h=h, atol=atol)

    with torch.no_grad():
        for name, param in shadow.named_parameters():
            flat = param.view(-1)
            picks = sorted(int(i) for i in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False))
            exact = analytic[name].view(-1)[picks].numpy().astype(np.float64)
            numeric = np.zeros(len(picks), dtype=np.float64)
            for k, flat_index in enumerate(picks):
                original = flat[flat_index].item()
                flat[flat_index] = original + h
                plus = float(loss_fn(shadow))
                flat[flat_index] = original - h
                minus = float(loss_fn(shadow))
                flat[flat_index] = original
                numeric[k] = (plus - minus) / (2 * h)

            diff = np.abs(exact - numeric)
            errors = np.where(diff <= atol, 0.0, coordinate_errors(exact, numeric))
            worst = int(errors.argmax()) if errors.max() > 0 else int(diff.argmax())
            report.tensors[name] = TensorCheck(
                tensor=name,
                coordinates=len(picks),
                analytic_norm=float(np.linalg.norm(exact)),
                relative_error=float(errors[worst]),
                worst_index=tuple(int(i) for i in np.unravel_index(picks[worst], tuple(param.shape))),
                worst_abs_diff=float(diff[worst]),
                worst_analytic=float(exact[worst]),
                worst_numeric=float(numeric[worst]),
            )
            report.checked += len(picks)
    return report


def grad_check_model(
    model: EncoderModel,
    batch: PretrainBatch,
    h: float = 1e-3,
    tolerance: float = 1e-3,
    samples: int = 20,
    seed: int = 0,
    atol: float | None = None,
) -> GradCheckReport:
    if model.config.layers > 2 or model.config.hidden > 32:
        raise ConfigError("grad_check is meant for toy configs (layers <= 2, hidden <= 32)")
    return grad_check(
        model,
        lambda m: batch_loss(m, batch),
        h=h,
        tolerance=tolerance,
        samples=samples,
        seed=seed,
        atol=atol,
    )
